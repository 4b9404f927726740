use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::{default_orders, DpBudget};
use crate::data::{LabeledDataset, ProbeTraining};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{ClassifierArch, DiscriminatorArch, EncoderArch, GeneratorArch, NoiseConfig};
use crate::numeric::ops::Activation;
use crate::sanitizer::{ClipConfig, DpNoiseConfig, EfMode};

/// Network sizes. Class count and image size come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub base_channels: usize,
    pub base_size: usize,
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub critic_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            embed_dim: 8,
            base_channels: 16,
            base_size: 2,
            stage_channels: vec![16, 8],
            kernel: 3,
            critic_hidden: vec![64],
            classifier_hidden: vec![32, 16],
            encoder_hidden: vec![32],
        }
    }
}

impl ModelConfig {
    pub fn generator(&self, classes: usize) -> GeneratorArch {
        GeneratorArch {
            latent_dim: self.latent_dim,
            classes,
            embed_dim: self.embed_dim,
            base_channels: self.base_channels,
            base_size: self.base_size,
            stage_channels: self.stage_channels.clone(),
            kernel: self.kernel,
            stage_activation: Activation::Relu,
        }
    }

    pub fn critic(&self, image_size: usize) -> DiscriminatorArch {
        DiscriminatorArch {
            input_len: image_size * image_size,
            hidden: self.critic_hidden.clone(),
            activation: Activation::Tanh,
        }
    }

    pub fn classifier(&self, image_size: usize, classes: usize) -> ClassifierArch {
        ClassifierArch::Mlp {
            image_size,
            hidden: self.classifier_hidden.clone(),
            classes,
        }
    }

    pub fn encoder(&self, image_size: usize) -> EncoderArch {
        EncoderArch {
            image_size,
            hidden: self.encoder_hidden.clone(),
            latent_dim: self.latent_dim,
        }
    }
}

/// Evaluation settings, pinned so metric values are comparable across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seed of the feature-extractor classifier.
    pub feature_seed: u64,
    pub feature_training: ProbeTraining,
    pub probe_training: ProbeTraining,
    /// Samples used for the diversity statistic in the metrics log.
    pub diversity_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            feature_seed: 0,
            feature_training: ProbeTraining::default(),
            probe_training: ProbeTraining::default(),
            diversity_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Generator iterations T.
    pub iterations: u64,
    pub batch: usize,
    /// Number of disjoint subsets k, one critic each.
    pub subsets: usize,
    /// Sampling rate for the accountant; `1 / subsets` when absent.
    pub gamma: Option<f64>,
    pub n_dis: usize,
    pub n_en: usize,
    pub n_f: usize,
    pub n_r: usize,
    /// Critic pretraining steps.
    pub n_pre: usize,
    pub eta_d: f64,
    pub eta_c: f64,
    pub eta_g: f64,
    /// Encoder learning rate; `eta_c` when absent.
    pub eta_e: Option<f64>,
    /// DP noise multiplier.
    pub sigma: f64,
    /// Generator noise injection scale.
    pub sigma_noise: f64,
    pub clip: ClipConfig,
    pub weights: LossWeights,
    pub budget: DpBudget,
    pub ef_mode: EfMode,
    /// One classifier and encoder per subset instead of a shared pair.
    pub per_subset_aux: bool,
    /// Rényi orders; the default grid when absent.
    pub orders: Option<Vec<u32>>,
    /// Metrics are logged every this many iterations (and at the last one).
    pub log_every: u64,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 1000,
            batch: 32,
            subsets: 10,
            gamma: None,
            n_dis: 5,
            n_en: 1,
            n_f: 1,
            n_r: 1,
            n_pre: 200,
            eta_d: 0.05,
            eta_c: 0.05,
            eta_g: 0.05,
            eta_e: None,
            sigma: 2.0,
            sigma_noise: 0.1,
            clip: ClipConfig { c1: 1.0, c2: 1.0 },
            weights: LossWeights::default(),
            budget: DpBudget {
                epsilon: 10.0,
                delta: 1e-5,
            },
            ef_mode: EfMode::PerSource,
            per_subset_aux: false,
            orders: None,
            log_every: 50,
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every optional field filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.gamma = Some(self.gamma());
        c.eta_e = Some(self.eta_e());
        c.orders = Some(self.orders());
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.resolved()).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML text.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(1.0 / self.subsets.max(1) as f64)
    }

    pub fn eta_e(&self) -> f64 {
        self.eta_e.unwrap_or(self.eta_c)
    }

    pub fn orders(&self) -> Vec<u32> {
        self.orders.clone().unwrap_or_else(default_orders)
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            sigma_noise: self.sigma_noise,
        }
    }

    pub fn dp_noise(&self) -> DpNoiseConfig {
        DpNoiseConfig { sigma: self.sigma }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.subsets == 0 || self.iterations == 0 {
            return bad("batch, subsets and iterations must be >= 1".into());
        }
        let g = self.gamma();
        if !(g > 0.0 && g <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {g}"));
        }
        for (name, v) in [
            ("eta_d", self.eta_d),
            ("eta_c", self.eta_c),
            ("eta_g", self.eta_g),
            ("eta_e", self.eta_e()),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        if self.model.kernel % 2 == 0 {
            return bad("kernel size must be odd".into());
        }
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.dp_noise().validate())?;
        wrap(NoiseConfig::new(self.sigma_noise).map(|_| ()))?;
        wrap(self.clip.validate())?;
        wrap(self.weights.validate())?;
        wrap(self.budget.validate())?;
        let orders = self.orders();
        if orders.is_empty() || orders[0] < 2 || orders.windows(2).any(|w| w[0] >= w[1]) {
            return bad("orders must be strictly ascending integers >= 2".into());
        }
        Ok(())
    }

    /// Checks that the dataset fits the configured run.
    pub fn check_dataset(&self, data: &LabeledDataset) -> Result<()> {
        if data.len() < self.subsets * self.batch {
            return Err(Error::invalid(format!(
                "dataset of {} samples is smaller than subsets * batch = {}",
                data.len(),
                self.subsets * self.batch
            )));
        }
        if data.classes() < 2 {
            return Err(Error::invalid("training needs at least 2 classes"));
        }
        let gen_size = self.model.generator(data.classes()).image_size();
        if gen_size != data.image_size() {
            return Err(Error::invalid(format!(
                "generator produces {gen_size}x{gen_size} images, dataset has {0}x{0}",
                data.image_size()
            )));
        }
        Ok(())
    }
}
