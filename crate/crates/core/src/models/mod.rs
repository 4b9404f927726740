//! Generator with per-stage noise injection, discriminator bank, auxiliary
//! classifier and reconstruction encoder.

mod classifier;
mod critic;
mod encoder;
mod generator;
pub mod network;

use serde::{Deserialize, Serialize};

pub use classifier::{ClassifierArch, ClassifierNet};
pub use critic::{critic_value, DiscriminatorArch, DiscriminatorBank};
pub use encoder::{EncoderArch, EncoderNet};
pub use generator::{GeneratorArch, GeneratorCache, GeneratorNet};
pub use network::{Layer, Network, Sequential};

use crate::error::{Error, Result};
use crate::numeric::{gaussian_sample, RngStream, Tensor};

/// Scale of the Gaussian noise injected after each upsampling stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_noise: f64,
}

impl NoiseConfig {
    pub fn new(sigma_noise: f64) -> Result<Self> {
        if !(sigma_noise >= 0.0) || !sigma_noise.is_finite() {
            return Err(Error::invalid(format!(
                "sigma_noise must be finite and >= 0, got {sigma_noise}"
            )));
        }
        Ok(Self { sigma_noise })
    }

    pub fn off() -> Self {
        Self { sigma_noise: 0.0 }
    }
}

/// Returns `Y + N` with `N` i.i.d. `N(0, sigma_noise^2)`; `Y` itself is untouched.
/// With `sigma_noise == 0` the map is the identity and consumes no randomness.
pub fn inject_noise(feature_map: &Tensor, cfg: &NoiseConfig, rng: &mut RngStream) -> Result<Tensor> {
    if cfg.sigma_noise == 0.0 {
        return Ok(feature_map.clone());
    }
    let noise = gaussian_sample(feature_map.shape(), 0.0, cfg.sigma_noise, rng)?;
    feature_map.add(&noise)
}

/// Every network taking part in training. Only the generator is ever released.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub generator: GeneratorNet,
    pub bank: DiscriminatorBank,
    pub classifiers: Vec<ClassifierNet>,
    pub encoders: Vec<EncoderNet>,
}
