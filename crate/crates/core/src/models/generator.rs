use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{next_revision, Layer, Sequential, Trace};
use super::NoiseConfig;
use crate::error::{Error, Result};
use crate::numeric::ops::{Activation, ConvShape};
use crate::numeric::{ParamVector, RngStream, Segment, Tensor};

const EMBED: &str = "embed";

/// Conditional generator: `[z, embed(y)] -> dense -> (upsample, conv, noise,
/// activation) x stages -> 1x1 conv -> tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub latent_dim: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub base_channels: usize,
    pub base_size: usize,
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub stage_activation: Activation,
}

impl GeneratorArch {
    /// 2x2 -> 4x4 -> 8x8 single-channel images from a 16-dim latent.
    pub fn desk(classes: usize) -> Self {
        Self {
            latent_dim: 16,
            classes,
            embed_dim: 8,
            base_channels: 16,
            base_size: 2,
            stage_channels: vec![16, 8],
            kernel: 3,
            stage_activation: Activation::Relu,
        }
    }

    pub fn image_size(&self) -> usize {
        self.base_size << self.stage_channels.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.image_size();
        [1, s, s]
    }

    pub fn sequential(&self) -> Result<Sequential> {
        if self.latent_dim == 0 || self.classes == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("generator kernel must be odd"));
        }
        let mut layers = vec![
            Layer::Dense {
                input: self.latent_dim + self.embed_dim,
                output: self.base_channels * self.base_size * self.base_size,
            },
            Layer::Activation {
                function: self.stage_activation,
            },
        ];
        let mut c = self.base_channels;
        let mut s = self.base_size;
        for &next in &self.stage_channels {
            layers.push(Layer::Upsample {
                channels: c,
                height: s,
                width: s,
            });
            s *= 2;
            layers.push(Layer::Conv(ConvShape {
                channels_in: c,
                channels_out: next,
                kernel: self.kernel,
                height: s,
                width: s,
            }));
            layers.push(Layer::NoiseInjection);
            layers.push(Layer::Activation {
                function: self.stage_activation,
            });
            c = next;
        }
        layers.push(Layer::Conv(ConvShape {
            channels_in: c,
            channels_out: 1,
            kernel: 1,
            height: s,
            width: s,
        }));
        layers.push(Layer::Activation {
            function: Activation::Tanh,
        });
        Sequential::new(self.latent_dim + self.embed_dim, layers)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorNet {
    arch: GeneratorArch,
    seq: Sequential,
    params: ParamVector,
    revision: u64,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorCache {
    revision: u64,
    labels: Vec<usize>,
    traces: Vec<Trace>,
}

impl GeneratorCache {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Activation inputs (after noise injection) of every upsampling stage
    /// for item `i`.
    pub fn stage_pre_activations(&self, i: usize, seq: &Sequential) -> Vec<Vec<f64>> {
        seq.layers
            .iter()
            .enumerate()
            .filter(|(j, _)| *j > 0 && matches!(seq.layers[j - 1], Layer::NoiseInjection))
            .map(|(j, _)| self.traces[i].inputs[j].clone())
            .collect()
    }
}

impl GeneratorNet {
    pub fn new(arch: GeneratorArch, rng: &mut RngStream) -> Result<Self> {
        let seq = arch.sequential()?;
        let mut segs = vec![Segment::new(EMBED, &[arch.classes, arch.embed_dim])];
        segs.extend(seq.param_segments("g"));
        // label embeddings start at zero: an untrained generator ignores labels
        let mut params = ParamVector::zeros(segs);
        let n_embed = arch.classes * arch.embed_dim;
        seq.init_params(&mut params.data_mut()[n_embed..], rng);
        Ok(Self {
            arch,
            seq,
            params,
            revision: next_revision(),
        })
    }

    pub fn from_params(arch: GeneratorArch, params: ParamVector) -> Result<Self> {
        let seq = arch.sequential()?;
        let expected = arch.classes * arch.embed_dim + seq.param_len();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "generator needs {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            arch,
            seq,
            params,
            revision: next_revision(),
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn sequential(&self) -> &Sequential {
        &self.seq
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::invalid("parameter layout does not match generator"));
        }
        self.params = params;
        self.revision = next_revision();
        Ok(())
    }

    pub fn step(&mut self, direction: &ParamVector, eta: f64) -> Result<()> {
        self.params.add_scaled(direction, -eta)?;
        self.revision = next_revision();
        Ok(())
    }

    pub fn injection_points(&self) -> usize {
        self.seq.injection_points()
    }

    fn embed_len(&self) -> usize {
        self.arch.classes * self.arch.embed_dim
    }

    /// Images in `[-1, 1]` for latents `z` (`[B, latent_dim]`) and labels `y`.
    /// Injection noise is drawn per item, in item order, from `rng`.
    pub fn forward(
        &self,
        z: &Tensor,
        labels: &[usize],
        cfg: &NoiseConfig,
        rng: &mut RngStream,
    ) -> Result<(Tensor, GeneratorCache)> {
        let b = z.batch_len();
        if z.shape().len() != 2 || z.item_len() != self.arch.latent_dim {
            return Err(Error::invalid(format!(
                "latent batch must be [B, {}], got {:?}",
                self.arch.latent_dim,
                z.shape()
            )));
        }
        if labels.len() != b {
            return Err(Error::invalid(format!(
                "{} labels for {b} latents",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.arch.classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.arch.classes
            )));
        }
        let injection: Vec<Vec<Vec<f64>>> =
            (0..b).map(|_| self.seq.draw_injection(cfg, rng)).collect();
        let embed = self.params.segment(EMBED).expect("embed segment");
        let ed = self.arch.embed_dim;
        let net = &self.params.data()[self.embed_len()..];
        let traces: Vec<Trace> = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut input = z.item(i).to_vec();
                input.extend_from_slice(&embed[labels[i] * ed..(labels[i] + 1) * ed]);
                self.seq.forward(net, &input, &injection[i])
            })
            .collect();
        let mut shape = vec![b];
        shape.extend_from_slice(&self.arch.image_shape());
        let mut data = Vec::with_capacity(b * self.arch.image_size().pow(2));
        for t in &traces {
            data.extend_from_slice(&t.output);
        }
        Ok((
            Tensor::new(shape, data)?,
            GeneratorCache {
                revision: self.revision,
                labels: labels.to_vec(),
                traces,
            },
        ))
    }

    /// Exact reverse-mode gradients wrt parameters and latents.
    pub fn backward(&self, cache: &GeneratorCache, grad_images: &Tensor) -> Result<(ParamVector, Tensor)> {
        if cache.revision != self.revision {
            return Err(Error::state(
                "generator cache was produced by different parameters",
            ));
        }
        let b = cache.traces.len();
        let pix = self.arch.image_size().pow(2);
        if grad_images.batch_len() != b || grad_images.item_len() != pix {
            return Err(Error::invalid(format!(
                "image gradient {:?} does not match a batch of {b} images",
                grad_images.shape()
            )));
        }
        let n_embed = self.embed_len();
        let net = &self.params.data()[n_embed..];
        let n_net = self.seq.param_len();
        let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut gp = vec![0.0; n_net];
                let gin = self
                    .seq
                    .backward(net, &cache.traces[i], grad_images.item(i), &mut gp);
                (gp, gin)
            })
            .collect();
        let mut grads = self.params.zeros_like();
        let ld = self.arch.latent_dim;
        let ed = self.arch.embed_dim;
        let mut gz = Vec::with_capacity(b * ld);
        for (i, (gp, gin)) in per_item.into_iter().enumerate() {
            let g = grads.data_mut();
            for (a, v) in g[n_embed..].iter_mut().zip(&gp) {
                *a += v;
            }
            let y = cache.labels[i];
            for (a, v) in g[y * ed..(y + 1) * ed].iter_mut().zip(&gin[ld..]) {
                *a += v;
            }
            gz.extend_from_slice(&gin[..ld]);
        }
        Ok((grads, Tensor::new(vec![b, ld], gz)?))
    }
}
