use serde::{Deserialize, Serialize};

use super::network::{Layer, Network, Sequential};
use crate::error::Result;
use crate::numeric::ops::Activation;
use crate::numeric::{ParamVector, RngStream};

/// Deterministic MLP encoder from images to generator latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub image_size: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl EncoderArch {
    pub fn desk(image_size: usize, latent_dim: usize) -> Self {
        Self {
            image_size,
            hidden: vec![32],
            latent_dim,
        }
    }

    pub fn sequential(&self) -> Result<Sequential> {
        let input = self.image_size * self.image_size;
        let mut layers = Vec::new();
        let mut n = input;
        for &h in &self.hidden {
            layers.push(Layer::Dense {
                input: n,
                output: h,
            });
            layers.push(Layer::Activation {
                function: Activation::Relu,
            });
            n = h;
        }
        layers.push(Layer::Dense {
            input: n,
            output: self.latent_dim,
        });
        Sequential::new(input, layers)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub arch: EncoderArch,
    pub net: Network,
}

impl EncoderNet {
    pub fn new(arch: EncoderArch, rng: &mut RngStream) -> Result<Self> {
        let net = Network::new(arch.sequential()?, "e", rng)?;
        Ok(Self { arch, net })
    }

    pub fn from_params(arch: EncoderArch, params: ParamVector) -> Result<Self> {
        let net = Network::from_params(arch.sequential()?, params)?;
        Ok(Self { arch, net })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }
}
