use serde::{Deserialize, Serialize};

use super::network::{Layer, Network, Sequential};
use crate::error::{Error, Result};
use crate::numeric::ops::Activation;
use crate::numeric::{ParamVector, RngStream};

/// Scalar-output MLP critic over flattened images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub input_len: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl DiscriminatorArch {
    pub fn desk(input_len: usize) -> Self {
        Self {
            input_len,
            hidden: vec![64],
            activation: Activation::Tanh,
        }
    }

    pub fn sequential(&self) -> Result<Sequential> {
        let mut layers = Vec::new();
        let mut n = self.input_len;
        for &h in &self.hidden {
            layers.push(Layer::Dense {
                input: n,
                output: h,
            });
            layers.push(Layer::Activation {
                function: self.activation,
            });
            n = h;
        }
        layers.push(Layer::Dense {
            input: n,
            output: 1,
        });
        Sequential::new(self.input_len, layers)
    }
}

/// `k` critics; critic `i` is only ever trained on dataset subset
/// `assignment[i]`.
#[derive(Debug, Clone)]
pub struct DiscriminatorBank {
    pub arch: DiscriminatorArch,
    pub nets: Vec<Network>,
    pub assignment: Vec<usize>,
}

impl DiscriminatorBank {
    pub fn new(arch: DiscriminatorArch, k: usize, rng: &mut RngStream) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("discriminator bank needs k >= 1"));
        }
        let seq = arch.sequential()?;
        let nets = (0..k)
            .map(|i| Network::new(seq.clone(), &format!("d{i}."), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            nets,
            assignment: (0..k).collect(),
        })
    }

    pub fn from_params(arch: DiscriminatorArch, params: Vec<ParamVector>) -> Result<Self> {
        let seq = arch.sequential()?;
        let k = params.len();
        if k == 0 {
            return Err(Error::invalid("discriminator bank needs k >= 1"));
        }
        let nets = params
            .into_iter()
            .map(|p| Network::from_params(seq.clone(), p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            nets,
            assignment: (0..k).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }
}

/// Critic value at `x`.
pub fn critic_value(net: &Network, x: &[f64]) -> f64 {
    net.arch().forward(net.params().data(), x, &[]).output[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_has_k_distinct_critics() {
        let mut rng = RngStream::new(1, 0);
        let bank = DiscriminatorBank::new(DiscriminatorArch::desk(64), 4, &mut rng).unwrap();
        assert_eq!(bank.len(), 4);
        assert_eq!(bank.assignment, vec![0, 1, 2, 3]);
        assert_ne!(bank.nets[0].params().data(), bank.nets[1].params().data());
        assert!(bank.nets[0].arch().is_scalar_mlp());
        let x = vec![0.1; 64];
        assert!(critic_value(&bank.nets[0], &x).is_finite());
    }

    #[test]
    fn empty_bank_rejected() {
        let mut rng = RngStream::new(1, 0);
        assert!(DiscriminatorBank::new(DiscriminatorArch::desk(4), 0, &mut rng).is_err());
    }
}
