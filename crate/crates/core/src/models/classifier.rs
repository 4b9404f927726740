use serde::{Deserialize, Serialize};

use super::network::{Layer, Network, Sequential};
use crate::error::{Error, Result};
use crate::numeric::ops::{self, Activation, ConvShape};
use crate::numeric::{ParamVector, RngStream, Tensor};

/// Classifier body. The layer feeding the final dense map is the
/// "penultimate" feature layer used by the evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierArch {
    Mlp {
        image_size: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// Same-padded convolutions followed by one hidden dense layer.
    ConvStack {
        image_size: usize,
        channels: Vec<usize>,
        kernel: usize,
        hidden: usize,
        classes: usize,
    },
}

impl ClassifierArch {
    pub fn desk(image_size: usize, classes: usize) -> Self {
        ClassifierArch::Mlp {
            image_size,
            hidden: vec![32, 16],
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ClassifierArch::Mlp { classes, .. } | ClassifierArch::ConvStack { classes, .. } => {
                *classes
            }
        }
    }

    pub fn sequential(&self) -> Result<Sequential> {
        let relu = Layer::Activation {
            function: Activation::Relu,
        };
        match self {
            ClassifierArch::Mlp {
                image_size,
                hidden,
                classes,
            } => {
                if *classes < 2 {
                    return Err(Error::invalid("classifier needs at least 2 classes"));
                }
                let input = image_size * image_size;
                let mut layers = Vec::new();
                let mut n = input;
                for &h in hidden {
                    layers.push(Layer::Dense {
                        input: n,
                        output: h,
                    });
                    layers.push(relu.clone());
                    n = h;
                }
                layers.push(Layer::Dense {
                    input: n,
                    output: *classes,
                });
                Sequential::new(input, layers)
            }
            ClassifierArch::ConvStack {
                image_size,
                channels,
                kernel,
                hidden,
                classes,
            } => {
                if *classes < 2 {
                    return Err(Error::invalid("classifier needs at least 2 classes"));
                }
                let s = *image_size;
                let mut layers = Vec::new();
                let mut c = 1;
                for &next in channels {
                    layers.push(Layer::Conv(ConvShape {
                        channels_in: c,
                        channels_out: next,
                        kernel: *kernel,
                        height: s,
                        width: s,
                    }));
                    layers.push(relu.clone());
                    c = next;
                }
                layers.push(Layer::Dense {
                    input: c * s * s,
                    output: *hidden,
                });
                layers.push(relu.clone());
                layers.push(Layer::Dense {
                    input: *hidden,
                    output: *classes,
                });
                Sequential::new(s * s, layers)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub arch: ClassifierArch,
    pub net: Network,
}

impl ClassifierNet {
    pub fn new(arch: ClassifierArch, rng: &mut RngStream) -> Result<Self> {
        let net = Network::new(arch.sequential()?, "c", rng)?;
        Ok(Self { arch, net })
    }

    pub fn from_params(arch: ClassifierArch, params: ParamVector) -> Result<Self> {
        let net = Network::from_params(arch.sequential()?, params)?;
        Ok(Self { arch, net })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn feature_dim(&self) -> usize {
        match self.net.arch().layers.last() {
            Some(Layer::Dense { input, .. }) => *input,
            _ => unreachable!("classifier ends in a dense layer"),
        }
    }

    /// Class probabilities for every image in `[N, ...]`.
    pub fn predict_proba(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let flat = flatten(images)?;
        let (logits, _) = self.net.forward_batch(&flat, None)?;
        Ok(logits.iter().map(|l| ops::softmax(l)).collect())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(images)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }

    /// Penultimate-layer activations, `[N, feature_dim]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let flat = flatten(images)?;
        let (_, trace) = self.net.forward_batch(&flat, None)?;
        let last = self.net.arch().layers.len() - 1;
        let rows: Vec<Vec<f64>> = trace
            .traces
            .iter()
            .map(|t| t.inputs[last].clone())
            .collect();
        Tensor::stack(&rows, &[self.feature_dim()])
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Views `[N, ...]` as `[N, item_len]`.
pub(crate) fn flatten(images: &Tensor) -> Result<Tensor> {
    let n = images.batch_len();
    let per = images.item_len();
    images.clone().reshape(vec![n, per])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gaussian_sample;

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = RngStream::new(1, 0);
        for arch in [
            ClassifierArch::desk(8, 3),
            ClassifierArch::ConvStack {
                image_size: 8,
                channels: vec![4, 4],
                kernel: 3,
                hidden: 16,
                classes: 3,
            },
        ] {
            let c = ClassifierNet::new(arch, &mut rng).unwrap();
            let x = gaussian_sample(&[5, 1, 8, 8], 0.0, 1.0, &mut rng).unwrap();
            for p in c.predict_proba(&x).unwrap() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn feature_width_is_penultimate() {
        let mut rng = RngStream::new(1, 0);
        let c = ClassifierNet::new(ClassifierArch::desk(8, 2), &mut rng).unwrap();
        let x = gaussian_sample(&[4, 1, 8, 8], 0.0, 1.0, &mut rng).unwrap();
        let f = c.features(&x).unwrap();
        assert_eq!(f.shape(), &[4, 16]);
        assert_eq!(c.feature_dim(), 16);
    }
}
