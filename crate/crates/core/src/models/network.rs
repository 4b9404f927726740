//! Fixed-shape sequential networks over flat parameter slices.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::NoiseConfig;
use crate::numeric::ops::{self, Activation, ConvShape};
use crate::numeric::{ParamVector, RngStream, Segment, Tensor};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

/// Fresh identity for a parameter set; caches remember the identity they were
/// produced with so they cannot be replayed against different weights.
pub(crate) fn next_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
    },
    Conv(ConvShape),
    Upsample {
        channels: usize,
        height: usize,
        width: usize,
    },
    Activation {
        function: Activation,
    },
    /// Adds i.i.d. `N(0, sigma_noise^2)` to every entry of the feature map.
    NoiseInjection,
}

impl Layer {
    fn output_len(&self, input_len: usize) -> Result<usize> {
        let expect = |n: usize| {
            if n == input_len {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "layer {self:?} expects {n} inputs, previous layer gives {input_len}"
                )))
            }
        };
        match self {
            Layer::Dense { input, output } => {
                expect(*input)?;
                Ok(*output)
            }
            Layer::Conv(s) => {
                expect(s.input_len())?;
                Ok(s.output_len())
            }
            Layer::Upsample {
                channels,
                height,
                width,
            } => {
                expect(channels * height * width)?;
                Ok(4 * channels * height * width)
            }
            Layer::Activation { .. } | Layer::NoiseInjection => Ok(input_len),
        }
    }

    fn weight_shape(&self) -> Option<(Vec<usize>, usize, usize)> {
        match self {
            Layer::Dense { input, output } => Some((vec![*output, *input], *output, *input)),
            Layer::Conv(s) => Some((
                vec![s.channels_out, s.channels_in, s.kernel, s.kernel],
                s.channels_out,
                s.channels_in * s.kernel * s.kernel,
            )),
            _ => None,
        }
    }
}

/// An architecture: input width plus an ordered list of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub input_len: usize,
    pub layers: Vec<Layer>,
}

/// Per-layer parameter offsets `(weight, bias)` within the network's slice.
type Offsets = Vec<Option<(usize, usize, usize, usize)>>;

impl Sequential {
    pub fn new(input_len: usize, layers: Vec<Layer>) -> Result<Self> {
        let seq = Self { input_len, layers };
        seq.output_len()?;
        Ok(seq)
    }

    pub fn output_len(&self) -> Result<usize> {
        self.layers
            .iter()
            .try_fold(self.input_len, |n, l| l.output_len(n))
    }

    pub fn injection_points(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::NoiseInjection))
            .count()
    }

    pub fn param_segments(&self, prefix: &str) -> Vec<Segment> {
        let mut segs = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some((shape, out, _)) = l.weight_shape() {
                segs.push(Segment::new(format!("{prefix}{i}.weight"), &shape));
                segs.push(Segment::new(format!("{prefix}{i}.bias"), &[out]));
            }
        }
        segs
    }

    pub fn param_len(&self) -> usize {
        self.param_segments("").iter().map(Segment::len).sum()
    }

    fn offsets(&self) -> Offsets {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                l.weight_shape().map(|(shape, out, _)| {
                    let wn: usize = shape.iter().product();
                    let r = (off, wn, off + wn, out);
                    off += wn + out;
                    r
                })
            })
            .collect()
    }

    /// Gaussian fan-in initialisation (`std = gain / sqrt(fan_in)`), zero biases.
    pub fn init_params(&self, params: &mut [f64], rng: &mut RngStream) {
        for (l, off) in self.layers.iter().zip(self.offsets()) {
            if let (Some((_, _, fan_in)), Some((wo, wn, bo, bn))) = (l.weight_shape(), off) {
                let std = 1.0 / (fan_in as f64).sqrt();
                for w in &mut params[wo..wo + wn] {
                    *w = std * rng.standard_normal();
                }
                params[bo..bo + bn].iter_mut().for_each(|b| *b = 0.0);
            }
        }
    }

    /// Draws the injection noise for one sample, in layer order.
    pub fn draw_injection(&self, cfg: &NoiseConfig, rng: &mut RngStream) -> Vec<Vec<f64>> {
        if cfg.sigma_noise == 0.0 {
            return Vec::new();
        }
        let mut n = self.input_len;
        let mut out = Vec::new();
        for l in &self.layers {
            n = l.output_len(n).expect("validated at construction");
            if matches!(l, Layer::NoiseInjection) {
                out.push((0..n).map(|_| cfg.sigma_noise * rng.standard_normal()).collect());
            }
        }
        out
    }

    /// Forward pass of one item. `injection` holds one pre-drawn noise vector
    /// per injection point, or is empty to disable injection.
    pub fn forward(&self, params: &[f64], x: &[f64], injection: &[Vec<f64>]) -> Trace {
        let offsets = self.offsets();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let mut point = 0;
        for (l, off) in self.layers.iter().zip(&offsets) {
            let next = match l {
                Layer::Dense { .. } => {
                    let (wo, wn, bo, bn) = off.expect("dense has params");
                    ops::dense_forward(&params[wo..wo + wn], &params[bo..bo + bn], &cur)
                }
                Layer::Conv(s) => {
                    let (wo, wn, bo, bn) = off.expect("conv has params");
                    ops::conv_forward(s, &params[wo..wo + wn], &params[bo..bo + bn], &cur)
                }
                Layer::Upsample {
                    channels,
                    height,
                    width,
                } => ops::upsample2x_forward(*channels, *height, *width, &cur),
                Layer::Activation { function } => ops::activation_forward(*function, &cur),
                Layer::NoiseInjection => {
                    let mut y = cur.clone();
                    if let Some(n) = injection.get(point) {
                        for (v, e) in y.iter_mut().zip(n) {
                            *v += e;
                        }
                    }
                    point += 1;
                    y
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
        }
        Trace {
            inputs,
            output: cur,
        }
    }

    /// Backward pass of one item; accumulates into `grad_params` and returns
    /// the input gradient. Injected noise is an additive constant.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        grad_out: &[f64],
        grad_params: &mut [f64],
    ) -> Vec<f64> {
        let offsets = self.offsets();
        let mut g = grad_out.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            g = match l {
                Layer::Dense { .. } => {
                    let (wo, wn, bo, bn) = offsets[i].expect("dense has params");
                    let (gw, gb) = split_grad(grad_params, wo, wn, bo, bn);
                    ops::dense_backward(&params[wo..wo + wn], x, &g, gw, gb)
                }
                Layer::Conv(s) => {
                    let (wo, wn, bo, bn) = offsets[i].expect("conv has params");
                    let (gw, gb) = split_grad(grad_params, wo, wn, bo, bn);
                    ops::conv_backward(s, &params[wo..wo + wn], x, &g, gw, gb)
                }
                Layer::Upsample {
                    channels,
                    height,
                    width,
                } => ops::upsample2x_backward(*channels, *height, *width, &g),
                Layer::Activation { function } => ops::activation_backward(*function, x, &g),
                Layer::NoiseInjection => g,
            };
        }
        g
    }

    /// Input gradient of a scalar-output dense/activation stack, together
    /// with the per-layer output gradients needed for double backprop.
    fn input_gradient_states(&self, params: &[f64], trace: &Trace) -> Vec<Vec<f64>> {
        let offsets = self.offsets();
        // deltas[l] = d output / d (output of layer l); deltas[L] unused sentinel
        let mut deltas = vec![Vec::new(); self.layers.len() + 1];
        deltas[self.layers.len()] = vec![1.0];
        for (i, l) in self.layers.iter().enumerate().rev() {
            let up = &deltas[i + 1];
            let d = match l {
                Layer::Dense { input, output } => {
                    let (wo, _, _, _) = offsets[i].expect("dense has params");
                    let w = &params[wo..wo + input * output];
                    let mut gx = vec![0.0; *input];
                    for (o, &u) in up.iter().enumerate() {
                        for (k, gxk) in gx.iter_mut().enumerate() {
                            *gxk += w[o * input + k] * u;
                        }
                    }
                    gx
                }
                Layer::Activation { function } => {
                    ops::activation_backward(*function, &trace.inputs[i], up)
                }
                _ => unreachable!("checked by critic architecture validation"),
            };
            deltas[i] = d;
        }
        deltas
    }

    pub(crate) fn is_scalar_mlp(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l, Layer::Dense { .. } | Layer::Activation { .. }))
            && self.output_len().ok() == Some(1)
    }

    /// For a scalar-output MLP `f`: returns `(f(x), grad_x f)`.
    pub fn input_gradient(&self, params: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let trace = self.forward(params, x, &[]);
        let mut deltas = self.input_gradient_states(params, &trace);
        (trace.output[0], deltas.swap_remove(0))
    }

    /// Gradient-penalty term `(||grad_x f(x)|| - 1)^2` for a scalar-output MLP,
    /// plus `weight` times its gradient wrt the parameters (accumulated into
    /// `grad_params`) by differentiating through the input-gradient pass.
    pub fn gradient_penalty(
        &self,
        params: &[f64],
        x: &[f64],
        weight: f64,
        grad_params: &mut [f64],
    ) -> f64 {
        let offsets = self.offsets();
        let trace = self.forward(params, x, &[]);
        let deltas = self.input_gradient_states(params, &trace);
        let g = &deltas[0];
        let norm = crate::numeric::l2_norm(g);
        let penalty = (norm - 1.0).powi(2);
        if weight == 0.0 {
            return penalty;
        }
        let coef = if norm > 0.0 {
            weight * 2.0 * (norm - 1.0) / norm
        } else {
            0.0
        };
        // adjoint of deltas[0]
        let mut dbar: Vec<f64> = g.iter().map(|v| coef * v).collect();
        // extra adjoints on forward-layer inputs from the second-order terms
        let mut extra: Vec<Option<Vec<f64>>> = vec![None; self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            let up = &deltas[i + 1];
            dbar = match l {
                Layer::Dense { input, output } => {
                    let (wo, wn, bo, bn) = offsets[i].expect("dense has params");
                    let w = &params[wo..wo + wn];
                    let (gw, _) = split_grad(grad_params, wo, wn, bo, bn);
                    let mut next = vec![0.0; *output];
                    for o in 0..*output {
                        let mut acc = 0.0;
                        for k in 0..*input {
                            gw[o * input + k] += up[o] * dbar[k];
                            acc += w[o * input + k] * dbar[k];
                        }
                        next[o] = acc;
                    }
                    next
                }
                Layer::Activation { function } => {
                    let xin = &trace.inputs[i];
                    extra[i] = Some(
                        xin.iter()
                            .zip(&dbar)
                            .zip(up)
                            .map(|((&xv, &db), &u)| db * u * function.second_derivative(xv))
                            .collect(),
                    );
                    xin.iter()
                        .zip(&dbar)
                        .map(|(&xv, &db)| db * function.derivative(xv))
                        .collect()
                }
                _ => unreachable!("checked by critic architecture validation"),
            };
        }
        // reverse through the forward pass, seeded only by the extra adjoints
        let mut adj = vec![0.0; 1];
        for (i, l) in self.layers.iter().enumerate().rev() {
            let xin = &trace.inputs[i];
            let mut a_in = match l {
                Layer::Dense { .. } => {
                    let (wo, wn, bo, bn) = offsets[i].expect("dense has params");
                    let (gw, gb) = split_grad(grad_params, wo, wn, bo, bn);
                    ops::dense_backward(&params[wo..wo + wn], xin, &adj, gw, gb)
                }
                Layer::Activation { function } => ops::activation_backward(*function, xin, &adj),
                _ => unreachable!(),
            };
            if let Some(e) = &extra[i] {
                for (a, b) in a_in.iter_mut().zip(e) {
                    *a += b;
                }
            }
            adj = a_in;
        }
        penalty
    }
}

fn split_grad(
    grad: &mut [f64],
    wo: usize,
    wn: usize,
    bo: usize,
    bn: usize,
) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(wo + wn, bo);
    let (w, rest) = grad[wo..bo + bn].split_at_mut(wn);
    (w, rest)
}

/// Layer inputs recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// A sequential architecture bound to its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Sequential,
    params: ParamVector,
    revision: u64,
}

#[derive(Debug, Clone)]
pub struct BatchTrace {
    revision: u64,
    pub traces: Vec<Trace>,
}

impl Network {
    pub fn new(arch: Sequential, prefix: &str, rng: &mut RngStream) -> Result<Self> {
        arch.output_len()?;
        let mut params = ParamVector::zeros(arch.param_segments(prefix));
        arch.init_params(params.data_mut(), rng);
        Ok(Self {
            arch,
            params,
            revision: next_revision(),
        })
    }

    pub fn from_params(arch: Sequential, params: ParamVector) -> Result<Self> {
        if params.len() != arch.param_len() {
            return Err(Error::invalid(format!(
                "architecture needs {} parameters, got {}",
                arch.param_len(),
                params.len()
            )));
        }
        Ok(Self {
            arch,
            params,
            revision: next_revision(),
        })
    }

    pub fn arch(&self) -> &Sequential {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::invalid("parameter layout does not match network"));
        }
        self.params = params;
        self.revision = next_revision();
        Ok(())
    }

    /// `params <- params - eta * direction`.
    pub fn step(&mut self, direction: &ParamVector, eta: f64) -> Result<()> {
        self.params.add_scaled(direction, -eta)?;
        self.revision = next_revision();
        Ok(())
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len
    }

    pub fn output_len(&self) -> usize {
        self.arch.output_len().expect("validated")
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.item_len() != self.arch.input_len || x.shape().len() < 2 {
            return Err(Error::invalid(format!(
                "network expects items of {} values, got tensor {:?}",
                self.arch.input_len,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Batched forward pass; `injection` holds per-sample pre-drawn noise.
    pub fn forward_batch(
        &self,
        x: &Tensor,
        injection: Option<&[Vec<Vec<f64>>]>,
    ) -> Result<(Vec<Vec<f64>>, BatchTrace)> {
        self.check_batch(x)?;
        let p = self.params.data();
        let traces: Vec<Trace> = (0..x.batch_len())
            .into_par_iter()
            .map(|i| {
                let noise = injection.map(|n| n[i].as_slice()).unwrap_or(&[]);
                self.arch.forward(p, x.item(i), noise)
            })
            .collect();
        let outputs = traces.iter().map(|t| t.output.clone()).collect();
        Ok((
            outputs,
            BatchTrace {
                revision: self.revision,
                traces,
            },
        ))
    }

    /// Batched backward pass. Returns summed parameter gradients and the
    /// per-item input gradients.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        grad_out: &[Vec<f64>],
    ) -> Result<(ParamVector, Vec<Vec<f64>>)> {
        if trace.revision != self.revision {
            return Err(Error::state(
                "forward cache was produced by different parameters",
            ));
        }
        if grad_out.len() != trace.traces.len() {
            return Err(Error::invalid(format!(
                "{} output gradients for a batch of {}",
                grad_out.len(),
                trace.traces.len()
            )));
        }
        let p = self.params.data();
        let n = self.params.len();
        let per_item: Vec<(Vec<f64>, Vec<f64>)> = trace
            .traces
            .par_iter()
            .zip(grad_out.par_iter())
            .map(|(t, g)| {
                let mut gp = vec![0.0; n];
                let gx = self.arch.backward(p, t, g, &mut gp);
                (gp, gx)
            })
            .collect();
        let mut total = self.params.zeros_like();
        let mut grad_in = Vec::with_capacity(per_item.len());
        for (gp, gx) in per_item {
            for (a, b) in total.data_mut().iter_mut().zip(&gp) {
                *a += b;
            }
            grad_in.push(gx);
        }
        Ok((total, grad_in))
    }
}
