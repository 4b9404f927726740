//! Differentiable primitives for the fixed network shapes.
//!
//! Everything works on single items (one image, one vector); batching is a
//! loop in the callers. Backward functions accumulate into parameter-gradient
//! slices so a batch can share one buffer.

use serde::{Deserialize, Serialize};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Second derivative; zero almost everywhere for the piecewise-linear ones.
    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity | Activation::Relu | Activation::LeakyRelu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation_forward(act: Activation, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| act.apply(v)).collect()
}

/// Gradient wrt the activation input `x` given the output gradient.
pub fn activation_backward(act: Activation, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| g * act.derivative(v))
        .collect()
}

/// `y = W x + b` with `W` stored `[out, in]`.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Accumulates into `grad_w`/`grad_b` and returns the input gradient.
pub fn dense_backward(
    w: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let n_in = x.len();
    let mut grad_x = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut grad_w[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            grad_x[i] += g * row[i];
        }
    }
    grad_x
}

/// Geometry of a stride-1, zero-padded ("same") square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.channels_out * self.channels_in * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.channels_in * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.channels_out * self.height * self.width
    }
}

/// Output columns `lo..hi` whose input column `ox + dx` lies inside `0..w`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv_forward(s: &ConvShape, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let (h, wd, k) = (s.height, s.width, s.kernel);
    let pad = (k / 2) as isize;
    let plane = h * wd;
    let mut y = vec![0.0; s.output_len()];
    for co in 0..s.channels_out {
        let out = &mut y[co * plane..(co + 1) * plane];
        out.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..s.channels_in {
            let inp = &x[ci * plane..(ci + 1) * plane];
            let kbase = (co * s.channels_in + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[kbase + ky * k + kx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let (lo, hi) = valid_range(wd, dx);
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = (iy as usize * wd) as isize + dx;
                        let orow = oy * wd;
                        let src = &inp[(irow + lo as isize) as usize..(irow + hi as isize) as usize];
                        for (o, i) in out[orow + lo..orow + hi].iter_mut().zip(src) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_backward(
    s: &ConvShape,
    w: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let (h, wd, k) = (s.height, s.width, s.kernel);
    let pad = (k / 2) as isize;
    let plane = h * wd;
    let mut grad_x = vec![0.0; s.input_len()];
    for co in 0..s.channels_out {
        let gout = &grad_out[co * plane..(co + 1) * plane];
        grad_b[co] += gout.iter().sum::<f64>();
        for ci in 0..s.channels_in {
            let inp = &x[ci * plane..(ci + 1) * plane];
            let kbase = (co * s.channels_in + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[kbase + ky * k + kx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let mut gw = 0.0;
                    let (lo, hi) = valid_range(wd, dx);
                    let gx_plane = &mut grad_x[ci * plane..(ci + 1) * plane];
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let start = ((iy as usize * wd) as isize + dx + lo as isize) as usize;
                        let end = start + (hi - lo);
                        let orow = oy * wd;
                        let g = &gout[orow + lo..orow + hi];
                        for ((gv, iv), xv) in g.iter().zip(&inp[start..end]).zip(&mut gx_plane[start..end]) {
                            gw += gv * iv;
                            *xv += gv * wv;
                        }
                    }
                    grad_w[kbase + ky * k + kx] += gw;
                }
            }
        }
    }
    grad_x
}

/// Nearest-neighbour 2x upsampling of a `[c, h, w]` map.
pub fn upsample2x_forward(channels: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                y[c * oh * ow + oy * ow + ox] = x[c * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward(channels: usize, h: usize, w: usize, grad_out: &[f64]) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut g = vec![0.0; channels * h * w];
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                g[c * h * w + (oy / 2) * w + ox / 2] += grad_out[c * oh * ow + oy * ow + ox];
            }
        }
    }
    g
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Cross-entropy `-log softmax(logits)[label]` and its gradient wrt the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    (-logp[label], grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::grad_check;
    use crate::numeric::{ParamVector, RngStream, Segment};

    fn random_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.standard_normal()).collect()
    }

    fn single(n: usize, data: Vec<f64>) -> ParamVector {
        ParamVector::from_parts(vec![Segment::new("v", &[n])], data).unwrap()
    }

    /// Checks d/dx of `<r, f(x)>` for a random projection `r`.
    fn check_input_grad(
        n_in: usize,
        n_out: usize,
        rng: &mut RngStream,
        f: impl Fn(&[f64]) -> Vec<f64>,
        back: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    ) -> f64 {
        let x = random_vec(rng, n_in);
        let r = random_vec(rng, n_out);
        let analytic = back(&x, &r);
        let obj = |p: &ParamVector| Ok(f(p.data()).iter().zip(&r).map(|(a, b)| a * b).sum());
        grad_check(obj, &single(n_in, x), &single(n_in, analytic), 1e-5).unwrap()
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut rng = RngStream::new(1, 0);
        for act in [
            Activation::Identity,
            Activation::Relu,
            Activation::LeakyRelu,
            Activation::Tanh,
            Activation::Sigmoid,
        ] {
            for _ in 0..100 {
                let err = check_input_grad(
                    6,
                    6,
                    &mut rng,
                    |x| activation_forward(act, x),
                    |x, g| activation_backward(act, x, g),
                );
                assert!(err <= 1e-6, "{act:?}: {err}");
            }
        }
    }

    #[test]
    fn second_derivatives_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
            for &x in &[-1.3, -0.2, 0.4, 2.1] {
                let h = 1e-5;
                let fd = (act.derivative(x + h) - act.derivative(x - h)) / (2.0 * h);
                assert!((fd - act.second_derivative(x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dense_gradients() {
        let mut rng = RngStream::new(2, 0);
        for _ in 0..100 {
            let (n_in, n_out) = (4, 3);
            let w = random_vec(&mut rng, n_in * n_out);
            let b = random_vec(&mut rng, n_out);
            let x = random_vec(&mut rng, n_in);
            let r = random_vec(&mut rng, n_out);
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; b.len()];
            let gx = dense_backward(&w, &x, &r, &mut gw, &mut gb);

            let mut all = w.clone();
            all.extend(&b);
            all.extend(&x);
            let mut analytic = gw.clone();
            analytic.extend(&gb);
            analytic.extend(&gx);
            let n = all.len();
            let obj = |p: &ParamVector| {
                let d = p.data();
                let y = dense_forward(&d[..12], &d[12..15], &d[15..]);
                Ok(y.iter().zip(&r).map(|(a, b)| a * b).sum())
            };
            let err = grad_check(obj, &single(n, all), &single(n, analytic), 1e-5).unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = RngStream::new(3, 0);
        for kernel in [1, 3] {
            for _ in 0..20 {
                let s = ConvShape {
                    channels_in: 2,
                    channels_out: 3,
                    kernel,
                    height: 4,
                    width: 3,
                };
                let w = random_vec(&mut rng, s.weight_len());
                let b = random_vec(&mut rng, 3);
                let x = random_vec(&mut rng, s.input_len());
                let r = random_vec(&mut rng, s.output_len());
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; 3];
                let gx = conv_backward(&s, &w, &x, &r, &mut gw, &mut gb);
                let (nw, nb) = (w.len(), b.len());
                let mut all = w.clone();
                all.extend(&b);
                all.extend(&x);
                let mut analytic = gw;
                analytic.extend(gb);
                analytic.extend(gx);
                let n = all.len();
                let obj = |p: &ParamVector| {
                    let d = p.data();
                    let y = conv_forward(&s, &d[..nw], &d[nw..nw + nb], &d[nw + nb..]);
                    Ok(y.iter().zip(&r).map(|(a, b)| a * b).sum())
                };
                let err = grad_check(obj, &single(n, all), &single(n, analytic), 1e-5).unwrap();
                assert!(err <= 1e-6, "{err}");
            }
        }
    }

    #[test]
    fn conv_1x1_is_channel_mixing() {
        let s = ConvShape {
            channels_in: 2,
            channels_out: 1,
            kernel: 1,
            height: 1,
            width: 2,
        };
        let y = conv_forward(&s, &[2.0, -1.0], &[0.5], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y, vec![2.0 - 3.0 + 0.5, 4.0 - 4.0 + 0.5]);
    }

    #[test]
    fn upsample_gradients() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..100 {
            let err = check_input_grad(
                2 * 2 * 3,
                2 * 4 * 6,
                &mut rng,
                |x| upsample2x_forward(2, 2, 3, x),
                |_, g| upsample2x_backward(2, 2, 3, g),
            );
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let y = upsample2x_forward(1, 1, 2, &[1.0, 2.0]);
        assert_eq!(y, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..100 {
            let logits = random_vec(&mut rng, 4);
            let label = rng.index(4);
            let (_, g) = softmax_cross_entropy(&logits, label);
            let obj = |p: &ParamVector| Ok(softmax_cross_entropy(p.data(), label).0);
            let err = grad_check(obj, &single(4, logits), &single(4, g), 1e-5).unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(&[0.0, 0.0], 1);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
