//! Gradient sanitization for the generator: clipping with error feedback
//! followed by calibrated Gaussian noise.
//!
//! The hook works on the gradient of the generator loss with respect to
//! the generated images. Each loss source keeps its own accumulated clipping
//! error (or one shared error in aggregate mode). The noise is added to the
//! combined update only and is never fed back into the errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gaussian_sample, ParamVector, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    /// Gradient clip threshold.
    pub c1: f64,
    /// Error clip threshold. Zero turns the error release off, which is
    /// plain clipped DP-SGD.
    pub c2: f64,
}

impl ClipConfig {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        let cfg = Self { c1, c2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1.is_finite()) || !(self.c2 >= 0.0 && self.c2.is_finite()) {
            return Err(Error::invalid(format!(
                "clip thresholds need c1 > 0 and c2 >= 0, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpNoiseConfig {
    /// Noise multiplier.
    pub sigma: f64,
}

impl DpNoiseConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        let cfg = Self { sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Per-entry standard deviation `sigma * c1 * sqrt(1 + 2 c2)`.
    pub fn std(&self, clip: &ClipConfig) -> f64 {
        self.sigma * clip.c1 * (1.0 + 2.0 * clip.c2).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Discriminator,
    Classifier,
    Encoder,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Discriminator, Source::Classifier, Source::Encoder];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfMode {
    #[default]
    PerSource,
    /// One error for the summed gradient.
    Aggregate,
}

/// `g / max(1, ||g|| / c)`.
pub fn clip(g: &Tensor, c: f64) -> Result<Tensor> {
    if !(c > 0.0) {
        return Err(Error::invalid(format!("clip threshold must be positive, got {c}")));
    }
    let n = g.l2_norm();
    if n <= c {
        return Ok(g.clone());
    }
    Ok(g.scale(c / n))
}

/// Accumulated clipping errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfState {
    mode: EfMode,
    shape: Vec<usize>,
    errors: Vec<Tensor>,
    step: u64,
}

/// What one error-feedback step produced.
#[derive(Debug, Clone)]
pub struct EfOutput {
    /// Sum of the per-source updates.
    pub v: Tensor,
    /// Per-source update `clip(g, c1) + clip(e, c2)`; a single entry in aggregate mode.
    pub parts: Vec<Tensor>,
}

impl EfState {
    pub fn new(mode: EfMode, shape: &[usize]) -> Self {
        let count = match mode {
            EfMode::PerSource => Source::ALL.len(),
            EfMode::Aggregate => 1,
        };
        Self {
            mode,
            shape: shape.to_vec(),
            errors: vec![Tensor::zeros(shape); count],
            step: 0,
        }
    }

    pub fn mode(&self) -> EfMode {
        self.mode
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Error for a source. In aggregate mode every source maps to the shared error.
    pub fn error(&self, source: Source) -> &Tensor {
        match self.mode {
            EfMode::PerSource => &self.errors[source.index()],
            EfMode::Aggregate => &self.errors[0],
        }
    }

    pub fn errors(&self) -> &[Tensor] {
        &self.errors
    }

    /// Rebuilds a state from stored parts, checking shapes.
    pub fn from_parts(mode: EfMode, shape: Vec<usize>, errors: Vec<Tensor>, step: u64) -> Result<Self> {
        let fresh = Self::new(mode, &shape);
        if errors.len() != fresh.errors.len() || errors.iter().any(|e| e.shape() != shape.as_slice()) {
            return Err(Error::state("error tensors do not match the feedback mode and shape"));
        }
        Ok(Self {
            mode,
            shape,
            errors,
            step,
        })
    }

    fn check(&self, grads: &[(Source, &Tensor)]) -> Result<()> {
        for (i, (s, g)) in grads.iter().enumerate() {
            if grads[..i].iter().any(|(t, _)| t == s) {
                return Err(Error::invalid(format!("source {s:?} given twice")));
            }
            if g.shape() != self.shape.as_slice() {
                return Err(Error::state(format!(
                    "gradient for {s:?} has shape {:?}, feedback state expects {:?}",
                    g.shape(),
                    self.shape
                )));
            }
        }
        Ok(())
    }
}

/// One error-feedback step. Per source: `v_s = clip(g_s, c1) + clip(e_s, c2)`,
/// `e_s <- e_s + g_s - v_s`. Returns `v = sum_s v_s`.
///
/// Sources not present in `grads` keep their error untouched. On error the
/// state is left unchanged.
pub fn ef_step(state: &mut EfState, grads: &[(Source, &Tensor)], cfg: &ClipConfig) -> Result<EfOutput> {
    cfg.validate()?;
    state.check(grads)?;
    let update = |g: &Tensor, e: &Tensor| -> Result<(Tensor, Tensor)> {
        let released = if cfg.c2 == 0.0 { Tensor::zeros(e.shape()) } else { clip(e, cfg.c2)? };
        let v = clip(g, cfg.c1)?.add(&released)?;
        let e_next = e.add(g)?.sub(&v)?;
        Ok((v, e_next))
    };
    let mut v = Tensor::zeros(&state.shape);
    let mut parts = Vec::new();
    match state.mode {
        EfMode::PerSource => {
            let mut next = state.errors.clone();
            for (s, g) in grads {
                let (vs, es) = update(g, &state.errors[s.index()])?;
                v.add_assign(&vs)?;
                parts.push(vs);
                next[s.index()] = es;
            }
            state.errors = next;
        }
        EfMode::Aggregate => {
            let mut g = Tensor::zeros(&state.shape);
            for (_, gs) in grads {
                g.add_assign(gs)?;
            }
            let (vs, es) = update(&g, &state.errors[0])?;
            v = vs.clone();
            parts.push(vs);
            state.errors[0] = es;
        }
    }
    state.step += 1;
    Ok(EfOutput { v, parts })
}

/// I.i.d. `N(0, sigma^2 c1^2 (1 + 2 c2))` entries.
pub fn dp_noise(shape: &[usize], noise: &DpNoiseConfig, clip: &ClipConfig, rng: &mut RngStream) -> Result<Tensor> {
    noise.validate()?;
    clip.validate()?;
    gaussian_sample(shape, 0.0, noise.std(clip), rng)
}

/// Error-feedback step plus DP noise: the tensor to back-propagate through
/// the generator in place of the raw image gradient.
pub fn sanitize_hook(
    grads: &[(Source, &Tensor)],
    state: &mut EfState,
    clip: &ClipConfig,
    noise: &DpNoiseConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    noise.validate()?;
    let out = ef_step(state, grads, clip)?;
    let w = dp_noise(state.shape(), noise, clip, rng)?;
    out.v.add(&w)
}

/// `params - eta * direction`.
pub fn apply_update(params: &ParamVector, direction: &ParamVector, eta: f64) -> Result<ParamVector> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {eta}")));
    }
    if !params.same_layout(direction) {
        return Err(Error::invalid("update direction does not match the parameter layout"));
    }
    let mut out = params.clone();
    out.add_scaled(direction, -eta)?;
    Ok(out)
}
