//! Datasets and evaluation.

mod idx;
mod metrics;
mod probe;

pub use idx::{
    load_dataset, parse_idx, read_idx, read_idx_images, read_idx_labels, write_idx_images,
    write_idx_labels, IdxData, IdxKind,
};
pub use metrics::{
    feature_stats, frechet_distance, inception_style_score, mean_pairwise_l2, score_from_probs,
    Extractor, FeatureStats,
};
pub use probe::{
    accuracy, gen2real, train_classifier, GeneratorSource, ImageSource, Probe, ProbeTraining,
    ReplaySource,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{RngStream, StreamId, Tensor};

/// Square grayscale images in `[-1, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    /// `images` is `[N, H, W]` with `H == W`.
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::invalid(format!(
                "images must be [N, S, S], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [-1, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.images.item(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), s, s], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.gather(indices)?;
        Ok(Self {
            images,
            labels,
            classes: self.classes,
        })
    }

    /// Deterministic shuffled split into `(first, rest)` with `first_len` items first.
    pub fn split(&self, first_len: usize, seed: u64) -> Result<(Self, Self)> {
        if first_len > self.len() {
            return Err(Error::invalid("split larger than the dataset"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        RngStream::for_consumer(seed, StreamId::Partition).shuffle(&mut idx);
        Ok((self.subset(&idx[..first_len])?, self.subset(&idx[first_len..])?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Standard deviation of the additive pixel noise.
    #[serde(default = "default_pixel_noise")]
    pub pixel_noise: f64,
}

fn default_pixel_noise() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn desk() -> Self {
        Self {
            classes: 2,
            per_class: 200,
            size: 8,
            pixel_noise: default_pixel_noise(),
        }
    }
}

/// Class `c` is a soft bar through the centre at angle `pi * c / classes`,
/// with per-image jitter in angle, offset and width, plus pixel noise.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.classes < 1 || spec.size < 2 {
        return Err(Error::invalid("synthetic data needs >= 1 class and size >= 2"));
    }
    if !(spec.pixel_noise >= 0.0) {
        return Err(Error::invalid("pixel noise must be >= 0"));
    }
    let mut rng = RngStream::for_consumer(seed, StreamId::Synth);
    let s = spec.size;
    let n = spec.classes * spec.per_class;
    let centre = (s as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        let angle = std::f64::consts::PI * c as f64 / spec.classes as f64 + 0.15 * (2.0 * rng.uniform() - 1.0);
        let offset = 0.6 * (2.0 * rng.uniform() - 1.0) * s as f64 / 8.0;
        let width = (0.8 + 0.4 * rng.uniform()) * s as f64 / 8.0;
        let (sin, cos) = angle.sin_cos();
        for r in 0..s {
            for col in 0..s {
                let (x, y) = (col as f64 - centre, r as f64 - centre);
                // distance to the line through the (offset) centre
                let d = -x * sin + y * cos - offset;
                let v = 2.0 * (-d * d / (2.0 * width * width)).exp() - 1.0;
                let noisy = v + spec.pixel_noise * rng.standard_normal();
                data.push(noisy.clamp(-1.0, 1.0));
            }
        }
        labels.push(c);
    }
    LabeledDataset::new(Tensor::new(vec![n, s, s], data)?, labels, spec.classes)
}
