//! Fréchet distance, inception-style score and sample diversity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::ClassifierNet;
use crate::numeric::Tensor;

/// Feature map applied before fitting a Gaussian.
#[derive(Debug, Clone, Copy)]
pub enum Extractor<'a> {
    RawPixels,
    ClassifierPenultimate(&'a ClassifierNet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the extracted features.
pub fn feature_stats(samples: &Tensor, extractor: Extractor<'_>) -> Result<FeatureStats> {
    let n = samples.batch_len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    let features = match extractor {
        Extractor::RawPixels => samples.clone(),
        Extractor::ClassifierPenultimate(c) => c.features(samples)?,
    };
    let f = features.item_len();
    let x = DMatrix::from_row_slice(n, f, features.data());
    let mean = x.row_mean().transpose();
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut covariance = centred.tr_mul(&centred) / (n as f64 - 1.0);
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(FeatureStats { mean, covariance })
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-6 * scale {
            return Err(Error::Numeric(format!("{what} has eigenvalue {v}, not positive semidefinite")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the product root is taken as the trace of
/// `(S_a^(1/2) S_b S_a^(1/2))^(1/2)`, which is symmetric and has the same
/// eigenvalues as `S_a S_b`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let ra = psd_sqrt(&a.covariance, "first covariance")?;
    let inner = &ra * &b.covariance * &ra;
    let cross = psd_sqrt(&inner, "covariance product")?.trace();
    let d = (&a.mean - &b.mean).norm_squared();
    let fd = d + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// `exp(mean_x KL(p(y|x) || p(y)))` from per-sample class probabilities.
pub fn score_from_probs(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::invalid("score needs at least one sample"));
    }
    let k = probs[0].len();
    let mut marginal = vec![0.0; k];
    for p in probs {
        if p.len() != k {
            return Err(Error::invalid("probability rows differ in length"));
        }
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / probs.len() as f64;
        }
    }
    let kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, m)| v * (v / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.len() as f64;
    // rounding can push the mean KL, and exp(ln k), a hair outside the range
    Ok(kl.exp().clamp(1.0, k as f64))
}

pub fn inception_style_score(samples: &Tensor, classifier: &ClassifierNet) -> Result<f64> {
    score_from_probs(&classifier.predict_proba(samples)?)
}

/// Mean L2 distance over all unordered sample pairs.
pub fn mean_pairwise_l2(samples: &Tensor) -> Result<f64> {
    let n = samples.batch_len();
    if n < 2 {
        return Err(Error::invalid("diversity needs at least 2 samples"));
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    samples
                        .item(i)
                        .iter()
                        .zip(samples.item(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / (n * (n - 1) / 2) as f64)
}
