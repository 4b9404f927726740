//! Training objectives: WGAN-GP critic loss, auxiliary classifier loss,
//! encoder reconstruction loss and the composite generator loss.
//!
//! The generator loss is evaluated on one generator forward pass over
//! `[z; E(x)]`: the first half are prior samples (critic and classifier
//! terms), the second half are reconstructions of the real batch
//! (reconstruction term). Its gradient wrt that image batch is returned
//! per source, uncombined, so the sanitizer can clip each one separately.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ClassifierNet, EncoderNet, GeneratorCache, GeneratorNet, Network, NoiseConfig};
use crate::numeric::{ops, ParamVector, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_gp: f64,
    pub lambda_c: f64,
    pub gamma_recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            lambda_c: 1.0,
            gamma_recon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_gp", self.lambda_gp),
            ("lambda_c", self.lambda_c),
            ("gamma_recon", self.gamma_recon),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub loss: f64,
    /// `-mean D(x) + mean D(x~)`.
    pub wasserstein: f64,
    /// Mean of `(||grad D(x^)|| - 1)^2`, before weighting.
    pub penalty: f64,
    pub grad: ParamVector,
}

fn check_images(net_input: usize, t: &Tensor, what: &str) -> Result<()> {
    if t.batch_len() == 0 {
        return Err(Error::invalid(format!("{what} batch is empty")));
    }
    if t.item_len() != net_input {
        return Err(Error::invalid(format!(
            "{what} items have {} values, network expects {net_input}",
            t.item_len()
        )));
    }
    Ok(())
}

/// WGAN-GP critic loss with `alpha ~ U(0, 1)` drawn per sample from `rng`.
pub fn loss_discriminator(
    d: &Network,
    real: &Tensor,
    fake: &Tensor,
    weights: &LossWeights,
    rng: &mut RngStream,
) -> Result<CriticLoss> {
    let alphas: Vec<f64> = (0..real.batch_len()).map(|_| rng.uniform()).collect();
    loss_discriminator_with_alphas(d, real, fake, weights, &alphas)
}

/// Same as [`loss_discriminator`] with the interpolation factors given.
pub fn loss_discriminator_with_alphas(
    d: &Network,
    real: &Tensor,
    fake: &Tensor,
    weights: &LossWeights,
    alphas: &[f64],
) -> Result<CriticLoss> {
    weights.validate()?;
    if !d.arch().is_scalar_mlp() {
        return Err(Error::invalid("critic must be a scalar-output dense network"));
    }
    check_images(d.input_len(), real, "real")?;
    check_images(d.input_len(), fake, "fake")?;
    let b = real.batch_len();
    if fake.batch_len() != b || alphas.len() != b {
        return Err(Error::invalid(format!(
            "batch sizes differ: real {b}, fake {}, alphas {}",
            fake.batch_len(),
            alphas.len()
        )));
    }
    let inv_b = 1.0 / b as f64;
    let (real_out, real_trace) = d.forward_batch(real, None)?;
    let (fake_out, fake_trace) = d.forward_batch(fake, None)?;
    let (g_real, _) = d.backward_batch(&real_trace, &vec![vec![-inv_b]; b])?;
    let (g_fake, _) = d.backward_batch(&fake_trace, &vec![vec![inv_b]; b])?;

    let arch = d.arch();
    let p = d.params().data();
    let n = d.params().len();
    let lambda = weights.lambda_gp;
    let per_item: Vec<(f64, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = real
                .item(i)
                .iter()
                .zip(fake.item(i))
                .map(|(r, f)| alphas[i] * r + (1.0 - alphas[i]) * f)
                .collect();
            let mut g = vec![0.0; n];
            let pen = arch.gradient_penalty(p, &x, lambda * inv_b, &mut g);
            (pen, g)
        })
        .collect();
    let mut grad = g_real;
    grad.add_scaled(&g_fake, 1.0)?;
    let mut penalty = 0.0;
    for (pen, g) in per_item {
        penalty += pen;
        for (a, v) in grad.data_mut().iter_mut().zip(&g) {
            *a += v;
        }
    }
    penalty *= inv_b;
    let wasserstein = -real_out.iter().map(|o| o[0]).sum::<f64>() * inv_b
        + fake_out.iter().map(|o| o[0]).sum::<f64>() * inv_b;
    Ok(CriticLoss {
        loss: wasserstein + lambda * penalty,
        wasserstein,
        penalty,
        grad,
    })
}

#[derive(Debug, Clone)]
pub struct ClassifierLoss {
    pub loss: f64,
    pub grad_params: ParamVector,
    /// Gradient of the mean loss wrt each input image, shaped like the images.
    pub grad_images: Tensor,
}

/// Mean cross-entropy `-mean log C(x)_y`.
pub fn cross_entropy(c: &ClassifierNet, images: &Tensor, labels: &[usize]) -> Result<ClassifierLoss> {
    check_images(c.net.input_len(), images, "classifier input")?;
    let b = images.batch_len();
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for {b} images", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c.classes()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            c.classes()
        )));
    }
    let flat = images.clone().reshape(vec![b, images.item_len()])?;
    let (logits, trace) = c.net.forward_batch(&flat, None)?;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(b);
    for (l, &y) in logits.iter().zip(labels) {
        let (li, gi) = ops::softmax_cross_entropy(l, y);
        loss += li * inv_b;
        grads.push(gi.into_iter().map(|g| g * inv_b).collect::<Vec<_>>());
    }
    let (grad_params, grad_in) = c.net.backward_batch(&trace, &grads)?;
    let grad_images = Tensor::new(images.shape().to_vec(), grad_in.concat())?;
    Ok(ClassifierLoss {
        loss,
        grad_params,
        grad_images,
    })
}

/// Classifier loss on generated samples `G(z, y)`. Also returns the images.
pub fn loss_classifier(
    c: &ClassifierNet,
    g: &GeneratorNet,
    z: &Tensor,
    labels: &[usize],
    cfg: &NoiseConfig,
    rng: &mut RngStream,
) -> Result<(ClassifierLoss, Tensor)> {
    if z.batch_len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} latents but {} labels",
            z.batch_len(),
            labels.len()
        )));
    }
    let (images, _) = g.forward(z, labels, cfg, rng)?;
    Ok((cross_entropy(c, &images, labels)?, images))
}

#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    pub loss: f64,
    pub grad_encoder: ParamVector,
    /// Gradient wrt the reconstructed images `G(E(x))`.
    pub grad_images: Tensor,
}

/// `mean_i ||G(E(x_i), y_i) - x_i||^2` and its gradients.
pub fn loss_reconstruction(
    e: &EncoderNet,
    g: &GeneratorNet,
    x: &Tensor,
    labels: &[usize],
    cfg: &NoiseConfig,
    rng: &mut RngStream,
) -> Result<ReconstructionLoss> {
    check_images(e.net.input_len(), x, "reconstruction input")?;
    if e.latent_dim() != g.arch().latent_dim {
        return Err(Error::invalid(format!(
            "encoder emits {} latents, generator takes {}",
            e.latent_dim(),
            g.arch().latent_dim
        )));
    }
    let b = x.batch_len();
    let flat = x.clone().reshape(vec![b, x.item_len()])?;
    let (latents, enc_trace) = e.net.forward_batch(&flat, None)?;
    let z = Tensor::stack(&latents, &[e.latent_dim()])?;
    let (recon, cache) = g.forward(&z, labels, cfg, rng)?;
    if recon.item_len() != x.item_len() {
        return Err(Error::invalid("generator and data image sizes differ"));
    }
    let (loss, grad_images) = squared_error(&recon, x, 1.0 / b as f64)?;
    let (_, grad_z) = g.backward(&cache, &grad_images)?;
    let gz: Vec<Vec<f64>> = (0..b).map(|i| grad_z.item(i).to_vec()).collect();
    let (grad_encoder, _) = e.net.backward_batch(&enc_trace, &gz)?;
    Ok(ReconstructionLoss {
        loss,
        grad_encoder,
        grad_images,
    })
}

/// `scale * sum_i ||a_i - b_i||^2` and its gradient wrt `a`, shaped like `a`.
fn squared_error(a: &Tensor, b: &Tensor, scale: f64) -> Result<(f64, Tensor)> {
    if a.len() != b.len() {
        return Err(Error::invalid("squared error over tensors of different sizes"));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(a.len());
    for (p, q) in a.data().iter().zip(b.data()) {
        let d = p - q;
        loss += d * d;
        grad.push(2.0 * scale * d);
    }
    Ok((loss * scale, Tensor::new(a.shape().to_vec(), grad)?))
}

/// Real batch and prior samples for one generator step.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorBatch<'a> {
    pub z: &'a Tensor,
    pub labels: &'a [usize],
    pub real: &'a Tensor,
    pub real_labels: &'a [usize],
}

/// Per-source gradients of the generator loss wrt the generated image batch.
#[derive(Debug, Clone)]
pub struct SourceGrads {
    pub discriminator: Tensor,
    pub classifier: Tensor,
    pub encoder: Tensor,
}

impl SourceGrads {
    pub fn sum(&self) -> Result<Tensor> {
        self.discriminator.add(&self.classifier)?.add(&self.encoder)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    pub total: f64,
    /// `-mean D(G(z, y))`.
    pub adversarial: f64,
    /// Unweighted classifier loss on the prior half.
    pub classifier: f64,
    /// Unweighted reconstruction loss on the reconstruction half.
    pub reconstruction: f64,
    pub grads: SourceGrads,
    /// `[2B, 1, H, W]`: prior samples followed by reconstructions.
    pub images: Tensor,
    pub cache: GeneratorCache,
}

/// Composite generator loss `-E[D(G(z))] + lambda_c L_C + gamma_recon L_En`.
#[allow(clippy::too_many_arguments)]
pub fn loss_generator(
    g: &GeneratorNet,
    critic: &Network,
    classifier: &ClassifierNet,
    encoder: &EncoderNet,
    batch: GeneratorBatch<'_>,
    weights: &LossWeights,
    cfg: &NoiseConfig,
    rng: &mut RngStream,
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let b = batch.z.batch_len();
    if b == 0 || batch.real.batch_len() != b || batch.labels.len() != b || batch.real_labels.len() != b
    {
        return Err(Error::invalid(format!(
            "generator batches must share one non-zero size, got z {b}, labels {}, real {}, real labels {}",
            batch.labels.len(),
            batch.real.batch_len(),
            batch.real_labels.len()
        )));
    }
    let flat = batch.real.clone().reshape(vec![b, batch.real.item_len()])?;
    let (latents, _) = encoder.net.forward_batch(&flat, None)?;
    let z_rec = Tensor::stack(&latents, &[encoder.latent_dim()])?;
    let z_all = Tensor::concat(batch.z, &z_rec)?;
    let mut labels_all = batch.labels.to_vec();
    labels_all.extend_from_slice(batch.real_labels);
    let (images, cache) = g.forward(&z_all, &labels_all, cfg, rng)?;
    let item = images.item_len();
    if item != batch.real.item_len() {
        return Err(Error::invalid("generator and data image sizes differ"));
    }
    let inv_b = 1.0 / b as f64;

    let mut d_grad = Tensor::zeros(images.shape());
    let mut adversarial = 0.0;
    let critic_terms: Vec<(f64, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|i| critic.arch().input_gradient(critic.params().data(), images.item(i)))
        .collect();
    for (i, (value, gx)) in critic_terms.into_iter().enumerate() {
        adversarial -= value * inv_b;
        for (a, v) in d_grad.item_mut(i).iter_mut().zip(&gx) {
            *a = -inv_b * v;
        }
    }

    let prior = Tensor::new(
        [&[b][..], &images.shape()[1..]].concat(),
        images.data()[..b * item].to_vec(),
    )?;
    let ce = cross_entropy(classifier, &prior, batch.labels)?;
    let mut c_grad = Tensor::zeros(images.shape());
    for (a, v) in c_grad.data_mut()[..b * item]
        .iter_mut()
        .zip(ce.grad_images.data())
    {
        *a = weights.lambda_c * v;
    }

    let recon = Tensor::new(
        [&[b][..], &images.shape()[1..]].concat(),
        images.data()[b * item..].to_vec(),
    )?;
    let (reconstruction, rec_grad) = squared_error(&recon, batch.real, inv_b)?;
    let mut e_grad = Tensor::zeros(images.shape());
    for (a, v) in e_grad.data_mut()[b * item..]
        .iter_mut()
        .zip(rec_grad.data())
    {
        *a = weights.gamma_recon * v;
    }

    let total = adversarial + weights.lambda_c * ce.loss + weights.gamma_recon * reconstruction;
    Ok(GeneratorLoss {
        total,
        adversarial,
        classifier: ce.loss,
        reconstruction,
        grads: SourceGrads {
            discriminator: d_grad,
            classifier: c_grad,
            encoder: e_grad,
        },
        images,
        cache,
    })
}
