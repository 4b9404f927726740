//! Metric reports for generated samples against a real reference set.

use serde::Serialize;

use super::TrainConfig;
use crate::data::{
    feature_stats, frechet_distance, gen2real, inception_style_score, train_classifier, Extractor, GeneratorSource,
    ImageSource, LabeledDataset, Probe, ReplaySource,
};
use crate::error::{Error, Result};
use crate::models::{ClassifierNet, GeneratorNet, NoiseConfig};
use crate::numeric::{RngStream, StreamId, Tensor};

/// Classifier trained on real data whose penultimate layer defines the
/// feature space for Fréchet distance and whose posteriors drive the score.
pub fn feature_extractor(config: &TrainConfig, real: &LabeledDataset) -> Result<ClassifierNet> {
    train_classifier(
        config.model.classifier(real.image_size(), real.classes()),
        real.images(),
        real.labels(),
        &config.eval.feature_training,
        config.eval.feature_seed,
    )
}

/// `count` samples with labels drawn uniformly from the classes.
pub fn sample_generator(
    generator: &GeneratorNet,
    noise: NoiseConfig,
    count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let classes = generator.arch().classes;
    let s = generator.arch().image_size();
    let mut rng = RngStream::for_consumer(seed, StreamId::Eval).child(2);
    let labels: Vec<usize> = (0..count).map(|_| rng.index(classes)).collect();
    let images = if count == 0 {
        Tensor::zeros(&[0, s, s])
    } else {
        GeneratorSource { generator, noise }.sample(&labels, &mut rng)?
    };
    LabeledDataset::new(images, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    /// Fréchet distance in the extractor's feature space.
    pub fd: f64,
    pub fd_pixels: f64,
    pub score: f64,
    pub g2r_mlp: f64,
    pub g2r_cnn: f64,
}

impl EvalReport {
    pub fn log_line(&self) -> String {
        format!(
            "fd={:.6}\tfd_pixels={:.6}\tis={:.6}\tg2r_mlp={:.6}\tg2r_cnn={:.6}",
            self.fd, self.fd_pixels, self.score, self.g2r_mlp, self.g2r_cnn
        )
    }
}

/// Compares `candidate` with the `reference` set. The probes are trained on
/// a replay of the candidate set (at the reference size) and tested on `test`.
pub fn evaluate(
    config: &TrainConfig,
    extractor: &ClassifierNet,
    reference: &LabeledDataset,
    candidate: &LabeledDataset,
    test: &LabeledDataset,
    seed: u64,
) -> Result<EvalReport> {
    if candidate.image_size() != reference.image_size() || candidate.classes() != reference.classes() {
        return Err(Error::invalid("candidate and reference sets disagree on size or classes"));
    }
    let feat = Extractor::ClassifierPenultimate(extractor);
    let fd = frechet_distance(
        &feature_stats(candidate.images(), feat)?,
        &feature_stats(reference.images(), feat)?,
    )?;
    let fd_pixels = frechet_distance(
        &feature_stats(candidate.images(), Extractor::RawPixels)?,
        &feature_stats(reference.images(), Extractor::RawPixels)?,
    )?;
    let score = inception_style_score(candidate.images(), extractor)?;
    let replay = ReplaySource::new(candidate.clone())?;
    let training = &config.eval.probe_training;
    let g2r_mlp = gen2real(&replay, reference.len(), test, Probe::Mlp, training, seed)?;
    let g2r_cnn = gen2real(&replay, reference.len(), test, Probe::CnnLike, training, seed)?;
    Ok(EvalReport {
        fd,
        fd_pixels,
        score,
        g2r_mlp,
        g2r_cnn,
    })
}
