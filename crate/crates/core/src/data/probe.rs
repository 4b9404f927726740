//! Classifier training and the gen2real downstream accuracy.

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::models::{ClassifierArch, ClassifierNet, GeneratorNet, NoiseConfig};
use crate::numeric::{gaussian_sample, RngStream, StreamId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// One hidden layer of width 64.
    Mlp,
    /// One 3x3 convolution with 4 channels, then a hidden layer of width 32.
    CnnLike,
}

impl Probe {
    pub fn arch(self, image_size: usize, classes: usize) -> ClassifierArch {
        match self {
            Probe::Mlp => ClassifierArch::Mlp {
                image_size,
                hidden: vec![64],
                classes,
            },
            Probe::CnnLike => ClassifierArch::ConvStack {
                image_size,
                channels: vec![4],
                kernel: 3,
                hidden: 32,
                classes,
            },
        }
    }
}

/// Minibatch SGD schedule for evaluation classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeTraining {
    pub epochs: usize,
    pub batch: usize,
    pub eta: f64,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            eta: 0.05,
        }
    }
}

/// Trains a fresh classifier on `(images, labels)` with cross-entropy.
pub fn train_classifier(
    arch: ClassifierArch,
    images: &Tensor,
    labels: &[usize],
    training: &ProbeTraining,
    seed: u64,
) -> Result<ClassifierNet> {
    if training.batch == 0 || !(training.eta > 0.0) {
        return Err(Error::invalid("probe training needs batch >= 1 and eta > 0"));
    }
    if images.batch_len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("probe training needs a non-empty labelled set"));
    }
    let mut rng = RngStream::for_consumer(seed, StreamId::Probe);
    let mut net = ClassifierNet::new(arch, &mut rng)?;
    let n = labels.len();
    let item = images.item_len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..training.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(training.batch) {
            let mut data = Vec::with_capacity(chunk.len() * item);
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(images.item(i));
                y.push(labels[i]);
            }
            let x = Tensor::new(vec![chunk.len(), item], data)?;
            let loss = cross_entropy(&net, &x, &y)?;
            net.net.step(&loss.grad_params, training.eta)?;
        }
    }
    Ok(net)
}

pub fn accuracy(classifier: &ClassifierNet, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let pred = classifier.predict(data.images())?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Anything that can produce labelled images on demand.
pub trait ImageSource {
    fn classes(&self) -> usize;
    fn image_size(&self) -> usize;
    /// `[labels.len(), S, S]` images of the requested classes.
    fn sample(&self, labels: &[usize], rng: &mut RngStream) -> Result<Tensor>;
}

/// Generator samples with `z ~ N(0, I)`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorSource<'a> {
    pub generator: &'a GeneratorNet,
    pub noise: NoiseConfig,
}

impl ImageSource for GeneratorSource<'_> {
    fn classes(&self) -> usize {
        self.generator.arch().classes
    }

    fn image_size(&self) -> usize {
        self.generator.arch().image_size()
    }

    fn sample(&self, labels: &[usize], rng: &mut RngStream) -> Result<Tensor> {
        let s = self.image_size();
        let z = gaussian_sample(&[labels.len(), self.generator.arch().latent_dim], 0.0, 1.0, rng)?;
        let (images, _) = self.generator.forward(&z, labels, &self.noise, rng)?;
        images.reshape(vec![labels.len(), s, s])
    }
}

/// Replays stored images of the requested class, chosen uniformly.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    data: LabeledDataset,
    by_class: Vec<Vec<usize>>,
}

impl ReplaySource {
    pub fn new(data: LabeledDataset) -> Result<Self> {
        let mut by_class = vec![Vec::new(); data.classes()];
        for (i, &y) in data.labels().iter().enumerate() {
            by_class[y].push(i);
        }
        if by_class.iter().any(|c| c.is_empty()) {
            return Err(Error::invalid("replay needs at least one image per class"));
        }
        Ok(Self { data, by_class })
    }
}

impl ImageSource for ReplaySource {
    fn classes(&self) -> usize {
        self.data.classes()
    }

    fn image_size(&self) -> usize {
        self.data.image_size()
    }

    fn sample(&self, labels: &[usize], rng: &mut RngStream) -> Result<Tensor> {
        let idx: Vec<usize> = labels
            .iter()
            .map(|&y| {
                let pool = &self.by_class[y];
                pool[rng.index(pool.len())]
            })
            .collect();
        Ok(self.data.gather(&idx)?.0)
    }
}

/// Trains `probe` on `count` synthetic samples with uniform labels and
/// reports its accuracy on `real_test`.
pub fn gen2real(
    source: &dyn ImageSource,
    count: usize,
    real_test: &LabeledDataset,
    probe: Probe,
    training: &ProbeTraining,
    seed: u64,
) -> Result<f64> {
    if source.classes() != real_test.classes() || source.image_size() != real_test.image_size() {
        return Err(Error::invalid("image source and test set disagree on classes or size"));
    }
    let mut rng = RngStream::for_consumer(seed, StreamId::Eval);
    let labels: Vec<usize> = (0..count).map(|_| rng.index(source.classes())).collect();
    let images = source.sample(&labels, &mut rng)?;
    let net = train_classifier(
        probe.arch(source.image_size(), source.classes()),
        &images,
        &labels,
        training,
        seed,
    )?;
    accuracy(&net, real_test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::models::GeneratorArch;

    #[test]
    fn probe_learns_synthetic_task() {
        let d = synth_dataset(&SynthSpec::desk(), 1).unwrap();
        let (train, test) = d.split(300, 2).unwrap();
        for probe in [Probe::Mlp, Probe::CnnLike] {
            let net = train_classifier(
                probe.arch(8, 2),
                train.images(),
                train.labels(),
                &ProbeTraining::default(),
                5,
            )
            .unwrap();
            assert!(accuracy(&net, &test).unwrap() >= 0.95);
        }
    }

    #[test]
    fn replay_matches_real_training() {
        let d = synth_dataset(&SynthSpec::desk(), 1).unwrap();
        let (train, test) = d.split(300, 2).unwrap();
        let cfg = ProbeTraining::default();
        let real = accuracy(
            &train_classifier(Probe::Mlp.arch(8, 2), train.images(), train.labels(), &cfg, 5).unwrap(),
            &test,
        )
        .unwrap();
        let replay = ReplaySource::new(train.clone()).unwrap();
        let g2r = gen2real(&replay, train.len(), &test, Probe::Mlp, &cfg, 5).unwrap();
        assert!((g2r - real).abs() <= 0.02, "{g2r} vs {real}");
        assert_eq!(g2r, gen2real(&replay, train.len(), &test, Probe::Mlp, &cfg, 5).unwrap());
    }

    #[test]
    fn untrained_generator_is_near_chance() {
        let d = synth_dataset(&SynthSpec::desk(), 1).unwrap();
        let (train, test) = d.split(300, 2).unwrap();
        let cfg = ProbeTraining::default();
        let mut total = 0.0;
        for seed in 0..10 {
            let g = GeneratorNet::new(GeneratorArch::desk(2), &mut RngStream::new(seed, 1)).unwrap();
            let src = GeneratorSource {
                generator: &g,
                noise: NoiseConfig::off(),
            };
            total += gen2real(&src, train.len(), &test, Probe::Mlp, &cfg, seed).unwrap();
        }
        let mean = total / 10.0;
        assert!((0.4..=0.6).contains(&mean), "{mean}");
    }
}
