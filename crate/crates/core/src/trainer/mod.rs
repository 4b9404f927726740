//! Training loop: partition, critic pretraining, per-iteration updates,
//! sanitized generator steps and privacy accounting.

mod checkpoint;
mod config;
mod eval;

pub use checkpoint::{
    load_bank, load_generator, load_run, save_bank, save_generator, save_run, section_names, ReleasedGenerator,
    FORMAT_VERSION,
};
pub use config::{EvalConfig, ModelConfig, TrainConfig};
pub use eval::{evaluate, feature_extractor, sample_generator, EvalReport};

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::accountant::RdpLedger;
use crate::data::{mean_pairwise_l2, GeneratorSource, ImageSource, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, loss_classifier, loss_discriminator, loss_generator, loss_reconstruction, GeneratorBatch,
};
use crate::models::{ClassifierNet, DiscriminatorBank, EncoderNet, GeneratorNet, ModelBundle, Network};
use crate::numeric::{gaussian_sample, RngStream, StreamId, Tensor};
use crate::sanitizer::{sanitize_hook, EfState, Source};

/// Splits `0..n` into `k` disjoint subsets whose sizes differ by at most one.
pub fn partition_dataset(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::invalid(format!("cannot split {n} samples into {k} subsets")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::for_consumer(seed, StreamId::Partition).shuffle(&mut idx);
    let mut subsets = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in idx.into_iter().enumerate() {
        subsets[pos % k].push(i);
    }
    for s in &mut subsets {
        s.sort_unstable();
    }
    Ok(subsets)
}

// Child indices of the init stream.
const INIT_GENERATOR: u64 = 0;
const INIT_CLASSIFIER: u64 = 1;
const INIT_ENCODER: u64 = 2;
const INIT_CRITIC: u64 = 100;

pub fn initial_generator(config: &TrainConfig, data: &LabeledDataset) -> Result<GeneratorNet> {
    let mut rng = RngStream::for_consumer(config.seed, StreamId::Init).child(INIT_GENERATOR);
    GeneratorNet::new(config.model.generator(data.classes()), &mut rng)
}

/// Random real batch from one subset; returns images, labels and dataset indices.
fn real_batch(
    rng: &mut RngStream,
    data: &LabeledDataset,
    subset: &[usize],
    b: usize,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    if subset.len() < b {
        return Err(Error::invalid(format!("subset of {} samples is smaller than the batch {b}", subset.len())));
    }
    let idx: Vec<usize> = rng.sample_distinct(subset.len(), b).into_iter().map(|i| subset[i]).collect();
    let (x, y) = data.gather(&idx)?;
    Ok((x, y, idx))
}

/// Prior latents and uniformly drawn labels.
fn latent_batch(rng: &mut RngStream, b: usize, latent: usize, classes: usize) -> Result<(Tensor, Vec<usize>)> {
    let z = gaussian_sample(&[b, latent], 0.0, 1.0, rng)?;
    let y = (0..b).map(|_| rng.index(classes)).collect();
    Ok((z, y))
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub subset: usize,
    /// `mean D(real) - mean D(fake)` on a fixed probe batch, before and after.
    pub gap_before: f64,
    pub gap_after: f64,
    pub final_loss: f64,
    /// Dataset indices read while training this critic.
    pub touched: Vec<usize>,
}

fn critic_gap(d: &Network, real: &Tensor, fake: &Tensor) -> Result<f64> {
    let (r, _) = d.forward_batch(real, None)?;
    let (f, _) = d.forward_batch(fake, None)?;
    let mean = |v: &[Vec<f64>]| v.iter().map(|o| o[0]).sum::<f64>() / v.len() as f64;
    Ok(mean(&r) - mean(&f))
}

/// Trains critic `i` for `n_pre` steps on subset `i` only, against the frozen
/// initial generator.
pub fn pretrain_discriminators(
    config: &TrainConfig,
    data: &LabeledDataset,
    subsets: &[Vec<usize>],
) -> Result<(DiscriminatorBank, Vec<PretrainSummary>)> {
    let generator = initial_generator(config, data)?;
    let arch = config.model.critic(data.image_size());
    let seq = arch.sequential()?;
    let noise = config.noise();
    let b = config.batch;
    let latent = config.model.latent_dim;
    let init = RngStream::for_consumer(config.seed, StreamId::Init);
    let results: Vec<Result<(Network, PretrainSummary)>> = subsets
        .par_iter()
        .enumerate()
        .map(|(i, subset)| {
            let child = INIT_CRITIC + i as u64;
            let mut net = Network::new(seq.clone(), &format!("d{i}."), &mut init.child(child))?;
            let mut data_rng = RngStream::for_consumer(config.seed, StreamId::Data).child(child);
            let mut latent_rng = RngStream::for_consumer(config.seed, StreamId::Latent).child(child);
            let mut alpha_rng = RngStream::for_consumer(config.seed, StreamId::Alpha).child(child);
            let mut inj_rng = RngStream::for_consumer(config.seed, StreamId::Injection).child(child);
            let probe_idx: Vec<usize> = subset.iter().copied().take(64).collect();
            let (probe_real, _) = data.gather(&probe_idx)?;
            let (pz, py) = latent_batch(&mut latent_rng.child(0), probe_idx.len(), latent, data.classes())?;
            let (probe_fake, _) = generator.forward(&pz, &py, &noise, &mut inj_rng.child(0))?;
            let gap_before = critic_gap(&net, &probe_real, &probe_fake)?;
            let mut touched = probe_idx.clone();
            let mut final_loss = f64::NAN;
            for _ in 0..config.n_pre {
                let (real, _, idx) = real_batch(&mut data_rng, data, subset, b)?;
                touched.extend(idx);
                let (z, y) = latent_batch(&mut latent_rng, b, latent, data.classes())?;
                let (fake, _) = generator.forward(&z, &y, &noise, &mut inj_rng)?;
                let l = loss_discriminator(&net, &real, &fake, &config.weights, &mut alpha_rng)?;
                net.step(&l.grad, config.eta_d)?;
                final_loss = l.loss;
            }
            let gap_after = critic_gap(&net, &probe_real, &probe_fake)?;
            Ok((
                net,
                PretrainSummary {
                    subset: i,
                    gap_before,
                    gap_after,
                    final_loss,
                    touched,
                },
            ))
        })
        .collect();
    let mut nets = Vec::with_capacity(subsets.len());
    let mut summaries = Vec::with_capacity(subsets.len());
    for r in results {
        let (n, s) = r?;
        nets.push(n);
        summaries.push(s);
    }
    Ok((
        DiscriminatorBank {
            arch,
            nets,
            assignment: (0..subsets.len()).collect(),
        },
        summaries,
    ))
}

/// Random streams owned by a run, one per consumer.
#[derive(Debug, Clone)]
pub struct RunRngs {
    pub data: RngStream,
    pub latent: RngStream,
    pub alpha: RngStream,
    pub injection: RngStream,
    pub dp_noise: RngStream,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            data: RngStream::for_consumer(seed, StreamId::Data),
            latent: RngStream::for_consumer(seed, StreamId::Latent),
            alpha: RngStream::for_consumer(seed, StreamId::Alpha),
            injection: RngStream::for_consumer(seed, StreamId::Injection),
            dp_noise: RngStream::for_consumer(seed, StreamId::DpNoise),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub bundle: ModelBundle,
    pub ef: EfState,
    pub ledger: RdpLedger,
    pub iteration: u64,
    pub rngs: RunRngs,
    pub subsets: Vec<Vec<usize>>,
}

/// Fresh run state. Pretrains the critics unless a bank is given.
pub fn init_run(config: &TrainConfig, data: &LabeledDataset, bank: Option<DiscriminatorBank>) -> Result<RunState> {
    config.validate()?;
    config.check_dataset(data)?;
    let subsets = partition_dataset(data.len(), config.subsets, config.seed)?;
    let bank = match bank {
        Some(b) => {
            if b.len() != config.subsets || b.arch != config.model.critic(data.image_size()) {
                return Err(Error::Config(
                    "pretrained critics do not match the configured subsets or architecture".into(),
                ));
            }
            b
        }
        None => pretrain_discriminators(config, data, &subsets)?.0,
    };
    let generator = initial_generator(config, data)?;
    let init = RngStream::for_consumer(config.seed, StreamId::Init);
    let copies = if config.per_subset_aux { config.subsets } else { 1 };
    let mut crng = init.child(INIT_CLASSIFIER);
    let mut erng = init.child(INIT_ENCODER);
    let classifiers = (0..copies)
        .map(|_| ClassifierNet::new(config.model.classifier(data.image_size(), data.classes()), &mut crng))
        .collect::<Result<Vec<_>>>()?;
    let encoders = (0..copies)
        .map(|_| EncoderNet::new(config.model.encoder(data.image_size()), &mut erng))
        .collect::<Result<Vec<_>>>()?;
    let s = data.image_size();
    Ok(RunState {
        bundle: ModelBundle {
            generator,
            bank,
            classifiers,
            encoders,
        },
        ef: EfState::new(config.ef_mode, &[2 * config.batch, 1, s, s]),
        ledger: RdpLedger::new(config.orders(), config.sigma, config.gamma())?,
        iteration: 0,
        rngs: RunRngs::new(config.seed),
        subsets,
    })
}

/// Scalars from one iteration. Inner-loop losses are from the last inner step.
#[derive(Debug, Clone, Default)]
pub struct IterationReport {
    /// Iteration count after this update.
    pub iteration: u64,
    pub subset: usize,
    pub d_loss: Option<f64>,
    pub d_wasserstein: Option<f64>,
    pub e_loss: Option<f64>,
    pub c_fake: Option<f64>,
    pub c_real: Option<f64>,
    pub g_total: f64,
    pub g_adv: f64,
    pub g_cls: f64,
    pub g_rec: f64,
    /// Norms of the raw per-source image gradients.
    pub grad_norms: [f64; 3],
    /// Converted epsilon after this update.
    pub epsilon: f64,
    /// Every dataset index read in this iteration.
    pub touched: Vec<usize>,
}

impl IterationReport {
    /// Tab-separated `key=value` record.
    pub fn log_line(&self) -> String {
        let mut s = format!("iteration={}\tsubset={}", self.iteration, self.subset);
        for (k, v) in [
            ("d_loss", self.d_loss),
            ("d_wasserstein", self.d_wasserstein),
            ("e_loss", self.e_loss),
            ("c_fake", self.c_fake),
            ("c_real", self.c_real),
        ] {
            if let Some(v) = v {
                let _ = write!(s, "\t{k}={v:.6}");
            }
        }
        let _ = write!(
            s,
            "\tg_total={:.6}\tg_adv={:.6}\tg_cls={:.6}\tg_rec={:.6}\tnorm_d={:.6}\tnorm_c={:.6}\tnorm_e={:.6}\tepsilon={:.6}",
            self.g_total,
            self.g_adv,
            self.g_cls,
            self.g_rec,
            self.grad_norms[0],
            self.grad_norms[1],
            self.grad_norms[2],
            self.epsilon
        );
        s
    }
}

/// One full iteration. On any error, including an exhausted budget, `state`
/// is left as it was.
pub fn train_iteration(state: &mut RunState, config: &TrainConfig, data: &LabeledDataset) -> Result<IterationReport> {
    let delta = config.budget.delta;
    let next = state.ledger.eps_at(state.ledger.steps() + 1, delta)?;
    if next > config.budget.epsilon {
        return Err(Error::BudgetExhausted {
            next,
            budget: config.budget.epsilon,
        });
    }
    if state.ef.shape()[0] != 2 * config.batch {
        return Err(Error::state("batch size differs from the one the run started with"));
    }
    let mut s = state.clone();
    let report = iterate(&mut s, config, data)?;
    *state = s;
    Ok(report)
}

fn iterate(s: &mut RunState, config: &TrainConfig, data: &LabeledDataset) -> Result<IterationReport> {
    let b = config.batch;
    let classes = data.classes();
    let latent = config.model.latent_dim;
    let noise = config.noise();
    let w = &config.weights;
    let RunState {
        bundle,
        ef,
        ledger,
        iteration,
        rngs,
        subsets,
    } = s;
    let j = rngs.data.index(subsets.len());
    let subset = &subsets[j];
    let aux = if config.per_subset_aux { j } else { 0 };
    let mut r = IterationReport {
        subset: j,
        ..Default::default()
    };

    for _ in 0..config.n_dis {
        let (real, _, idx) = real_batch(&mut rngs.data, data, subset, b)?;
        r.touched.extend(idx);
        let (z, y) = latent_batch(&mut rngs.latent, b, latent, classes)?;
        let (fake, _) = bundle.generator.forward(&z, &y, &noise, &mut rngs.injection)?;
        let l = loss_discriminator(&bundle.bank.nets[j], &real, &fake, w, &mut rngs.alpha)?;
        bundle.bank.nets[j].step(&l.grad, config.eta_d)?;
        r.d_loss = Some(l.loss);
        r.d_wasserstein = Some(l.wasserstein);
    }
    for _ in 0..config.n_en {
        let (real, y, idx) = real_batch(&mut rngs.data, data, subset, b)?;
        r.touched.extend(idx);
        let l = loss_reconstruction(&bundle.encoders[aux], &bundle.generator, &real, &y, &noise, &mut rngs.injection)?;
        bundle.encoders[aux].net.step(&l.grad_encoder, config.eta_e())?;
        r.e_loss = Some(l.loss);
    }
    for _ in 0..config.n_f {
        let (z, y) = latent_batch(&mut rngs.latent, b, latent, classes)?;
        let (l, _) = loss_classifier(&bundle.classifiers[aux], &bundle.generator, &z, &y, &noise, &mut rngs.injection)?;
        bundle.classifiers[aux].net.step(&l.grad_params, config.eta_c)?;
        r.c_fake = Some(l.loss);
    }
    for _ in 0..config.n_r {
        let (real, y, idx) = real_batch(&mut rngs.data, data, subset, b)?;
        r.touched.extend(idx);
        let l = cross_entropy(&bundle.classifiers[aux], &real, &y)?;
        bundle.classifiers[aux].net.step(&l.grad_params, config.eta_c)?;
        r.c_real = Some(l.loss);
    }

    let (real, real_y, idx) = real_batch(&mut rngs.data, data, subset, b)?;
    r.touched.extend(idx);
    let (z, y) = latent_batch(&mut rngs.latent, b, latent, classes)?;
    let gl = loss_generator(
        &bundle.generator,
        &bundle.bank.nets[j],
        &bundle.classifiers[aux],
        &bundle.encoders[aux],
        GeneratorBatch {
            z: &z,
            labels: &y,
            real: &real,
            real_labels: &real_y,
        },
        w,
        &noise,
        &mut rngs.injection,
    )?;
    let grads = [
        (Source::Discriminator, &gl.grads.discriminator),
        (Source::Classifier, &gl.grads.classifier),
        (Source::Encoder, &gl.grads.encoder),
    ];
    r.grad_norms = [
        gl.grads.discriminator.l2_norm(),
        gl.grads.classifier.l2_norm(),
        gl.grads.encoder.l2_norm(),
    ];
    let sanitized = sanitize_hook(&grads, ef, &config.clip, &config.dp_noise(), &mut rngs.dp_noise)?;
    let (gp, _) = bundle.generator.backward(&gl.cache, &sanitized)?;
    bundle.generator.step(&gp, config.eta_g)?;
    r.g_total = gl.total;
    r.g_adv = gl.adversarial;
    r.g_cls = gl.classifier;
    r.g_rec = gl.reconstruction;

    *ledger = ledger.step_account();
    *iteration += 1;
    r.iteration = *iteration;
    r.epsilon = ledger.to_eps_delta(config.budget.delta)?;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    /// The next update would have exceeded the privacy budget.
    BudgetExhausted,
    /// Stopped at the requested iteration before the configured total.
    Paused,
}

/// Mean pairwise L2 distance of generated samples at a fixed latent set.
pub fn diversity(generator: &GeneratorNet, config: &TrainConfig, count: usize) -> Result<f64> {
    let classes = generator.arch().classes;
    let mut rng = RngStream::for_consumer(config.seed, StreamId::Eval).child(1);
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    let src = GeneratorSource {
        generator,
        noise: config.noise(),
    };
    mean_pairwise_l2(&src.sample(&labels, &mut rng)?)
}

/// Runs iterations until the configured total, the budget gate, or
/// `stop_at` (absolute iteration), whichever comes first. Each log record
/// is passed to `log`.
pub fn run(
    state: &mut RunState,
    config: &TrainConfig,
    data: &LabeledDataset,
    stop_at: Option<u64>,
    log: &mut dyn FnMut(&str),
) -> Result<StopReason> {
    let end = stop_at.map_or(config.iterations, |s| s.min(config.iterations));
    while state.iteration < end {
        let report = match train_iteration(state, config, data) {
            Ok(r) => r,
            Err(Error::BudgetExhausted { .. }) => return Ok(StopReason::BudgetExhausted),
            Err(e) => return Err(e),
        };
        if report.iteration % config.log_every == 0 || report.iteration == config.iterations {
            let div = diversity(&state.bundle.generator, config, config.eval.diversity_samples)?;
            log(&format!("{}\tdiversity={div:.6}", report.log_line()));
        }
    }
    Ok(if state.iteration >= config.iterations {
        StopReason::Completed
    } else {
        StopReason::Paused
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub generator: GeneratorNet,
    pub ledger: RdpLedger,
    pub log: Vec<String>,
    pub stop: StopReason,
    pub state: RunState,
}

/// Full run from scratch, pretraining included.
pub fn train(config: &TrainConfig, data: &LabeledDataset) -> Result<TrainOutput> {
    let mut state = init_run(config, data, None)?;
    let mut log = Vec::new();
    let stop = run(&mut state, config, data, None, &mut |l| log.push(l.to_string()))?;
    Ok(TrainOutput {
        generator: state.bundle.generator.clone(),
        ledger: state.ledger.clone(),
        log,
        stop,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    fn small() -> (TrainConfig, LabeledDataset) {
        let cfg = TrainConfig {
            iterations: 4,
            batch: 8,
            subsets: 4,
            n_dis: 2,
            n_pre: 5,
            log_every: 2,
            ..Default::default()
        };
        let spec = SynthSpec {
            per_class: 40,
            ..SynthSpec::desk()
        };
        (cfg, synth_dataset(&spec, 1).unwrap())
    }

    #[test]
    fn partition_examples() {
        let p = partition_dataset(100, 10, 3).unwrap();
        assert!(p.iter().all(|s| s.len() == 10));
        let mut all: Vec<usize> = p.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let q = partition_dataset(101, 10, 3).unwrap();
        let mut sizes: Vec<usize> = q.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, [vec![10; 9], vec![11]].concat());
        assert_eq!(partition_dataset(101, 10, 3).unwrap(), q);
        assert!(partition_dataset(5, 10, 3).is_err());
    }

    #[test]
    fn no_pretraining_keeps_random_critics() {
        let (mut cfg, data) = small();
        cfg.n_pre = 0;
        let subsets = partition_dataset(data.len(), cfg.subsets, cfg.seed).unwrap();
        let (bank, _) = pretrain_discriminators(&cfg, &data, &subsets).unwrap();
        let seq = cfg.model.critic(8).sequential().unwrap();
        let init = RngStream::for_consumer(cfg.seed, StreamId::Init);
        for (i, net) in bank.nets.iter().enumerate() {
            let fresh = Network::new(seq.clone(), &format!("d{i}."), &mut init.child(INIT_CRITIC + i as u64)).unwrap();
            assert_eq!(net.params(), fresh.params());
        }
    }

    #[test]
    fn pretraining_reads_only_own_subset() {
        let (cfg, data) = small();
        let subsets = partition_dataset(data.len(), cfg.subsets, cfg.seed).unwrap();
        let (_, summary) = pretrain_discriminators(&cfg, &data, &subsets).unwrap();
        for s in &summary {
            assert!(s.touched.iter().all(|i| subsets[s.subset].binary_search(i).is_ok()));
        }
    }

    #[test]
    fn degenerate_loops_still_step_generator() {
        let (mut cfg, data) = small();
        cfg.n_dis = 0;
        cfg.n_en = 0;
        cfg.n_f = 0;
        cfg.n_r = 0;
        let mut st = init_run(&cfg, &data, None).unwrap();
        let before = st.bundle.generator.params().clone();
        let r = train_iteration(&mut st, &cfg, &data).unwrap();
        assert_eq!(st.ledger.steps(), 1);
        assert_ne!(st.bundle.generator.params(), &before);
        assert!(r.d_loss.is_none() && r.c_real.is_none());
    }

    #[test]
    fn iteration_is_deterministic_and_isolated() {
        let (cfg, data) = small();
        let mut a = init_run(&cfg, &data, None).unwrap();
        let mut b = init_run(&cfg, &data, None).unwrap();
        for _ in 0..3 {
            let ra = train_iteration(&mut a, &cfg, &data).unwrap();
            let rb = train_iteration(&mut b, &cfg, &data).unwrap();
            assert_eq!(ra.log_line(), rb.log_line());
            let subset = &a.subsets[ra.subset];
            assert!(ra.touched.iter().all(|i| subset.binary_search(i).is_ok()));
        }
        assert_eq!(a.bundle.generator.params(), b.bundle.generator.params());
        assert_eq!(a.ef, b.ef);
    }

    #[test]
    fn composition_over_ten_iterations() {
        let (mut cfg, data) = small();
        cfg.iterations = 10;
        cfg.n_dis = 1;
        let mut st = init_run(&cfg, &data, None).unwrap();
        run(&mut st, &cfg, &data, None, &mut |_| {}).unwrap();
        assert_eq!(st.ledger.steps(), 10);
        for (a, c) in st.ledger.eps_per_order().iter().zip(st.ledger.step_cost()) {
            assert_eq!(*a, 10.0 * c);
        }
    }

    #[test]
    fn tiny_budget_stops_before_first_update() {
        let (mut cfg, data) = small();
        cfg.budget.epsilon = 0.001;
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.stop, StopReason::BudgetExhausted);
        assert_eq!(out.ledger.steps(), 0);
        assert_eq!(out.generator.params(), initial_generator(&cfg, &data).unwrap().params());
    }

    #[test]
    fn budget_gate_stops_at_last_affordable_step() {
        let (mut cfg, data) = small();
        cfg.iterations = 100;
        cfg.sigma = 0.8;
        cfg.gamma = Some(0.5);
        cfg.n_dis = 0;
        cfg.budget.epsilon = 8.0;
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.stop, StopReason::BudgetExhausted);
        let t = out.ledger.steps();
        assert!(t > 0 && t < 100);
        assert!(out.ledger.to_eps_delta(1e-5).unwrap() <= 8.0);
        assert!(out.ledger.eps_at(t + 1, 1e-5).unwrap() > 8.0);
    }

    #[test]
    fn fixed_run_length_and_log_format() {
        let (mut cfg, data) = small();
        cfg.iterations = 5;
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.stop, StopReason::Completed);
        assert_eq!(out.ledger.steps(), 5);
        assert_eq!(out.log.len(), 3);
        for line in &out.log {
            assert!(line.split('\t').all(|kv| kv.split_once('=').is_some()));
        }
        assert!(out.log[2].starts_with("iteration=5\t"));
    }
}
