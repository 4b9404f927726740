//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or file error,
//! 4 numeric failure, 1 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::accountant::{steps_for_budget, DpBudget, RdpLedger};
use crate::data::{
    load_dataset, synth_dataset, write_idx_images, write_idx_labels, LabeledDataset, SynthSpec,
};
use crate::error::{Error, Result};
use crate::trainer::{
    evaluate, feature_extractor, init_run, load_bank, load_generator, load_run, pretrain_discriminators, run,
    sample_generator, save_bank, save_generator, save_run, StopReason, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "efdpgen", version, about = "Differentially private image generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain one critic per data subset and write the bank.
    Pretrain(PretrainArgs),
    /// Train the generator under the privacy budget.
    Train(TrainArgs),
    /// Sample labelled images from a released generator.
    Generate(GenerateArgs),
    /// Compare a generator or an image set with real data.
    Eval(EvalArgs),
    /// Privacy cost of a configuration, or the steps a budget allows.
    Account(AccountArgs),
    /// Write the built-in synthetic dataset as IDX files.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used for absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset_images: PathBuf,
    #[arg(long)]
    pub dataset_labels: PathBuf,
    /// Class count; the largest label plus one when absent.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory; release artifacts go to `public/`, the rest to `private/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained bank; critics are pretrained inline when absent.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Run checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Pause after this many total iterations.
    #[arg(long)]
    pub max_iterations: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Released generator file.
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `images.idx` and `labels.idx`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Real reference set; also trains the feature extractor.
    #[command(flatten)]
    pub data: DataArgs,
    /// Held-out real set for downstream accuracy; the reference set when absent.
    #[arg(long, requires = "test_labels")]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    pub test_labels: Option<PathBuf>,
    /// Generator to sample as many images as the reference set holds.
    #[arg(long, conflicts_with_all = ["images", "labels"])]
    pub generator: Option<PathBuf>,
    /// Candidate image set instead of a generator.
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AccountArgs {
    /// Read sigma, gamma, iterations, budget and orders from a run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Report the largest step count whose epsilon stays within this target.
    #[arg(long)]
    pub target_epsilon: Option<f64>,
    /// Print one JSON object instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Per-class size of the held-out test split.
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. } | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                context: p.display().to_string(),
                source: e,
            })?;
            TrainConfig::from_toml(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(d: &DataArgs) -> Result<LabeledDataset> {
    load_dataset(&d.dataset_images, &d.dataset_labels, d.classes)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        context: p.display().to_string(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::Io {
        context: p.display().to_string(),
        source: e,
    })
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::Io {
        context: "stdout".into(),
        source: e,
    })
}

pub fn run_cli(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain(a, out),
        Command::Train(a) => train(a, out),
        Command::Generate(a) => generate(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Account(a) => account(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let data = load_data(&a.data)?;
    cfg.check_dataset(&data)?;
    emit(out, &format!("seed={}", cfg.seed))?;
    let subsets = crate::trainer::partition_dataset(data.len(), cfg.subsets, cfg.seed)?;
    let (bank, summary) = pretrain_discriminators(&cfg, &data, &subsets)?;
    for s in &summary {
        emit(
            out,
            &format!(
                "subset={}\tgap_before={:.6}\tgap_after={:.6}\tloss={:.6}",
                s.subset, s.gap_before, s.gap_after, s.final_loss
            ),
        )?;
    }
    create_dir(&a.out)?;
    save_bank(&a.out.join("bank.ckpt"), &bank, &subsets, &cfg)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml()?)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let data = load_data(&a.data)?;
    cfg.check_dataset(&data)?;
    emit(out, &format!("seed={}", cfg.seed))?;
    let public = a.out.join("public");
    let private = a.out.join("private");
    create_dir(&public)?;
    create_dir(&private)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml()?)?;

    let mut state = match (&a.resume, &a.bank) {
        (Some(p), _) => load_run(p, &cfg)?,
        (None, Some(p)) => {
            let (bank, subsets) = load_bank(p)?;
            let mut st = init_run(&cfg, &data, Some(bank))?;
            if subsets != st.subsets {
                return Err(Error::Config("bank was pretrained on a different partition".into()));
            }
            st.subsets = subsets;
            st
        }
        (None, None) => init_run(&cfg, &data, None)?,
    };
    let log_path = private.join("metrics.log");
    let mut log = String::new();
    if a.resume.is_some() {
        log = fs::read_to_string(&log_path).unwrap_or_default();
    }
    let mut lines = Vec::new();
    let stop = run(&mut state, &cfg, &data, a.max_iterations, &mut |l| lines.push(l.to_string()))?;
    for l in &lines {
        emit(out, l)?;
        log.push_str(l);
        log.push('\n');
    }
    write_text(&log_path, &log)?;
    save_run(&private.join("run.ckpt"), &state, &cfg)?;
    save_generator(&public.join("generator.bin"), &state.bundle.generator, &state.ledger, &cfg)?;
    let epsilon = state.ledger.to_eps_delta(cfg.budget.delta)?;
    let stop = match stop {
        StopReason::Completed => "completed",
        StopReason::BudgetExhausted => "budget_exhausted",
        StopReason::Paused => "paused",
    };
    emit(
        out,
        &format!(
            "final\titerations={}\tepsilon={epsilon:.6}\tdelta={}\tstop={stop}",
            state.iteration, cfg.budget.delta
        ),
    )
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let g = load_generator(&a.generator)?;
    emit(out, &format!("seed={}", a.seed))?;
    let set = sample_generator(&g.generator, g.noise, a.count, a.seed)?;
    create_dir(&a.out)?;
    write_idx_images(&a.out.join("images.idx"), set.images())?;
    write_idx_labels(&a.out.join("labels.idx"), set.labels())?;
    let hist = set.class_histogram();
    emit(
        out,
        &format!(
            "count={}\tclasses={}\thistogram={hist:?}\tepsilon={:.6}\tdelta={}",
            a.count,
            set.classes(),
            g.epsilon,
            g.delta
        ),
    )
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.common)?;
    emit(out, &format!("seed={}", cfg.seed))?;
    let reference = load_data(&a.data)?;
    let test = match (&a.test_images, &a.test_labels) {
        (Some(i), Some(l)) => load_dataset(i, l, Some(reference.classes()))?,
        _ => reference.clone(),
    };
    let candidate = match (&a.generator, &a.images, &a.labels) {
        (Some(g), _, _) => {
            let g = load_generator(g)?;
            sample_generator(&g.generator, g.noise, reference.len(), cfg.seed)?
        }
        (None, Some(i), Some(l)) => load_dataset(i, l, Some(reference.classes()))?,
        _ => return Err(Error::Config("eval needs --generator or --images with --labels".into())),
    };
    let fx = feature_extractor(&cfg, &reference)?;
    let report = evaluate(&cfg, &fx, &reference, &candidate, &test, cfg.seed)?;
    if let Some(p) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Numeric(e.to_string()))?;
        write_text(p, &json)?;
    }
    emit(out, &format!("eval\t{}", report.log_line()))
}

fn account(a: AccountArgs, out: &mut dyn Write) -> Result<()> {
    let base = match &a.config {
        Some(p) => load_config(&Common {
            config: Some(p.clone()),
            seed: None,
        })?,
        None => TrainConfig::default(),
    };
    let sigma = a.sigma.unwrap_or(base.sigma);
    let gamma = a.gamma.unwrap_or(base.gamma());
    let delta = a.delta.unwrap_or(base.budget.delta);
    let orders = base.orders();
    if let Some(target) = a.target_epsilon {
        let budget = DpBudget::new(target, delta)?;
        let steps = steps_for_budget(&budget, sigma, gamma, &orders)?;
        let line = if a.json {
            serde_json::json!({"sigma": sigma, "gamma": gamma, "delta": delta, "target_epsilon": target, "steps": steps})
                .to_string()
        } else {
            format!("sigma={sigma}\tgamma={gamma}\tdelta={delta}\ttarget_epsilon={target}\tsteps={steps}")
        };
        return emit(out, &line);
    }
    let steps = a.steps.unwrap_or(base.iterations);
    let ledger = RdpLedger::new(orders, sigma, gamma)?.with_steps(steps);
    let epsilon = ledger.to_eps_delta(delta)?;
    if a.json {
        let rdp: Vec<_> = ledger
            .orders()
            .iter()
            .zip(ledger.eps_per_order())
            .map(|(o, e)| serde_json::json!({"order": o, "rdp": e}))
            .collect();
        let v = serde_json::json!({
            "sigma": sigma, "gamma": gamma, "steps": steps, "delta": delta,
            "epsilon": epsilon, "rdp": rdp,
        });
        return emit(out, &v.to_string());
    }
    emit(out, "order\trdp")?;
    for (o, e) in ledger.orders().iter().zip(ledger.eps_per_order()) {
        emit(out, &format!("{o}\t{e:.9}"))?;
    }
    emit(
        out,
        &format!("sigma={sigma}\tgamma={gamma}\tsteps={steps}\tdelta={delta}\tepsilon={epsilon:.9}"),
    )
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        per_class: a.per_class + a.test_per_class,
        size: a.size,
        ..SynthSpec::desk()
    };
    let all = synth_dataset(&spec, a.seed)?;
    let (train, test) = all.split(a.classes * a.per_class, a.seed)?;
    create_dir(&a.out)?;
    for (name, set) in [("train", &train), ("test", &test)] {
        write_idx_images(&a.out.join(format!("{name}-images.idx")), set.images())?;
        write_idx_labels(&a.out.join(format!("{name}-labels.idx")), set.labels())?;
    }
    emit(
        out,
        &format!("seed={}\ttrain={}\ttest={}", a.seed, train.len(), test.len()),
    )
}
