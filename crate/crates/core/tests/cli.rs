use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use efdpgen::accountant::{default_orders, steps_for_budget, DpBudget, RdpLedger};
use efdpgen::data::read_idx_labels;
use efdpgen::trainer::{load_generator, load_run, section_names, TrainConfig};

const TOY: &str = r#"
iterations = 6
batch = 8
subsets = 4
n_dis = 1
n_pre = 4
log_every = 2

[model]
stage_channels = [4, 4]
base_channels = 4
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efdpgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--per-class", "40", "--test-per-class", "40", "--out", s(&root.join("data"))]);
        let path = root.join("run.toml");
        fs::write(&path, config).unwrap();
        Self {
            _dir: dir,
            root,
            config: path,
        }
    }

    fn data(&self, split: &str) -> [String; 4] {
        [
            "--dataset-images".into(),
            self.root.join(format!("data/{split}-images.idx")).display().to_string(),
            "--dataset-labels".into(),
            self.root.join(format!("data/{split}-labels.idx")).display().to_string(),
        ]
    }

    fn train(&self, out: &str, extra: &[&str]) -> (PathBuf, String) {
        let out = self.root.join(out);
        let d = self.data("train");
        let mut args = vec!["train", "--config", s(&self.config), "--out", s(&out)];
        args.extend(d.iter().map(String::as_str));
        args.extend_from_slice(extra);
        let text = ok(&args);
        (out, text)
    }
}

#[test]
fn pretrain_is_byte_reproducible() {
    let f = Fixture::new(TOY);
    let d = f.data("train");
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = f.root.join(name);
        let mut args = vec!["pretrain", "--config", s(&f.config), "--seed", "7", "--out", s(&out)];
        args.extend(d.iter().map(String::as_str));
        let text = ok(&args);
        assert!(text.starts_with("seed=7\n"));
        assert_eq!(text.lines().filter(|l| l.starts_with("subset=")).count(), 4);
        files.push(fs::read(out.join("bank.ckpt")).unwrap());
        assert!(TrainConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).is_ok());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn missing_dataset_names_the_path() {
    let f = Fixture::new(TOY);
    let missing = f.root.join("nope-images.idx");
    let labels = f.root.join("data/train-labels.idx");
    let out = bin(&[
        "pretrain",
        "--dataset-images",
        s(&missing),
        "--dataset-labels",
        s(&labels),
        "--out",
        s(&f.root.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope-images.idx"));
}

#[test]
fn config_errors_use_their_own_exit_code() {
    let f = Fixture::new("sigmaa = 2.0\n");
    let d = f.data("train");
    let mut args = vec!["train", "--config", s(&f.config), "--out", "/tmp/unused-efdpgen"];
    args.extend(d.iter().map(String::as_str));
    let out = bin(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigmaa"));
}

#[test]
fn train_reports_final_budget_and_splits_outputs() {
    let f = Fixture::new(TOY);
    let (out, text) = f.train("run", &[]);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("final\titerations=6\tepsilon="), "{last}");
    assert!(last.contains("delta=0.00001") && last.ends_with("stop=completed"), "{last}");
    let g = load_generator(&out.join("public/generator.bin")).unwrap();
    assert_eq!(g.ledger.steps(), 6);
    assert!(out.join("private/run.ckpt").exists());
    assert_eq!(fs::read_to_string(out.join("private/metrics.log")).unwrap().lines().count(), 3);
}

#[test]
fn tiny_budget_stops_before_the_first_update() {
    let f = Fixture::new(&format!("{TOY}\n[budget]\nepsilon = 0.001\ndelta = 1e-5\n"));
    let (out, text) = f.train("run", &[]);
    assert!(text.lines().last().unwrap().contains("iterations=0\t"), "{text}");
    assert!(text.contains("stop=budget_exhausted"));
    assert_eq!(load_generator(&out.join("public/generator.bin")).unwrap().ledger.steps(), 0);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = Fixture::new(TOY);
    let (full, _) = f.train("full", &[]);
    let (part, text) = f.train("part", &["--max-iterations", "3"]);
    assert!(text.contains("iterations=3\t") && text.contains("stop=paused"));
    let ckpt = part.join("private/run.ckpt");
    let (resumed, _) = f.train("part", &["--resume", s(&ckpt)]);
    assert_eq!(
        fs::read(full.join("public/generator.bin")).unwrap(),
        fs::read(resumed.join("public/generator.bin")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("private/metrics.log")).unwrap(),
        fs::read(resumed.join("private/metrics.log")).unwrap()
    );
    let cfg = TrainConfig::from_toml(TOY).unwrap();
    assert_eq!(load_run(&ckpt, &cfg).unwrap().iteration, 6);
}

#[test]
fn pretrained_bank_can_be_reused() {
    let f = Fixture::new(TOY);
    let d = f.data("train");
    let bank_dir = f.root.join("bank");
    let mut args = vec!["pretrain", "--config", s(&f.config), "--out", s(&bank_dir)];
    args.extend(d.iter().map(String::as_str));
    ok(&args);
    let (a, _) = f.train("a", &["--bank", s(&bank_dir.join("bank.ckpt"))]);
    let (b, _) = f.train("b", &[]);
    assert_eq!(
        fs::read(a.join("public/generator.bin")).unwrap(),
        fs::read(b.join("public/generator.bin")).unwrap()
    );
}

#[test]
fn public_directory_holds_only_generator_state() {
    let f = Fixture::new(TOY);
    let (out, _) = f.train("run", &[]);
    let cfg = TrainConfig::from_toml(TOY).unwrap();
    let state = load_run(&out.join("private/run.ckpt"), &cfg).unwrap();
    let mut private: Vec<Vec<f64>> = state.bundle.bank.nets.iter().map(|n| n.params().data().to_vec()).collect();
    private.extend(state.bundle.classifiers.iter().map(|c| c.net.params().data().to_vec()));
    private.extend(state.bundle.encoders.iter().map(|e| e.net.params().data().to_vec()));
    private.extend(state.ef.errors().iter().map(|t| t.data().to_vec()));

    let entries: Vec<_> = fs::read_dir(out.join("public")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    for path in entries {
        for name in section_names(&path).unwrap() {
            for banned in ["critic", "classifier", "encoder", "ef", "rng", "partition"] {
                assert!(!name.contains(banned), "section {name} in {}", path.display());
            }
        }
        let bytes = fs::read(&path).unwrap();
        for p in &private {
            let probe: Vec<u8> = p.iter().take(4).flat_map(|v| v.to_le_bytes()).collect();
            assert!(!bytes.windows(probe.len()).any(|w| w == probe.as_slice()));
        }
    }
}

#[test]
fn generate_is_seeded_with_uniform_labels() {
    let f = Fixture::new(TOY);
    let (out, _) = f.train("run", &[]);
    let g = out.join("public/generator.bin");
    let a = f.root.join("ga");
    let b = f.root.join("gb");
    ok(&["generate", "--generator", s(&g), "--count", "100", "--seed", "4", "--out", s(&a)]);
    ok(&["generate", "--generator", s(&g), "--count", "100", "--seed", "4", "--out", s(&b)]);
    for file in ["images.idx", "labels.idx"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
    }
    let labels = read_idx_labels(&a.join("labels.idx")).unwrap();
    let ones = labels.iter().filter(|&&y| y == 1).count();
    // 99% interval of Binomial(100, 0.5)
    assert!((37..=63).contains(&ones), "{ones}");

    let e = f.root.join("ge");
    ok(&["generate", "--generator", s(&g), "--count", "0", "--out", s(&e)]);
    assert!(read_idx_labels(&e.join("labels.idx")).unwrap().is_empty());
    assert_eq!(efdpgen::data::read_idx_images(&e.join("images.idx")).unwrap().len(), 0);
}

#[test]
fn generate_rejects_run_checkpoints() {
    let f = Fixture::new(TOY);
    let (out, _) = f.train("run", &[]);
    let r = bin(&[
        "generate",
        "--generator",
        s(&out.join("private/run.ckpt")),
        "--count",
        "3",
        "--out",
        s(&f.root.join("g")),
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn eval_real_against_real() {
    let f = Fixture::new(TOY);
    let d = f.data("train");
    let t = f.data("test");
    let report = f.root.join("report.json");
    let mut args = vec!["eval", "--images", &t[1], "--labels", &t[3], "--out", s(&report)];
    args.extend(d.iter().map(String::as_str));
    let text = ok(&args);
    let line = text.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let fd = v["fd"].as_f64().unwrap();
    let score = v["score"].as_f64().unwrap();
    assert!(fd > 0.0 && fd < 2.0, "{line}");
    assert!((1.0..=2.0).contains(&score), "{line}");
    assert!(line.starts_with("eval\tfd="));
}

#[test]
fn account_wraps_the_library() {
    let text = ok(&["account", "--sigma", "1", "--gamma", "0.1", "--steps", "100", "--delta", "1e-5"]);
    let eps = RdpLedger::new(default_orders(), 1.0, 0.1)
        .unwrap()
        .with_steps(100)
        .to_eps_delta(1e-5)
        .unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.ends_with(&format!("epsilon={eps:.9}")), "{last}");
    assert_eq!(text.lines().count(), default_orders().len() + 2);

    let text = ok(&["account", "--sigma", "2", "--gamma", "0.1", "--target-epsilon", "10", "--json"]);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    let steps = steps_for_budget(&DpBudget::new(10.0, 1e-5).unwrap(), 2.0, 0.1, &default_orders()).unwrap();
    assert_eq!(v["steps"].as_u64().unwrap(), steps);
}
