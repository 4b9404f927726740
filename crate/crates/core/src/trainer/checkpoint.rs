//! Binary checkpoint container.
//!
//! Layout: 8 magic bytes, format version (u32 LE), 32-byte config digest,
//! section count (u32 LE), then per section a u16 LE name length, the name,
//! a u64 LE payload length and the payload. A SHA-256 of everything before
//! it closes the file. Parameter and error tensors are stored as little-endian
//! f64; structured metadata is JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RunRngs, RunState, TrainConfig};
use crate::accountant::RdpLedger;
use crate::error::{Error, Result};
use crate::models::{
    ClassifierArch, ClassifierNet, DiscriminatorArch, DiscriminatorBank, EncoderArch, EncoderNet, GeneratorArch,
    GeneratorNet, ModelBundle, NoiseConfig,
};
use crate::numeric::{ParamVector, RngStream, Segment, StreamPosition, Tensor};
use crate::sanitizer::{EfMode, EfState};

const MAGIC: &[u8; 8] = b"EFDPGEN\x01";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 4;

struct Container {
    digest: [u8; 32],
    sections: BTreeMap<String, Vec<u8>>,
}

impl Container {
    fn new(digest: [u8; 32]) -> Self {
        Self {
            digest,
            sections: BTreeMap::new(),
        }
    }

    fn put(&mut self, name: impl Into<String>, payload: Vec<u8>) {
        self.sections.insert(name.into(), payload);
    }

    fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value).map_err(|e| Error::state(format!("cannot encode {name}: {e}")))?;
        self.put(name, bytes);
        Ok(())
    }

    fn put_params(&mut self, name: &str, p: &ParamVector) -> Result<()> {
        self.put_json(&format!("layout/{name}"), &p.segments())?;
        self.put(format!("params/{name}"), f64_bytes(p.data()));
        Ok(())
    }

    fn get(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::format(0, format!("missing required section `{name}`")))
    }

    fn get_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.get(name)?).map_err(|e| Error::format(0, format!("section `{name}`: {e}")))
    }

    fn get_params(&self, name: &str) -> Result<ParamVector> {
        let segments: Vec<Segment> = self.get_json(&format!("layout/{name}"))?;
        let data = read_f64s(self.get(&format!("params/{name}"))?, name)?;
        ParamVector::from_parts(segments, data).map_err(|e| Error::format(0, format!("section `{name}`: {e}")))
    }

    fn kind(&self) -> Result<String> {
        String::from_utf8(self.get("kind")?.to_vec()).map_err(|_| Error::format(0, "section `kind` is not text"))
    }

    fn expect_kind(&self, want: &str) -> Result<()> {
        let k = self.kind()?;
        if k != want {
            return Err(Error::format(0, format!("file holds a `{k}` artifact, expected `{want}`")));
        }
        Ok(())
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            let n = u16::try_from(name.len()).map_err(|_| Error::invalid("section name too long"))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::format(0, "not a checkpoint file (bad magic)"));
        }
        if bytes.len() < HEADER_LEN + 32 {
            return Err(Error::format(bytes.len() as u64, "file truncated inside the header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::format(
                8,
                format!("format version {version}, this build reads version {FORMAT_VERSION}"),
            ));
        }
        let body_end = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(Error::format(body_end as u64, "checksum mismatch: file is corrupt or truncated"));
        }
        let digest: [u8; 32] = bytes[12..44].try_into().expect("32 bytes");
        let count = u32::from_le_bytes(bytes[44..48].try_into().expect("4 bytes"));
        let mut pos = HEADER_LEN;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= body_end)
                .ok_or_else(|| Error::format(*pos as u64, "section runs past the end of the file"))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let at = pos;
            let n = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(take(&mut pos, n)?)
                .map_err(|_| Error::format(at as u64, "section name is not UTF-8"))?
                .to_string();
            let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes"));
            let len = usize::try_from(len).map_err(|_| Error::format(pos as u64, "section too large"))?;
            let payload = take(&mut pos, len)?.to_vec();
            if sections.insert(name.clone(), payload).is_some() {
                return Err(Error::format(at as u64, format!("duplicate section `{name}`")));
            }
        }
        if pos != body_end {
            return Err(Error::format(pos as u64, "unexpected bytes after the last section"));
        }
        Ok(Self { digest, sections })
    }

    fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::decode(&bytes)
    }
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f64s(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::format(0, format!("section `{what}` is not a whole number of f64 values")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct Archs {
    generator: GeneratorArch,
    critic: DiscriminatorArch,
    classifier: ClassifierArch,
    encoder: EncoderArch,
    critics: usize,
    aux_copies: usize,
}

#[derive(Serialize, Deserialize)]
struct EfMeta {
    mode: EfMode,
    shape: Vec<usize>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct LedgerMeta {
    orders: Vec<u32>,
    sigma: f64,
    gamma: f64,
    steps: u64,
}

impl LedgerMeta {
    fn of(l: &RdpLedger) -> Self {
        Self {
            orders: l.orders().to_vec(),
            sigma: l.sigma(),
            gamma: l.gamma(),
            steps: l.steps(),
        }
    }

    fn ledger(self) -> Result<RdpLedger> {
        Ok(RdpLedger::new(self.orders, self.sigma, self.gamma)?.with_steps(self.steps))
    }
}

#[derive(Serialize, Deserialize)]
struct RngMeta {
    data: StreamPosition,
    latent: StreamPosition,
    alpha: StreamPosition,
    injection: StreamPosition,
    dp_noise: StreamPosition,
}

fn check_digest(c: &Container, config: &TrainConfig) -> Result<()> {
    if c.digest != config.digest()? {
        return Err(Error::Config(
            "checkpoint was written with a different configuration".into(),
        ));
    }
    Ok(())
}

/// Saves everything needed to continue a run bit-identically.
pub fn save_run(path: &Path, state: &RunState, config: &TrainConfig) -> Result<()> {
    let b = &state.bundle;
    let mut c = Container::new(config.digest()?);
    c.put("kind", b"run".to_vec());
    c.put("config", config.to_toml()?.into_bytes());
    c.put_json(
        "arch",
        &Archs {
            generator: b.generator.arch().clone(),
            critic: b.bank.arch.clone(),
            classifier: b.classifiers[0].arch.clone(),
            encoder: b.encoders[0].arch.clone(),
            critics: b.bank.len(),
            aux_copies: b.classifiers.len(),
        },
    )?;
    c.put_params("generator", b.generator.params())?;
    for (i, n) in b.bank.nets.iter().enumerate() {
        c.put_params(&format!("critic/{i}"), n.params())?;
    }
    for (i, n) in b.classifiers.iter().enumerate() {
        c.put_params(&format!("classifier/{i}"), n.net.params())?;
    }
    for (i, n) in b.encoders.iter().enumerate() {
        c.put_params(&format!("encoder/{i}"), n.net.params())?;
    }
    c.put_json(
        "ef",
        &EfMeta {
            mode: state.ef.mode(),
            shape: state.ef.shape().to_vec(),
            step: state.ef.step(),
        },
    )?;
    let errors: Vec<f64> = state.ef.errors().iter().flat_map(|t| t.data().iter().copied()).collect();
    c.put("ef/errors", f64_bytes(&errors));
    c.put_json("ledger", &LedgerMeta::of(&state.ledger))?;
    let r = &state.rngs;
    c.put_json(
        "rng",
        &RngMeta {
            data: r.data.position(),
            latent: r.latent.position(),
            alpha: r.alpha.position(),
            injection: r.injection.position(),
            dp_noise: r.dp_noise.position(),
        },
    )?;
    c.put("iteration", state.iteration.to_le_bytes().to_vec());
    c.put_json("partition", &state.subsets)?;
    c.write(path)
}

/// Loads a run written by [`save_run`] with the same configuration.
pub fn load_run(path: &Path, config: &TrainConfig) -> Result<RunState> {
    let c = Container::read(path)?;
    c.expect_kind("run")?;
    check_digest(&c, config)?;
    let archs: Archs = c.get_json("arch")?;
    let generator = GeneratorNet::from_params(archs.generator, c.get_params("generator")?)?;
    let critics = (0..archs.critics)
        .map(|i| c.get_params(&format!("critic/{i}")))
        .collect::<Result<Vec<_>>>()?;
    let bank = DiscriminatorBank::from_params(archs.critic, critics)?;
    let classifiers = (0..archs.aux_copies)
        .map(|i| ClassifierNet::from_params(archs.classifier.clone(), c.get_params(&format!("classifier/{i}"))?))
        .collect::<Result<Vec<_>>>()?;
    let encoders = (0..archs.aux_copies)
        .map(|i| EncoderNet::from_params(archs.encoder.clone(), c.get_params(&format!("encoder/{i}"))?))
        .collect::<Result<Vec<_>>>()?;
    let meta: EfMeta = c.get_json("ef")?;
    let flat = read_f64s(c.get("ef/errors")?, "ef/errors")?;
    let per: usize = meta.shape.iter().product();
    let count = if per == 0 { 0 } else { flat.len() / per };
    if count * per != flat.len() {
        return Err(Error::format(0, "section `ef/errors` does not match the stored shape"));
    }
    let errors = flat
        .chunks(per.max(1))
        .take(count)
        .map(|c| Tensor::new(meta.shape.clone(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let ef = EfState::from_parts(meta.mode, meta.shape, errors, meta.step)?;
    let ledger = c.get_json::<LedgerMeta>("ledger")?.ledger()?;
    let rng: RngMeta = c.get_json("rng")?;
    let it = c.get("iteration")?;
    let iteration = u64::from_le_bytes(
        it.try_into()
            .map_err(|_| Error::format(0, "section `iteration` must hold 8 bytes"))?,
    );
    if ledger.steps() != iteration || ef.step() != iteration {
        return Err(Error::state(format!(
            "iteration {iteration} disagrees with ledger steps {} or feedback step {}",
            ledger.steps(),
            ef.step()
        )));
    }
    let subsets: Vec<Vec<usize>> = c.get_json("partition")?;
    if subsets.len() != bank.len() {
        return Err(Error::state("partition and critic bank differ in size"));
    }
    Ok(RunState {
        bundle: ModelBundle {
            generator,
            bank,
            classifiers,
            encoders,
        },
        ef,
        ledger,
        iteration,
        rngs: RunRngs {
            data: RngStream::restore(rng.data),
            latent: RngStream::restore(rng.latent),
            alpha: RngStream::restore(rng.alpha),
            injection: RngStream::restore(rng.injection),
            dp_noise: RngStream::restore(rng.dp_noise),
        },
        subsets,
    })
}

/// Pretrained critics and the partition they were trained on.
pub fn save_bank(path: &Path, bank: &DiscriminatorBank, subsets: &[Vec<usize>], config: &TrainConfig) -> Result<()> {
    let mut c = Container::new(config.digest()?);
    c.put("kind", b"bank".to_vec());
    c.put_json("arch/critic", &bank.arch)?;
    c.put("critics", (bank.len() as u64).to_le_bytes().to_vec());
    for (i, n) in bank.nets.iter().enumerate() {
        c.put_params(&format!("critic/{i}"), n.params())?;
    }
    c.put_json("partition", &subsets)?;
    c.write(path)
}

pub fn load_bank(path: &Path) -> Result<(DiscriminatorBank, Vec<Vec<usize>>)> {
    let c = Container::read(path)?;
    c.expect_kind("bank")?;
    let arch: DiscriminatorArch = c.get_json("arch/critic")?;
    let k = u64::from_le_bytes(
        c.get("critics")?
            .try_into()
            .map_err(|_| Error::format(0, "section `critics` must hold 8 bytes"))?,
    ) as usize;
    let nets = (0..k)
        .map(|i| c.get_params(&format!("critic/{i}")))
        .collect::<Result<Vec<_>>>()?;
    let bank = DiscriminatorBank::from_params(arch, nets)?;
    Ok((bank, c.get_json("partition")?))
}

/// What the public generator file carries.
#[derive(Debug, Clone)]
pub struct ReleasedGenerator {
    pub generator: GeneratorNet,
    pub ledger: RdpLedger,
    pub delta: f64,
    pub epsilon: f64,
    /// Injection noise used when sampling.
    pub noise: NoiseConfig,
}

#[derive(Serialize, Deserialize)]
struct Privacy {
    epsilon: f64,
    delta: f64,
    steps: u64,
}

/// Release artifact: generator parameters and the privacy ledger only.
pub fn save_generator(path: &Path, generator: &GeneratorNet, ledger: &RdpLedger, config: &TrainConfig) -> Result<()> {
    let mut c = Container::new(config.digest()?);
    c.put("kind", b"generator".to_vec());
    c.put_json("arch/generator", generator.arch())?;
    c.put_params("generator", generator.params())?;
    c.put_json("ledger", &LedgerMeta::of(ledger))?;
    let delta = config.budget.delta;
    c.put_json(
        "privacy",
        &Privacy {
            epsilon: ledger.to_eps_delta(delta)?,
            delta,
            steps: ledger.steps(),
        },
    )?;
    c.put_json("sampling", &config.noise())?;
    c.write(path)
}

pub fn load_generator(path: &Path) -> Result<ReleasedGenerator> {
    let c = Container::read(path)?;
    c.expect_kind("generator")?;
    let arch: GeneratorArch = c.get_json("arch/generator")?;
    let generator = GeneratorNet::from_params(arch, c.get_params("generator")?)?;
    let ledger = c.get_json::<LedgerMeta>("ledger")?.ledger()?;
    let p: Privacy = c.get_json("privacy")?;
    let noise: NoiseConfig = c.get_json("sampling")?;
    Ok(ReleasedGenerator {
        generator,
        ledger,
        delta: p.delta,
        epsilon: p.epsilon,
        noise: NoiseConfig::new(noise.sigma_noise)?,
    })
}

/// Section names of a checkpoint file, for inspection.
pub fn section_names(path: &Path) -> Result<Vec<String>> {
    Ok(Container::read(path)?.sections.into_keys().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::trainer::{init_run, train_iteration};

    fn setup() -> (TrainConfig, crate::data::LabeledDataset) {
        let cfg = TrainConfig {
            iterations: 6,
            batch: 8,
            subsets: 4,
            n_dis: 1,
            n_pre: 3,
            ..Default::default()
        };
        let spec = SynthSpec {
            per_class: 40,
            ..SynthSpec::desk()
        };
        (cfg, synth_dataset(&spec, 2).unwrap())
    }

    #[test]
    fn resume_is_bit_identical() {
        let (cfg, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let mut a = init_run(&cfg, &data, None).unwrap();
        for _ in 0..3 {
            train_iteration(&mut a, &cfg, &data).unwrap();
        }
        save_run(&path, &a, &cfg).unwrap();
        let mut b = load_run(&path, &cfg).unwrap();
        for _ in 0..3 {
            train_iteration(&mut a, &cfg, &data).unwrap();
            train_iteration(&mut b, &cfg, &data).unwrap();
        }
        assert_eq!(a.bundle.generator.params(), b.bundle.generator.params());
        assert_eq!(a.ef, b.ef);
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn corruption_and_missing_sections_are_rejected() {
        let (cfg, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let st = init_run(&cfg, &data, None).unwrap();
        save_run(&path, &st, &cfg).unwrap();
        let good = fs::read(&path).unwrap();
        for at in [0usize, 9, 20, 50, good.len() / 2, good.len() - 1] {
            let mut bad = good.clone();
            bad[at] ^= 0x40;
            assert!(matches!(Container::decode(&bad), Err(Error::Format { .. })), "byte {at}");
        }
        assert!(matches!(Container::decode(&good[..good.len() - 7]), Err(Error::Format { .. })));

        let mut c = Container::decode(&good).unwrap();
        c.sections.remove("ef");
        c.write(&path).unwrap();
        match load_run(&path, &cfg) {
            Err(Error::Format { message, .. }) => assert!(message.contains("`ef`")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn other_config_is_rejected() {
        let (cfg, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_run(&path, &init_run(&cfg, &data, None).unwrap(), &cfg).unwrap();
        let other = TrainConfig { sigma: 3.0, ..cfg };
        assert!(matches!(load_run(&path, &other), Err(Error::Config(_))));
    }

    #[test]
    fn generator_file_round_trip() {
        let (cfg, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        let st = init_run(&cfg, &data, None).unwrap();
        save_generator(&path, &st.bundle.generator, &st.ledger, &cfg).unwrap();
        let r = load_generator(&path).unwrap();
        assert_eq!(r.generator.params(), st.bundle.generator.params());
        assert!(section_names(&path).unwrap().iter().all(|n| !n.contains("critic") && !n.contains("classifier")));
        assert!(matches!(load_run(&path, &cfg), Err(Error::Format { .. })));
    }
}
