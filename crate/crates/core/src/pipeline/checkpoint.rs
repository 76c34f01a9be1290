//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic[8] version:u32 count:u32
//! count × { name_len:u32 name[name_len] dtype:u8 ndim:u32 dims:u64[ndim] payload }
//! sha256[32] over everything before it
//! ```
//!
//! `dtype` 1 is `f64`, 2 is `u64`, 3 is raw bytes (`ndim = 1`). Floats are
//! stored as their IEEE bit patterns, so save→load→save is byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{LossState, Targets};
use crate::model::{BatchNorm, LayerQuantizers, Model, ModelSpec};
use crate::optim::{LrPhase, LrPolicy, RAdam};
use crate::quantizer::{FakeQuantizer, NoiseMode};

use super::config::RunConfig;

pub const MAGIC: [u8; 8] = *b"NQCKPT\r\n";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum SectionData {
    F64 { dims: Vec<u64>, values: Vec<f64> },
    U64 { dims: Vec<u64>, values: Vec<u64> },
    Bytes(Vec<u8>),
}

impl SectionData {
    fn code(&self) -> u8 {
        match self {
            SectionData::F64 { .. } => 1,
            SectionData::U64 { .. } => 2,
            SectionData::Bytes(_) => 3,
        }
    }

    pub fn f64s(values: Vec<f64>) -> Self {
        SectionData::F64 {
            dims: vec![values.len() as u64],
            values,
        }
    }

    pub fn u64s(values: Vec<u64>) -> Self {
        SectionData::U64 {
            dims: vec![values.len() as u64],
            values,
        }
    }

    pub fn tensor(t: &Tensor<f64>) -> Self {
        SectionData::F64 {
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            values: t.data().to_vec(),
        }
    }
}

/// Ordered named sections; names are unique.
pub type Sections = BTreeMap<String, SectionData>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes sections in name order and appends the digest.
pub fn encode_sections(sections: &Sections) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, sections.len() as u32);
    for (name, data) in sections {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(data.code());
        match data {
            SectionData::F64 { dims, values } => {
                put_u32(&mut out, dims.len() as u32);
                dims.iter().for_each(|&d| put_u64(&mut out, d));
                values.iter().for_each(|v| put_u64(&mut out, v.to_bits()));
            }
            SectionData::U64 { dims, values } => {
                put_u32(&mut out, dims.len() as u32);
                dims.iter().for_each(|&d| put_u64(&mut out, d));
                values.iter().for_each(|&v| put_u64(&mut out, v));
            }
            SectionData::Bytes(b) => {
                put_u32(&mut out, 1);
                put_u64(&mut out, b.len() as u64);
                out.extend_from_slice(b);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            detail: format!("truncated {what}: need {n} bytes, {} remain", self.buf.len() - self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a whole container; nothing is returned on any error.
pub fn decode_sections(buf: &[u8]) -> Result<Sections> {
    if buf.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(Error::Format {
            offset: buf.len() as u64,
            detail: "file too short for a checkpoint".into(),
        });
    }
    if buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic bytes".into(),
        });
    }
    let body_len = buf.len() - DIGEST_LEN;
    let mut c = Cursor { buf: &buf[..body_len], pos: MAGIC.len() };
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    if Sha256::digest(&buf[..body_len]).as_slice() != &buf[body_len..] {
        return Err(Error::Checkpoint("digest mismatch: file is corrupt".into()));
    }
    let count = c.u32("section count")?;
    let mut out = Sections::new();
    for _ in 0..count {
        let start = c.pos;
        let name_len = c.u32("section name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "section name")?)
            .map_err(|_| Error::Format {
                offset: start as u64,
                detail: "section name is not UTF-8".into(),
            })?
            .to_string();
        let code = c.u8("dtype")?;
        let ndim = c.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            dims.push(c.u64("dimension")?);
        }
        let numel = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                detail: format!("section {name}: dimension product overflows"),
            })?;
        let data = match code {
            1 | 2 => {
                let raw = c.take(numel.checked_mul(8).unwrap_or(usize::MAX), &format!("section {name} payload"))?;
                let words = raw.chunks_exact(8).map(|w| u64::from_le_bytes(w.try_into().expect("8 bytes")));
                if code == 1 {
                    SectionData::F64 {
                        dims,
                        values: words.map(f64::from_bits).collect(),
                    }
                } else {
                    SectionData::U64 {
                        dims,
                        values: words.collect(),
                    }
                }
            }
            3 if ndim == 1 => SectionData::Bytes(c.take(numel, &format!("section {name} payload"))?.to_vec()),
            _ => {
                return Err(Error::Format {
                    offset: start as u64,
                    detail: format!("section {name}: unknown dtype {code} with {ndim} dims"),
                })
            }
        };
        if out.insert(name.clone(), data).is_some() {
            return Err(Error::Format {
                offset: start as u64,
                detail: format!("duplicate section {name}"),
            });
        }
    }
    if c.pos != body_len {
        return Err(Error::Format {
            offset: c.pos as u64,
            detail: format!("{} unexpected bytes after the last section", body_len - c.pos),
        });
    }
    Ok(out)
}

/// Which pipeline stage wrote a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Ptq,
    Qat,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Ptq => "ptq",
            Stage::Qat => "qat",
        }
    }
}

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Loop position and best-so-far bookkeeping of a training session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCounters {
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub global_step: u64,
    /// Sticky: set by the first audit within target.
    pub reached: bool,
    /// Validation accuracy at the first audit within target (NaN before).
    pub first_reached_accuracy: f64,
    /// Best validation accuracy among audits within target (NaN before).
    pub best_accuracy: f64,
    pub best_epoch: u64,
}

impl Default for SessionCounters {
    fn default() -> Self {
        Self {
            epoch: 0,
            batch_in_epoch: 0,
            global_step: 0,
            reached: false,
            first_reached_accuracy: f64::NAN,
            best_accuracy: f64::NAN,
            best_epoch: 0,
        }
    }
}

/// Optimizer, schedule and RNG state needed to continue training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub optimizer: RAdam<f64>,
    pub loss_state: LossState<f64>,
    pub lr: LrPolicy<f64>,
    pub rng: RngState,
    pub counters: SessionCounters,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model<f64>,
    pub config: Option<RunConfig>,
    pub training: Option<TrainingState>,
    /// Free-form JSON (config hash, accuracies, metrics snapshot); stored verbatim.
    pub metadata: String,
}

fn noise_code(m: NoiseMode) -> u64 {
    NoiseMode::ALL.iter().position(|&x| x == m).expect("listed mode") as u64
}

fn put_quantizer(s: &mut Sections, prefix: &str, q: &FakeQuantizer<f64>) {
    s.insert(format!("{prefix}/raw"), SectionData::f64s(q.raw_params().to_vec()));
    s.insert(
        format!("{prefix}/flags"),
        SectionData::u64s(vec![
            q.is_initialized() as u64,
            q.lower_fixed() as u64,
            noise_code(q.noise_mode()),
        ]),
    );
}

impl Checkpoint {
    pub fn to_sections(&self) -> Result<Sections> {
        let mut s = Sections::new();
        s.insert("stage".into(), SectionData::Bytes(self.stage.as_str().as_bytes().to_vec()));
        s.insert("meta".into(), SectionData::Bytes(self.metadata.as_bytes().to_vec()));
        s.insert("model/spec".into(), SectionData::Bytes(serde_json::to_vec(&self.model.spec)?));
        for (i, l) in self.model.layers.iter().enumerate() {
            s.insert(format!("layer{i}/weights"), SectionData::tensor(&l.weights));
            if let Some(b) = &l.bias {
                s.insert(format!("layer{i}/bias"), SectionData::tensor(b));
            }
            if let Some(bn) = &l.norm {
                s.insert(format!("layer{i}/bn/gamma"), SectionData::tensor(&bn.gamma));
                s.insert(format!("layer{i}/bn/beta"), SectionData::tensor(&bn.beta));
                s.insert(format!("layer{i}/bn/running_mean"), SectionData::f64s(bn.running_mean.clone()));
                s.insert(format!("layer{i}/bn/running_var"), SectionData::f64s(bn.running_var.clone()));
                s.insert(format!("layer{i}/bn/hyper"), SectionData::f64s(vec![bn.momentum, bn.eps]));
                s.insert(format!("layer{i}/bn/frozen"), SectionData::u64s(vec![bn.frozen as u64]));
            }
            if let Some(q) = &l.quantizers {
                put_quantizer(&mut s, &format!("layer{i}/wq"), &q.weight);
                put_quantizer(&mut s, &format!("layer{i}/aq"), &q.activation);
            }
        }
        if let Some(cfg) = &self.config {
            s.insert("config".into(), SectionData::Bytes(serde_json::to_vec(cfg)?));
        }
        if let Some(t) = &self.training {
            let o = &t.optimizer;
            s.insert("optim/hyper".into(), SectionData::f64s(vec![o.beta1, o.beta2, o.eps]));
            s.insert(
                "optim/step".into(),
                SectionData::u64s(vec![o.step_count(), o.first_moments().len() as u64]),
            );
            for (j, (m, v)) in o.first_moments().iter().zip(o.second_moments()).enumerate() {
                s.insert(format!("optim/m/{j:04}"), SectionData::f64s(m.clone()));
                s.insert(format!("optim/v/{j:04}"), SectionData::f64s(v.clone()));
            }
            let ls = &t.loss_state;
            s.insert(
                "loss_state".into(),
                SectionData::f64s(vec![
                    ls.t_q,
                    ls.t_r,
                    ls.c_r,
                    ls.c_r_sum,
                    ls.targets.weight_bits,
                    ls.targets.activation_bits,
                    ls.t_q_offset,
                ]),
            );
            s.insert("loss_state/step".into(), SectionData::u64s(vec![ls.step]));
            s.insert(
                "lr_policy".into(),
                SectionData::f64s(vec![t.lr.lambda0, t.lr.alpha, t.lr.lambda]),
            );
            s.insert(
                "lr_policy/phase".into(),
                SectionData::u64s(vec![(t.lr.phase == LrPhase::Annealing) as u64]),
            );
            s.insert("rng/seed".into(), SectionData::Bytes(t.rng.seed.to_vec()));
            s.insert(
                "rng/position".into(),
                SectionData::u64s(vec![t.rng.stream, t.rng.word_pos as u64, (t.rng.word_pos >> 64) as u64]),
            );
            let c = &t.counters;
            s.insert(
                "session".into(),
                SectionData::u64s(vec![c.epoch, c.batch_in_epoch, c.global_step, c.reached as u64, c.best_epoch]),
            );
            s.insert(
                "session/accuracy".into(),
                SectionData::f64s(vec![c.first_reached_accuracy, c.best_accuracy]),
            );
        }
        Ok(s)
    }

    pub fn from_sections(s: &Sections) -> Result<Self> {
        let r = SectionReader(s);
        let stage = match std::str::from_utf8(r.bytes("stage")?) {
            Ok("teacher") => Stage::Teacher,
            Ok("ptq") => Stage::Ptq,
            Ok("qat") => Stage::Qat,
            _ => return Err(Error::Checkpoint("unknown stage".into())),
        };
        let metadata = String::from_utf8(r.bytes("meta")?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let spec: ModelSpec = serde_json::from_slice(r.bytes("model/spec")?)?;
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let weights = r.tensor(&format!("layer{i}/weights"))?;
            let bias = r.optional_tensor(&format!("layer{i}/bias"))?;
            let norm = if ls.batchnorm {
                let hyper = r.f64s(&format!("layer{i}/bn/hyper"), Some(2))?;
                Some(BatchNorm {
                    gamma: r.tensor(&format!("layer{i}/bn/gamma"))?,
                    beta: r.tensor(&format!("layer{i}/bn/beta"))?,
                    running_mean: r.f64s(&format!("layer{i}/bn/running_mean"), None)?.to_vec(),
                    running_var: r.f64s(&format!("layer{i}/bn/running_var"), None)?.to_vec(),
                    momentum: hyper[0],
                    eps: hyper[1],
                    frozen: r.u64s(&format!("layer{i}/bn/frozen"), Some(1))?[0] != 0,
                })
            } else {
                None
            };
            let quantizers = if s.contains_key(&format!("layer{i}/wq/raw")) {
                Some(LayerQuantizers {
                    weight: r.quantizer(&format!("layer{i}/wq"), true)?,
                    activation: r.quantizer(&format!("layer{i}/aq"), false)?,
                })
            } else {
                None
            };
            layers.push(crate::model::Layer {
                spec: ls.clone(),
                weights,
                bias,
                norm,
                quantizers,
            });
        }
        let model = Model { spec, layers };
        let config = match s.get("config") {
            Some(_) => Some(serde_json::from_slice(r.bytes("config")?)?),
            None => None,
        };
        let training = if s.contains_key("optim/step") {
            let hyper = r.f64s("optim/hyper", Some(3))?;
            let step = r.u64s("optim/step", Some(2))?;
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for j in 0..step[1] {
                m.push(r.f64s(&format!("optim/m/{j:04}"), None)?.to_vec());
                v.push(r.f64s(&format!("optim/v/{j:04}"), None)?.to_vec());
            }
            let optimizer = RAdam::from_state(hyper[0], hyper[1], hyper[2], step[0], m, v)?;
            let l = r.f64s("loss_state", Some(7))?;
            let loss_state = LossState {
                step: r.u64s("loss_state/step", Some(1))?[0],
                t_q: l[0],
                t_r: l[1],
                c_r: l[2],
                c_r_sum: l[3],
                targets: Targets {
                    weight_bits: l[4],
                    activation_bits: l[5],
                },
                t_q_offset: l[6],
            };
            let p = r.f64s("lr_policy", Some(3))?;
            let lr = LrPolicy {
                phase: if r.u64s("lr_policy/phase", Some(1))?[0] != 0 {
                    LrPhase::Annealing
                } else {
                    LrPhase::Constant
                },
                lambda0: p[0],
                alpha: p[1],
                lambda: p[2],
            };
            let seed: [u8; 32] = r
                .bytes("rng/seed")?
                .try_into()
                .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
            let pos = r.u64s("rng/position", Some(3))?;
            let rng = RngState {
                seed,
                stream: pos[0],
                word_pos: pos[1] as u128 | (pos[2] as u128) << 64,
            };
            let c = r.u64s("session", Some(5))?;
            let acc = r.f64s("session/accuracy", Some(2))?;
            Some(TrainingState {
                optimizer,
                loss_state,
                lr,
                rng,
                counters: SessionCounters {
                    epoch: c[0],
                    batch_in_epoch: c[1],
                    global_step: c[2],
                    reached: c[3] != 0,
                    best_epoch: c[4],
                    first_reached_accuracy: acc[0],
                    best_accuracy: acc[1],
                },
            })
        } else {
            None
        };
        Ok(Self {
            stage,
            model,
            config,
            training,
            metadata,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(encode_sections(&self.to_sections()?))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        Self::from_sections(&decode_sections(buf)?)
    }

    /// The metadata as JSON.
    pub fn metadata_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::from_str(&self.metadata)?)
    }
}

struct SectionReader<'a>(&'a Sections);

impl<'a> SectionReader<'a> {
    fn get(&self, name: &str) -> Result<&'a SectionData> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
    }

    fn bytes(&self, name: &str) -> Result<&'a [u8]> {
        match self.get(name)? {
            SectionData::Bytes(b) => Ok(b),
            _ => Err(Error::Checkpoint(format!("section {name} is not a byte section"))),
        }
    }

    fn f64_section(&self, name: &str) -> Result<(&'a [u64], &'a [f64])> {
        match self.get(name)? {
            SectionData::F64 { dims, values } => Ok((dims, values)),
            _ => Err(Error::Checkpoint(format!("section {name} is not f64"))),
        }
    }

    fn f64s(&self, name: &str, len: Option<usize>) -> Result<&'a [f64]> {
        let (_, v) = self.f64_section(name)?;
        match len {
            Some(n) if v.len() != n => Err(Error::Checkpoint(format!("section {name}: {} values, expected {n}", v.len()))),
            _ => Ok(v),
        }
    }

    fn u64s(&self, name: &str, len: Option<usize>) -> Result<&'a [u64]> {
        match self.get(name)? {
            SectionData::U64 { values, .. } => match len {
                Some(n) if values.len() != n => Err(Error::Checkpoint(format!(
                    "section {name}: {} values, expected {n}",
                    values.len()
                ))),
                _ => Ok(values),
            },
            _ => Err(Error::Checkpoint(format!("section {name} is not u64"))),
        }
    }

    fn tensor(&self, name: &str) -> Result<Tensor<f64>> {
        let (dims, values) = self.f64_section(name)?;
        Tensor::new(dims.iter().map(|&d| d as usize).collect(), values.to_vec())
            .map_err(|e| Error::Checkpoint(format!("section {name}: {e}")))
    }

    fn optional_tensor(&self, name: &str) -> Result<Option<Tensor<f64>>> {
        if self.0.contains_key(name) {
            self.tensor(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn quantizer(&self, prefix: &str, weight: bool) -> Result<FakeQuantizer<f64>> {
        let raw = self.f64s(&format!("{prefix}/raw"), Some(3))?;
        let flags = self.u64s(&format!("{prefix}/flags"), Some(3))?;
        let mode = *NoiseMode::ALL
            .get(flags[2] as usize)
            .ok_or_else(|| Error::Checkpoint(format!("{prefix}: unknown noise mode {}", flags[2])))?;
        let mut q = if weight {
            FakeQuantizer::weight(mode)
        } else {
            FakeQuantizer::activation(mode, flags[1] != 0)
        };
        q.set_raw_params([raw[0], raw[1], raw[2]], flags[0] != 0);
        Ok(q)
    }
}

/// Writes atomically: a temporary file in the target directory is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&buf)
}

/// Temp-file-then-rename write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn sample() -> Checkpoint {
        let spec = ModelSpec::preset("cnn", &[4, 4, 1], 3).unwrap();
        let mut model = build_model::<f64>(&spec, true, NoiseMode::BernoulliVarianceMatched, 4).unwrap();
        for q in model.quantizers_mut() {
            q.weight.set_range(-0.3, 0.7, 5.5).unwrap();
        }
        let sizes = model.parameter_sizes();
        let mut optimizer = RAdam::new(&sizes);
        let grads: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|k| k as f64 * 1e-3 - 0.01).collect()).collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        optimizer.step(&mut model.parameters_mut(), &refs, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rand::Rng::random(&mut rng);
        let mut loss_state = LossState::new(Targets {
            weight_bits: 2.0,
            activation_bits: 3.0,
        });
        loss_state.update_schedule(0.01, 0.3);
        Checkpoint {
            stage: Stage::Qat,
            model,
            config: Some(RunConfig::default()),
            training: Some(TrainingState {
                optimizer,
                loss_state,
                lr: LrPolicy::new(0.01),
                rng: RngState::capture(&rng),
                counters: SessionCounters::default(),
            }),
            metadata: r#"{"note":"x"}"#.into(),
        }
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        // NaN counters compare unequal; compare bytes and the rest
        assert_eq!(back.model, ck.model);
        assert_eq!(back.config, ck.config);
        let (a, b) = (back.training.as_ref().unwrap(), ck.training.as_ref().unwrap());
        assert_eq!(a.optimizer, b.optimizer);
        assert_eq!(a.loss_state, b.loss_state);
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.rng, b.rng);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rng_state_restores_stream_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..13 {
            let _: u32 = rand::Rng::random(&mut rng);
        }
        let mut copy = RngState::capture(&rng).restore();
        for _ in 0..50 {
            assert_eq!(rand::Rng::random::<u64>(&mut rng), rand::Rng::random::<u64>(&mut copy));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        let mut version = bytes.clone();
        version[8] = 2;
        match Checkpoint::from_bytes(&version) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version 2")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample();
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
