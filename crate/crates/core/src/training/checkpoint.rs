//! Checkpoint files.
//!
//! Layout (all integers little-endian): magic `WFTM`, u32 version, u32
//! config length and the model config as JSON, u32 tensor count, then per
//! tensor u32 name length, UTF-8 name, u32 rank, u64 dims and f64 values.
//! A trailing u8 flags an optional training-state section: u32 length and a
//! JSON object of counters and optimizer settings, followed by the Adam first
//! and second moments as unnamed tensors in parameter order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::Mode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WaftmModel};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"WFTM";
pub const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub mode: Mode,
    /// Optimizer steps taken so far, across phases.
    pub step: u64,
    pub epoch: u64,
    /// Batches already consumed in `epoch`.
    pub batch_in_epoch: u64,
    pub seed: u64,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    mode: Mode,
    step: u64,
    epoch: u64,
    batch_in_epoch: u64,
    seed: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
    adam_t: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(model: &WaftmModel, state: Option<&TrainState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params().len())?;
    for (name, t) in model.params().iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t)?;
    }
    match state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            let header = serde_json::to_vec(&StateHeader {
                mode: s.mode,
                step: s.step,
                epoch: s.epoch,
                batch_in_epoch: s.batch_in_epoch,
                seed: s.seed,
                lr: s.adam.lr,
                beta1: s.adam.beta1,
                beta2: s.adam.beta2,
                eps: s.adam.eps,
                clip_norm: s.adam.clip_norm,
                adam_t: s.adam.t,
            })?;
            put_u32(&mut out, header.len())?;
            out.extend_from_slice(&header);
            if s.adam.m.len() != model.params().len() || s.adam.v.len() != model.params().len() {
                return Err(Error::Checkpoint(
                    "optimizer moments do not match parameters".into(),
                ));
            }
            for t in s.adam.m.iter().chain(&s.adam.v) {
                put_tensor(&mut out, t)?;
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .ok_or(Error::Truncated { what: WHAT })?;
        let s = self
            .bytes
            .get(self.at..end)
            .ok_or(Error::Truncated { what: WHAT })?;
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Truncated { what: WHAT })?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(Error::Truncated { what: WHAT })?;
        let raw = self.take(n.checked_mul(8).ok_or(Error::Truncated { what: WHAT })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(WaftmModel, Option<TrainState>)> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: WHAT,
            found: magic.try_into().expect("4 bytes"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion {
            what: WHAT,
            version,
        });
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_owned();
        named.push((name, r.tensor()?));
    }
    let model = WaftmModel::from_named(config, named)?;
    let state = match r.u8()? {
        0 => None,
        1 => {
            let len = r.u32()? as usize;
            let h: StateHeader = serde_json::from_slice(r.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("training state: {e}")))?;
            let n = model.params().len();
            let mut moments = Vec::with_capacity(2 * n);
            for _ in 0..2 * n {
                moments.push(r.tensor()?);
            }
            let v = moments.split_off(n);
            for ((id, m), v) in model.params().ids().zip(&moments).zip(&v) {
                let shape = model.params().get(id).shape();
                if m.shape() != shape || v.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "moment shape for {}",
                        model.params().name(id)
                    )));
                }
            }
            Some(TrainState {
                mode: h.mode,
                step: h.step,
                epoch: h.epoch,
                batch_in_epoch: h.batch_in_epoch,
                seed: h.seed,
                adam: AdamState {
                    lr: h.lr,
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    clip_norm: h.clip_norm,
                    t: h.adam_t,
                    m: moments,
                    v,
                },
            })
        }
        flag => return Err(Error::Checkpoint(format!("bad training-state flag {flag}"))),
    };
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    Ok((model, state))
}

/// Writes through a temporary sibling and renames, so an interrupted save
/// never leaves a half-written checkpoint at `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &WaftmModel,
    state: Option<&TrainState>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(WaftmModel, Option<TrainState>)> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and insists the stored architecture equals `expected`. The dropout
/// rate is taken from `expected`.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(WaftmModel, Option<TrainState>)> {
    let (mut model, state) = load_checkpoint(path)?;
    let stored = ModelConfig {
        dropout_rate: expected.dropout_rate,
        ..model.config().clone()
    };
    if &stored != expected {
        return Err(Error::Checkpoint(format!(
            "stored model config {:?} does not match {:?}",
            model.config(),
            expected
        )));
    }
    model.set_dropout_rate(expected.dropout_rate)?;
    Ok((model, state))
}
