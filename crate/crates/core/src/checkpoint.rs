//! Binary checkpoint encoding.
//!
//! Layout: 8-byte magic `SRECKPT1`, format version (u32 LE), length-prefixed
//! UTF-8 JSON metadata (u32 LE length), tensor count (u32 LE), then per
//! tensor: name length (u32 LE), name bytes, rank (u32 LE), dims (u64 LE
//! each), values as little-endian IEEE-754 doubles, row-major.
//!
//! The metadata JSON carries the training config together with the
//! vocabulary and the epoch/phase counters, which makes a checkpoint fully
//! self-contained for inference. Optimizer moments are stored as tensors
//! under the reserved `opt.` prefix; encode/decode round-trips bit-exactly.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{Phase, TrainConfig};
use crate::model::{ModelParameters, ParamTensor};
use crate::optim::AdamState;
use crate::vocab::ConceptVocabulary;

pub const MAGIC: [u8; 8] = *b"SRECKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model with everything needed to resume or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: ConceptVocabulary,
    pub epoch: u64,
    pub phase: Phase,
    pub params: ModelParameters,
    pub opt: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    vocab: ConceptVocabulary,
    epoch: u64,
    phase: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointError {
    BadMagic { found: [u8; 8], expected: [u8; 8] },
    BadVersion { found: u32, expected: u32 },
    Truncated,
    BadUtf8,
    BadJson(String),
    BadRank(u32),
    DuplicateTensor(String),
    DimsMismatch { name: String, dims: (usize, usize), values: usize },
    MissingOptStep,
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic { found, expected } => write!(
                f,
                "bad checkpoint magic {:02x?}, expected {:02x?}",
                found, expected
            ),
            CheckpointError::BadVersion { found, expected } => {
                write!(f, "checkpoint format version {found}, expected {expected}")
            }
            CheckpointError::Truncated => write!(f, "checkpoint data is truncated"),
            CheckpointError::BadUtf8 => write!(f, "checkpoint metadata is not UTF-8"),
            CheckpointError::BadJson(e) => write!(f, "checkpoint metadata: {e}"),
            CheckpointError::BadRank(r) => write!(f, "tensor rank {r} unsupported (rank 2 only)"),
            CheckpointError::DuplicateTensor(n) => write!(f, "duplicate tensor name '{n}'"),
            CheckpointError::DimsMismatch { name, dims, values } => write!(
                f,
                "tensor '{name}' declares {}x{} but carries {values} values",
                dims.0, dims.1
            ),
            CheckpointError::MissingOptStep => write!(f, "optimizer step tensor missing"),
        }
    }
}

impl core::error::Error for CheckpointError {}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, values: &[f64]) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, 2);
    push_u64(out, rows as u64);
    push_u64(out, cols as u64);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize to the wire format. Deterministic: tensors are written in
/// sorted-name order and the metadata JSON has a fixed field order.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = Meta {
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.clone(),
        epoch: ckpt.epoch,
        phase: ckpt.phase,
    };
    let meta_json = serde_json::to_string(&meta).expect("meta serialization cannot fail");

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, ckpt.version);
    push_u32(&mut out, meta_json.len() as u32);
    out.extend_from_slice(meta_json.as_bytes());

    let count = ckpt.params.len() + ckpt.opt.m.len() + ckpt.opt.v.len() + 1; // + opt.step
    push_u32(&mut out, count as u32);

    for (name, t) in ckpt.params.iter() {
        push_tensor(&mut out, name, t.rows, t.cols, &t.values);
    }
    for (name, m) in &ckpt.opt.m {
        let dims = ckpt
            .params
            .get(name)
            .map(|t| (t.rows, t.cols))
            .unwrap_or((1, m.len()));
        push_tensor(&mut out, &alloc::format!("opt.m.{name}"), dims.0, dims.1, m);
    }
    for (name, v) in &ckpt.opt.v {
        let dims = ckpt
            .params
            .get(name)
            .map(|t| (t.rows, t.cols))
            .unwrap_or((1, v.len()));
        push_tensor(&mut out, &alloc::format!("opt.v.{name}"), dims.0, dims.1, v);
    }
    push_tensor(&mut out, "opt.step", 1, 1, &[ckpt.opt.step as f64]);
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse the wire format, validating magic, version, and tensor shapes.
pub fn decode(data: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { data, pos: 0 };
    let magic: [u8; 8] = r.take(8)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic, expected: MAGIC });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion { found: version, expected: FORMAT_VERSION });
    }
    let meta_len = r.u32()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let meta_str = core::str::from_utf8(meta_bytes).map_err(|_| CheckpointError::BadUtf8)?;
    let meta: Meta =
        serde_json::from_str(meta_str).map_err(|e| CheckpointError::BadJson(e.to_string()))?;
    let mut vocab = meta.vocab;
    vocab.rebuild_index();

    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, ParamTensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadUtf8)?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(CheckpointError::BadRank(rank));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or(CheckpointError::DimsMismatch { name: name.clone(), dims: (rows, cols), values: 0 })?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        if tensors.insert(name.clone(), ParamTensor { rows, cols, values }).is_some() {
            return Err(CheckpointError::DuplicateTensor(name));
        }
    }

    let mut params = ModelParameters::new();
    let mut opt = AdamState::new();
    let mut have_step = false;
    for (name, t) in tensors {
        if name == "opt.step" {
            opt.step = t.values.first().copied().unwrap_or(0.0) as u64;
            have_step = true;
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            opt.m.insert(rest.to_string(), t.values);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt.v.insert(rest.to_string(), t.values);
        } else {
            params.insert(name, t);
        }
    }
    if !have_step {
        return Err(CheckpointError::MissingOptStep);
    }

    Ok(Checkpoint {
        version,
        config: meta.config,
        vocab,
        epoch: meta.epoch,
        phase: meta.phase,
        params,
        opt,
    })
}
