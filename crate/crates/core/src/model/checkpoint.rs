//! Versioned binary checkpoints.
//!
//! ```text
//! "PDCKPT\0\0"  u32 version
//! u32 len, config as JSON
//! u32 count, { u32 len, utf8 token }*
//! u32 count, { u32 len, utf8 name, u32 ndim, u64 dims[ndim], f64 data[..] }*
//! ```
//! All integers and floats are little-endian; tensors are row-major and
//! appear in the model's parameter registration order.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelError, PushdownModel};
use crate::autodiff::{ParamStore, Tensor};
use crate::treebank::Vocab;

const MAGIC: &[u8; 8] = b"PDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint does not match its config: {0}")]
    Model(#[from] ModelError),
}

pub fn write_checkpoint(model: &PushdownModel, vocab: &Vocab) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let bytes = |out: &mut Vec<u8>, b: &[u8]| {
        u32le(out, b.len());
        out.extend_from_slice(b);
    };
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    bytes(&mut out, &config);
    u32le(&mut out, vocab.len());
    for t in vocab.tokens() {
        bytes(&mut out, t.as_bytes());
    }
    u32le(&mut out, model.params.len());
    for (name, t) in model.params.iter() {
        bytes(&mut out, name.as_bytes());
        u32le(&mut out, t.shape().len());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| CheckpointError::Format(e.to_string()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(PushdownModel, Vocab), CheckpointError> {
    let mut rd = Reader { b: bytes, pos: 0 };
    if rd.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config: ModelConfig = serde_json::from_str(rd.str()?)
        .map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
    let nv = rd.u32()? as usize;
    let mut tokens = Vec::with_capacity(nv);
    for _ in 0..nv {
        tokens.push(rd.str()?.to_string());
    }
    let vocab = Vocab::from_tokens(tokens.iter().skip(2));
    if vocab.tokens() != tokens.as_slice() {
        return Err(CheckpointError::Format("vocabulary is malformed".into()));
    }
    let nt = rd.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..nt {
        let name = rd.str()?.to_string();
        let ndim = rd.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| rd.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = rd.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        params.add(name, t);
    }
    if rd.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    if config.vocab_size != vocab.len() {
        return Err(CheckpointError::Format(format!(
            "config vocab_size {} but {} vocabulary entries",
            config.vocab_size,
            vocab.len()
        )));
    }
    Ok((PushdownModel::from_params(config, params)?, vocab))
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &PushdownModel,
    vocab: &Vocab,
) -> io::Result<()> {
    crate::util::atomic_write(path.as_ref(), &write_checkpoint(model, vocab))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PushdownModel, Vocab), CheckpointError> {
    read_checkpoint(&fs::read(path)?)
}
