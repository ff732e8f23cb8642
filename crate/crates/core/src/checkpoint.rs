//! Single-file checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RASF"
//! 4       4     format version (u32) = 1
//! 8       4     config blob length C (u32)
//! 12      C     config blob, UTF-8 TOML
//! ..      4     tensor count N (u32)
//! ..            N table entries:
//!                 u16 name length, name bytes (UTF-8)
//!                 u8 dtype tag (0 = f32)
//!                 u8 rank R
//!                 R × u32 dims
//!                 u64 payload offset (from start of file)
//!                 u64 payload byte length
//! ..            zero padding up to a multiple of 64
//! payload       tensors in table order, each starting on a 64-byte
//!               boundary, f32 little-endian, zero padding between
//! ```
//!
//! Loading validates magic, version, table bounds, offsets (in range,
//! aligned, non-overlapping) and that every declared size matches its shape
//! before a model is constructed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dit::{DitModel, ModelConfig};
use crate::tensor::Matrix;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"RASF";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"RASF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("inconsistent tensor table: {0}")]
    Inconsistent(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config blob: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic(_) => "checkpoint_bad_magic",
            CheckpointError::UnsupportedVersion(_) => "checkpoint_version",
            CheckpointError::Truncated(_) => "checkpoint_truncated",
            CheckpointError::Inconsistent(_) => "checkpoint_inconsistent",
            CheckpointError::ShapeMismatch(_) => "checkpoint_shape",
            CheckpointError::Config(_) => "checkpoint_config",
            CheckpointError::Io(_) => "io",
        }
    }
}

/// Configuration stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Final moving-average training loss, when produced by a training run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

impl CheckpointConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            model: model.clone(),
            train: None,
            final_loss: None,
        }
    }
}

/// A loaded checkpoint: weights, parsed config and the config text exactly
/// as stored.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DitModel,
    pub config: CheckpointConfig,
    pub config_text: String,
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    while !buf.len().is_multiple_of(align) {
        buf.push(0);
    }
}

/// Serializes a model into the checkpoint byte layout.
pub fn to_bytes(model: &DitModel, config: &CheckpointConfig) -> Result<Vec<u8>, CheckpointError> {
    if config.model != model.config {
        return Err(CheckpointError::Config(
            "checkpoint config does not describe the model".into(),
        ));
    }
    let text = toml::to_string(config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    to_bytes_with_text(model, &text)
}

fn to_bytes_with_text(model: &DitModel, text: &str) -> Result<Vec<u8>, CheckpointError> {
    let tensors = model.tensors();
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&(text.len() as u32).to_le_bytes());
    header.extend_from_slice(text.as_bytes());
    header.extend_from_slice(&(tensors.len() as u32).to_le_bytes());

    // Table size is independent of the offsets, so lay it out first.
    let table_len: usize = tensors
        .iter()
        .map(|(name, _)| 2 + name.len() + 1 + 1 + 2 * 4 + 8 + 8)
        .sum();
    let mut offset = (header.len() + table_len).div_ceil(ALIGN) * ALIGN;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let bytes = t.data().len() * 4;
        entries.push((name.as_str(), t.shape(), offset, bytes));
        offset = (offset + bytes).div_ceil(ALIGN) * ALIGN;
    }
    let mut out = header;
    for (name, (r, c), off, len) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(2);
        out.extend_from_slice(&(*r as u32).to_le_bytes());
        out.extend_from_slice(&(*c as u32).to_le_bytes());
        out.extend_from_slice(&(*off as u64).to_le_bytes());
        out.extend_from_slice(&(*len as u64).to_le_bytes());
    }
    for ((_, t), (_, _, off, _)) in tensors.iter().zip(&entries) {
        pad_to(&mut out, ALIGN);
        debug_assert_eq!(out.len(), *off);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    pad_to(&mut out, ALIGN);
    Ok(out)
}

pub fn save(
    model: &DitModel,
    config: &CheckpointConfig,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let bytes = to_bytes(model, config)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Truncated(format!("reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let clen = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(clen, "config blob")?)
        .map_err(|e| CheckpointError::Config(e.to_string()))?
        .to_owned();
    let config: CheckpointConfig =
        toml::from_str(&config_text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config
        .model
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?
            .to_owned();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Inconsistent(format!(
                "{name}: unknown dtype tag {dtype}"
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let offset = r.u64("offset")? as usize;
        let len = r.u64("length")? as usize;
        entries.push((name, dims, offset, len));
    }
    let table_end = r.pos;

    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(entries.len());
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, dims, offset, len) in entries {
        if dims.len() != 2 {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{name}: rank {} tensors are not supported",
                dims.len()
            )));
        }
        let numel = dims[0]
            .checked_mul(dims[1])
            .ok_or_else(|| CheckpointError::ShapeMismatch(format!("{name}: dims overflow")))?;
        if numel.checked_mul(4) != Some(len) {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{name}: {len} bytes declared for shape {dims:?}"
            )));
        }
        if offset % ALIGN != 0 || offset < table_end {
            return Err(CheckpointError::Inconsistent(format!(
                "{name}: bad payload offset {offset}"
            )));
        }
        let end = offset
            .checked_add(len)
            .ok_or_else(|| CheckpointError::Inconsistent(format!("{name}: offset overflow")))?;
        if end > bytes.len() {
            return Err(CheckpointError::Truncated(format!(
                "{name} ends at byte {end}, file has {}",
                bytes.len()
            )));
        }
        spans.push((offset, end));
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Matrix::from_vec(dims[0], dims[1], data)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        tensors.push((name, m));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CheckpointError::Inconsistent(
                "tensor payloads overlap".into(),
            ));
        }
    }
    let model = DitModel::from_tensors(&config.model, tensors)
        .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
    Ok(Checkpoint {
        model,
        config,
        config_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (DitModel, CheckpointConfig) {
        let mut c = ModelConfig::tiny();
        c.hidden_dim = 16;
        let m = DitModel::random(&c, 3, 0.2).unwrap();
        (m, CheckpointConfig::for_model(&c))
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (m, cfg) = sample();
        let bytes = to_bytes(&m, &cfg).unwrap();
        assert_eq!(&bytes[0..4], b"RASF");
        assert_eq!(bytes.len() % ALIGN, 0);
        let ck = from_bytes(&bytes).unwrap();
        for ((na, a), (nb, b)) in m.tensors().iter().zip(ck.model.tensors()) {
            assert_eq!(*na, nb);
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.config_text, toml::to_string(&cfg).unwrap());
    }

    #[test]
    fn truncation_is_reported() {
        let (m, cfg) = sample();
        let bytes = to_bytes(&m, &cfg).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            from_bytes(cut),
            Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(
            from_bytes(&bytes[..10]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn magic_and_version_are_checked() {
        let (m, cfg) = sample();
        let mut bytes = to_bytes(&m, &cfg).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::BadMagic(_))
        ));
        let mut bytes = to_bytes(&m, &cfg).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn declared_shape_must_match_config() {
        let (m, _) = sample();
        let mut other = m.config.clone();
        other.hidden_dim = 32;
        other.heads = 2;
        // Config describes a wider model than the tensors actually stored.
        let text = toml::to_string(&CheckpointConfig::for_model(&other)).unwrap();
        let bytes = to_bytes_with_text(&m, &text).unwrap();
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::ShapeMismatch(_))
        ));
    }
}
