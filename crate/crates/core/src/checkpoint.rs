//! Bit-exact binary checkpoints for named parameter tensors.
//!
//! Layout (all integers little-endian): 4 magic bytes, u32 format version,
//! u32 entry count, then per entry a u16 name length, the UTF-8 name, a u8
//! rank, rank u32 dims, and the raw f32 data. Entries are written in sorted
//! name order; trailing bytes after the last entry are ignored. The format
//! is deliberately trivial to parse from any language, which keeps external
//! pretrained-base imports possible.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{param_shapes, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// File signature.
pub const MAGIC: [u8; 4] = *b"IMPN";
/// Current (and only) format version.
pub const VERSION: u32 = 1;

/// Every distinct way a checkpoint can fail to load.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (supported: {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint contains unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?}: checkpoint shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        // A short read anywhere in the body means the file ended early.
        if e.kind() == ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

/// Writes all parameters to `path` in sorted name order.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "parameter name too long");
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        assert!(shape.len() <= u8::MAX as usize, "parameter rank too large");
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u16(r: &mut impl Read) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses the raw entry list without validating names against any config.
fn read_entries(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(CheckpointError::Io)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not valid UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        let mut numel = 1usize;
        for _ in 0..rank[0] {
            let d = read_u32(&mut r)? as usize;
            if d == 0 {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter {name:?} has a zero dimension"
                )));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Corrupt(format!("parameter {name:?} overflows")))?;
            shape.push(d);
        }
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::from_vec(shape, data)));
    }
    Ok(entries)
}

/// Loads a checkpoint and validates its name set and shapes exactly against
/// what `config` requires.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<ModelParams, CheckpointError> {
    let mut expected: std::collections::BTreeMap<String, Vec<usize>> =
        param_shapes(config).into_iter().collect();
    let mut params = ModelParams::default();
    for (name, tensor) in read_entries(path)? {
        if params.get(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate parameter {name:?}")));
        }
        match expected.remove(&name) {
            None => return Err(CheckpointError::UnknownParam(name)),
            Some(shape) if shape != tensor.shape() => {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: tensor.shape().to_vec(),
                });
            }
            Some(_) => params.insert(name, tensor),
        }
    }
    if let Some(name) = expected.into_keys().next() {
        return Err(CheckpointError::MissingParam(name));
    }
    Ok(params)
}

/// Overwrites matching entries of an existing parameter set from a
/// checkpoint. With `allow_partial` the file may cover any subset (the
/// pretrained-base import path: a file holding only `base.*` seeds the
/// backbone while heads keep their initialization); without it, full
/// coverage is required.
pub fn apply_checkpoint(
    params: &mut ModelParams,
    path: &Path,
    allow_partial: bool,
) -> Result<(), CheckpointError> {
    let entries = read_entries(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for (name, tensor) in &entries {
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Corrupt(format!("duplicate parameter {name:?}")));
        }
        match params.get(name) {
            None => return Err(CheckpointError::UnknownParam(name.clone())),
            Some(existing) if existing.shape() != tensor.shape() => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: existing.shape().to_vec(),
                    found: tensor.shape().to_vec(),
                });
            }
            Some(_) => {}
        }
    }
    if !allow_partial {
        if let Some(name) = params.names().find(|n| !seen.contains(*n)) {
            return Err(CheckpointError::MissingParam(name.clone()));
        }
    }
    for (name, tensor) in entries {
        params.insert(name, tensor);
    }
    Ok(())
}
