//! Model checkpoints: a little-endian binary container holding named
//! parameter tensors, tied to the producing configuration by its digest.
//!
//! Layout: magic `TSV1`, format version (u32), digest (length-prefixed
//! UTF-8), record count (u32), then per record a length-prefixed name, a
//! rank-prefixed shape (u64 dims), and the row-major values as 64-bit
//! floats. Save → load → save reproduces identical bytes; parameter order
//! is preserved, which keeps resumed training bit-deterministic.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSV1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Serializes every parameter, in insertion order, under the config digest.
pub fn save_checkpoint(path: &Path, config_digest: &str, params: &ParamSet) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_digest.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_digest.as_bytes());
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        bytes.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(p.name.as_bytes());
        bytes.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &dim in p.tensor.shape() {
            bytes.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(corrupt(
                self.path,
                format!("truncated: wanted {n} bytes at offset {}", self.at),
            ));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| corrupt(self.path, "string record is not UTF-8"))
    }
}

/// Reads only the stored config digest (for inspection before a full load).
pub fn read_checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    read_header(&mut r)
}

fn read_header(r: &mut Reader) -> Result<String> {
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(corrupt(r.path, format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(
            r.path,
            format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    r.string()
}

/// Loads a checkpoint, verifying it was produced under `expected_digest`.
pub fn load_checkpoint(path: &Path, expected_digest: &str) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    let digest = read_header(&mut r)?;
    if digest != expected_digest {
        return Err(corrupt(
            path,
            format!(
                "config digest mismatch: checkpoint {digest}, current configuration {expected_digest}"
            ),
        ));
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw = r.take(8)?;
            data.push(f64::from_le_bytes(raw.try_into().unwrap()));
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.at != r.bytes.len() {
        return Err(corrupt(
            path,
            format!("{} trailing bytes after the last record", r.bytes.len() - r.at),
        ));
    }
    Ok(params)
}
