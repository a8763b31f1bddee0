//! Versioned binary container: magic, version, JSON header, named tensors.
//!
//! Layout (all integers little-endian):
//! `magic[8] | version u32 | header_len u32 | header (UTF-8 JSON) |
//!  count u32 | { name_len u32 | name | ndim u32 | dims u64* | data f64* }*`

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
}

pub struct Checkpoint<H> {
    pub header: H,
    pub tensors: Vec<(String, Tensor)>,
}

impl<H> Checkpoint<H> {
    pub fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        Ok(self.tensors.remove(pos).1)
    }
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(header).expect("header serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], buf: &[u8]) -> Result<Checkpoint<H>, CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    let found = c.bytes(8)?;
    if found != magic {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = c.u32()? as usize;
    let header: H = serde_json::from_slice(c.bytes(header_len)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.bytes(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.bytes(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    fs::File::open(path).map_err(io_err)?.read_to_end(&mut buf).map_err(io_err)?;
    Ok(buf)
}
