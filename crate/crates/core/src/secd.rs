//! SECD tensor files.
//!
//! Little-endian layout:
//!
//! ```text
//! "SECD" | version: u16 = 1 | dtype: u8 = 1 (f32) | ndim: u8 | ndim x u32 dims | f32 payload
//! ```
//!
//! The payload is row-major and must hold exactly `prod(dims)` values; a
//! zero-dimensional tensor holds one value.

use std::fs;
use std::path::Path;

use crate::error::{with_path, Error, Result};

pub const MAGIC: [u8; 4] = *b"SECD";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SecdError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    VersionUnsupported(u16),
    #[error("unsupported dtype code {0}")]
    DtypeUnsupported(u8),
    #[error("header truncated at {0} bytes")]
    TruncatedHeader(usize),
    #[error("dims {0:?} overflow")]
    ShapeOverflow(Vec<u32>),
    #[error("payload has {actual} bytes, expected {expected}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("tensor of {values} values does not fit dims {dims:?}")]
    InvalidTensor { dims: Vec<usize>, values: usize },
}

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, SecdError> {
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n == data.len());
        if numel.is_none() || dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(SecdError::InvalidTensor {
                dims,
                values: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tensor.dims.len() + 4 * tensor.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(tensor.dims.len() as u8);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a complete SECD buffer. Never allocates more than the input implies.
pub fn decode(bytes: &[u8]) -> Result<Tensor, SecdError> {
    if bytes.len() < 4 {
        return Err(SecdError::TruncatedHeader(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(SecdError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(SecdError::TruncatedHeader(bytes.len()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(SecdError::VersionUnsupported(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(SecdError::DtypeUnsupported(bytes[6]));
    }
    let ndim = bytes[7] as usize;
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(SecdError::TruncatedHeader(bytes.len()));
    }
    let raw_dims: Vec<u32> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected = raw_dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| SecdError::ShapeOverflow(raw_dims.clone()))?;
    let payload = &bytes[dims_end..];
    if payload.len() < expected {
        return Err(SecdError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(SecdError::TrailingBytes(payload.len() - expected));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor {
        dims: raw_dims.into_iter().map(|d| d as usize).collect(),
        data,
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    decode(&bytes).map_err(|source| Error::Secd {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}
