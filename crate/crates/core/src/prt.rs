//! On-disk tensor container used by the command-line tools.
//!
//! Layout: the magic bytes `PRT1`, a little-endian `u32` header length, a
//! JSON header `{"dims": [...], "dtype": "f32", "meta": {...}}`, then the
//! payload as row-major little-endian `f32` values. Payloads are always
//! `f32` regardless of the in-memory scalar type.

use crate::Scalar;
use ndarray::{Array, ArrayD, ArrayView, Dimension, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"PRT1";

#[derive(Debug, Error)]
pub enum PrtError {
    #[error("not a PRT1 container: bad magic bytes")]
    BadMagic,
    #[error("container truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("invalid container header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported dtype {0:?}, only \"f32\" is defined")]
    UnsupportedDtype(String),
    #[error("payload holds {actual} values but dims {dims:?} require {expected}")]
    LengthMismatch { dims: Vec<usize>, expected: usize, actual: usize },
    #[error("tensor has {actual} axes where {expected} were expected")]
    WrongRank { expected: usize, actual: usize },
    #[error("reading or writing container: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: Vec<usize>,
    dtype: String,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A tensor plus its JSON metadata, as stored in a `.prt` file.
#[derive(Debug, Clone, PartialEq)]
pub struct PrtTensor {
    pub dims: Vec<usize>,
    /// Row-major values; `data.len()` equals the product of `dims`.
    pub data: Vec<f32>,
    pub meta: serde_json::Value,
}

impl PrtTensor {
    pub fn new(
        dims: Vec<usize>,
        data: Vec<f32>,
        meta: serde_json::Value,
    ) -> Result<Self, PrtError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(PrtError::LengthMismatch { dims, expected, actual: data.len() });
        }
        Ok(PrtTensor { dims, data, meta })
    }

    /// Wraps any array, converting values to `f32`.
    pub fn from_array<T: Scalar, D: Dimension>(
        a: ArrayView<'_, T, D>,
        meta: serde_json::Value,
    ) -> Self {
        let dims = a.shape().to_vec();
        let data = a.iter().map(|v| v.to_f32().unwrap()).collect();
        PrtTensor { dims, data, meta }
    }

    /// Reconstructs a dynamic-rank array at any scalar type.
    pub fn to_array<T: Scalar>(&self) -> ArrayD<T> {
        let data: Vec<T> = self.data.iter().map(|&v| T::from(v).unwrap()).collect();
        Array::from_shape_vec(IxDyn(&self.dims), data)
            .expect("dims validated against payload length")
    }

    /// Reconstructs an array with a statically known rank.
    pub fn to_array_fixed<T: Scalar, D: Dimension>(&self) -> Result<Array<T, D>, PrtError> {
        self.to_array::<T>()
            .into_dimensionality::<D>()
            .map_err(|_| PrtError::WrongRank {
                expected: D::NDIM.unwrap_or(self.dims.len()),
                actual: self.dims.len(),
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dims: self.dims.clone(),
            dtype: "f32".to_owned(),
            meta: self.meta.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serialization");
        let mut out =
            Vec::with_capacity(8 + header_json.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PrtError> {
        if bytes.len() < 8 {
            return Err(PrtError::Truncated { what: "magic and header length" });
        }
        if &bytes[..4] != MAGIC {
            return Err(PrtError::BadMagic);
        }
        let header_len =
            u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let payload_start = 8 + header_len;
        if bytes.len() < payload_start {
            return Err(PrtError::Truncated { what: "header JSON" });
        }
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])?;
        if header.dtype != "f32" {
            return Err(PrtError::UnsupportedDtype(header.dtype));
        }
        let payload = &bytes[payload_start..];
        if payload.len() % 4 != 0 {
            return Err(PrtError::Truncated { what: "payload" });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        PrtTensor::new(header.dims, data, header.meta)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), PrtError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, PrtError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
