//! Dense `f64` tensors and their binary container.
//!
//! Layout: magic `HDT1`, `u8` dtype tag (0 = f64), `u8` rank, `rank` × `u32`
//! little-endian dims, then the row-major little-endian payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"HDT1";
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::ShapeMismatch("tensor needs at least one dim".into()));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n]).expect("consistent by construction")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F64);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedTensor);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 6 {
            return Err(Error::TruncatedTensor);
        }
        if bytes[4] != DTYPE_F64 {
            return Err(Error::BadDtype(bytes[4]));
        }
        let rank = bytes[5] as usize;
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::TruncatedTensor);
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let payload = &bytes[header..];
        if payload.len() % 8 != 0 {
            return Err(Error::TruncatedTensor);
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.dims.len() > u8::MAX as usize || self.dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} do not fit the container header",
                self.dims
            )));
        }
        fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?)
    }
}

pub fn save_tensor_file(t: &Tensor, path: &Path) -> Result<()> {
    t.save(path)
}

pub fn load_tensor_file(path: &Path) -> Result<Tensor> {
    Tensor::load(path)
}
