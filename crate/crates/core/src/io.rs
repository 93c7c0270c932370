//! GBEV tensor files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"GBEV" | u32 version = 1 | u32 ndim | ndim x u64 dims | prod(dims) x f32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, FeatureMap};

pub const MAGIC: &[u8; 4] = b"GBEV";
pub const VERSION: u32 = 1;
/// Upper bound on `ndim` accepted by the decoder.
pub const MAX_NDIM: usize = 16;

/// An n-dimensional row-major f32 array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() as u64 {
            return Err(Error::format(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("missing GBEV magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported GBEV version {version}")));
        }
        let ndim = r.u32()? as usize;
        if ndim > MAX_NDIM {
            return Err(Error::format(format!("ndim {ndim} exceeds {MAX_NDIM}")));
        }
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let count = element_count(&dims)?;
        let payload = r.rest();
        if payload.len() as u64 != count.saturating_mul(4) {
            return Err(Error::format(format!(
                "payload holds {} bytes, dims {dims:?} need {}",
                payload.len(),
                count.saturating_mul(4)
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Interprets a rank-4 tensor as a feature map. Values must be finite.
    pub fn into_feature_map(self) -> Result<FeatureMap> {
        if self.dims.len() != 4 {
            return Err(Error::format(format!(
                "feature map needs 4 dims, got {}",
                self.dims.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("feature map holds non-finite values"));
        }
        let d = &self.dims;
        let dims = Dims::new(d[0] as usize, d[1] as usize, d[2] as usize, d[3] as usize);
        FeatureMap::from_vec(dims, self.data).map_err(|e| Error::format(e.to_string()))
    }
}

impl From<&FeatureMap> for Tensor {
    fn from(map: &FeatureMap) -> Self {
        Self {
            dims: map.dims().as_array().iter().map(|&d| d as u64).collect(),
            data: map.data().to_vec(),
        }
    }
}

fn element_count(dims: &[u64]) -> Result<u64> {
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(format!("dims {dims:?} overflow")))?;
    // keeps the byte length representable
    if count > u64::MAX / 4 {
        return Err(Error::format(format!("dims {dims:?} overflow")));
    }
    Ok(count)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("truncated GBEV header"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    Tensor::from(map).write(path)
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    Tensor::read(path)?.into_feature_map()
}
