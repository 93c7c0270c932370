//! Dense rank-4 feature maps laid out as (batch, channel, height, width).

use crate::error::{Error, Result};

/// Shape of a [`FeatureMap`]: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config(format!(
                "feature map dims must all be >= 1, got {:?}",
                self.as_array()
            )));
        }
        Ok(())
    }
}

/// Dense 32-bit feature map. Element `(b, c, y, x)` lives at
/// `((b * C + c) * H + y) * W + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dims: Dims,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            data: vec![value; dims.len()],
        })
    }

    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::config(format!(
                "data length {} does not match dims {:?} ({} elements)",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        dims.validate()?;
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..dims.batch {
            for c in 0..dims.channels {
                for y in 0..dims.height {
                    for x in 0..dims.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let d = &self.dims;
        debug_assert!(b < d.batch && c < d.channels && y < d.height && x < d.width);
        ((b * d.channels + c) * d.height + y) * d.width + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(b, c, y, x);
        self.data[i] = value;
    }

    /// The contiguous `H * W` plane for `(b, c)`.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let n = self.dims.plane();
        let start = (b * self.dims.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f32] {
        let n = self.dims.plane();
        let start = (b * self.dims.channels + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "{what} holds a non-finite value at flat index {i}"
            ))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn same_dims(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::config(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.dims.as_array(),
                other.dims.as_array()
            )));
        }
        Ok(())
    }

    /// Concatenates maps along the channel axis. Batch and spatial dims must agree.
    pub fn concat_channels(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of zero feature maps"))?;
        let d0 = first.dims;
        for p in parts {
            let d = p.dims;
            if d.batch != d0.batch || d.height != d0.height || d.width != d0.width {
                return Err(Error::config(format!(
                    "channel concat: shape mismatch {:?} vs {:?}",
                    d0.as_array(),
                    d.as_array()
                )));
            }
        }
        let channels = parts.iter().map(|p| p.dims.channels).sum();
        let dims = Dims::new(d0.batch, channels, d0.height, d0.width);
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..d0.batch {
            for p in parts {
                let per_batch = p.dims.channels * p.dims.plane();
                data.extend_from_slice(&p.data[b * per_batch..(b + 1) * per_batch]);
            }
        }
        FeatureMap::from_vec(dims, data)
    }

    /// Channels `[start, start + count)` as a new map.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<FeatureMap> {
        if count == 0 || start + count > self.dims.channels {
            return Err(Error::config(format!(
                "channel slice [{start}, {}) out of range for {} channels",
                start + count,
                self.dims.channels
            )));
        }
        let plane = self.dims.plane();
        let dims = Dims::new(self.dims.batch, count, self.dims.height, self.dims.width);
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..self.dims.batch {
            let base = (b * self.dims.channels + start) * plane;
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        FeatureMap::from_vec(dims, data)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.same_dims(other, "elementwise product")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        FeatureMap::from_vec(self.dims, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> FeatureMap {
        FeatureMap {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
