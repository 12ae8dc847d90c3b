//! Dense spectral cube container.
//!
//! A cube holds `channels` planes of `height x width` samples in one
//! contiguous channel-major, row-major `Vec<f64>`. Both the low-resolution
//! spectral input and the RGB guide image use this type (an RGB image is a
//! 3-channel cube).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SpectralCube {
    /// All-zero cube. Extents must be positive.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "cube extents must be positive"
        );
        SpectralCube {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Wraps an existing channel-major buffer; `data.len()` must equal
    /// `channels * height * width`.
    pub fn from_values(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dimension(format!(
                "cube extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::dimension(format!(
                "cube {}x{}x{} needs {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        Ok(SpectralCube {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One channel plane as a contiguous row-major slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        assert!(c < self.channels, "channel {c} out of {}", self.channels);
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        assert!(c < self.channels, "channel {c} out of {}", self.channels);
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Clamps every sample into `[lo, hi]` in place.
    pub fn clip(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// Cubes share the dense layout with rank-3 tensors.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("cube layout is a valid tensor")
    }

    /// Builds a cube from a rank-3 `[C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(Error::dimension(format!(
                "expected rank-3 tensor for a cube, got shape {shape:?}"
            )));
        }
        SpectralCube::from_values(shape[0], shape[1], shape[2], t.values().to_vec())
    }

    /// Stacks `self`'s channels followed by `other`'s; extents must match.
    pub fn concat_channels(&self, other: &SpectralCube) -> Result<SpectralCube> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::dimension(format!(
                "cannot stack {}x{} onto {}x{} planes",
                other.height, other.width, self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity((self.channels + other.channels) * self.height * self.width);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        SpectralCube::from_values(self.channels + other.channels, self.height, self.width, data)
    }
}
