use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Dense channel-major (C, H, W) activation for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

/// A single-channel image in the model's working range.
pub type Image<F> = FeatureMap<F>;

impl<F: Scalar> FeatureMap<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![F::zero(); channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(invalid(format!(
                "buffer of {} values does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Single-channel image from `f32` pixels.
    pub fn from_pixels(size: usize, pixels: &[f32]) -> Result<Self> {
        Self::from_vec(1, size, size, pixels.iter().map(|&p| F::lit(p as f64)).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f64() as f32).collect()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { channels: self.channels, height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
