//! Dense feature-map kernels with hand-written backward passes.
//!
//! Layout is row-major with the channel index fastest: element `(i, j, c)` of
//! an `H x W x D` map lives at `(i * W + j) * D + c`.

mod activation;
mod conv;
mod correlation;
mod dtt;
mod gradcheck;
mod psroi;

pub use activation::{
    relu, relu_backward, smooth_l1, smooth_l1_grad, softmax, softmax_backward,
    softmax_cross_entropy,
};
pub use conv::{Conv2d, ConvGrad};
pub use correlation::{correlate, correlate_backward, CorrelationMap, CorrelationParams};
pub use dtt::{decode_dtt, encode_dtt, read_dtt, write_dtt, DTT_MAGIC};
pub use gradcheck::{grad_check, grad_check_coords, Differentiable, GradCheckReport};
pub use psroi::{psroi_pool, psroi_pool_backward, BinCells, PoolMode, PooledRoi, RoiGrid};

use crate::error::{Error, Result};

/// Dense `height x width x channels` array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} map",
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a map by evaluating `f(i, j, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        FeatureMap {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
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
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        debug_assert!(i < self.height && j < self.width && c < self.channels);
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let idx = self.index(i, j, c);
        self.data[idx] = v;
    }

    /// Channel vector at spatial position `(i, j)`.
    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.width + j) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, alpha: f64) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "adding {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Concatenates maps of equal spatial size along the channel axis.
    pub fn concat_channels(maps: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        if let Some(bad) = maps.iter().find(|m| m.height != h || m.width != w) {
            return Err(Error::ShapeMismatch(format!(
                "concat of {h}x{w} with {}x{}",
                bad.height, bad.width
            )));
        }
        let channels: usize = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for i in 0..h {
            for j in 0..w {
                for m in maps {
                    data.extend_from_slice(m.pixel(i, j));
                }
            }
        }
        Ok(FeatureMap {
            height: h,
            width: w,
            channels,
            data,
        })
    }

    /// Inverse of [`FeatureMap::concat_channels`]: splits into blocks of the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<FeatureMap>> {
        if counts.iter().sum::<usize>() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "split {counts:?} of {} channels",
                self.channels
            )));
        }
        let mut out: Vec<FeatureMap> = counts
            .iter()
            .map(|&c| FeatureMap::zeros(self.height, self.width, c))
            .collect();
        for i in 0..self.height {
            for j in 0..self.width {
                let px = self.pixel(i, j);
                let mut off = 0;
                for (m, &c) in out.iter_mut().zip(counts) {
                    m.pixel_mut(i, j).copy_from_slice(&px[off..off + c]);
                    off += c;
                }
            }
        }
        Ok(out)
    }
}
