//! Multi-channel scalar field on a regular voxel grid.

use super::GridShape;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense multi-channel volume with a per-voxel per-channel missing mask.
///
/// Values are stored channel-major: channel `d`, voxel `j` lives at
/// `values[d * n + j]`. The mask is authoritative for missingness; masked
/// entries hold an arbitrary finite value in memory (files use a NaN
/// sentinel, replaced on load).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid<T> {
    shape: GridShape<T>,
    channels: usize,
    values: Vec<T>,
    missing: Option<Vec<bool>>,
}

impl<T: Real> VolumeGrid<T> {
    pub fn new(
        dims: [usize; 3],
        spacing: [T; 3],
        channels: usize,
        values: Vec<T>,
        missing: Option<Vec<bool>>,
    ) -> Result<Self> {
        let shape = GridShape::new(dims, spacing);
        if shape.is_empty() {
            return Err(Error::invalid("volume must contain at least one voxel"));
        }
        if spacing.iter().any(|&s| s <= T::zero()) {
            return Err(Error::invalid("voxel spacing must be positive"));
        }
        if channels == 0 {
            return Err(Error::invalid("volume needs at least one channel"));
        }
        let expected = channels * shape.len();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "value buffer has {} entries, expected {}",
                values.len(),
                expected
            )));
        }
        if let Some(mask) = &missing {
            if mask.len() != expected {
                return Err(Error::invalid("missing mask size mismatch"));
            }
        }
        let grid = VolumeGrid {
            shape,
            channels,
            values,
            missing,
        };
        for d in 0..channels {
            for j in 0..grid.shape.len() {
                if !grid.is_missing(j, d) && !grid.value(j, d).is_finite() {
                    return Err(Error::non_finite(format!("voxel {j} channel {d}")));
                }
            }
        }
        Ok(grid)
    }

    /// Single-channel volume with unit spacing, no missing data.
    pub fn from_scalar(dims: [usize; 3], values: Vec<T>) -> Result<Self> {
        Self::new(dims, [T::one(); 3], 1, values, None)
    }

    pub fn zeros(dims: [usize; 3], spacing: [T; 3], channels: usize) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        VolumeGrid {
            shape: GridShape::new(dims, spacing),
            channels,
            values: vec![T::zero(); channels * n],
            missing: None,
        }
    }

    pub fn shape(&self) -> GridShape<T> {
        self.shape
    }

    pub fn dims(&self) -> [usize; 3] {
        self.shape.dims
    }

    pub fn spacing(&self) -> [T; 3] {
        self.shape.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of voxels (not counting channels).
    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    #[inline]
    pub fn value(&self, voxel: usize, channel: usize) -> T {
        self.values[channel * self.shape.len() + voxel]
    }

    #[inline]
    pub fn set_value(&mut self, voxel: usize, channel: usize, v: T) {
        let n = self.shape.len();
        self.values[channel * n + voxel] = v;
    }

    #[inline]
    pub fn is_missing(&self, voxel: usize, channel: usize) -> bool {
        match &self.missing {
            Some(mask) => mask[channel * self.shape.len() + voxel],
            None => false,
        }
    }

    pub fn has_missing(&self) -> bool {
        self.missing.as_ref().is_some_and(|m| m.iter().any(|&b| b))
    }

    /// Bitmask of missing channels at a voxel (bit d set = channel d missing).
    /// Channel counts above 64 are not supported by the mixture module.
    #[inline]
    pub fn missing_pattern(&self, voxel: usize) -> u64 {
        match &self.missing {
            None => 0,
            Some(mask) => {
                let n = self.shape.len();
                let mut p = 0u64;
                for d in 0..self.channels {
                    if mask[d * n + voxel] {
                        p |= 1 << d;
                    }
                }
                p
            }
        }
    }

    /// Contiguous values of one channel.
    pub fn channel(&self, d: usize) -> &[T] {
        let n = self.shape.len();
        &self.values[d * n..(d + 1) * n]
    }

    pub fn channel_mut(&mut self, d: usize) -> &mut [T] {
        let n = self.shape.len();
        &mut self.values[d * n..(d + 1) * n]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn missing_mask(&self) -> Option<&[bool]> {
        self.missing.as_deref()
    }
}
