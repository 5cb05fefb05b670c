//! Gaussian smoothing of the template between outer iterations.

use super::TissueAtlas;
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};

/// Normalized 1-D Gaussian kernel for the given fwhm (in voxels).
fn kernel<T: Real>(fwhm_vox: f64) -> Vec<T> {
    let sigma = fwhm_vox / (8.0 * (2.0f64).ln()).sqrt();
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        sum += v;
        k.push(v);
    }
    k.into_iter().map(|v| cst::<T>(v / sum)).collect()
}

/// Separable 1-D convolution along one axis with replicate boundary.
fn convolve_axis<T: Real>(
    values: &mut Vec<T>,
    dims: [usize; 3],
    axis: usize,
    k: &[T],
) {
    let radius = (k.len() / 2) as i64;
    let n = dims[0] * dims[1] * dims[2];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let len = dims[axis];
    let mut out = vec![T::zero(); n];
    for (j, val) in out.iter_mut().enumerate() {
        // coordinate along the axis
        let pos = match axis {
            0 => j % dims[0],
            1 => (j / dims[0]) % dims[1],
            _ => j / (dims[0] * dims[1]),
        } as i64;
        let base = j as i64 - pos * stride as i64;
        let mut acc = T::zero();
        for (t, &kv) in k.iter().enumerate() {
            let q = (pos + t as i64 - radius).clamp(0, len as i64 - 1);
            acc += kv * values[(base + q * stride as i64) as usize];
        }
        *val = acc;
    }
    *values = out;
}

/// Per-class separable Gaussian of the given fwhm (mm), followed by row
/// re-normalization and flooring. `fwhm = 0` is the identity (up to the
/// floor).
pub fn smooth_template<T: Real>(atlas: &mut TissueAtlas<T>, fwhm_mm: T) -> Result<()> {
    if fwhm_mm < T::zero() {
        return Err(Error::invalid("fwhm must be non-negative"));
    }
    if fwhm_mm > T::zero() {
        let shape = atlas.shape();
        let dims = shape.dims;
        for c in 0..atlas.classes() {
            let mut plane: Vec<T> = atlas.class_plane(c).to_vec();
            for axis in 0..3 {
                if dims[axis] < 2 {
                    continue;
                }
                let fwhm_vox =
                    fwhm_mm.to_f64().unwrap_or(0.0) / shape.spacing[axis].to_f64().unwrap_or(1.0);
                if fwhm_vox <= 1e-12 {
                    continue;
                }
                let k = kernel::<T>(fwhm_vox);
                convolve_axis(&mut plane, dims, axis, &k);
            }
            for (j, &v) in plane.iter().enumerate() {
                atlas.set_value(j, c, v);
            }
        }
    }
    atlas.renormalize();
    Ok(())
}
