//! Trilinear sampling with clamp-to-edge boundary handling.

use super::{GridShape, VectorField, VolumeGrid};
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};
use nalgebra::Vector3;

/// Clamp a continuous coordinate to the valid base-corner range and return
/// (base index, fraction) per axis.
#[inline]
fn cell<T: Real>(p: T, n: usize) -> (usize, usize, T) {
    let max = cst::<T>((n - 1) as f64);
    let p = p.max(T::zero()).min(max);
    let base = p.floor();
    let mut i0 = base.to_usize().unwrap_or(0);
    if i0 + 1 >= n {
        i0 = n.saturating_sub(2); // degenerate axis (n == 1) handled below
    }
    if n == 1 {
        return (0, 0, T::zero());
    }
    let frac = p - cst::<T>(i0 as f64);
    (i0, i0 + 1, frac)
}

/// Weights and corner indices of the trilinear stencil at `point`.
#[inline]
pub(crate) fn stencil<T: Real>(
    shape: &GridShape<T>,
    point: Vector3<T>,
) -> ([usize; 8], [T; 8], [T; 3], [usize; 6]) {
    let (x0, x1, fx) = cell(point.x, shape.dims[0]);
    let (y0, y1, fy) = cell(point.y, shape.dims[1]);
    let (z0, z1, fz) = cell(point.z, shape.dims[2]);
    let gx = T::one() - fx;
    let gy = T::one() - fy;
    let gz = T::one() - fz;
    let idx = [
        shape.index(x0, y0, z0),
        shape.index(x1, y0, z0),
        shape.index(x0, y1, z0),
        shape.index(x1, y1, z0),
        shape.index(x0, y0, z1),
        shape.index(x1, y0, z1),
        shape.index(x0, y1, z1),
        shape.index(x1, y1, z1),
    ];
    let w = [
        gx * gy * gz,
        fx * gy * gz,
        gx * fy * gz,
        fx * fy * gz,
        gx * gy * fz,
        fx * gy * fz,
        gx * fy * fz,
        fx * fy * fz,
    ];
    (idx, w, [fx, fy, fz], [x0, x1, y0, y1, z0, z1])
}

/// Sample one channel of a volume at a continuous point (voxel units).
#[inline]
pub fn sample_channel<T: Real>(field: &VolumeGrid<T>, channel: usize, point: Vector3<T>) -> T {
    let shape = field.shape();
    let (idx, w, _, _) = stencil(&shape, point);
    let vals = field.channel(channel);
    let mut acc = T::zero();
    for c in 0..8 {
        acc += w[c] * vals[idx[c]];
    }
    acc
}

/// Sample every channel of a volume at a list of points.
///
/// Returns one row of `channels` values per point. The missing mask is not
/// consulted here; callers that care about missingness must handle it at
/// the voxel level before interpolating.
pub fn sample_trilinear<T: Real>(
    field: &VolumeGrid<T>,
    coords: &[Vector3<T>],
) -> Result<Vec<Vec<T>>> {
    if field.is_empty() {
        return Err(Error::invalid("cannot sample an empty field"));
    }
    for p in coords {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::non_finite("sample coordinate"));
        }
    }
    let shape = field.shape();
    let mut out = Vec::with_capacity(coords.len());
    for &p in coords {
        let (idx, w, _, _) = stencil(&shape, p);
        let mut row = Vec::with_capacity(field.channels());
        for d in 0..field.channels() {
            let vals = field.channel(d);
            let mut acc = T::zero();
            for c in 0..8 {
                acc += w[c] * vals[idx[c]];
            }
            row.push(acc);
        }
        out.push(row);
    }
    Ok(out)
}

/// Sample a channel together with the exact gradient of the trilinear
/// interpolant (voxel units), used by the registration chain rule.
///
/// The gradient is the analytic in-cell derivative of the interpolant, so
/// finite differences of the sampled value reproduce it to rounding as long
/// as the step stays inside the cell. Outside the domain the clamped
/// interpolant is constant along the clamped axis and the derivative is 0.
#[inline]
pub fn sample_trilinear_with_gradient<T: Real>(
    values: &[T],
    shape: &GridShape<T>,
    point: Vector3<T>,
) -> (T, Vector3<T>) {
    let (idx, w, [fx, fy, fz], _) = stencil(shape, point);
    let v: [T; 8] = std::array::from_fn(|c| values[idx[c]]);
    let mut val = T::zero();
    for c in 0..8 {
        val += w[c] * v[c];
    }
    let gx = T::one() - fx;
    let gy = T::one() - fy;
    let gz = T::one() - fz;
    // d/dx: difference of x-neighbour corners, weighted by the other axes
    let ddx = (v[1] - v[0]) * gy * gz + (v[3] - v[2]) * fy * gz + (v[5] - v[4]) * gy * fz
        + (v[7] - v[6]) * fy * fz;
    let ddy = (v[2] - v[0]) * gx * gz + (v[3] - v[1]) * fx * gz + (v[6] - v[4]) * gx * fz
        + (v[7] - v[5]) * fx * fz;
    let ddz = (v[4] - v[0]) * gx * gy + (v[5] - v[1]) * fx * gy + (v[6] - v[2]) * gx * fy
        + (v[7] - v[3]) * fx * fy;
    let clamped = |p: T, n: usize| n == 1 || p < T::zero() || p > cst::<T>((n - 1) as f64);
    let grad = Vector3::new(
        if clamped(point.x, shape.dims[0]) { T::zero() } else { ddx },
        if clamped(point.y, shape.dims[1]) { T::zero() } else { ddy },
        if clamped(point.z, shape.dims[2]) { T::zero() } else { ddz },
    );
    (val, grad)
}

/// Sample a vector field at a continuous point (componentwise trilinear).
#[inline]
pub fn sample_vector<T: Real>(field: &VectorField<T>, point: Vector3<T>) -> Vector3<T> {
    let shape = field.shape();
    let (idx, w, _, _) = stencil(&shape, point);
    let mut acc = Vector3::zeros();
    for c in 0..8 {
        acc += field.get(idx[c]) * w[c];
    }
    acc
}

/// Sample a vector field at a list of points.
pub fn sample_vector_field<T: Real>(
    field: &VectorField<T>,
    coords: &[Vector3<T>],
) -> Result<Vec<Vector3<T>>> {
    if field.is_empty() {
        return Err(Error::invalid("cannot sample an empty field"));
    }
    Ok(coords.iter().map(|&p| sample_vector(field, p)).collect())
}
