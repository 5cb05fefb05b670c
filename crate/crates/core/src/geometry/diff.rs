//! Finite-difference spatial derivatives and Jacobian determinants.

use super::{VectorField, VolumeGrid};
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};
use nalgebra::{Matrix3, Vector3};

/// Per-axis central difference in the interior, one-sided at the faces.
/// `get(i)` returns the value at index i along the axis; returns d/di
/// without spacing scaling.
#[inline]
fn axis_diff<T: Real>(get: impl Fn(usize) -> T, i: usize, n: usize) -> T {
    if n == 1 {
        T::zero()
    } else if i == 0 {
        get(1) - get(0)
    } else if i + 1 == n {
        get(n - 1) - get(n - 2)
    } else {
        (get(i + 1) - get(i - 1)) * cst::<T>(0.5)
    }
}

/// Gradient of every channel of a scalar volume, scaled by 1/spacing so the
/// result is per millimetre. Central differences in the interior, one-sided
/// at the boundary faces.
pub fn spatial_gradient<T: Real>(field: &VolumeGrid<T>) -> Result<Vec<VectorField<T>>> {
    let dims = field.dims();
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::invalid(
            "spatial_gradient requires at least 2 voxels per axis",
        ));
    }
    let shape = field.shape();
    let spacing = field.spacing();
    let mut out = Vec::with_capacity(field.channels());
    for d in 0..field.channels() {
        let vals = field.channel(d);
        let mut grad = VectorField::zeros(shape);
        for (j, [x, y, z]) in shape.iter_voxels() {
            let gx = axis_diff(|i| vals[shape.index(i, y, z)], x, dims[0]) / spacing[0];
            let gy = axis_diff(|i| vals[shape.index(x, i, z)], y, dims[1]) / spacing[1];
            let gz = axis_diff(|i| vals[shape.index(x, y, i)], z, dims[2]) / spacing[2];
            grad.set(j, Vector3::new(gx, gy, gz));
        }
        out.push(grad);
    }
    Ok(out)
}

/// 3x3 Jacobian of a coordinate map (voxel units) at a voxel, by central
/// differences (one-sided at faces). Column a holds d(map)/d(axis a).
#[inline]
pub fn map_jacobian<T: Real>(map: &VectorField<T>, j: usize) -> Matrix3<T> {
    let shape = map.shape();
    let [x, y, z] = shape.coords(j);
    let dims = shape.dims;
    let mut jac = Matrix3::identity();
    for comp in 0..3 {
        jac[(comp, 0)] = axis_diff(|i| map.get(shape.index(i, y, z))[comp], x, dims[0]);
        jac[(comp, 1)] = axis_diff(|i| map.get(shape.index(x, i, z))[comp], y, dims[1]);
        jac[(comp, 2)] = axis_diff(|i| map.get(shape.index(x, y, i))[comp], z, dims[2]);
    }
    // a singleton axis contributes an identity column so determinants stay
    // meaningful for flat grids
    for a in 0..3 {
        if dims[a] == 1 {
            for comp in 0..3 {
                jac[(comp, a)] = if comp == a { T::one() } else { T::zero() };
            }
        }
    }
    jac
}

/// Determinant of the finite-difference Jacobian of a coordinate map at
/// every voxel.
pub fn jacobian_determinants<T: Real>(map: &VectorField<T>) -> Result<Vec<T>> {
    let dims = map.dims();
    if dims.iter().filter(|&&n| n >= 2).count() < 2 {
        return Err(Error::invalid(
            "jacobian_determinants requires at least 2 voxels per axis",
        ));
    }
    let n = map.len();
    let mut dets = Vec::with_capacity(n);
    for j in 0..n {
        dets.push(map_jacobian(map, j).determinant());
    }
    Ok(dets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_has_zero_gradient() {
        let v = VolumeGrid::from_scalar([3, 3, 3], vec![2.5; 27]).unwrap();
        let g = spatial_gradient(&v).unwrap();
        assert!(g[0].max_abs() < 1e-15);
    }

    #[test]
    fn linear_field_gradient_is_slope() {
        // f(x,y,z) = x in mm with spacing 2mm: value at voxel x is 2x
        let dims = [4, 3, 3];
        let shape = GridShape::<f64>::new(dims, [2.0, 1.0, 1.0]);
        let mut vals = vec![0.0; shape.len()];
        for (j, [x, _, _]) in shape.iter_voxels() {
            vals[j] = 2.0 * x as f64;
        }
        let v = VolumeGrid::new(dims, [2.0, 1.0, 1.0], 1, vals, None).unwrap();
        let g = spatial_gradient(&v).unwrap();
        for (j, _) in shape.iter_voxels() {
            let got = g[0].get(j);
            assert!((got.x - 1.0).abs() < 1e-12);
            assert!(got.y.abs() < 1e-12 && got.z.abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_independent_finite_differences() {
        let dims = [5, 5, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vals: Vec<f64> = (0..125).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = VolumeGrid::new(dims, [1.5, 0.5, 2.0], 1, vals.clone(), None).unwrap();
        let g = spatial_gradient(&v).unwrap();
        let shape = v.shape();
        // re-derive the scheme from scratch
        for (j, [x, y, z]) in shape.iter_voxels() {
            let f = |xx: usize, yy: usize, zz: usize| vals[shape.index(xx, yy, zz)];
            let ex = if x == 0 {
                f(1, y, z) - f(0, y, z)
            } else if x == 4 {
                f(4, y, z) - f(3, y, z)
            } else {
                0.5 * (f(x + 1, y, z) - f(x - 1, y, z))
            } / 1.5;
            let ey = if y == 0 {
                f(x, 1, z) - f(x, 0, z)
            } else if y == 4 {
                f(x, 4, z) - f(x, 3, z)
            } else {
                0.5 * (f(x, y + 1, z) - f(x, y - 1, z))
            } / 0.5;
            let ez = if z == 0 {
                f(x, y, 1) - f(x, y, 0)
            } else if z == 4 {
                f(x, y, 4) - f(x, y, 3)
            } else {
                0.5 * (f(x, y, z + 1) - f(x, y, z - 1))
            } / 2.0;
            let got = g[0].get(j);
            assert!((got.x - ex).abs() < 1e-12);
            assert!((got.y - ey).abs() < 1e-12);
            assert!((got.z - ez).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_field_gradient_is_its_slope() {
        // f(x,y,z) = a x + b y + c z + d (mm coordinates)
        let dims = [5, 6, 4];
        let spacing = [0.8, 1.2, 2.0];
        let shape = GridShape::new(dims, spacing);
        let (a, b, c, d) = (0.7, -1.3, 0.4, 2.0);
        let mut vals = vec![0.0; shape.len()];
        for (j, [x, y, z]) in shape.iter_voxels() {
            vals[j] = a * x as f64 * spacing[0] + b * y as f64 * spacing[1]
                + c * z as f64 * spacing[2]
                + d;
        }
        let v = VolumeGrid::new(dims, spacing, 1, vals, None).unwrap();
        let g = spatial_gradient(&v).unwrap();
        for (j, [x, y, z]) in shape.iter_voxels() {
            let interior = x > 0 && x + 1 < dims[0] && y > 0 && y + 1 < dims[1]
                && z > 0 && z + 1 < dims[2];
            if interior {
                let got = g[0].get(j);
                assert!((got.x - a).abs() < 1e-10);
                assert!((got.y - b).abs() < 1e-10);
                assert!((got.z - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singleton_axis_rejected() {
        let v = VolumeGrid::from_scalar([3, 1, 3], vec![0.0; 9]).unwrap();
        assert!(spatial_gradient(&v).is_err());
    }

    #[test]
    fn identity_map_has_unit_determinant() {
        let map = VectorField::<f64>::identity_map(GridShape::isotropic([4, 4, 4]));
        let dets = jacobian_determinants(&map).unwrap();
        for d in dets {
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scaling_determinant() {
        let shape = GridShape::<f64>::isotropic([5, 5, 5]);
        let mut map = VectorField::identity_map(shape);
        for v in map.as_mut_slice() {
            *v *= 2.0;
        }
        let dets = jacobian_determinants(&map).unwrap();
        let shape = map.shape();
        for (j, [x, y, z]) in shape.iter_voxels() {
            let interior = (1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z);
            if interior {
                assert!((dets[j] - 8.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn determinant_matches_cofactor_oracle() {
        let shape = GridShape::<f64>::isotropic([6, 6, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut map = VectorField::identity_map(shape);
        for v in map.as_mut_slice() {
            v.x += 0.1 * rng.gen_range(-1.0..1.0);
            v.y += 0.1 * rng.gen_range(-1.0..1.0);
            v.z += 0.1 * rng.gen_range(-1.0..1.0);
        }
        let dets = jacobian_determinants(&map).unwrap();
        for j in 0..map.len() {
            let m = map_jacobian(&map, j);
            // cofactor expansion along the first row, written out by hand
            let oracle = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
            assert!((dets[j] - oracle).abs() < 1e-10);
        }
    }
}
