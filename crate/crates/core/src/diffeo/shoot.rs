//! Geodesic shooting: integrate the momentum-conservation system from the
//! initial velocity to a diffeomorphism with its inverse and Jacobians.
//!
//! Per Euler step the momentum is re-transported from t = 0 through the
//! running inverse map (`m_t = det(Dpsi) Dpsi^T m_0(psi)`), the velocity is
//! recovered by inverting the operator (`L^T L u_t = m_t`), and both maps
//! advance: `phi <- (id + h u) o phi`, `psi <- psi o (id - h u)`. With a
//! single step this reduces to the small-deformation update `phi = id + u`.
//!
//! The integration runs on the torus: maps are carried as periodic
//! displacement fields and all sampling/differencing wraps, consistent
//! with the circulant operator. The transported momentum is re-centred to
//! its initial mean each step (the total momentum is a conserved quantity
//! of the flow; without the projection the operator inverse amplifies any
//! discrete drift of the zero-frequency component by 1/lambda_zero).

use super::multigrid::{multigrid_solve_warm, SolveSettings};
use super::operator::{apply_ltl, OperatorSpec};
use crate::error::{Error, Result};
use crate::geometry::{DeformationField, GridShape, VectorField};
use crate::scalar::{cst, Real};
use nalgebra::{Matrix3, Vector3};

/// Trilinear sample of a periodic vector field at an arbitrary point.
fn sample_periodic<T: Real>(field: &VectorField<T>, p: Vector3<T>) -> Vector3<T> {
    let shape = field.shape();
    let dims = shape.dims;
    let mut base = [0usize; 3];
    let mut next = [0usize; 3];
    let mut frac = [T::zero(); 3];
    for a in 0..3 {
        let n = dims[a] as f64;
        let x = p[a].to_f64().unwrap_or(0.0);
        let f = x.floor();
        let mut b = (f % n) as i64;
        if b < 0 {
            b += n as i64;
        }
        base[a] = b as usize % dims[a];
        next[a] = (base[a] + 1) % dims[a];
        frac[a] = cst(x - f);
    }
    let mut acc = Vector3::zeros();
    for dz in 0..2 {
        let (z, wz) = if dz == 0 {
            (base[2], T::one() - frac[2])
        } else {
            (next[2], frac[2])
        };
        for dy in 0..2 {
            let (y, wy) = if dy == 0 {
                (base[1], T::one() - frac[1])
            } else {
                (next[1], frac[1])
            };
            for dx in 0..2 {
                let (x, wx) = if dx == 0 {
                    (base[0], T::one() - frac[0])
                } else {
                    (next[0], frac[0])
                };
                acc += field.get(shape.index(x, y, z)) * (wx * wy * wz);
            }
        }
    }
    acc
}

/// Jacobian of `id + displacement` by wrapped central differences.
fn wrap_jacobian<T: Real>(disp: &VectorField<T>, shape: GridShape<T>, j: usize) -> Matrix3<T> {
    let [x, y, z] = shape.coords(j);
    let dims = shape.dims;
    let half: T = cst(0.5);
    let mut jac = Matrix3::identity();
    let wrap = |i: usize, d: isize, n: usize| -> usize {
        let m = n as isize;
        (((i as isize + d) % m + m) % m) as usize
    };
    for comp in 0..3 {
        let dx = (disp.get(shape.index(wrap(x, 1, dims[0]), y, z))[comp]
            - disp.get(shape.index(wrap(x, -1, dims[0]), y, z))[comp])
            * half;
        let dy = (disp.get(shape.index(x, wrap(y, 1, dims[1]), z))[comp]
            - disp.get(shape.index(x, wrap(y, -1, dims[1]), z))[comp])
            * half;
        let dz = (disp.get(shape.index(x, y, wrap(z, 1, dims[2])))[comp]
            - disp.get(shape.index(x, y, wrap(z, -1, dims[2])))[comp])
            * half;
        jac[(comp, 0)] += dx;
        jac[(comp, 1)] += dy;
        jac[(comp, 2)] += dz;
    }
    jac
}

fn mean<T: Real>(field: &VectorField<T>) -> Vector3<T> {
    let mut acc = Vector3::zeros();
    for v in field.iter() {
        acc += v;
    }
    acc / cst::<T>(field.len() as f64)
}

/// Shoot an initial velocity (mm) over unit time in `steps` Euler steps.
pub fn geodesic_shoot<T: Real>(
    u0: &VectorField<T>,
    spec: &OperatorSpec<T>,
    steps: usize,
    settings: &SolveSettings,
) -> Result<DeformationField<T>> {
    if steps == 0 {
        return Err(Error::invalid("shooting needs at least one step"));
    }
    spec.validate()?;
    let shape = u0.shape();
    let spacing = shape.spacing;
    let h = T::one() / cst::<T>(steps as f64);

    let m0 = apply_ltl(u0, spec);
    let m0_mean = mean(&m0);
    let mut dphi = VectorField::zeros(shape);
    let mut dpsi = VectorField::zeros(shape);

    // the velocity evolves slowly between Euler steps: warm-start each
    // operator inversion from the previous step and solve to a tolerance
    // matched to the integration error, not to machine precision
    let step_solve = SolveSettings {
        pre_smooth: settings.pre_smooth,
        post_smooth: settings.post_smooth,
        cycles_per_pass: 1,
        max_passes: 4,
        rtol: settings.rtol.max(1e-4),
        direct_threshold: settings.direct_threshold,
    };
    let mut u_t = u0.clone();
    for step in 0..steps {
        if step > 0 {
            // m_t = det(Dpsi) Dpsi_mm^T m0(psi), Dpsi_mm = H J_vox H^-1
            let mut m_t = VectorField::zeros(shape);
            for (j, [x, y, z]) in shape.iter_voxels() {
                let jac = wrap_jacobian(&dpsi, shape, j);
                let det = jac.determinant();
                let here = Vector3::new(
                    cst::<T>(x as f64),
                    cst::<T>(y as f64),
                    cst::<T>(z as f64),
                );
                let m = sample_periodic(&m0, here + dpsi.get(j));
                // (H J H^-1)^T m = H^-1 J^T H m
                let mut hm = m;
                for a in 0..3 {
                    hm[a] *= spacing[a];
                }
                let mut out = jac.transpose() * hm;
                for a in 0..3 {
                    out[a] /= spacing[a];
                }
                m_t.set(j, out * det);
            }
            // restore the conserved total momentum
            let drift = m0_mean - mean(&m_t);
            for v in m_t.as_mut_slice() {
                *v += drift;
            }
            let (u, _info) =
                multigrid_solve_warm(&m_t, spec, &[], T::zero(), &step_solve, Some(&u_t))?;
            u_t = u;
        }
        // velocity in voxel units for the map updates
        let mut u_vox = VectorField::zeros(shape);
        for j in 0..shape.len() {
            let v = u_t.get(j);
            u_vox.set(
                j,
                Vector3::new(v.x / spacing[0], v.y / spacing[1], v.z / spacing[2]),
            );
        }
        // phi <- (id + h u) o phi : dphi(y) += h u(y + dphi(y))
        let mut new_dphi = VectorField::zeros(shape);
        for (j, [x, y, z]) in shape.iter_voxels() {
            let here = Vector3::new(
                cst::<T>(x as f64),
                cst::<T>(y as f64),
                cst::<T>(z as f64),
            );
            let d = dphi.get(j);
            new_dphi.set(j, d + sample_periodic(&u_vox, here + d) * h);
        }
        dphi = new_dphi;
        // psi <- psi o (id - h u) : dpsi(x) = dpsi(x - h u(x)) - h u(x)
        let mut new_dpsi = VectorField::zeros(shape);
        for (j, [x, y, z]) in shape.iter_voxels() {
            let here = Vector3::new(
                cst::<T>(x as f64),
                cst::<T>(y as f64),
                cst::<T>(z as f64),
            );
            let step_back = u_vox.get(j) * h;
            let d = sample_periodic(&dpsi, here - step_back);
            new_dpsi.set(j, d - step_back);
        }
        dpsi = new_dpsi;
    }

    // absolute maps and wrap-consistent determinants
    let mut forward = VectorField::identity_map(shape);
    let mut inverse = VectorField::identity_map(shape);
    let mut jac_det = Vec::with_capacity(shape.len());
    for j in 0..shape.len() {
        forward.set(j, forward.get(j) + dphi.get(j));
        inverse.set(j, inverse.get(j) + dpsi.get(j));
        let det = wrap_jacobian(&dphi, shape, j).determinant();
        if det <= T::zero() {
            return Err(Error::Foldover {
                voxel: shape.coords(j),
                det: det.to_f64().unwrap_or(f64::NAN),
            });
        }
        jac_det.push(det);
    }
    Ok(DeformationField {
        forward,
        inverse,
        jac_det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> OperatorSpec<f64> {
        OperatorSpec::new(1e-3, 0.1, 0.5, (0.25, 0.125), [1.0; 3]).unwrap()
    }

    #[test]
    fn zero_velocity_is_identity() {
        let shape = GridShape::isotropic([8, 8, 8]);
        let u = VectorField::<f64>::zeros(shape);
        let d = geodesic_shoot(&u, &spec(), 8, &Default::default()).unwrap();
        assert!(d.jac_det.iter().all(|&j| (j - 1.0).abs() < 1e-12));
        let id = VectorField::identity_map(shape);
        for j in 0..shape.len() {
            assert!((d.forward.get(j) - id.get(j)).norm() < 1e-12);
            assert!((d.inverse.get(j) - id.get(j)).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_velocity_translates() {
        // lambda_zero-only operator keeps a constant field constant along
        // the geodesic, so the endpoint is a pure translation
        let shape = GridShape::isotropic([8, 8, 8]);
        let s = OperatorSpec::new(1.0, 0.0, 0.0, (0.0, 0.0), [1.0; 3]).unwrap();
        let mut u = VectorField::<f64>::zeros(shape);
        for v in u.as_mut_slice() {
            *v = Vector3::new(0.4, -0.2, 0.1);
        }
        let d = geodesic_shoot(&u, &s, 8, &Default::default()).unwrap();
        for (j, [x, y, z]) in shape.iter_voxels() {
            let expect = Vector3::new(x as f64 + 0.4, y as f64 - 0.2, z as f64 + 0.1);
            assert!(
                (d.forward.get(j) - expect).norm() < 1e-3,
                "voxel {j}: {:?}",
                d.forward.get(j)
            );
        }
    }

    /// Smooth random velocity, windowed to vanish at the faces (anatomy
    /// does not cross the field of view) and scaled to a target max
    /// displacement.
    pub(crate) fn random_smooth_velocity(
        shape: GridShape<f64>,
        seed: u64,
        target_max: f64,
    ) -> VectorField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = shape.dims;
        let mut u = VectorField::zeros(shape);
        let win = |a: usize, n: usize| {
            (std::f64::consts::PI * a as f64 / (n - 1) as f64).sin().powi(2)
        };
        for comp in 0..3 {
            let a1 = rng.gen_range(-1.0..1.0);
            let a2 = rng.gen_range(-1.0..1.0);
            let p1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let p2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for (j, [x, y, z]) in shape.iter_voxels() {
                let fx = std::f64::consts::TAU * x as f64 / dims[0] as f64;
                let fy = std::f64::consts::TAU * y as f64 / dims[1] as f64;
                let fz = std::f64::consts::TAU * z as f64 / dims[2] as f64;
                let w = win(x, dims[0]) * win(y, dims[1]) * win(z, dims[2]);
                let mut v = u.get(j);
                v[comp] =
                    w * (a1 * (fx + p1).sin() * (fy + p2).cos() + a2 * (fz + p1).cos());
                u.set(j, v);
            }
        }
        let m = u.max_abs();
        u.scale_in_place(target_max / m);
        u
    }

    #[test]
    fn inverse_consistency_for_smooth_velocities() {
        let shape = GridShape::isotropic([16, 16, 16]);
        for seed in 0..5 {
            let u = random_smooth_velocity(shape, seed, 1.0);
            let d = geodesic_shoot(&u, &spec(), 8, &Default::default()).unwrap();
            assert!(d.jac_det.iter().all(|&j| j > 0.0));
            let err = d.inverse_consistency();
            assert!(err < 0.1, "seed {seed}: inverse error {err}");
        }
    }

    #[test]
    fn halving_step_size_changes_endpoint_little() {
        let shape = GridShape::isotropic([12, 12, 12]);
        let u = random_smooth_velocity(shape, 42, 1.0);
        let d8 = geodesic_shoot(&u, &spec(), 8, &Default::default()).unwrap();
        let d16 = geodesic_shoot(&u, &spec(), 16, &Default::default()).unwrap();
        let mut worst = 0.0f64;
        for j in 0..shape.len() {
            let diff = (d8.forward.get(j) - d16.forward.get(j)).norm();
            worst = worst.max(diff);
        }
        assert!(worst < 0.05, "endpoint drift {worst}");
    }

    #[test]
    fn single_step_is_small_deformation_update() {
        let shape = GridShape::isotropic([6, 6, 6]);
        let u = random_smooth_velocity(shape, 3, 0.3);
        let d = geodesic_shoot(&u, &spec(), 1, &Default::default()).unwrap();
        for (j, [x, y, z]) in shape.iter_voxels() {
            let expect = Vector3::new(x as f64, y as f64, z as f64) + u.get(j);
            assert!((d.forward.get(j) - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn velocity_norm_stays_bounded_along_geodesic() {
        // the operator norm of u_t is conserved in the continuum; the
        // discrete integration must not blow up
        let shape = GridShape::isotropic([12, 12, 12]);
        for seed in [0u64, 9, 23] {
            let u = random_smooth_velocity(shape, seed, 1.2);
            let d = geodesic_shoot(&u, &spec(), 8, &Default::default()).unwrap();
            let disp = d
                .forward
                .iter()
                .zip(VectorField::identity_map(shape).iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
            assert!(
                disp < 3.0 * 1.2,
                "seed {seed}: displacement {disp} suggests instability"
            );
        }
    }
}
