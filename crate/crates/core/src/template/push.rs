//! Pushforward of subject responsibilities into template space.

use super::TissueAtlas;
use crate::error::{Error, Result};
use crate::geometry::{jacobian_determinants, GridShape, VectorField};
use crate::mixture::{epsilon_pi, Responsibilities, TissueWeights};
use crate::scalar::{cst, Real};

/// One subject's contribution: `n_jk = det(J_xi^-1)_j gamma_k(xi^-1(y_j))`
/// per template voxel (row-major N_pi x K). The per-voxel volume mass
/// `V_j = sum_k n_jk` equals the Jacobian determinant because gamma rows
/// sum to one.
#[derive(Debug, Clone)]
pub struct SubjectPush<T> {
    pub n: Vec<T>,
    pub k: usize,
}

impl<T: Real> SubjectPush<T> {
    #[inline]
    pub fn row(&self, j: usize) -> &[T] {
        &self.n[j * self.k..(j + 1) * self.k]
    }

    #[inline]
    pub fn mass(&self, j: usize) -> T {
        self.row(j).iter().fold(T::zero(), |a, &b| a + b)
    }
}

/// Aggregated accumulators for the template update.
#[derive(Debug, Clone)]
pub struct PushedStats<T> {
    /// `N_jk = sum_i n_ijk` (row-major N_pi x K).
    pub n: Vec<T>,
    /// `Wsum_jk = sum_i V_ij w_ik / (sum_c w_ic pi_jc)` under the previous
    /// template and the current weights.
    pub wsum: Vec<T>,
    pub k: usize,
}

impl<T: Real> PushedStats<T> {
    /// Build both accumulators from per-subject contributions.
    pub fn aggregate(
        contribs: &[SubjectPush<T>],
        weights: &[TissueWeights<T>],
        previous: &TissueAtlas<T>,
    ) -> Result<Self> {
        let k = previous.classes();
        let n_vox = previous.len();
        if contribs.len() != weights.len() {
            return Err(Error::invalid("push aggregation: subject count mismatch"));
        }
        if contribs.iter().any(|c| c.k != k || c.n.len() != n_vox * k) {
            return Err(Error::invalid("push aggregation: shape mismatch"));
        }
        let mut n = vec![T::zero(); n_vox * k];
        let mut wsum = vec![T::zero(); n_vox * k];
        let mut row = vec![T::zero(); k];
        let floor = epsilon_pi::<T>();
        for (contrib, w) in contribs.iter().zip(weights) {
            for j in 0..n_vox {
                previous.row(j, &mut row);
                let mut denom = T::zero();
                for c in 0..k {
                    denom += w.w[c] * row[c];
                }
                denom = denom.max(floor);
                let mass = contrib.mass(j);
                let crow = contrib.row(j);
                for c in 0..k {
                    n[j * k + c] += crow[c];
                    wsum[j * k + c] += mass * w.w[c] / denom;
                }
            }
        }
        Ok(PushedStats { n, wsum, k })
    }
}

/// Push one subject's responsibilities through the inverse warp.
///
/// `xi_inverse` lives on the template grid and holds subject voxel
/// coordinates; its Jacobian determinants weight the interpolated
/// responsibilities so mass is preserved under the change of variables.
pub fn push_responsibilities<T: Real>(
    gamma: &Responsibilities<T>,
    subject_shape: GridShape<T>,
    xi_inverse: &VectorField<T>,
) -> Result<SubjectPush<T>> {
    if gamma.len() != subject_shape.len() {
        return Err(Error::invalid("push: gamma does not match subject grid"));
    }
    let dets = jacobian_determinants(xi_inverse)?;
    let shape = xi_inverse.shape();
    // Template voxels pulling from outside the subject's field of view hit
    // the clamped sampling plateau: their finite-difference determinants
    // collapse to zero (or slightly below) even though the underlying
    // diffeomorphism is fine. Those voxels receive no mass. A clearly
    // negative determinant away from the clamp plateau is a real fold.
    let inside = |p: nalgebra::Vector3<T>| -> bool {
        (0..3).all(|a| {
            p[a] > T::one() && p[a] < cst::<T>((subject_shape.dims[a] - 2) as f64)
        })
    };
    for (j, &d) in dets.iter().enumerate() {
        if d <= T::zero() && inside(xi_inverse.get(j)) && d < cst::<T>(-1e-6) {
            return Err(Error::Foldover {
                voxel: shape.coords(j),
                det: d.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let k = gamma.classes();
    let n_template = xi_inverse.len();
    let mut out = vec![T::zero(); n_template * k];
    for j in 0..n_template {
        let det = dets[j].max(T::zero());
        if det == T::zero() {
            continue;
        }
        let p = xi_inverse.get(j);
        let (idx, w, _, _) = crate::geometry::interp_stencil(&subject_shape, p);
        for corner in 0..8 {
            let grow = gamma.row(idx[corner]);
            let wc = w[corner] * det;
            for c in 0..k {
                out[j * k + c] += wc * grow[c];
            }
        }
    }
    Ok(SubjectPush { n: out, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VectorField;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gamma(n: usize, k: usize, seed: u64) -> Responsibilities<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = vec![0.0; n * k];
        for j in 0..n {
            let mut sum = 0.0;
            for c in 0..k {
                g[j * k + c] = rng.gen_range(0.01..1.0);
                sum += g[j * k + c];
            }
            for c in 0..k {
                g[j * k + c] /= sum;
            }
        }
        Responsibilities::new(g, k).unwrap()
    }

    #[test]
    fn identity_deformation_reproduces_gamma() {
        let shape = GridShape::<f64>::isotropic([4, 4, 4]);
        let gamma = random_gamma(shape.len(), 3, 1);
        let id = VectorField::identity_map(shape);
        let push = push_responsibilities(&gamma, shape, &id).unwrap();
        for j in 0..shape.len() {
            for c in 0..3 {
                assert!((push.row(j)[c] - gamma.row(j)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_scaling_scales_contributions() {
        // xi^-1 maps template voxel y to subject voxel 2y: det = 8
        let shape = GridShape::<f64>::isotropic([5, 5, 5]);
        let gamma = Responsibilities::uniform(shape.len(), 2);
        let mut map = VectorField::identity_map(shape);
        for v in map.as_mut_slice() {
            *v *= 2.0;
        }
        let push = push_responsibilities(&gamma, shape, &map).unwrap();
        // interior voxels: det 8, gamma uniform -> entries 8 * 0.5 = 4
        let j = shape.index(2, 2, 2);
        assert!((push.row(j)[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mass_is_conserved_under_small_deformation() {
        let shape = GridShape::<f64>::isotropic([10, 10, 10]);
        let gamma = random_gamma(shape.len(), 2, 7);
        // smooth small displacement with zero boundary
        let mut map = VectorField::identity_map(shape);
        for (j, [x, y, z]) in shape.iter_voxels() {
            let win = |a: usize| (a as f64 / 9.0 * std::f64::consts::PI).sin();
            let w = win(x) * win(y) * win(z);
            let mut v = map.get(j);
            v.x += 0.4 * w * (y as f64 * 0.6).sin();
            v.y += 0.4 * w * (z as f64 * 0.7).cos();
            v.z += 0.4 * w * (x as f64 * 0.5).sin();
            map.set(j, v);
        }
        let push = push_responsibilities(&gamma, shape, &map).unwrap();
        let total: f64 = push.n.iter().sum();
        let expect: f64 = shape.len() as f64;
        let rel = (total - expect).abs() / expect;
        assert!(rel < 0.01, "mass drift {rel}");
    }

    #[test]
    fn foldover_is_an_error() {
        let shape = GridShape::<f64>::isotropic([6, 6, 6]);
        let gamma = Responsibilities::uniform(shape.len(), 2);
        let mut map = VectorField::identity_map(shape);
        for v in map.as_mut_slice() {
            v.x = 5.0 - v.x; // interior reflection: genuinely folded
        }
        assert!(matches!(
            push_responsibilities(&gamma, shape, &map),
            Err(Error::Foldover { .. })
        ));
    }

    #[test]
    fn clamped_plateau_voxels_contribute_nothing() {
        // a composed inverse warp is built by sampling; template voxels
        // whose pull-back lands outside the subject domain pick up the
        // clamped plateau, their determinant collapses to zero and they
        // must contribute no mass (and raise no foldover)
        let shape = GridShape::<f64>::isotropic([4, 4, 4]);
        let gamma = Responsibilities::uniform(shape.len(), 2);
        let id = VectorField::identity_map(shape);
        let mut map = VectorField::zeros(shape);
        for (j, [x, y, z]) in shape.iter_voxels() {
            // pull-back coordinates shifted far outside, then sampled
            let p = Vector3::new(x as f64 + 100.0, y as f64, z as f64);
            map.set(j, crate::geometry::sample_vector(&id, p));
        }
        let push = push_responsibilities(&gamma, shape, &map).unwrap();
        // the x-plateau kills the determinant everywhere
        let total: f64 = push.n.iter().sum();
        assert!(total.abs() < 1e-12, "plateau mass {total}");
    }

    #[test]
    fn out_of_domain_pull_clamps() {
        let shape = GridShape::<f64>::isotropic([4, 4, 4]);
        let gamma = random_gamma(shape.len(), 2, 3);
        let mut map = VectorField::identity_map(shape);
        for v in map.as_mut_slice() {
            *v += Vector3::new(100.0, 0.0, 0.0);
        }
        // far outside: clamped sampling uses the boundary values
        let push = push_responsibilities(&gamma, shape, &map).unwrap();
        let j = shape.index(1, 2, 2);
        let edge = shape.index(3, 2, 2);
        assert!((push.row(j)[0] - gamma.row(edge)[0]).abs() < 1e-12);
    }
}
