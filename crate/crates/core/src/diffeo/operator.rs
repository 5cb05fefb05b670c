//! The smoothness operator `L^T L`: zero-order, membrane, bending and
//! linear-elastic terms discretized with periodic (circulant) boundary
//! conditions, so single Fourier modes are exact eigenvectors.

use crate::error::{Error, Result};
use crate::geometry::VectorField;
use crate::scalar::{cst, Real};
use nalgebra::{Matrix3, Vector3};

/// Coefficients of the quadratic smoothness penalty (all non-negative, at
/// least one positive) plus the grid spacing the stencils use.
#[derive(Debug, Clone, Copy)]
pub struct OperatorSpec<T> {
    pub lambda_zero: T,
    pub lambda_membrane: T,
    pub lambda_bending: T,
    /// Lamé-style pair (mu, lambda) of the linear-elastic energy.
    pub lambda_elastic: (T, T),
    pub spacing: [T; 3],
}

impl<T: Real> OperatorSpec<T> {
    pub fn new(
        lambda_zero: T,
        lambda_membrane: T,
        lambda_bending: T,
        lambda_elastic: (T, T),
        spacing: [T; 3],
    ) -> Result<Self> {
        let spec = OperatorSpec {
            lambda_zero,
            lambda_membrane,
            lambda_bending,
            lambda_elastic,
            spacing,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Defaults used by the fitting pipeline (all overridable).
    pub fn default_for(spacing: [T; 3]) -> Self {
        OperatorSpec {
            lambda_zero: cst(1e-3),
            lambda_membrane: cst(0.1),
            lambda_bending: cst(0.5),
            lambda_elastic: (cst(0.25), cst(0.125)),
            spacing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_zero,
            self.lambda_membrane,
            self.lambda_bending,
            self.lambda_elastic.0,
            self.lambda_elastic.1,
        ];
        if all.iter().any(|&l| l < T::zero() || !l.is_finite()) {
            return Err(Error::invalid("operator coefficients must be >= 0"));
        }
        if all.iter().all(|&l| l == T::zero()) {
            return Err(Error::invalid("operator needs at least one positive term"));
        }
        if self.spacing.iter().any(|&h| h <= T::zero()) {
            return Err(Error::invalid("operator spacing must be positive"));
        }
        Ok(())
    }

    /// Rescale to a coarser grid (same physical coefficients, new spacing).
    pub fn with_spacing(&self, spacing: [T; 3]) -> Self {
        OperatorSpec { spacing, ..*self }
    }

    /// Central 3x3 block of the full stencil (needed by smoothers).
    pub fn central_block(&self) -> Matrix3<T> {
        let h2: [T; 3] = std::array::from_fn(|a| self.spacing[a] * self.spacing[a]);
        let two: T = cst(2.0);
        let c0 = two / h2[0] + two / h2[1] + two / h2[2];
        let mut quartic = T::zero();
        for a in 0..3 {
            quartic += two / (h2[a] * h2[a]);
        }
        let (mu, lam) = self.lambda_elastic;
        let mut m = Matrix3::zeros();
        for c in 0..3 {
            m[(c, c)] = self.lambda_zero
                + self.lambda_membrane * c0
                + self.lambda_bending * (c0 * c0 + quartic)
                + mu * (c0 + two / h2[c])
                + lam * two / h2[c];
            for a in 0..3 {
                if a != c {
                    let cross = T::one() / (self.spacing[a] * self.spacing[c]);
                    m[(c, a)] += mu * cross + lam * cross;
                }
            }
        }
        m
    }
}

#[cfg(test)]
fn wrap(i: usize, delta: isize, n: usize) -> usize {
    let m = n as isize;
    (((i as isize + delta) % m + m) % m) as usize
}

/// Negative Laplacian (periodic, 7-point), applied componentwise.
#[cfg(test)]
fn neg_laplacian<T: Real>(u: &VectorField<T>, spacing: [T; 3]) -> VectorField<T> {
    let shape = u.shape();
    let dims = shape.dims;
    let h2: [T; 3] = std::array::from_fn(|a| spacing[a] * spacing[a]);
    let mut out = VectorField::zeros(shape);
    for (j, [x, y, z]) in shape.iter_voxels() {
        let c = u.get(j);
        let mut acc = Vector3::zeros();
        let neighbors = [
            (u.get(shape.index(wrap(x, 1, dims[0]), y, z)), 0),
            (u.get(shape.index(wrap(x, -1, dims[0]), y, z)), 0),
            (u.get(shape.index(x, wrap(y, 1, dims[1]), z)), 1),
            (u.get(shape.index(x, wrap(y, -1, dims[1]), z)), 1),
            (u.get(shape.index(x, y, wrap(z, 1, dims[2]))), 2),
            (u.get(shape.index(x, y, wrap(z, -1, dims[2]))), 2),
        ];
        for (nb, axis) in neighbors {
            acc += (c - nb) / h2[axis];
        }
        out.set(j, acc);
    }
    out
}

/// Linear-elastic part: `mu sum_a D_a^T (D_a u_c + D_c u_a) + lam D_c^T div u`
/// with forward differences and periodic wrap (term-wise test oracle).
#[cfg(test)]
fn elastic<T: Real>(u: &VectorField<T>, spacing: [T; 3]) -> VectorField<T> {
    let shape = u.shape();
    let dims = shape.dims;
    let mut out = VectorField::zeros(shape);
    // forward difference of component comp along axis at voxel (x,y,z)
    let diff = |comp: usize, axis: usize, x: usize, y: usize, z: usize| -> T {
        let (xi, yi, zi) = match axis {
            0 => (wrap(x, 1, dims[0]), y, z),
            1 => (x, wrap(y, 1, dims[1]), z),
            _ => (x, y, wrap(z, 1, dims[2])),
        };
        (u.get(shape.index(xi, yi, zi))[comp] - u.get(shape.index(x, y, z))[comp])
            / spacing[axis]
    };
    // adjoint of the forward difference: (D^T v)_j = (v_{j-e} - v_j)/h
    for (j, [x, y, z]) in shape.iter_voxels() {
        let mut acc = Vector3::zeros();
        for c in 0..3 {
            let mut val = T::zero();
            for a in 0..3 {
                // strain term: D_a^T (D_a u_c + D_c u_a)
                let here = diff(c, a, x, y, z) + diff(a, c, x, y, z);
                let (xp, yp, zp) = match a {
                    0 => (wrap(x, -1, dims[0]), y, z),
                    1 => (x, wrap(y, -1, dims[1]), z),
                    _ => (x, y, wrap(z, -1, dims[2])),
                };
                let prev = diff(c, a, xp, yp, zp) + diff(a, c, xp, yp, zp);
                val += (prev - here) / spacing[a];
            }
            acc[c] = val;
        }
        out.set(j, acc);
    }
    out
}

/// Divergence-penalty part: `lam D_c^T (sum_a D_a u_a)` (test oracle).
#[cfg(test)]
fn div_penalty<T: Real>(u: &VectorField<T>, spacing: [T; 3]) -> VectorField<T> {
    let shape = u.shape();
    let dims = shape.dims;
    let n = shape.len();
    let mut div = vec![T::zero(); n];
    for (j, [x, y, z]) in shape.iter_voxels() {
        let mut d = T::zero();
        let nb = [
            (shape.index(wrap(x, 1, dims[0]), y, z), 0),
            (shape.index(x, wrap(y, 1, dims[1]), z), 1),
            (shape.index(x, y, wrap(z, 1, dims[2])), 2),
        ];
        for (i, axis) in nb {
            d += (u.get(i)[axis] - u.get(j)[axis]) / spacing[axis];
        }
        div[j] = d;
    }
    let mut out = VectorField::zeros(shape);
    for (j, [x, y, z]) in shape.iter_voxels() {
        let mut acc = Vector3::zeros();
        for c in 0..3 {
            let (xp, yp, zp) = match c {
                0 => (wrap(x, -1, dims[0]), y, z),
                1 => (x, wrap(y, -1, dims[1]), z),
                _ => (x, y, wrap(z, -1, dims[2])),
            };
            acc[c] = (div[shape.index(xp, yp, zp)] - div[j]) / spacing[c];
        }
        out.set(j, acc);
    }
    out
}

/// Apply the full operator `L^T L` to a velocity field.
///
/// Linear, self-adjoint and positive-semidefinite by construction (every
/// term is an adjoint pair), and consistent with [`penalty_energy`] via
/// `u . apply_ltl(u) = 2 penalty_energy(u)`.
///
/// Runs as two fused stencil passes: one 7-point pass for `G u` (reused by
/// membrane, bending and the `sum_a D_a^T D_a` part of the strain term),
/// then one pass combining everything. The mixed strain/divergence terms
/// expand to `mu D_a^T D_c u_a + lam D_c^T D_a u_a` plus the 1-D second
/// difference `(mu + lam) D_c^T D_c u_c`.
pub fn apply_ltl<T: Real>(u: &VectorField<T>, spec: &OperatorSpec<T>) -> VectorField<T> {
    let shape = u.shape();
    let dims = shape.dims;
    let [nx, ny, nz] = dims;
    let n = shape.len();
    let (mu, lam) = spec.lambda_elastic;
    let l0 = spec.lambda_zero;
    let lb = spec.lambda_bending;
    // mu sum_a D_a^T D_a u_c equals mu (G u)_c, folded into the G weight
    let lg = spec.lambda_membrane + mu;
    let h2: [T; 3] = std::array::from_fn(|a| spec.spacing[a] * spec.spacing[a]);
    let inv_h2: [T; 3] = std::array::from_fn(|a| T::one() / h2[a]);
    let cross: [[T; 3]; 3] = std::array::from_fn(|c| {
        std::array::from_fn(|a| T::one() / (spec.spacing[a] * spec.spacing[c]))
    });

    // wrapped +-1 neighbour indices per axis
    let xp: Vec<usize> = (0..nx).map(|x| (x + 1) % nx).collect();
    let xm: Vec<usize> = (0..nx).map(|x| (x + nx - 1) % nx).collect();
    let yp: Vec<usize> = (0..ny).map(|y| (y + 1) % ny).collect();
    let ym: Vec<usize> = (0..ny).map(|y| (y + ny - 1) % ny).collect();
    let zp: Vec<usize> = (0..nz).map(|z| (z + 1) % nz).collect();
    let zm: Vec<usize> = (0..nz).map(|z| (z + nz - 1) % nz).collect();

    let needs_g = lg > T::zero() || lb > T::zero();
    let ud = u.as_slice();
    // pass 1: g = G u (negative 7-point Laplacian)
    let mut g = vec![Vector3::<T>::zeros(); if needs_g { n } else { 0 }];
    if needs_g {
        for z in 0..nz {
            for y in 0..ny {
                let row = nx * (y + ny * z);
                let row_yp = nx * (yp[y] + ny * z);
                let row_ym = nx * (ym[y] + ny * z);
                let row_zp = nx * (y + ny * zp[z]);
                let row_zm = nx * (y + ny * zm[z]);
                for x in 0..nx {
                    let c = ud[row + x];
                    let acc = (c - ud[row + xp[x]] + (c - ud[row + xm[x]])) * inv_h2[0]
                        + (c - ud[row_yp + x] + (c - ud[row_ym + x])) * inv_h2[1]
                        + (c - ud[row_zp + x] + (c - ud[row_zm + x])) * inv_h2[2];
                    g[row + x] = acc;
                }
            }
        }
    }

    let mut out = VectorField::zeros(shape);
    let od = out.as_mut_slice();
    for z in 0..nz {
        for y in 0..ny {
            let row = nx * (y + ny * z);
            let row_yp = nx * (yp[y] + ny * z);
            let row_ym = nx * (ym[y] + ny * z);
            let row_zp = nx * (y + ny * zp[z]);
            let row_zm = nx * (y + ny * zm[z]);
            // rows for the diagonal neighbours of the cross terms
            let row_yp_zm = nx * (yp[y] + ny * zm[z]);
            let row_ym_zp = nx * (ym[y] + ny * zp[z]);
            for x in 0..nx {
                let j = row + x;
                let here = ud[j];
                let mut acc = here * l0;
                if needs_g {
                    acc += g[j] * lg;
                    if lb > T::zero() {
                        let c = g[j];
                        let gg = (c - g[row + xp[x]] + (c - g[row + xm[x]])) * inv_h2[0]
                            + (c - g[row_yp + x] + (c - g[row_ym + x])) * inv_h2[1]
                            + (c - g[row_zp + x] + (c - g[row_zm + x])) * inv_h2[2];
                        acc += gg * lb;
                    }
                }
                if mu > T::zero() || lam > T::zero() {
                    // neighbour values needed by the mixed terms
                    let u_xp = ud[row + xp[x]];
                    let u_xm = ud[row + xm[x]];
                    let u_yp = ud[row_yp + x];
                    let u_ym = ud[row_ym + x];
                    let u_zp = ud[row_zp + x];
                    let u_zm = ud[row_zm + x];
                    let u_xm_yp = ud[row_yp + xm[x]];
                    let u_xp_ym = ud[row_ym + xp[x]];
                    let u_xm_zp = ud[row_zp + xm[x]];
                    let u_xp_zm = ud[row_zm + xp[x]];
                    let u_ym_zp = ud[row_ym_zp + x];
                    let u_yp_zm = ud[row_yp_zm + x];
                    let neigh = |a: usize, sign: i32| -> &Vector3<T> {
                        match (a, sign) {
                            (0, 1) => &u_xp,
                            (0, -1) => &u_xm,
                            (1, 1) => &u_yp,
                            (1, -1) => &u_ym,
                            (2, 1) => &u_zp,
                            _ => &u_zm,
                        }
                    };
                    // diagonal j - e_a + e_c for (a, c) pairs, a != c
                    let diag = |a: usize, c: usize| -> &Vector3<T> {
                        match (a, c) {
                            (0, 1) => &u_xm_yp,
                            (1, 0) => &u_xp_ym,
                            (0, 2) => &u_xm_zp,
                            (2, 0) => &u_xp_zm,
                            (1, 2) => &u_ym_zp,
                            _ => &u_yp_zm,
                        }
                    };
                    for c in 0..3 {
                        // (mu + lam) D_c^T D_c u_c: 1-D second difference
                        let second = (here[c] + here[c]
                            - neigh(c, 1)[c]
                            - neigh(c, -1)[c])
                            * inv_h2[c];
                        let mut val = (mu + lam) * second;
                        for a in 0..3 {
                            if a == c {
                                continue;
                            }
                            // mu D_a^T D_c u_a :
                            // [u_a(j-e_a+e_c) - u_a(j-e_a) - u_a(j+e_c) + u_a(j)]
                            let x_term = diag(a, c)[a] - neigh(a, -1)[a]
                                - neigh(c, 1)[a]
                                + here[a];
                            // lam D_c^T D_a u_a :
                            // [u_a(j-e_c+e_a) - u_a(j-e_c) - u_a(j+e_a) + u_a(j)]
                            let y_term = diag(c, a)[a] - neigh(c, -1)[a]
                                - neigh(a, 1)[a]
                                + here[a];
                            val += (mu * x_term + lam * y_term) * cross[c][a];
                        }
                        acc[c] += val;
                    }
                }
                od[j] = acc;
            }
        }
    }
    out
}

/// `R(u) = 1/2 u^T (L^T L) u`; zero exactly on the operator's null space.
pub fn penalty_energy<T: Real>(u: &VectorField<T>, spec: &OperatorSpec<T>) -> T {
    u.dot(&apply_ltl(u, spec)) * cst::<T>(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(dims: [usize; 3], seed: u64) -> VectorField<f64> {
        let shape = GridShape::isotropic(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VectorField::zeros(shape);
        for v in f.as_mut_slice() {
            *v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
        }
        f
    }

    fn spec(dims_spacing: [f64; 3]) -> OperatorSpec<f64> {
        OperatorSpec::new(1e-3, 0.1, 0.5, (0.25, 0.125), dims_spacing).unwrap()
    }

    #[test]
    fn zero_velocity_zero_everything() {
        let s = spec([1.0; 3]);
        let u = VectorField::<f64>::zeros(GridShape::isotropic([4, 4, 4]));
        assert_eq!(penalty_energy(&u, &s), 0.0);
        assert!(apply_ltl(&u, &s).max_abs() == 0.0);
    }

    #[test]
    fn penalty_is_quadratic() {
        let s = spec([1.0, 1.3, 0.8]);
        let mut u = random_field([6, 6, 6], 3);
        let p1 = penalty_energy(&u, &s);
        u.scale_in_place(2.0);
        let p2 = penalty_energy(&u, &s);
        assert!((p2 - 4.0 * p1).abs() < 1e-9 * p1.abs().max(1.0));
    }

    #[test]
    fn operator_is_self_adjoint() {
        let s = spec([1.0, 0.7, 1.4]);
        let u = random_field([6, 5, 4], 11);
        let v = random_field([6, 5, 4], 12);
        let lhs = v.dot(&apply_ltl(&u, &s));
        let rhs = u.dot(&apply_ltl(&v, &s));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn consistency_with_penalty() {
        let s = spec([1.0; 3]);
        let u = random_field([5, 5, 5], 21);
        let via_apply = u.dot(&apply_ltl(&u, &s));
        let via_penalty = 2.0 * penalty_energy(&u, &s);
        assert!((via_apply - via_penalty).abs() < 1e-10 * via_apply.abs().max(1.0));
    }

    #[test]
    fn positive_semidefinite_on_random_fields() {
        let s = spec([1.0; 3]);
        for seed in 0..20 {
            let u = random_field([4, 4, 4], seed);
            assert!(penalty_energy(&u, &s) >= 0.0);
        }
    }

    #[test]
    fn membrane_annihilates_linear_fields_in_interior() {
        // pure membrane operator on u(x) = alpha x: second differences
        // vanish away from the wrap seam
        let s = OperatorSpec::new(0.0, 1.0, 0.0, (0.0, 0.0), [1.0; 3]).unwrap();
        let shape = GridShape::isotropic([8, 8, 8]);
        let mut u = VectorField::zeros(shape);
        for (j, [x, _, _]) in shape.iter_voxels() {
            u.set(j, Vector3::new(0.3 * x as f64, 0.0, 0.0));
        }
        let a = apply_ltl(&u, &s);
        for (j, [x, _, _]) in shape.iter_voxels() {
            if (2..6).contains(&x) {
                assert!(a.get(j).norm() < 1e-12, "voxel {j}: {}", a.get(j).norm());
            }
        }
    }

    #[test]
    fn fourier_mode_matches_analytic_eigenvalue() {
        // membrane+bending+zero on a periodic grid: a single sinusoid along
        // x with integer frequency is an eigenvector with eigenvalue
        // lambda0 + lm s + lb s^2, s = 4 sin^2(pi f / n) / h^2
        let n = 8;
        let h = 1.25;
        let s = OperatorSpec::new(2e-3, 0.3, 0.7, (0.0, 0.0), [h; 3]).unwrap();
        let shape = GridShape::new([n, n, n], [h; 3]);
        for f in 1..4usize {
            let mut u = VectorField::zeros(shape);
            let amp = 0.37;
            for (j, [x, _, _]) in shape.iter_voxels() {
                let arg = 2.0 * std::f64::consts::PI * f as f64 * x as f64 / n as f64;
                u.set(j, Vector3::new(amp * arg.sin(), 0.0, 0.0));
            }
            let sym = 4.0 * (std::f64::consts::PI * f as f64 / n as f64).sin().powi(2)
                / (h * h);
            let eig = 2e-3 + 0.3 * sym + 0.7 * sym * sym;
            // eigenvector check
            let au = apply_ltl(&u, &s);
            for j in 0..u.len() {
                assert!(
                    (au.get(j) - u.get(j) * eig).norm() < 1e-10,
                    "mode {f} voxel {j}"
                );
            }
            // penalty = 1/2 eig ||u||^2 = 1/2 eig amp^2 N/2
            let expect = 0.5 * eig * amp * amp * (n * n * n) as f64 / 2.0;
            let got = penalty_energy(&u, &s);
            assert!((got - expect).abs() < 1e-8 * expect, "{got} vs {expect}");
        }
    }

    #[test]
    fn elastic_single_component_mode_energy() {
        // u = (A sin(w x), 0, 0): strain/div terms reduce to
        // (mu + lam/2) ||D_x u_x||^2, so the penalty is
        // 1/2 (2 mu + lam) s A^2 N/2 with s the difference symbol
        let n = 8;
        let (mu, lam) = (0.4, 0.2);
        let s = OperatorSpec::new(0.0, 0.0, 0.0, (mu, lam), [1.0; 3]).unwrap();
        let shape = GridShape::isotropic([n, n, n]);
        let f = 2usize;
        let amp = 0.5;
        let mut u = VectorField::zeros(shape);
        for (j, [x, _, _]) in shape.iter_voxels() {
            let arg = 2.0 * std::f64::consts::PI * f as f64 * x as f64 / n as f64;
            u.set(j, Vector3::new(amp * arg.sin(), 0.0, 0.0));
        }
        let sym = 4.0 * (std::f64::consts::PI * f as f64 / n as f64).sin().powi(2);
        let expect = 0.5 * (2.0 * mu + lam) * sym * amp * amp * (n * n * n) as f64 / 2.0;
        let got = penalty_energy(&u, &s);
        assert!(
            (got - expect).abs() < 1e-8 * expect,
            "{got} vs {expect}"
        );
    }

    #[test]
    fn central_block_matches_operator_on_delta() {
        // applying the operator to a delta field reads off the central
        // stencil block
        let s = spec([1.0, 0.9, 1.1]);
        let shape = GridShape::new([8, 8, 8], [1.0, 0.9, 1.1]);
        for comp in 0..3 {
            let mut u = VectorField::zeros(shape);
            let centre = shape.index(4, 4, 4);
            let mut v = Vector3::zeros();
            v[comp] = 1.0;
            u.set(centre, v);
            let a = apply_ltl(&u, &s);
            let block = s.central_block();
            for c in 0..3 {
                assert!(
                    (a.get(centre)[c] - block[(c, comp)]).abs() < 1e-12,
                    "comp {comp} row {c}: {} vs {}",
                    a.get(centre)[c],
                    block[(c, comp)]
                );
            }
        }
    }

    #[test]
    fn fused_apply_matches_termwise_oracle() {
        // the original term-by-term implementation doubles as an oracle
        let s = spec([1.0, 0.7, 1.3]);
        for seed in 0..5 {
            let u = random_field([6, 5, 7], seed);
            let fused = apply_ltl(&u, &s);
            let mut oracle = VectorField::zeros(u.shape());
            for j in 0..u.len() {
                oracle.set(j, u.get(j) * s.lambda_zero);
            }
            let g = neg_laplacian(&u, s.spacing);
            oracle.axpy(s.lambda_membrane, &g);
            let gg = neg_laplacian(&g, s.spacing);
            oracle.axpy(s.lambda_bending, &gg);
            let e = elastic(&u, s.spacing);
            oracle.axpy(s.lambda_elastic.0, &e);
            let d = div_penalty(&u, s.spacing);
            oracle.axpy(s.lambda_elastic.1, &d);
            for j in 0..u.len() {
                assert!(
                    (fused.get(j) - oracle.get(j)).norm() < 1e-12,
                    "seed {seed} voxel {j}: {:?} vs {:?}",
                    fused.get(j),
                    oracle.get(j)
                );
            }
        }
    }
}
