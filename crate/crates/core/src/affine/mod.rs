//! Nine-parameter linear transform via a Lie-algebra exponential plus
//! translation.
//!
//! The generator basis is fixed: rotations about x, y, z; per-axis zooms;
//! symmetric shears xy, xz, yz. The rotation and shear generators are
//! traceless and the zoom generators diagonal, so `det exp(Q) = exp(tr Q) =
//! exp(a_4 + a_5 + a_6) > 0` always holds: orientation is preserved for any
//! finite parameters.

mod update;

pub use update::{
    affine_grad_hess, gauss_newton_affine_update, matching_term, warp_coordinates,
    AffineContext, AffineUpdateOutcome,
};

use crate::error::{Error, Result};
use crate::scalar::{cst, Real};
use nalgebra::{Matrix3, Matrix4, Matrix6, SMatrix, SVector, Vector3};

pub type AffineVector<T> = SVector<T, 12>;
pub type AffineMatrix<T> = SMatrix<T, 12, 12>;

/// Fixed generator basis of ga(3), in parameter order.
pub fn generators<T: Real>() -> [Matrix3<T>; 9] {
    let o = T::zero();
    let l = T::one();
    [
        // rotations about x, y, z
        Matrix3::new(o, o, o, o, o, -l, o, l, o),
        Matrix3::new(o, o, l, o, o, o, -l, o, o),
        Matrix3::new(o, -l, o, l, o, o, o, o, o),
        // zooms along x, y, z
        Matrix3::new(l, o, o, o, o, o, o, o, o),
        Matrix3::new(o, o, o, o, l, o, o, o, o),
        Matrix3::new(o, o, o, o, o, o, o, o, l),
        // shears xy, xz, yz
        Matrix3::new(o, l, o, l, o, o, o, o, o),
        Matrix3::new(o, o, l, o, o, o, l, o, o),
        Matrix3::new(o, o, o, o, o, l, o, l, o),
    ]
}

/// Q(a) = sum_p a_p G_p.
pub fn lie_algebra_element<T: Real>(a: &SVector<T, 9>) -> Matrix3<T> {
    let gens = generators::<T>();
    let mut q = Matrix3::zeros();
    for (p, g) in gens.iter().enumerate() {
        q += g * a[p];
    }
    q
}

/// T = exp(Q(a)); always orientation-preserving.
pub fn exp_map<T: Real>(a: &SVector<T, 9>) -> Result<Matrix3<T>> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("affine parameters"));
    }
    Ok(lie_algebra_element(a).exp())
}

/// Exact directional derivative of the matrix exponential:
/// `L(Q, G) = d/ds exp(Q + sG)|_0`, the top-right block of
/// `exp([[Q, G], [0, Q]])`.
pub fn exp_map_directional<T: Real>(q: &Matrix3<T>, g: &Matrix3<T>) -> Matrix3<T> {
    let mut aug = Matrix6::<T>::zeros();
    for r in 0..3 {
        for c in 0..3 {
            aug[(r, c)] = q[(r, c)];
            aug[(r + 3, c + 3)] = q[(r, c)];
            aug[(r, c + 3)] = g[(r, c)];
        }
    }
    let e = aug.exp();
    let mut out = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            out[(r, c)] = e[(r, c + 3)];
        }
    }
    out
}

/// Affine parameters for one subject: 9 generator coordinates, a millimetre
/// translation, and a symmetric PSD prior precision on the 9 linear
/// parameters (translations are unpenalized).
#[derive(Debug, Clone)]
pub struct AffineParams<T> {
    pub a: SVector<T, 9>,
    pub t: Vector3<T>,
    pub prior_precision: SMatrix<T, 9, 9>,
}

impl<T: Real> AffineParams<T> {
    pub fn identity(prior_precision: SMatrix<T, 9, 9>) -> Self {
        AffineParams {
            a: SVector::zeros(),
            t: Vector3::zeros(),
            prior_precision,
        }
    }

    /// Diagonal prior precision from per-group values (rotations, zooms,
    /// shears).
    pub fn diagonal_precision(rot: T, zoom: T, shear: T) -> SMatrix<T, 9, 9> {
        let mut p = SMatrix::zeros();
        for i in 0..3 {
            p[(i, i)] = rot;
            p[(i + 3, i + 3)] = zoom;
            p[(i + 6, i + 6)] = shear;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.iter().any(|x| !x.is_finite()) || self.t.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("affine parameters"));
        }
        let asym = (self.prior_precision - self.prior_precision.transpose())
            .abs()
            .max();
        if asym > cst(1e-10) {
            return Err(Error::invalid("affine prior precision must be symmetric"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Result<Matrix3<T>> {
        exp_map(&self.a)
    }

    /// Homogeneous matrix S = [[T, t], [0, 1]] (millimetre convention).
    pub fn homogeneous(&self) -> Result<Matrix4<T>> {
        let t = self.matrix()?;
        let mut s = Matrix4::identity();
        for r in 0..3 {
            for c in 0..3 {
                s[(r, c)] = t[(r, c)];
            }
            s[(r, 3)] = self.t[r];
        }
        Ok(s)
    }

    /// Penalty term `-1/2 a^T Sigma_a^-1 a` contributed to the bound.
    pub fn log_prior(&self) -> T {
        -(self.prior_precision * self.a).dot(&self.a) * cst::<T>(0.5)
    }

    /// 3x4 derivative blocks d(S[0..3, :]) / d theta_p for the 12
    /// parameters (9 generators, then 3 translations).
    pub fn derivative_blocks(&self) -> Result<Vec<SMatrix<T, 3, 4>>> {
        let q = lie_algebra_element(&self.a);
        let gens = generators::<T>();
        let mut blocks = Vec::with_capacity(12);
        for g in &gens {
            let dt = exp_map_directional(&q, g);
            let mut b = SMatrix::<T, 3, 4>::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    b[(r, c)] = dt[(r, c)];
                }
            }
            blocks.push(b);
        }
        for i in 0..3 {
            let mut b = SMatrix::<T, 3, 4>::zeros();
            b[(i, 3)] = T::one();
            blocks.push(b);
        }
        Ok(blocks)
    }
}

/// Write the homogeneous matrix as a 4x4 row-major text file.
pub fn write_affine_text<T: Real>(path: &std::path::Path, params: &AffineParams<T>) -> Result<()> {
    let s = params.homogeneous()?;
    let mut out = String::new();
    for r in 0..4 {
        for c in 0..4 {
            if c > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{:.12e}", s[(r, c)].to_f64().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_identity() {
        let t = exp_map(&SVector::<f64, 9>::zeros()).unwrap();
        assert!((t - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn pure_zoom_is_diagonal_exponential() {
        let mut a = SVector::<f64, 9>::zeros();
        let s = 0.3;
        a[3] = s;
        a[4] = s;
        a[5] = s;
        let t = exp_map(&a).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { s.exp() } else { 0.0 };
                assert!((t[(r, c)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_series_squaring_oracle() {
        // independent oracle: Taylor series of exp(Q/2^s) then s squarings
        fn exp_oracle(q: Matrix3<f64>) -> Matrix3<f64> {
            let s = 8;
            let qs = q / 2f64.powi(s);
            let mut term = Matrix3::identity();
            let mut acc = Matrix3::identity();
            for n in 1..20 {
                term = term * qs / n as f64;
                acc += term;
            }
            let mut out = acc;
            for _ in 0..s {
                out = out * out;
            }
            out
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let a = SVector::<f64, 9>::from_fn(|_, _| rng.gen_range(-0.2..0.2));
            let got = exp_map(&a).unwrap();
            let expect = exp_oracle(lie_algebra_element(&a));
            assert!((got - expect).abs().max() < 1e-10);
        }
    }

    #[test]
    fn determinant_is_always_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = SVector::<f64, 9>::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            assert!(exp_map(&a).unwrap().determinant() > 0.0);
        }
    }

    #[test]
    fn directional_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = SVector::<f64, 9>::from_fn(|_, _| rng.gen_range(-0.3..0.3));
        let q = lie_algebra_element(&a);
        let gens = generators::<f64>();
        let h = 1e-6;
        for g in &gens {
            let exact = exp_map_directional(&q, g);
            let fp = (q + g * h).exp();
            let fm = (q - g * h).exp();
            let fd = (fp - fm) / (2.0 * h);
            assert!((exact - fd).abs().max() < 1e-8);
        }
    }

    #[test]
    fn homogeneous_layout() {
        let mut a = SVector::<f64, 9>::zeros();
        a[5] = 0.1;
        let params = AffineParams {
            a,
            t: Vector3::new(1.0, 2.0, 3.0),
            prior_precision: SMatrix::zeros(),
        };
        let s = params.homogeneous().unwrap();
        assert!((s[(0, 3)] - 1.0).abs() < 1e-15);
        assert!((s[(3, 3)] - 1.0).abs() < 1e-15);
        assert!((s[(2, 2)] - 0.1f64.exp()).abs() < 1e-12);
        assert_eq!(s[(3, 0)], 0.0);
    }
}
