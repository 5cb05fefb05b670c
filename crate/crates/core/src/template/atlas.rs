//! The tissue atlas: simplex-valued coefficient field on the template grid.

use crate::error::{Error, Result};
use crate::geometry::{sample_trilinear_with_gradient, GridShape};
use crate::mixture::epsilon_pi;
use crate::scalar::{cst, Real};
use nalgebra::Vector3;

/// K-class tissue probability maps plus the Dirichlet concentration.
///
/// Values are stored class-major (`k * n + j`). Every row lives on the
/// simplex with entries in `[eps_pi, 1]`, which keeps logarithms finite
/// everywhere; constructors and updates enforce this.
#[derive(Debug, Clone)]
pub struct TissueAtlas<T> {
    shape: GridShape<T>,
    k: usize,
    pub alpha0: Vec<T>,
    pi: Vec<T>,
}

impl<T: Real> TissueAtlas<T> {
    pub fn new(shape: GridShape<T>, k: usize, alpha0: Vec<T>, pi: Vec<T>) -> Result<Self> {
        if k == 0 || alpha0.len() != k || pi.len() != k * shape.len() {
            return Err(Error::invalid("atlas shape mismatch"));
        }
        if alpha0.iter().any(|&a| a < T::one()) {
            return Err(Error::invalid("alpha0 entries must be >= 1"));
        }
        let mut atlas = TissueAtlas {
            shape,
            k,
            alpha0,
            pi,
        };
        atlas.renormalize();
        Ok(atlas)
    }

    pub fn uniform(shape: GridShape<T>, k: usize, alpha0: Vec<T>) -> Result<Self> {
        let v = T::one() / cst::<T>(k as f64);
        Self::new(shape, k, alpha0, vec![v; k * shape.len()])
    }

    pub fn shape(&self) -> GridShape<T> {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    /// Contiguous probability plane of one class.
    pub fn class_plane(&self, k: usize) -> &[T] {
        let n = self.len();
        &self.pi[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn value(&self, voxel: usize, class: usize) -> T {
        self.pi[class * self.len() + voxel]
    }

    #[inline]
    pub fn set_value(&mut self, voxel: usize, class: usize, v: T) {
        let n = self.len();
        self.pi[class * n + voxel] = v;
    }

    /// Copy one simplex row (all classes at a voxel).
    pub fn row(&self, voxel: usize, out: &mut [T]) {
        let n = self.len();
        for c in 0..self.k {
            out[c] = self.pi[c * n + voxel];
        }
    }

    /// Floor entries at eps_pi and renormalize every row to sum 1.
    pub fn renormalize(&mut self) {
        let n = self.len();
        let floor = epsilon_pi::<T>();
        for j in 0..n {
            // normalize, floor, then normalize again so flooring cannot be
            // undone by the division
            for _ in 0..2 {
                let mut sum = T::zero();
                for c in 0..self.k {
                    let v = self.pi[c * n + j].max(T::zero());
                    self.pi[c * n + j] = v;
                    sum += v;
                }
                if sum <= T::zero() {
                    let u = T::one() / cst::<T>(self.k as f64);
                    for c in 0..self.k {
                        self.pi[c * n + j] = u;
                    }
                    break;
                }
                for c in 0..self.k {
                    self.pi[c * n + j] = (self.pi[c * n + j] / sum).max(floor);
                }
            }
            let mut sum = T::zero();
            for c in 0..self.k {
                sum += self.pi[c * n + j];
            }
            for c in 0..self.k {
                self.pi[c * n + j] /= sum;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let tol: T = cst(1e-9);
        let floor = epsilon_pi::<T>() * cst::<T>(0.99);
        for j in 0..n {
            let mut sum = T::zero();
            for c in 0..self.k {
                let v = self.pi[c * n + j];
                if v < floor || v > T::one() + tol {
                    return Err(Error::invalid(format!(
                        "atlas value out of [eps, 1] at voxel {j}"
                    )));
                }
                sum += v;
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::invalid(format!("atlas row {j} not on simplex")));
            }
        }
        Ok(())
    }

    /// Trilinear samples of all classes at the given points, voxel-major
    /// (N x K rows). Linear interpolation preserves the simplex, so rows of
    /// the result sum to 1 as well.
    pub fn sample_rows(&self, coords: &[Vector3<T>]) -> Vec<T> {
        let mut out = vec![T::zero(); coords.len() * self.k];
        for c in 0..self.k {
            let plane = self.class_plane(c);
            for (i, &p) in coords.iter().enumerate() {
                let (v, _) = sample_trilinear_with_gradient(plane, &self.shape, p);
                out[i * self.k + c] = v;
            }
        }
        out
    }

    /// Samples plus exact in-cell gradients of `ln pi_k` at the given
    /// points. Gradients are in template voxel units; divide by the
    /// template spacing for millimetre gradients.
    pub fn sample_with_gradients(&self, coords: &[Vector3<T>]) -> WarpedAtlasSample<T> {
        let mut pi = vec![T::zero(); coords.len() * self.k];
        let mut grad_log = vec![Vector3::zeros(); coords.len() * self.k];
        for c in 0..self.k {
            let plane = self.class_plane(c);
            for (i, &p) in coords.iter().enumerate() {
                let (v, g) = sample_trilinear_with_gradient(plane, &self.shape, p);
                pi[i * self.k + c] = v;
                grad_log[i * self.k + c] = g / v;
            }
        }
        WarpedAtlasSample {
            k: self.k,
            pi,
            grad_log,
        }
    }

    /// Posterior Dirichlet concentrations `alpha0 + N_j` (diagnostic).
    pub fn posterior_concentration(&self, pushed_n: &[T]) -> Vec<T> {
        let n = self.len();
        let mut out = vec![T::zero(); n * self.k];
        for j in 0..n {
            for c in 0..self.k {
                out[j * self.k + c] = self.alpha0[c] + pushed_n[j * self.k + c];
            }
        }
        out
    }
}

/// Atlas values and log-gradients sampled along a warp (row-major N x K).
#[derive(Debug, Clone)]
pub struct WarpedAtlasSample<T> {
    pub k: usize,
    pub pi: Vec<T>,
    pub grad_log: Vec<Vector3<T>>,
}

impl<T: Real> WarpedAtlasSample<T> {
    pub fn pi_row(&self, j: usize) -> &[T] {
        &self.pi[j * self.k..(j + 1) * self.k]
    }

    pub fn grad_row(&self, j: usize) -> &[Vector3<T>] {
        &self.grad_log[j * self.k..(j + 1) * self.k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_atlas_is_valid() {
        let atlas =
            TissueAtlas::<f64>::uniform(GridShape::isotropic([4, 4, 4]), 3, vec![1.01; 3])
                .unwrap();
        atlas.validate().unwrap();
        assert!((atlas.value(10, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn renormalize_floors_and_projects() {
        let shape = GridShape::isotropic([1, 1, 1]);
        let atlas = TissueAtlas::<f64>::new(shape, 2, vec![1.0; 2], vec![0.0, 5.0]).unwrap();
        atlas.validate().unwrap();
        assert!(atlas.value(0, 0) > 0.0);
        assert!((atlas.value(0, 0) + atlas.value(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_rows_stay_on_simplex() {
        let shape = GridShape::isotropic([3, 3, 3]);
        let mut pi = vec![0.0; 2 * 27];
        for j in 0..27 {
            let v = (j as f64) / 26.0;
            pi[j] = v;
            pi[27 + j] = 1.0 - v;
        }
        let atlas = TissueAtlas::new(shape, 2, vec![1.0; 2], pi).unwrap();
        let coords = vec![
            Vector3::new(0.5, 0.5, 0.5),
            Vector3::new(1.7, 0.2, 1.1),
            Vector3::new(-2.0, 5.0, 1.0),
        ];
        let rows = atlas.sample_rows(&coords);
        for i in 0..coords.len() {
            let sum: f64 = rows[i * 2] + rows[i * 2 + 1];
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_below_one_rejected() {
        let shape = GridShape::<f64>::isotropic([2, 2, 2]);
        assert!(TissueAtlas::uniform(shape, 2, vec![0.5; 2]).is_err());
    }
}
