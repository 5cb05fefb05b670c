//! Multiplicative intensity-nonuniformity field per subject per channel.
//!
//! The bias is the exponential of a low-frequency expansion in separable
//! orthonormal DCT-II products, so positivity is unconditional. Scaling the
//! Gaussian components by the bias is equivalent to evaluating the
//! likelihood at `diag(b) x` plus the volume term `sum_d ln b_d`; the
//! volume term is carried everywhere so the bound stays exact.

mod update;

pub use update::{bias_objective_delta, gauss_newton_bias_update, BiasUpdateOutcome};

use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::scalar::{cst, Real};
use nalgebra::{DMatrix, DVector};

/// Separable DCT-II design matrices for one grid.
#[derive(Debug, Clone)]
pub struct BiasBasis<T> {
    shape: GridShape<T>,
    orders: [usize; 3],
    axes: [DMatrix<T>; 3],
}

impl<T: Real> BiasBasis<T> {
    /// Orthonormal DCT-II columns per axis:
    /// `B_0(x) = sqrt(1/N)`, `B_m(x) = sqrt(2/N) cos(pi m (2x+1) / 2N)`.
    pub fn new(shape: GridShape<T>, orders: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if orders[a] == 0 {
                return Err(Error::invalid("bias basis order must be >= 1 per axis"));
            }
            if orders[a] > shape.dims[a] {
                return Err(Error::invalid(format!(
                    "bias basis order {} exceeds grid extent {} on axis {a}",
                    orders[a], shape.dims[a]
                )));
            }
        }
        let axes = std::array::from_fn(|a| {
            let n = shape.dims[a];
            let mut mat = DMatrix::zeros(n, orders[a]);
            let norm0 = cst::<T>((1.0 / n as f64).sqrt());
            let norm = cst::<T>((2.0 / n as f64).sqrt());
            for x in 0..n {
                mat[(x, 0)] = norm0;
                for m in 1..orders[a] {
                    let arg = std::f64::consts::PI * m as f64 * (2.0 * x as f64 + 1.0)
                        / (2.0 * n as f64);
                    mat[(x, m)] = norm * cst::<T>(arg.cos());
                }
            }
            mat
        });
        Ok(BiasBasis {
            shape,
            orders,
            axes,
        })
    }

    /// Default orders so the finest retained basis period stays >= 60 mm.
    pub fn default_orders(shape: GridShape<T>, cutoff_mm: f64) -> [usize; 3] {
        std::array::from_fn(|a| {
            let extent = shape.dims[a] as f64 * shape.spacing[a].to_f64().unwrap_or(1.0);
            let max_freq = (2.0 * extent / cutoff_mm).floor() as usize;
            (1 + max_freq).min(shape.dims[a]).max(1)
        })
    }

    pub fn orders(&self) -> [usize; 3] {
        self.orders
    }

    pub fn num_coeffs(&self) -> usize {
        self.orders[0] * self.orders[1] * self.orders[2]
    }

    pub fn shape(&self) -> GridShape<T> {
        self.shape
    }

    /// Coefficient index for the (m1, m2, m3) product (m1 fastest).
    #[inline]
    pub fn coeff_index(&self, m: [usize; 3]) -> usize {
        m[0] + self.orders[0] * (m[1] + self.orders[1] * m[2])
    }

    /// Value of basis function `m` at voxel `(x, y, z)`.
    #[inline]
    pub fn value_at(&self, m: usize, xyz: [usize; 3]) -> T {
        let m1 = m % self.orders[0];
        let r = m / self.orders[0];
        let (m2, m3) = (r % self.orders[1], r / self.orders[1]);
        self.axes[0][(xyz[0], m1)] * self.axes[1][(xyz[1], m2)] * self.axes[2][(xyz[2], m3)]
    }

    /// Fill `row` with all basis values at one voxel.
    #[inline]
    pub fn row_at(&self, xyz: [usize; 3], row: &mut [T]) {
        let mut i = 0;
        for m3 in 0..self.orders[2] {
            let bz = self.axes[2][(xyz[2], m3)];
            for m2 in 0..self.orders[1] {
                let byz = self.axes[1][(xyz[1], m2)] * bz;
                for m1 in 0..self.orders[0] {
                    row[i] = self.axes[0][(xyz[0], m1)] * byz;
                    i += 1;
                }
            }
        }
    }

    /// Log-field (`rho = sum_m c_m B_m`) over the whole grid, separably.
    pub fn log_field(&self, coeffs: &DVector<T>) -> Vec<T> {
        let [nx, ny, nz] = self.shape.dims;
        let [o1, o2, o3] = self.orders;
        // contract z: t1[m1, m2, z]
        let mut t1 = vec![T::zero(); o1 * o2 * nz];
        for z in 0..nz {
            for m3 in 0..o3 {
                let bz = self.axes[2][(z, m3)];
                for m2 in 0..o2 {
                    for m1 in 0..o1 {
                        t1[m1 + o1 * (m2 + o2 * z)] +=
                            coeffs[m1 + o1 * (m2 + o2 * m3)] * bz;
                    }
                }
            }
        }
        // contract y: t2[m1, y, z]
        let mut t2 = vec![T::zero(); o1 * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for m2 in 0..o2 {
                    let by = self.axes[1][(y, m2)];
                    for m1 in 0..o1 {
                        t2[m1 + o1 * (y + ny * z)] += t1[m1 + o1 * (m2 + o2 * z)] * by;
                    }
                }
            }
        }
        // contract x
        let mut field = vec![T::zero(); nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = T::zero();
                    for m1 in 0..o1 {
                        acc += t2[m1 + o1 * (y + ny * z)] * self.axes[0][(x, m1)];
                    }
                    field[x + nx * (y + ny * z)] = acc;
                }
            }
        }
        field
    }

    /// Bending-energy style prior precision: proportional to the squared
    /// continuous Laplacian eigenvalue of each basis product.
    pub fn prior_precision(&self, reg: T) -> DVector<T> {
        let mut p = DVector::zeros(self.num_coeffs());
        let pi2 = cst::<T>(std::f64::consts::PI * std::f64::consts::PI);
        let extent: [T; 3] = std::array::from_fn(|a| {
            cst::<T>(self.shape.dims[a] as f64) * self.shape.spacing[a]
        });
        for m3 in 0..self.orders[2] {
            for m2 in 0..self.orders[1] {
                for m1 in 0..self.orders[0] {
                    let fr = |m: usize, a: usize| {
                        cst::<T>((m * m) as f64) / (extent[a] * extent[a])
                    };
                    let lap = pi2 * (fr(m1, 0) + fr(m2, 1) + fr(m3, 2));
                    p[self.coeff_index([m1, m2, m3])] = reg * lap * lap;
                }
            }
        }
        p
    }
}

/// Per-channel DCT coefficients with a zero-mean Gaussian prior of diagonal
/// precision (penalizing high frequencies).
#[derive(Debug, Clone)]
pub struct BiasModel<T> {
    pub orders: [usize; 3],
    pub coeffs: Vec<DVector<T>>,
    pub prior_precision: DVector<T>,
}

impl<T: Real> BiasModel<T> {
    pub fn zero(basis: &BiasBasis<T>, channels: usize, reg: T) -> Self {
        BiasModel {
            orders: basis.orders(),
            coeffs: vec![DVector::zeros(basis.num_coeffs()); channels],
            prior_precision: basis.prior_precision(reg),
        }
    }

    pub fn channels(&self) -> usize {
        self.coeffs.len()
    }

    /// Penalty `-1/2 sum_d c_d^T P c_d` contributed to the bound.
    pub fn log_prior(&self) -> T {
        let mut acc = T::zero();
        for c in &self.coeffs {
            for (i, &ci) in c.iter().enumerate() {
                acc -= cst::<T>(0.5) * self.prior_precision[i] * ci * ci;
            }
        }
        acc
    }
}

/// Strictly positive bias fields for all channels, channel-major (`d*n+j`).
pub fn evaluate_bias<T: Real>(model: &BiasModel<T>, basis: &BiasBasis<T>) -> Result<Vec<T>> {
    if model.orders != basis.orders() {
        return Err(Error::invalid("bias model / basis order mismatch"));
    }
    let n = basis.shape().len();
    let mut out = Vec::with_capacity(model.channels() * n);
    for c in &model.coeffs {
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("bias coefficient"));
        }
        let rho = basis.log_field(c);
        out.extend(rho.into_iter().map(|r| r.exp()));
    }
    Ok(out)
}

/// Scale a Gaussian's moments into uncorrected-intensity space:
/// `mu_hat = diag(b)^-1 mu`, `Sigma_hat = diag(b)^-1 Sigma diag(b)^-1`.
pub fn modulated_gaussian<T: Real>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    bias: &[T],
) -> Result<(DVector<T>, DMatrix<T>)> {
    let d = mean.len();
    if bias.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(Error::invalid("modulated_gaussian: shape mismatch"));
    }
    if bias.iter().any(|&b| b <= T::zero()) {
        return Err(Error::invalid("bias values must be positive"));
    }
    let mut mu = mean.clone();
    let mut sigma = cov.clone();
    for a in 0..d {
        mu[a] /= bias[a];
        for b in 0..d {
            sigma[(a, b)] /= bias[a] * bias[b];
        }
    }
    Ok((mu, sigma))
}
