//! Variational Bayes Gaussian mixture over image intensities.
//!
//! Gaussian-Wishart conjugate priors on class means and precisions,
//! variational posteriors over missing channels, per-subject tissue
//! weights and semisupervised label fusion.

mod bundle;
mod estep;
mod hyper;
mod labels;
mod missing;
mod stats;
mod weights;

pub use bundle::{cholesky_with_jitter, GaussWishart, GaussWishartBundle};
pub use estep::{e_step, likelihood_bound_terms, warped_prior, EStepOutput, PriorField};
pub use hyper::fit_intensity_hyperpriors;
pub use labels::{LabelData, LabelModel};
pub use missing::{infer_missing, MissingPosterior};
pub use stats::{m_step, sufficient_stats, ClassStats};
pub use weights::{update_tissue_weights, TissueWeights};

use crate::error::{Error, Result};
use crate::geometry::VolumeGrid;
use crate::scalar::{cst, Real};

/// Floor applied to template values inside logarithms.
pub fn epsilon_pi<T: Real>() -> T {
    cst(1e-6)
}

/// Per-voxel class membership probabilities (N x K, rows on the simplex).
#[derive(Debug, Clone)]
pub struct Responsibilities<T> {
    data: Vec<T>,
    k: usize,
}

impl<T: Real> Responsibilities<T> {
    pub fn new(data: Vec<T>, k: usize) -> Result<Self> {
        if k == 0 || !data.len().is_multiple_of(k) {
            return Err(Error::invalid("responsibility buffer size mismatch"));
        }
        let r = Responsibilities { data, k };
        r.validate()?;
        Ok(r)
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        let v = T::one() / cst::<T>(k as f64);
        Responsibilities {
            data: vec![v; n * k],
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // 1e-9 at f64, scaled up by the machine epsilon at f32
        let tol: T = cst::<T>(1e-9)
            .max(crate::scalar::machine_epsilon::<T>() * cst::<T>(self.k as f64) * cst(8.0));
        for j in 0..self.len() {
            let row = self.row(j);
            let mut sum = T::zero();
            for &g in row {
                if g < T::zero() {
                    return Err(Error::invalid(format!("negative responsibility at {j}")));
                }
                sum += g;
            }
            if (sum - T::one()).abs() > tol {
                return Err(Error::invalid(format!(
                    "responsibility row {j} sums to {}",
                    sum.to_f64().unwrap_or(f64::NAN)
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[T] {
        &self.data[j * self.k..(j + 1) * self.k]
    }

    #[inline]
    pub fn row_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.k..(j + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Shannon entropy -sum gamma ln gamma (0 ln 0 := 0).
    pub fn entropy(&self) -> T {
        let mut h = T::zero();
        for &g in &self.data {
            if g > T::zero() {
                h -= g * g.ln();
            }
        }
        h
    }

    /// Class index with the largest responsibility per voxel.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.len())
            .map(|j| {
                let row = self.row(j);
                let mut best = 0;
                for k in 1..self.k {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Bias-scaled intensities plus missingness bookkeeping for one subject.
///
/// `xhat` holds `diag(b) x` voxel-major (row per voxel); masked entries are
/// zero and never read. `log_bias_sum` is the per-voxel volume term
/// `sum_{d observed} ln b_d` of the scaled likelihood.
#[derive(Debug, Clone)]
pub struct PreparedSubject<T> {
    pub n: usize,
    pub d: usize,
    pub xhat: Vec<T>,
    pub pattern: Vec<u64>,
    pub log_bias_sum: Vec<T>,
    pub full_pattern: u64,
}

impl<T: Real> PreparedSubject<T> {
    /// `bias`, when given, is channel-major (`d * n + j`) and strictly
    /// positive on observed entries.
    pub fn new(data: &VolumeGrid<T>, bias: Option<&[T]>) -> Result<Self> {
        let n = data.len();
        let d = data.channels();
        if let Some(b) = bias {
            if b.len() != n * d {
                return Err(Error::invalid("bias field size mismatch"));
            }
        }
        let mut xhat = vec![T::zero(); n * d];
        let mut pattern = vec![0u64; n];
        let mut log_bias_sum = vec![T::zero(); n];
        for j in 0..n {
            pattern[j] = data.missing_pattern(j);
            for c in 0..d {
                if pattern[j] >> c & 1 == 1 {
                    continue;
                }
                let b = match bias {
                    Some(b) => {
                        let bv = b[c * n + j];
                        if bv <= T::zero() {
                            return Err(Error::invalid("bias field must be positive"));
                        }
                        bv
                    }
                    None => T::one(),
                };
                xhat[j * d + c] = b * data.value(j, c);
                log_bias_sum[j] += b.ln();
            }
        }
        Ok(PreparedSubject {
            n,
            d,
            xhat,
            pattern,
            log_bias_sum,
            full_pattern: if d == 64 { u64::MAX } else { (1u64 << d) - 1 },
        })
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[T] {
        &self.xhat[j * self.d..(j + 1) * self.d]
    }

    /// True when every channel is missing at the voxel; such voxels carry
    /// no intensity information (the marginal likelihood is 1).
    #[inline]
    pub fn fully_missing(&self, j: usize) -> bool {
        self.pattern[j] == self.full_pattern
    }
}
