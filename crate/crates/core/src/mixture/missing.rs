//! Variational posterior over missing channels.
//!
//! For a voxel with observed part `o` and missing part `h`, the posterior
//! factor over `h` given class `k` is Gaussian with
//! `n_k = E[mu_k^h] + (E[Lambda^hh])^-1 E[Lambda^ho] (E[mu_k^o] - o)` and
//! precision `P_k = E[Lambda^hh]`, expectations under the current
//! Gaussian-Wishart posterior (E[Lambda] = nu W).

use super::bundle::{GaussWishart, GaussWishartBundle};
use crate::error::{Error, Result};
use crate::scalar::{cst, sum, Real};
use nalgebra::{Cholesky, DMatrix, DVector};

/// Split a bitmask into observed / missing dimension lists.
pub fn split_dims(pattern: u64, d: usize) -> (Vec<usize>, Vec<usize>) {
    let mut obs = Vec::new();
    let mut mis = Vec::new();
    for c in 0..d {
        if pattern >> c & 1 == 1 {
            mis.push(c);
        } else {
            obs.push(c);
        }
    }
    (obs, mis)
}

/// Conditional posterior over the missing sub-vector for one class.
///
/// `observed` lists the values at `observed_dims`; at least one channel
/// must be observed. Returns the mean over the missing dims and the
/// precision matrix `P = E[Lambda^hh]`.
pub fn infer_missing<T: Real>(
    observed: &[T],
    observed_dims: &[usize],
    missing_dims: &[usize],
    gw: &GaussWishart<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    if observed_dims.is_empty() {
        return Err(Error::invalid(
            "fully-missing voxels are handled by the prior-only E-step",
        ));
    }
    if missing_dims.is_empty() {
        return Err(Error::invalid("no missing dims at this voxel"));
    }
    let lambda = gw.expected_precision();
    let nh = missing_dims.len();
    let no = observed_dims.len();
    let mut p = DMatrix::zeros(nh, nh);
    for (a, &da) in missing_dims.iter().enumerate() {
        for (b, &db) in missing_dims.iter().enumerate() {
            p[(a, b)] = lambda[(da, db)];
        }
    }
    let mut lam_ho = DMatrix::zeros(nh, no);
    for (a, &da) in missing_dims.iter().enumerate() {
        for (b, &db) in observed_dims.iter().enumerate() {
            lam_ho[(a, b)] = lambda[(da, db)];
        }
    }
    let innovation = DVector::from_iterator(
        no,
        observed_dims
            .iter()
            .zip(observed)
            .map(|(&d, &o)| gw.m[d] - o),
    );
    let chol = Cholesky::new(p.clone()).ok_or(Error::NotPositiveDefinite { attempts: 0 })?;
    let correction = chol.solve(&(&lam_ho * innovation));
    let mut n = DVector::zeros(nh);
    for (a, &da) in missing_dims.iter().enumerate() {
        n[a] = gw.m[da] + correction[a];
    }
    Ok((n, p))
}

/// Precomputed per-pattern quantities shared by all voxels with the same
/// missing-channel bitmask.
#[derive(Debug, Clone)]
pub struct PatternInfo<T> {
    pub pattern: u64,
    pub observed_dims: Vec<usize>,
    pub missing_dims: Vec<usize>,
    /// Per class: (W^hh)^-1 W^ho (nu cancels in the mean).
    pub gain: Vec<DMatrix<T>>,
    /// Per class: P = nu W^hh.
    pub precision: Vec<DMatrix<T>>,
    /// Per class: P^-1.
    pub covariance: Vec<DMatrix<T>>,
    /// Per class: ln det P.
    pub log_det_p: Vec<T>,
}

impl<T: Real> PatternInfo<T> {
    pub fn build(pattern: u64, d: usize, bundle: &GaussWishartBundle<T>) -> Result<Self> {
        let (observed_dims, missing_dims) = split_dims(pattern, d);
        let nh = missing_dims.len();
        let mut gain = Vec::with_capacity(bundle.k());
        let mut precision = Vec::with_capacity(bundle.k());
        let mut covariance = Vec::with_capacity(bundle.k());
        let mut log_det_p = Vec::with_capacity(bundle.k());
        for gw in &bundle.classes {
            let mut w_hh = DMatrix::zeros(nh, nh);
            for (a, &da) in missing_dims.iter().enumerate() {
                for (b, &db) in missing_dims.iter().enumerate() {
                    w_hh[(a, b)] = gw.w[(da, db)];
                }
            }
            let mut w_ho = DMatrix::zeros(nh, observed_dims.len());
            for (a, &da) in missing_dims.iter().enumerate() {
                for (b, &db) in observed_dims.iter().enumerate() {
                    w_ho[(a, b)] = gw.w[(da, db)];
                }
            }
            let chol =
                Cholesky::new(w_hh.clone()).ok_or(Error::NotPositiveDefinite { attempts: 0 })?;
            gain.push(chol.solve(&w_ho));
            let p = &w_hh * gw.nu;
            let chol_p = Cholesky::new(p.clone()).ok_or(Error::NotPositiveDefinite {
                attempts: 0,
            })?;
            let l = chol_p.l();
            log_det_p.push(cst::<T>(2.0) * sum((0..nh).map(|i| l[(i, i)].ln())));
            covariance.push(chol_p.inverse());
            precision.push(p);
        }
        Ok(PatternInfo {
            pattern,
            observed_dims,
            missing_dims,
            gain,
            precision,
            covariance,
            log_det_p,
        })
    }

    /// Mean of q(h | z=k) given the observed sub-vector.
    pub fn mean_for(&self, xrow: &[T], k: usize, gw: &GaussWishart<T>) -> DVector<T> {
        let innovation = DVector::from_iterator(
            self.observed_dims.len(),
            self.observed_dims.iter().map(|&d| gw.m[d] - xrow[d]),
        );
        let correction = &self.gain[k] * innovation;
        DVector::from_iterator(
            self.missing_dims.len(),
            self.missing_dims
                .iter()
                .enumerate()
                .map(|(a, &da)| gw.m[da] + correction[a]),
        )
    }
}

/// Per-voxel missing-channel posteriors for one subject, grouped by
/// missing pattern for reuse of the per-class linear algebra.
#[derive(Debug, Clone)]
pub struct MissingPosterior<T> {
    /// Patterns present in the data (partially missing only), sorted.
    pub patterns: Vec<PatternInfo<T>>,
    /// voxel -> index into `patterns` (usize::MAX = no missing channels).
    pub voxel_pattern: Vec<usize>,
    /// Per voxel with missing dims: K stacked means (row-major k, then dim).
    pub means: Vec<Vec<T>>,
    /// voxel -> index into `means` (usize::MAX when not applicable).
    pub voxel_mean: Vec<usize>,
}

impl<T: Real> MissingPosterior<T> {
    pub fn none(n: usize) -> Self {
        MissingPosterior {
            patterns: Vec::new(),
            voxel_pattern: vec![usize::MAX; n],
            means: Vec::new(),
            voxel_mean: vec![usize::MAX; n],
        }
    }

    pub fn has_any(&self) -> bool {
        !self.patterns.is_empty()
    }

    /// Re-derive every pattern block and conditional mean from the given
    /// posterior bundle (a coordinate-ascent step on q(H): the conditional
    /// formulas are the optimal factors for the current posteriors).
    /// Updates made between E-steps (the M-step in particular) call this
    /// so the stored factors never go stale.
    pub fn resync(
        &mut self,
        prep: &super::PreparedSubject<T>,
        bundle: &GaussWishartBundle<T>,
    ) -> Result<()> {
        if !self.has_any() {
            return Ok(());
        }
        for info in self.patterns.iter_mut() {
            *info = PatternInfo::build(info.pattern, prep.d, bundle)?;
        }
        for j in 0..prep.n {
            let pat_idx = self.voxel_pattern[j];
            if pat_idx == usize::MAX {
                continue;
            }
            let info = &self.patterns[pat_idx];
            let nh = info.missing_dims.len();
            let xrow = prep.row(j);
            let stored = &mut self.means[self.voxel_mean[j]];
            for (c, gw) in bundle.classes.iter().enumerate() {
                let mean = info.mean_for(xrow, c, gw);
                for a in 0..nh {
                    stored[c * nh + a] = mean[a];
                }
            }
        }
        Ok(())
    }
}
