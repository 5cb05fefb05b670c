//! Sufficient statistics of the (observed and missing) data and the
//! conjugate Gaussian-Wishart M-step.

use super::bundle::{cholesky_with_jitter, GaussWishart, GaussWishartBundle};
use super::missing::MissingPosterior;
use super::{PreparedSubject, Responsibilities};
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};
use nalgebra::{DMatrix, DVector};

/// Zeroth/first/second moments for one class.
#[derive(Debug, Clone)]
pub struct ClassStats<T> {
    pub s0: T,
    pub s1: DVector<T>,
    pub s2: DMatrix<T>,
}

impl<T: Real> ClassStats<T> {
    pub fn zeros(d: usize) -> Self {
        ClassStats {
            s0: T::zero(),
            s1: DVector::zeros(d),
            s2: DMatrix::zeros(d, d),
        }
    }
}

/// Accumulate weighted moments: observed entries contribute their values,
/// missing entries their conditional posterior mean, and the missing block
/// of the second moment picks up the conditional covariance. Fully-missing
/// voxels are skipped (they carry no intensity information).
pub fn sufficient_stats<T: Real>(
    prep: &PreparedSubject<T>,
    gamma: &Responsibilities<T>,
    missing: &MissingPosterior<T>,
) -> Result<Vec<ClassStats<T>>> {
    let n = prep.n;
    let d = prep.d;
    let k = gamma.classes();
    if gamma.len() != n {
        return Err(Error::invalid("sufficient_stats: shape mismatch"));
    }
    let mut stats = vec![ClassStats::zeros(d); k];
    let mut xbar = vec![T::zero(); d];
    for j in 0..n {
        if prep.fully_missing(j) {
            continue;
        }
        let row = gamma.row(j);
        let xrow = prep.row(j);
        let pat_idx = missing.voxel_pattern[j];
        for c in 0..k {
            let g = row[c];
            if g == T::zero() {
                continue;
            }
            xbar.copy_from_slice(xrow);
            if pat_idx != usize::MAX {
                let info = &missing.patterns[pat_idx];
                let nh = info.missing_dims.len();
                let stored = &missing.means[missing.voxel_mean[j]];
                for (a, &da) in info.missing_dims.iter().enumerate() {
                    xbar[da] = stored[c * nh + a];
                }
            }
            let st = &mut stats[c];
            st.s0 += g;
            for a in 0..d {
                st.s1[a] += g * xbar[a];
                for b in 0..d {
                    st.s2[(a, b)] += g * xbar[a] * xbar[b];
                }
            }
            if pat_idx != usize::MAX {
                let info = &missing.patterns[pat_idx];
                let cov = &info.covariance[c];
                for (a, &da) in info.missing_dims.iter().enumerate() {
                    for (b, &db) in info.missing_dims.iter().enumerate() {
                        st.s2[(da, db)] += g * cov[(a, b)];
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Conjugate update of the Gaussian-Wishart posterior.
///
/// Classes with essentially zero responsibility mass pass the prior through
/// unchanged. Returns the posterior bundle and the number of diagonal
/// jitters that were needed to keep scale matrices positive definite.
pub fn m_step<T: Real>(
    stats: &[ClassStats<T>],
    prior: &GaussWishartBundle<T>,
) -> Result<(GaussWishartBundle<T>, usize)> {
    if stats.len() != prior.k() {
        return Err(Error::invalid("m_step: class count mismatch"));
    }
    let d = prior.dim();
    let zero_mass: T = cst(1e-12);
    let mut classes = Vec::with_capacity(stats.len());
    let mut jitters = 0usize;
    for (st, pri) in stats.iter().zip(&prior.classes) {
        if st.s0 < zero_mass {
            classes.push(pri.clone());
            continue;
        }
        let beta = pri.beta + st.s0;
        let nu = pri.nu + st.s0;
        let m = (&pri.m * pri.beta + &st.s1) / beta;
        let xmean = &st.s1 / st.s0;
        // W^-1 = W0^-1 + (S2 - s1 s1^T / s0) + (beta0 s0 / beta)(x̄ - m0)(x̄ - m0)^T
        let (chol0, j0) = cholesky_with_jitter(&pri.w, 3)?;
        jitters += j0;
        let mut w_inv = chol0.inverse();
        let scatter = &st.s2 - (&st.s1 * st.s1.transpose()) / st.s0;
        w_inv += scatter;
        let dm = &xmean - &pri.m;
        w_inv += (&dm * dm.transpose()) * (pri.beta * st.s0 / beta);
        // symmetrize against accumulated rounding
        let w_inv = (&w_inv + w_inv.transpose()) * cst::<T>(0.5);
        let (chol, j1) = cholesky_with_jitter(&w_inv, 3)?;
        jitters += j1;
        let w = chol.inverse();
        let w = (&w + w.transpose()) * cst::<T>(0.5);
        let _ = d;
        classes.push(GaussWishart { m, beta, w, nu });
    }
    let bundle = GaussWishartBundle::new(classes)?;
    bundle.validate()?;
    Ok((bundle, jitters))
}
