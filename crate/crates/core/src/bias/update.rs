//! Gauss-Newton update of the bias coefficients, one channel at a time.
//!
//! The step maximizes the bound terms that depend on the channel's
//! coefficients: the expected log-likelihood (through `x_hat = b x` and the
//! volume term) plus the Gaussian prior on the coefficients. All other
//! variational factors are held fixed, so the local objective delta equals
//! the full bound delta and acceptance gating on it is exact.

use super::{BiasBasis, BiasModel};
use crate::error::{Error, Result};
use crate::mixture::{GaussWishartBundle, MissingPosterior, PreparedSubject, Responsibilities};
use crate::scalar::{cst, Real};
use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BiasUpdateOutcome<T> {
    pub accepted: bool,
    /// Objective change actually realized (0 when rejected).
    pub bound_delta: T,
    pub halvings: usize,
    /// Levenberg damping to start from next call.
    pub next_levenberg: T,
}

/// Per-voxel residual and curvature of the channel's intensity terms.
struct ChannelTerms<T> {
    /// voxels where the channel is observed (and not fully missing)
    voxels: Vec<usize>,
    xhat: Vec<T>,
    /// r_j = -sum_k gamma nu [W_k (xbar_jk - m_k)]_d
    residual: Vec<T>,
    /// a_j = sum_k gamma nu (W_k)_dd
    curvature: Vec<T>,
}

fn channel_terms<T: Real>(
    prep: &PreparedSubject<T>,
    missing: &MissingPosterior<T>,
    gamma: &Responsibilities<T>,
    bundle: &GaussWishartBundle<T>,
    channel: usize,
) -> ChannelTerms<T> {
    let d = prep.d;
    let k = bundle.k();
    let mut terms = ChannelTerms {
        voxels: Vec::new(),
        xhat: Vec::new(),
        residual: Vec::new(),
        curvature: Vec::new(),
    };
    let mut xbar = vec![T::zero(); d];
    for j in 0..prep.n {
        if prep.fully_missing(j) || (prep.pattern[j] >> channel) & 1 == 1 {
            continue;
        }
        let xrow = prep.row(j);
        let grow = gamma.row(j);
        let pat_idx = missing.voxel_pattern[j];
        let mut r = T::zero();
        let mut a = T::zero();
        for c in 0..k {
            let g = grow[c];
            if g == T::zero() {
                continue;
            }
            let gw = &bundle.classes[c];
            xbar.copy_from_slice(xrow);
            if pat_idx != usize::MAX {
                let info = &missing.patterns[pat_idx];
                let nh = info.missing_dims.len();
                let stored = &missing.means[missing.voxel_mean[j]];
                for (t, &dt) in info.missing_dims.iter().enumerate() {
                    xbar[dt] = stored[c * nh + t];
                }
            }
            let mut wd = T::zero();
            for b in 0..d {
                wd += gw.w[(channel, b)] * (xbar[b] - gw.m[b]);
            }
            r -= g * gw.nu * wd;
            a += g * gw.nu * gw.w[(channel, channel)];
        }
        terms.voxels.push(j);
        terms.xhat.push(xrow[channel]);
        terms.residual.push(r);
        terms.curvature.push(a);
    }
    terms
}

/// Change of the channel's bound terms when the coefficients move by
/// `delta` (missing-channel posteriors held fixed).
#[allow(clippy::too_many_arguments)]
pub fn bias_objective_delta<T: Real>(
    prep: &PreparedSubject<T>,
    missing: &MissingPosterior<T>,
    gamma: &Responsibilities<T>,
    bundle: &GaussWishartBundle<T>,
    model: &BiasModel<T>,
    basis: &BiasBasis<T>,
    channel: usize,
    delta: &DVector<T>,
) -> T {
    let terms = channel_terms(prep, missing, gamma, bundle, channel);
    let drho = basis.log_field(delta);
    objective_delta_from_terms(&terms, &drho, model, channel, delta)
}

fn objective_delta_from_terms<T: Real>(
    terms: &ChannelTerms<T>,
    drho: &[T],
    model: &BiasModel<T>,
    channel: usize,
    delta: &DVector<T>,
) -> T {
    let half: T = cst(0.5);
    let mut acc = T::zero();
    for (idx, &j) in terms.voxels.iter().enumerate() {
        let u = terms.xhat[idx] * (drho[j].exp() - T::one());
        acc += u * terms.residual[idx] - half * u * u * terms.curvature[idx] + drho[j];
    }
    let c = &model.coeffs[channel];
    for i in 0..delta.len() {
        let p = model.prior_precision[i];
        let new = c[i] + delta[i];
        acc -= half * p * (new * new - c[i] * c[i]);
    }
    acc
}

/// One damped Gauss-Newton step on one channel's coefficients.
///
/// The step is accepted only if the tracked objective does not decrease;
/// otherwise it is halved up to 8 times and finally left unchanged.
#[allow(clippy::too_many_arguments)]
pub fn gauss_newton_bias_update<T: Real>(
    prep: &PreparedSubject<T>,
    missing: &MissingPosterior<T>,
    gamma: &Responsibilities<T>,
    bundle: &GaussWishartBundle<T>,
    model: &mut BiasModel<T>,
    basis: &BiasBasis<T>,
    channel: usize,
    levenberg: T,
) -> Result<BiasUpdateOutcome<T>> {
    if channel >= model.channels() {
        return Err(Error::invalid("bias channel out of range"));
    }
    if gamma.len() != prep.n || bundle.dim() != prep.d {
        return Err(Error::invalid("gauss_newton_bias_update: shape mismatch"));
    }
    let ncoef = basis.num_coeffs();
    let terms = channel_terms(prep, missing, gamma, bundle, channel);

    // gradient and PSD curvature of the objective at delta = 0
    let mut grad = DVector::<T>::zeros(ncoef);
    let mut hess = DMatrix::<T>::zeros(ncoef, ncoef);
    let mut row = vec![T::zero(); ncoef];
    let shape = basis.shape();
    for (idx, &j) in terms.voxels.iter().enumerate() {
        basis.row_at(shape.coords(j), &mut row);
        let gword = terms.xhat[idx] * terms.residual[idx] + T::one();
        let hword = terms.xhat[idx] * terms.xhat[idx] * terms.curvature[idx];
        for a in 0..ncoef {
            grad[a] += row[a] * gword;
            for b in a..ncoef {
                hess[(a, b)] += row[a] * row[b] * hword;
            }
        }
    }
    for a in 0..ncoef {
        for b in 0..a {
            hess[(a, b)] = hess[(b, a)];
        }
    }
    let c = &model.coeffs[channel];
    for i in 0..ncoef {
        grad[i] -= model.prior_precision[i] * c[i];
        hess[(i, i)] += model.prior_precision[i];
    }

    // solve (H + lambda I) delta = grad, growing lambda on failure
    let mut lambda = levenberg;
    let delta = loop {
        let mut damped = hess.clone();
        for i in 0..ncoef {
            damped[(i, i)] += lambda;
        }
        match Cholesky::new(damped) {
            Some(chol) => break chol.solve(&grad),
            None => {
                lambda = (lambda * cst(10.0)).max(cst(1e-8));
                if lambda > cst(1e12) {
                    return Err(Error::NotPositiveDefinite { attempts: 12 });
                }
            }
        }
    };

    // step-halving acceptance on the exact objective delta
    let mut step = delta;
    let mut halvings = 0usize;
    loop {
        let drho = basis.log_field(&step);
        let gain = objective_delta_from_terms(&terms, &drho, model, channel, &step);
        if gain >= T::zero() && gain.is_finite() {
            model.coeffs[channel] += &step;
            let next = if halvings == 0 {
                (lambda * cst(0.5)).max(cst(1e-8))
            } else {
                lambda * cst(10.0)
            };
            return Ok(BiasUpdateOutcome {
                accepted: true,
                bound_delta: gain,
                halvings,
                next_levenberg: next,
            });
        }
        if halvings >= 8 {
            return Ok(BiasUpdateOutcome {
                accepted: false,
                bound_delta: T::zero(),
                halvings,
                next_levenberg: lambda * cst(10.0),
            });
        }
        step *= cst::<T>(0.5);
        halvings += 1;
    }
}
