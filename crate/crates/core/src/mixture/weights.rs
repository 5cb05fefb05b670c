//! Per-subject tissue weight update.
//!
//! Fixed-point iteration on `w_k <- sum_j gamma_jk / sum_j pi_jk / (sum_c
//! w_c pi_jc)`, which is a minorize-maximize step on the expected log-prior
//! of the latent labels and therefore never decreases it. The scale of `w`
//! is immaterial (the prior ratio is scale-invariant); the result is
//! normalized to sum to K.

use super::Responsibilities;
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};

/// Positive per-class rescaling of the tissue priors for one subject.
#[derive(Debug, Clone)]
pub struct TissueWeights<T> {
    pub w: Vec<T>,
}

impl<T: Real> TissueWeights<T> {
    pub fn unit(k: usize) -> Self {
        TissueWeights {
            w: vec![T::one(); k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.iter().any(|&w| w <= T::zero()) {
            return Err(Error::invalid("tissue weights must be positive"));
        }
        Ok(())
    }
}

/// Objective the update targets: `sum_j sum_k gamma_jk ln(w_k pi_jk / sum_c
/// w_c pi_jc)` over the given sampled template rows.
pub fn weights_objective<T: Real>(gamma: &Responsibilities<T>, pi_rows: &[T], w: &[T]) -> T {
    let k = gamma.classes();
    let floor = super::epsilon_pi::<T>();
    let mut obj = T::zero();
    for j in 0..gamma.len() {
        let pr = &pi_rows[j * k..(j + 1) * k];
        let grow = gamma.row(j);
        let mut denom = T::zero();
        for c in 0..k {
            denom += w[c] * pr[c].max(floor);
        }
        let ln_denom = denom.max(floor).ln();
        for c in 0..k {
            if grow[c] > T::zero() {
                obj += grow[c] * ((w[c] * pr[c].max(floor)).ln() - ln_denom);
            }
        }
    }
    obj
}

/// Update the tissue weights for one subject.
///
/// `pi_rows` holds the unweighted warped template values at the subject's
/// voxels (N x K). Iterates the fixed point to a relative change below
/// 1e-6, floors empty classes at 1e-6 and normalizes to sum K. The targeted
/// objective is asserted not to decrease.
pub fn update_tissue_weights<T: Real>(
    gamma: &Responsibilities<T>,
    pi_rows: &[T],
    initial: &TissueWeights<T>,
) -> Result<TissueWeights<T>> {
    let k = gamma.classes();
    if pi_rows.len() != gamma.len() * k || initial.w.len() != k {
        return Err(Error::invalid("update_tissue_weights: shape mismatch"));
    }
    let n = gamma.len();
    let floor = super::epsilon_pi::<T>();
    let wfloor: T = cst(1e-6);
    let tol: T = cst(1e-6);

    // responsibility mass per class is iteration-invariant
    let mut mass = vec![T::zero(); k];
    for j in 0..n {
        for (c, &g) in gamma.row(j).iter().enumerate() {
            mass[c] += g;
        }
    }

    let before = weights_objective(gamma, pi_rows, &initial.w);
    let mut w = initial.w.clone();
    for _ in 0..200 {
        let mut denom_sum = vec![T::zero(); k];
        for j in 0..n {
            let pr = &pi_rows[j * k..(j + 1) * k];
            let mut denom = T::zero();
            for c in 0..k {
                denom += w[c] * pr[c].max(floor);
            }
            denom = denom.max(floor);
            for c in 0..k {
                denom_sum[c] += pr[c].max(floor) / denom;
            }
        }
        let mut max_rel = T::zero();
        for c in 0..k {
            let new_w = (mass[c] / denom_sum[c].max(floor)).max(wfloor);
            max_rel = max_rel.max((new_w - w[c]).abs() / w[c].max(wfloor));
            w[c] = new_w;
        }
        if max_rel < tol {
            break;
        }
    }
    // normalize so the weights sum to K (pure reparametrization)
    let total: T = w.iter().fold(T::zero(), |a, &b| a + b);
    let scale = cst::<T>(k as f64) / total;
    for wc in &mut w {
        *wc *= scale;
    }
    let after = weights_objective(gamma, pi_rows, &w);
    let slack = cst::<T>(1e-8) * (T::one() + before.abs());
    debug_assert!(
        after >= before - slack,
        "weight update decreased its objective"
    );
    if after < before - slack {
        // numerically pathological case: keep the previous weights
        return Ok(initial.clone());
    }
    Ok(TissueWeights { w })
}
