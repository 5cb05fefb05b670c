//! Template updates under the Dirichlet prior.
//!
//! With unit weights the constrained maximizer is closed form:
//! `pi_jk = (N_jk + alpha_k - 1) / (sum_c (N_jc + alpha_c) - K)`. With
//! rescaling weights the approximate stationary condition divides by the
//! weighted volume accumulator instead and the result is projected back
//! onto the simplex by preserving proportions; because that projection is
//! an approximation, each voxel's objective is evaluated before and after
//! and the row is kept only on non-decrease.

use super::push::{PushedStats, SubjectPush};
use super::TissueAtlas;
use crate::error::{Error, Result};
use crate::mixture::{epsilon_pi, TissueWeights};
use crate::scalar::{cst, Real};

#[derive(Debug, Clone, Default)]
pub struct TemplateUpdateOutcome {
    /// Voxels that fell back to a uniform row (no evidence, alpha = 1).
    pub uniform_fallbacks: usize,
    /// Voxels whose weighted update was rejected (objective decreased).
    pub rejected_rows: usize,
}

/// Closed-form MAP update assuming all subject weights are one.
pub fn update_template_unit_weights<T: Real>(
    atlas: &mut TissueAtlas<T>,
    pushed: &PushedStats<T>,
) -> Result<TemplateUpdateOutcome> {
    let k = atlas.classes();
    let n = atlas.len();
    if pushed.k != k || pushed.n.len() != n * k {
        return Err(Error::invalid("template update: shape mismatch"));
    }
    let mut outcome = TemplateUpdateOutcome::default();
    let uniform = T::one() / cst::<T>(k as f64);
    for j in 0..n {
        let mut denom = T::zero();
        for c in 0..k {
            denom += pushed.n[j * k + c] + atlas.alpha0[c];
        }
        denom -= cst::<T>(k as f64);
        if denom <= cst::<T>(1e-12) {
            for c in 0..k {
                atlas.set_value(j, c, uniform);
            }
            outcome.uniform_fallbacks += 1;
            continue;
        }
        for c in 0..k {
            let num = (pushed.n[j * k + c] + atlas.alpha0[c] - T::one()).max(T::zero());
            atlas.set_value(j, c, num / denom);
        }
    }
    atlas.renormalize();
    Ok(outcome)
}

/// Per-voxel objective `sum_k (N_jk + alpha_k - 1) ln pi_jk - sum_i V_ij
/// ln(sum_c w_ic pi_jc)` (the pi-dependent part of the pushed bound).
pub fn template_objective<T: Real>(
    row_pi: &[T],
    row_n: &[T],
    alpha0: &[T],
    masses: &[T],
    weights: &[TissueWeights<T>],
) -> T {
    let k = row_pi.len();
    let floor = epsilon_pi::<T>();
    let mut acc = T::zero();
    for c in 0..k {
        acc += (row_n[c] + alpha0[c] - T::one()) * row_pi[c].max(floor).ln();
    }
    for (i, w) in weights.iter().enumerate() {
        let mut denom = T::zero();
        for c in 0..k {
            denom += w.w[c] * row_pi[c].max(floor);
        }
        acc -= masses[i] * denom.max(floor).ln();
    }
    acc
}

/// Approximate weighted update with per-voxel acceptance.
pub fn update_template_weighted<T: Real>(
    atlas: &mut TissueAtlas<T>,
    contribs: &[SubjectPush<T>],
    weights: &[TissueWeights<T>],
) -> Result<TemplateUpdateOutcome> {
    let k = atlas.classes();
    let n = atlas.len();
    if contribs.len() != weights.len() {
        return Err(Error::invalid("template update: subject count mismatch"));
    }
    let pushed = PushedStats::aggregate(contribs, weights, atlas)?;
    let mut outcome = TemplateUpdateOutcome::default();
    let floor = epsilon_pi::<T>();
    let mut prev = vec![T::zero(); k];
    let mut cand = vec![T::zero(); k];
    let mut masses = vec![T::zero(); contribs.len()];
    for j in 0..n {
        atlas.row(j, &mut prev);
        for (i, c) in contribs.iter().enumerate() {
            masses[i] = c.mass(j);
        }
        let mut ok = true;
        let mut total = T::zero();
        for c in 0..k {
            let num = (pushed.n[j * k + c] + atlas.alpha0[c] - T::one()).max(T::zero());
            let den = pushed.wsum[j * k + c];
            if den <= cst::<T>(1e-12) {
                ok = false;
                break;
            }
            cand[c] = num / den;
            total += cand[c];
        }
        if !ok || total <= T::zero() || !total.is_finite() {
            outcome.rejected_rows += 1;
            continue;
        }
        for c in 0..k {
            cand[c] = (cand[c] / total).max(floor);
        }
        // re-project after flooring
        let s: T = cand.iter().fold(T::zero(), |a, &b| a + b);
        for c in 0..k {
            cand[c] /= s;
        }
        let row_n = &pushed.n[j * k..(j + 1) * k];
        let before = template_objective(&prev, row_n, &atlas.alpha0, &masses, weights);
        let after = template_objective(&cand, row_n, &atlas.alpha0, &masses, weights);
        let slack = cst::<T>(1e-12) * (T::one() + before.abs());
        if after >= before - slack {
            for c in 0..k {
                atlas.set_value(j, c, cand[c]);
            }
        } else {
            outcome.rejected_rows += 1;
        }
    }
    atlas.renormalize();
    Ok(outcome)
}
