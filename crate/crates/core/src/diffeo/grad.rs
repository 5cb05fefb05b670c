//! Gradient and matrix-free approximate Hessian of the registration
//! objective with respect to the initial velocity.

use super::operator::{apply_ltl, OperatorSpec};
use crate::affine::{warp_coordinates, AffineParams};
use crate::error::{Error, Result};
use crate::geometry::{map_jacobian, VectorField};
use crate::mixture::{epsilon_pi, Responsibilities};
use crate::scalar::Real;
use crate::template::TissueAtlas;
use nalgebra::{Matrix3, Vector3};

/// Subject state the velocity update reads.
pub struct VelocityContext<'a, T> {
    pub gamma: &'a Responsibilities<T>,
    pub weights: &'a [T],
    pub atlas: &'a TissueAtlas<T>,
    pub affine: &'a AffineParams<T>,
    pub subject_spacing: [T; 3],
    /// Integration steps of the shooting scheme; 1 is the
    /// small-deformation reference mode.
    pub steps: usize,
}

/// Matching value, per-voxel matching gradient, and per-voxel PSD
/// curvature blocks at the given forward map.
///
/// The per-class vector is `g_k = M^T grad_mm ln pi_k(xi)` where `M` is
/// the affine matrix in the single-step mode and `T J_phi` (the endpoint
/// pullback through the flow's Jacobian) in multi-step mode. The matching
/// gradient stacks `sum_k (gamma_k - sigma_k) g_k`; the curvature block is
/// the softmax covariance `sum_k sigma g g^T - g_bar g_bar^T`.
pub fn velocity_matching_terms<T: Real>(
    ctx: &VelocityContext<'_, T>,
    phi: &VectorField<T>,
) -> Result<(T, VectorField<T>, Vec<Matrix3<T>>)> {
    let k = ctx.gamma.classes();
    if ctx.weights.len() != k || ctx.gamma.len() != phi.len() {
        return Err(Error::invalid("velocity_matching_terms: shape mismatch"));
    }
    let mat = ctx.affine.matrix()?;
    let ht = ctx.atlas.shape().spacing;
    let hs = ctx.subject_spacing;
    let coords = warp_coordinates(phi, hs, &mat, &ctx.affine.t, ht);
    let sample = ctx.atlas.sample_with_gradients(&coords);
    let floor = epsilon_pi::<T>();

    let mut value = T::zero();
    let mut grad = VectorField::zeros(phi.shape());
    let mut blocks = vec![Matrix3::zeros(); phi.len()];
    let mut g_k = vec![Vector3::zeros(); k];
    for j in 0..phi.len() {
        let m = if ctx.steps <= 1 {
            mat
        } else {
            // T H J_vox H^-1: endpoint perturbation of the flow
            let jac = map_jacobian(phi, j);
            let mut hjh = jac;
            for r in 0..3 {
                for c in 0..3 {
                    hjh[(r, c)] = hs[r] * jac[(r, c)] / hs[c];
                }
            }
            mat * hjh
        };
        let pr = sample.pi_row(j);
        let gl = sample.grad_row(j);
        let grow = ctx.gamma.row(j);
        let mut denom = T::zero();
        for c in 0..k {
            denom += ctx.weights[c] * pr[c].max(floor);
        }
        denom = denom.max(floor);
        let ln_denom = denom.ln();
        let mut match_grad = Vector3::zeros();
        let mut gbar = Vector3::zeros();
        let mut block = Matrix3::zeros();
        for c in 0..k {
            let sigma = ctx.weights[c] * pr[c].max(floor) / denom;
            let gmm = Vector3::new(gl[c].x / ht[0], gl[c].y / ht[1], gl[c].z / ht[2]);
            let g = m.transpose() * gmm;
            g_k[c] = g;
            match_grad += g * (grow[c] - sigma);
            block += g * g.transpose() * sigma;
            gbar += g * sigma;
            if grow[c] > T::zero() {
                value += grow[c] * ((ctx.weights[c] * pr[c].max(floor)).ln() - ln_denom);
            }
        }
        block -= gbar * gbar.transpose();
        grad.set(j, match_grad);
        blocks[j] = block;
    }
    Ok((value, grad, blocks))
}

/// Full objective gradient: matching gradient minus `L^T L u`.
pub fn velocity_grad<T: Real>(
    ctx: &VelocityContext<'_, T>,
    phi: &VectorField<T>,
    u: &VectorField<T>,
    spec: &OperatorSpec<T>,
) -> Result<VectorField<T>> {
    let (_, mut grad, _) = velocity_matching_terms(ctx, phi)?;
    let penalty = apply_ltl(u, spec);
    for j in 0..grad.len() {
        grad.set(j, grad.get(j) - penalty.get(j));
    }
    Ok(grad)
}

/// Matrix-free application of the approximate Hessian
/// `(W + L^T L + lm I) d` to a direction field.
pub fn velocity_hessian_apply<T: Real>(
    direction: &VectorField<T>,
    blocks: &[Matrix3<T>],
    spec: &OperatorSpec<T>,
    lm: T,
) -> Result<VectorField<T>> {
    if blocks.len() != direction.len() {
        return Err(Error::invalid("velocity_hessian_apply: block count"));
    }
    let mut out = apply_ltl(direction, spec);
    for j in 0..direction.len() {
        let d = direction.get(j);
        out.set(j, out.get(j) + blocks[j] * d + d * lm);
    }
    Ok(out)
}

/// Registration objective for one subject: matching term minus penalty.
pub fn velocity_objective<T: Real>(
    ctx: &VelocityContext<'_, T>,
    phi: &VectorField<T>,
    u: &VectorField<T>,
    spec: &OperatorSpec<T>,
) -> Result<T> {
    let (value, _, _) = velocity_matching_terms(ctx, phi)?;
    Ok(value - super::operator::penalty_energy(u, spec))
}
