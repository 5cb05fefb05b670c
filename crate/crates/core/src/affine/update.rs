//! Gauss-Newton optimization of the affine parameters against the
//! warped-template matching term.

use super::{AffineMatrix, AffineParams, AffineVector};
use crate::error::{Error, Result};
use crate::geometry::VectorField;
use crate::mixture::{epsilon_pi, Responsibilities};
use crate::scalar::{cst, Real};
use crate::template::{TissueAtlas, WarpedAtlasSample};
use nalgebra::{Cholesky, SVector, Vector3, Vector4};

/// Everything the affine update needs from the subject state.
pub struct AffineContext<'a, T> {
    pub gamma: &'a Responsibilities<T>,
    pub weights: &'a [T],
    pub atlas: &'a TissueAtlas<T>,
    /// Current diffeomorphism forward map, subject voxel units.
    pub phi: &'a VectorField<T>,
    pub subject_spacing: [T; 3],
}

#[derive(Debug, Clone)]
pub struct AffineUpdateOutcome<T> {
    pub accepted: bool,
    pub bound_delta: T,
    pub halvings: usize,
    pub next_levenberg: T,
}

/// Template-voxel coordinates of `xi = (T phi_mm + t) / h_template` at
/// every subject voxel.
pub fn warp_coordinates<T: Real>(
    phi: &VectorField<T>,
    subject_spacing: [T; 3],
    affine: &nalgebra::Matrix3<T>,
    t: &Vector3<T>,
    template_spacing: [T; 3],
) -> Vec<Vector3<T>> {
    phi.iter()
        .map(|p| {
            let mm = Vector3::new(
                p.x * subject_spacing[0],
                p.y * subject_spacing[1],
                p.z * subject_spacing[2],
            );
            let xi = affine * mm + t;
            Vector3::new(
                xi.x / template_spacing[0],
                xi.y / template_spacing[1],
                xi.z / template_spacing[2],
            )
        })
        .collect()
}

/// Matching term: `sum_j sum_k gamma_jk ln(w_k pi_jk / sum_c w_c pi_jc)`.
pub fn matching_term<T: Real>(
    gamma: &Responsibilities<T>,
    sample: &WarpedAtlasSample<T>,
    weights: &[T],
) -> T {
    let k = gamma.classes();
    let floor = epsilon_pi::<T>();
    let mut acc = T::zero();
    for j in 0..gamma.len() {
        let pr = sample.pi_row(j);
        let grow = gamma.row(j);
        let mut denom = T::zero();
        for c in 0..k {
            denom += weights[c] * pr[c].max(floor);
        }
        let ln_denom = denom.max(floor).ln();
        for c in 0..k {
            if grow[c] > T::zero() {
                acc += grow[c] * ((weights[c] * pr[c].max(floor)).ln() - ln_denom);
            }
        }
    }
    acc
}

/// Gradient (12-vector) and positive-semidefinite curvature (12x12) of the
/// matching-plus-penalty objective at the current parameters.
///
/// Per voxel and class, `g_jk = d(xi_mm)/d theta^T grad_mm ln pi_k(xi)`;
/// the gradient stacks `(gamma - sigma) g` and the curvature is the
/// softmax-weighted covariance of the `g` vectors, with the prior precision
/// added on the nine linear parameters.
pub fn affine_grad_hess<T: Real>(
    ctx: &AffineContext<'_, T>,
    params: &AffineParams<T>,
    sample: &WarpedAtlasSample<T>,
) -> Result<(AffineVector<T>, AffineMatrix<T>)> {
    let k = ctx.gamma.classes();
    if sample.k != k || ctx.weights.len() != k || ctx.gamma.len() != ctx.phi.len() {
        return Err(Error::invalid("affine_grad_hess: shape mismatch"));
    }
    let blocks = params.derivative_blocks()?;
    let hs = ctx.subject_spacing;
    let ht = ctx.atlas.shape().spacing;
    let floor = epsilon_pi::<T>();

    let mut grad = AffineVector::<T>::zeros();
    let mut hess = AffineMatrix::<T>::zeros();
    let mut g_vec: Vec<SVector<T, 12>> = vec![SVector::zeros(); k];
    let mut sigma = vec![T::zero(); k];

    for j in 0..ctx.gamma.len() {
        let p = ctx.phi.get(j);
        let aug = Vector4::new(p.x * hs[0], p.y * hs[1], p.z * hs[2], T::one());
        let pr = sample.pi_row(j);
        let gl = sample.grad_row(j);
        let grow = ctx.gamma.row(j);

        let mut denom = T::zero();
        for c in 0..k {
            denom += ctx.weights[c] * pr[c].max(floor);
        }
        denom = denom.max(floor);

        let mut gbar = SVector::<T, 12>::zeros();
        for c in 0..k {
            sigma[c] = ctx.weights[c] * pr[c].max(floor) / denom;
            // millimetre gradient of ln pi_c at xi
            let gmm = Vector3::new(gl[c].x / ht[0], gl[c].y / ht[1], gl[c].z / ht[2]);
            let mut g = SVector::<T, 12>::zeros();
            for (pidx, b) in blocks.iter().enumerate() {
                g[pidx] = (b * aug).dot(&gmm);
            }
            gbar += g * sigma[c];
            g_vec[c] = g;
        }
        for c in 0..k {
            let resid = grow[c] - sigma[c];
            grad += g_vec[c] * resid;
            hess.syger(sigma[c], &g_vec[c], &g_vec[c], T::one());
        }
        hess.syger(-T::one(), &gbar, &gbar, T::one());
    }
    // symmetric rank-k updates above fill the lower triangle
    hess.fill_upper_triangle_with_lower_triangle();

    // penalty on the nine linear parameters
    for r in 0..9 {
        let mut pa = T::zero();
        for c in 0..9 {
            pa += params.prior_precision[(r, c)] * params.a[c];
            hess[(r, c)] += params.prior_precision[(r, c)];
        }
        grad[r] -= pa;
    }
    Ok((grad, hess))
}

fn objective<T: Real>(ctx: &AffineContext<'_, T>, params: &AffineParams<T>) -> Result<(T, WarpedAtlasSample<T>)> {
    let mat = params.matrix()?;
    let coords = warp_coordinates(
        ctx.phi,
        ctx.subject_spacing,
        &mat,
        &params.t,
        ctx.atlas.shape().spacing,
    );
    let sample = ctx.atlas.sample_with_gradients(&coords);
    let d = matching_term(ctx.gamma, &sample, ctx.weights);
    Ok((d + params.log_prior(), sample))
}

/// One damped Gauss-Newton step on `(a, t)`, accepted only if the matching
/// plus penalty objective does not decrease; the step is halved up to 8
/// times otherwise.
pub fn gauss_newton_affine_update<T: Real>(
    ctx: &AffineContext<'_, T>,
    params: &mut AffineParams<T>,
    levenberg: T,
) -> Result<AffineUpdateOutcome<T>> {
    params.validate()?;
    let (before, sample) = objective(ctx, params)?;
    let (grad, hess) = affine_grad_hess(ctx, params, &sample)?;

    let mut lambda = levenberg;
    let delta = loop {
        let mut damped = hess;
        for i in 0..12 {
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

    let mut step = delta;
    let mut halvings = 0usize;
    loop {
        let mut trial = params.clone();
        for i in 0..9 {
            trial.a[i] += step[i];
        }
        for i in 0..3 {
            trial.t[i] += step[9 + i];
        }
        let after = objective(ctx, &trial).map(|(v, _)| v);
        match after {
            Ok(after) if after >= before && after.is_finite() => {
                *params = trial;
                let next = if halvings == 0 {
                    (lambda * cst(0.5)).max(cst(1e-8))
                } else {
                    lambda * cst(10.0)
                };
                return Ok(AffineUpdateOutcome {
                    accepted: true,
                    bound_delta: after - before,
                    halvings,
                    next_levenberg: next,
                });
            }
            _ => {
                if halvings >= 8 {
                    return Ok(AffineUpdateOutcome {
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
    }
}
