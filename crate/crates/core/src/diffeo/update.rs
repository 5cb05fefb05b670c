//! Damped Gauss-Newton step on the initial velocity.

use super::grad::{velocity_matching_terms, VelocityContext};
use super::multigrid::{multigrid_solve, SolveSettings};
use super::operator::{apply_ltl, penalty_energy};
use super::shoot::geodesic_shoot;
use super::VelocityParams;
use crate::error::{Error, Result};
use crate::geometry::{DeformationField, VectorField};
use crate::scalar::{cst, Real};

#[derive(Debug, Clone)]
pub struct VelocityUpdateOutcome<T> {
    pub accepted: bool,
    pub bound_delta: T,
    pub halvings: usize,
    pub next_levenberg: T,
    /// Foldovers encountered while trying step lengths.
    pub foldovers: usize,
    pub solver_stagnated: bool,
}

/// One Gauss-Newton step: solve `(W + L^T L + lm I) du = grad` by full
/// multigrid, then step-halve on foldover or objective decrease (at most 8
/// halvings); the deformation is re-shot after acceptance.
pub fn gauss_newton_velocity_update<T: Real>(
    ctx: &VelocityContext<'_, T>,
    velocity: &mut VelocityParams<T>,
    deformation: &mut DeformationField<T>,
    levenberg: T,
    settings: &SolveSettings,
) -> Result<VelocityUpdateOutcome<T>> {
    let spec = velocity.operator;
    let (d_before, mut grad, blocks) = velocity_matching_terms(ctx, &deformation.forward)?;
    let obj_before = d_before - penalty_energy(&velocity.u, &spec);

    // full objective gradient
    let penalty_grad = apply_ltl(&velocity.u, &spec);
    for j in 0..grad.len() {
        grad.set(j, grad.get(j) - penalty_grad.get(j));
    }

    let (delta, info) = multigrid_solve(&grad, &spec, &blocks, levenberg, settings)?;

    let mut scale = T::one();
    let mut halvings = 0usize;
    let mut foldovers = 0usize;
    loop {
        let mut trial = velocity.u.clone();
        trial.axpy(scale, &delta);
        match geodesic_shoot(&trial, &spec, ctx.steps, settings) {
            Ok(def) => {
                let (d_after, _, _) = velocity_matching_terms(ctx, &def.forward)?;
                let obj_after = d_after - penalty_energy(&trial, &spec);
                if obj_after >= obj_before && obj_after.is_finite() {
                    velocity.u = trial;
                    *deformation = def;
                    let next = if halvings == 0 {
                        (levenberg * cst(0.5)).max(cst(1e-8))
                    } else {
                        levenberg * cst(10.0)
                    };
                    return Ok(VelocityUpdateOutcome {
                        accepted: true,
                        bound_delta: obj_after - obj_before,
                        halvings,
                        next_levenberg: next,
                        foldovers,
                        solver_stagnated: info.stagnated,
                    });
                }
            }
            Err(Error::Foldover { .. }) => {
                foldovers += 1;
            }
            Err(e) => return Err(e),
        }
        if halvings >= 8 {
            return Ok(VelocityUpdateOutcome {
                accepted: false,
                bound_delta: T::zero(),
                halvings,
                next_levenberg: levenberg * cst(10.0),
                foldovers,
                solver_stagnated: info.stagnated,
            });
        }
        scale *= cst::<T>(0.5);
        halvings += 1;
    }
}

/// Drive the velocity toward stationarity with repeated GN steps; test and
/// pipeline helper.
pub fn run_velocity_updates<T: Real>(
    ctx: &VelocityContext<'_, T>,
    velocity: &mut VelocityParams<T>,
    deformation: &mut DeformationField<T>,
    iterations: usize,
    settings: &SolveSettings,
) -> Result<VectorField<T>> {
    let mut lev: T = cst(1e-2);
    for _ in 0..iterations {
        let out =
            gauss_newton_velocity_update(ctx, velocity, deformation, lev, settings)?;
        lev = out.next_levenberg;
    }
    Ok(velocity.u.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::AffineParams;
    use crate::diffeo::OperatorSpec;
    use crate::geometry::GridShape;
    use crate::mixture::Responsibilities;
    use crate::template::TissueAtlas;
    use nalgebra::{SMatrix, Vector3};

    fn blob_atlas(dims: [usize; 3], centre: [f64; 3]) -> TissueAtlas<f64> {
        let shape = GridShape::isotropic(dims);
        let n = shape.len();
        let mut pi = vec![0.0; 2 * n];
        for (j, [x, y, z]) in shape.iter_voxels() {
            let r2 = (x as f64 - centre[0]).powi(2)
                + (y as f64 - centre[1]).powi(2)
                + (z as f64 - centre[2]).powi(2);
            let inside = 0.03 + 0.94 * (-r2 / 6.0).exp();
            pi[j] = inside;
            pi[n + j] = 1.0 - inside;
        }
        TissueAtlas::new(shape, 2, vec![1.01; 2], pi).unwrap()
    }

    fn spec() -> OperatorSpec<f64> {
        OperatorSpec::new(1e-3, 0.1, 0.5, (0.25, 0.125), [1.0; 3]).unwrap()
    }

    #[test]
    fn stationary_at_ground_truth() {
        // gamma equals the warped prior at u = 0: the first step stays tiny
        let dims = [8, 8, 8];
        let shape = GridShape::isotropic(dims);
        let atlas = blob_atlas(dims, [3.5, 3.5, 3.5]);
        let weights = vec![1.0, 1.0];
        let affine = AffineParams::<f64>::identity(SMatrix::zeros());
        let n = shape.len();
        let mut g = vec![0.0; n * 2];
        for j in 0..n {
            g[j * 2] = atlas.value(j, 0);
            g[j * 2 + 1] = atlas.value(j, 1);
        }
        let gamma = Responsibilities::new(g, 2).unwrap();
        let ctx = VelocityContext {
            gamma: &gamma,
            weights: &weights,
            atlas: &atlas,
            affine: &affine,
            subject_spacing: [1.0; 3],
            steps: 1,
        };
        let mut v = VelocityParams::zero(shape, spec());
        let mut def = DeformationField::identity(shape);
        let out = gauss_newton_velocity_update(&ctx, &mut v, &mut def, 1e-2, &Default::default())
            .unwrap();
        assert!(out.accepted);
        assert!(v.u.max_abs() < 1e-3, "step norm {}", v.u.max_abs());
    }

    #[test]
    fn recovers_small_known_shift() {
        // subject responsibilities are the template blob shifted by half a
        // voxel; a few GN updates must move the blob most of the way back
        let dims = [10, 10, 10];
        let shape = GridShape::isotropic(dims);
        let atlas = blob_atlas(dims, [4.5, 4.5, 4.5]);
        let shifted = blob_atlas(dims, [5.1, 4.5, 4.5]);
        let n = shape.len();
        let mut g = vec![0.0; n * 2];
        for j in 0..n {
            g[j * 2] = shifted.value(j, 0);
            g[j * 2 + 1] = shifted.value(j, 1);
        }
        let gamma = Responsibilities::new(g, 2).unwrap();
        let weights = vec![1.0, 1.0];
        let affine = AffineParams::<f64>::identity(SMatrix::zeros());
        let ctx = VelocityContext {
            gamma: &gamma,
            weights: &weights,
            atlas: &atlas,
            affine: &affine,
            subject_spacing: [1.0; 3],
            steps: 4,
        };
        // weak regularization so the match can actually move
        let weak = OperatorSpec::new(1e-3, 0.01, 0.05, (0.025, 0.0125), [1.0; 3]).unwrap();
        let mut v = VelocityParams::zero(shape, weak);
        let mut def = DeformationField::identity(shape);
        let mut lev = 1e-2;
        let mut last_obj = f64::NEG_INFINITY;
        for _ in 0..15 {
            let out =
                gauss_newton_velocity_update(&ctx, &mut v, &mut def, lev, &Default::default())
                    .unwrap();
            lev = out.next_levenberg;
            let (d, _, _) = velocity_matching_terms(&ctx, &def.forward).unwrap();
            let obj = d - penalty_energy(&v.u, &v.operator);
            assert!(obj >= last_obj - 1e-9, "objective decreased");
            last_obj = obj;
        }
        // xi must carry the shifted blob (subject space, x = 5.1) onto the
        // template blob at 4.5: displacement about -0.6 voxels in x
        let j = shape.index(5, 4, 4);
        let disp = def.forward.get(j) - Vector3::new(5.0, 4.0, 4.0);
        assert!(
            (disp.x + 0.6).abs() < 0.35,
            "recovered displacement {disp:?}"
        );
        assert!(disp.y.abs() < 0.2 && disp.z.abs() < 0.2);
    }

    #[test]
    fn huge_penalty_drives_velocity_to_zero() {
        let dims = [6, 6, 6];
        let shape = GridShape::isotropic(dims);
        let atlas = blob_atlas(dims, [2.5, 2.5, 2.5]);
        let gamma = Responsibilities::uniform(shape.len(), 2);
        let weights = vec![1.0, 1.0];
        let affine = AffineParams::<f64>::identity(SMatrix::zeros());
        let ctx = VelocityContext {
            gamma: &gamma,
            weights: &weights,
            atlas: &atlas,
            affine: &affine,
            subject_spacing: [1.0; 3],
            steps: 1,
        };
        let huge = OperatorSpec::new(1e6, 1e6, 1e6, (1e6, 1e6), [1.0; 3]).unwrap();
        let mut v = VelocityParams::zero(shape, huge);
        // start away from zero
        for w in v.u.as_mut_slice() {
            *w = Vector3::new(0.2, -0.1, 0.15);
        }
        let mut def = geodesic_shoot(&v.u, &v.operator, 1, &Default::default()).unwrap();
        let before = v.u.max_abs();
        for _ in 0..3 {
            gauss_newton_velocity_update(&ctx, &mut v, &mut def, 1e-2, &Default::default())
                .unwrap();
        }
        assert!(
            v.u.max_abs() < 0.05 * before,
            "velocity {} not driven down",
            v.u.max_abs()
        );
    }
}
