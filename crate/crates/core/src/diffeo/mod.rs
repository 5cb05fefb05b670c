//! Large-deformation registration: initial-velocity parametrization,
//! geodesic shooting, smoothness penalty through a differential operator,
//! and Gauss-Newton updates solved by full multigrid.

mod grad;
mod multigrid;
mod operator;
mod shoot;
mod update;

pub use grad::{
    velocity_grad, velocity_hessian_apply, velocity_matching_terms, velocity_objective,
    VelocityContext,
};
pub use multigrid::{multigrid_solve, multigrid_solve_warm, MultigridInfo, SolveSettings};
pub use operator::{apply_ltl, penalty_energy, OperatorSpec};
pub use shoot::geodesic_shoot;
pub use update::{gauss_newton_velocity_update, run_velocity_updates, VelocityUpdateOutcome};

use crate::geometry::VectorField;
use crate::scalar::Real;

/// Initial velocity field (mm) plus its smoothness operator.
#[derive(Debug, Clone)]
pub struct VelocityParams<T> {
    pub u: VectorField<T>,
    pub operator: OperatorSpec<T>,
}

impl<T: Real> VelocityParams<T> {
    pub fn zero(shape: crate::geometry::GridShape<T>, operator: OperatorSpec<T>) -> Self {
        VelocityParams {
            u: VectorField::zeros(shape),
            operator,
        }
    }

    /// Momentum `m = L^T L u` dual to the velocity under the operator
    /// metric.
    pub fn momentum(&self) -> VectorField<T> {
        apply_ltl(&self.u, &self.operator)
    }

    /// `R(u) = 1/2 u^T (L^T L) u`.
    pub fn penalty(&self) -> T {
        penalty_energy(&self.u, &self.operator)
    }
}

/// Momentum field (dual of a velocity under the operator metric).
pub type Momentum<T> = VectorField<T>;
