//! Deformation fields: forward map, inverse map and Jacobian determinants.

use super::interp::sample_vector;
use super::{jacobian_determinants, GridShape, VectorField};
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};

/// A sampled diffeomorphism: forward coordinates, inverse coordinates and
/// per-voxel Jacobian determinants of the forward map (all voxel units).
#[derive(Debug, Clone)]
pub struct DeformationField<T> {
    pub forward: VectorField<T>,
    pub inverse: VectorField<T>,
    pub jac_det: Vec<T>,
}

impl<T: Real> DeformationField<T> {
    /// Build from forward/inverse maps, computing determinants and checking
    /// that the map does not fold over.
    pub fn new(forward: VectorField<T>, inverse: VectorField<T>) -> Result<Self> {
        let jac_det = jacobian_determinants(&forward)?;
        let field = DeformationField {
            forward,
            inverse,
            jac_det,
        };
        field.check_positive_jacobian()?;
        Ok(field)
    }

    pub fn identity(shape: GridShape<T>) -> Self {
        DeformationField {
            forward: VectorField::identity_map(shape),
            inverse: VectorField::identity_map(shape),
            jac_det: vec![T::one(); shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape<T> {
        self.forward.shape()
    }

    pub fn check_positive_jacobian(&self) -> Result<()> {
        let shape = self.forward.shape();
        for (j, &d) in self.jac_det.iter().enumerate() {
            if d <= T::zero() {
                return Err(Error::Foldover {
                    voxel: shape.coords(j),
                    det: d.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    /// Max-norm deviation of forward∘inverse from the identity, in voxels.
    pub fn inverse_consistency(&self) -> T {
        let shape = self.forward.shape();
        let mut worst = T::zero();
        for (j, [x, y, z]) in shape.iter_voxels() {
            let back = sample_vector(&self.forward, self.inverse.get(j));
            let dx = (back.x - cst::<T>(x as f64)).abs();
            let dy = (back.y - cst::<T>(y as f64)).abs();
            let dz = (back.z - cst::<T>(z as f64)).abs();
            worst = worst.max(dx).max(dy).max(dz);
        }
        worst
    }
}

/// Compose two deformations: `(outer ∘ inner)(y) = outer(inner(y))`, with
/// the inverse composed the other way round and determinants recomputed
/// from the composed forward map.
pub fn compose<T: Real>(
    outer: &DeformationField<T>,
    inner: &DeformationField<T>,
) -> Result<DeformationField<T>> {
    if outer.forward.dims() != inner.forward.dims() {
        return Err(Error::GridMismatch {
            expected: outer.forward.dims(),
            got: inner.forward.dims(),
        });
    }
    let shape = inner.forward.shape();
    let mut forward = VectorField::zeros(shape);
    let mut inverse = VectorField::zeros(shape);
    for j in 0..shape.len() {
        forward.set(j, sample_vector(&outer.forward, inner.forward.get(j)));
        inverse.set(j, sample_vector(&inner.inverse, outer.inverse.get(j)));
    }
    let jac_det = jacobian_determinants(&forward)?;
    Ok(DeformationField {
        forward,
        inverse,
        jac_det,
    })
}
