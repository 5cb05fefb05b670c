//! Regular-grid volumes, interpolation, spatial differentiation, Jacobians
//! and map composition.
//!
//! Conventions: voxel `(x, y, z)` of a grid with dims `(nx, ny, nz)` has
//! linear index `x + nx*(y + ny*z)` (x fastest). Coordinates are in voxel
//! units internally; the physical spacing (mm/voxel) enters only gradients
//! and the deformation regularizer. Sampling outside the domain clamps to
//! the edge (replicate nearest voxel), which keeps interpolated template
//! values inside `[0, 1]`.

mod deformation;
mod diff;
mod interp;
mod vector_field;
mod volume;

pub use deformation::{compose, DeformationField};
pub use diff::{jacobian_determinants, map_jacobian, spatial_gradient};
pub use interp::{
    sample_channel, sample_trilinear, sample_trilinear_with_gradient, sample_vector,
    sample_vector_field,
};
pub(crate) use interp::stencil as interp_stencil;
pub use vector_field::VectorField;
pub use volume::VolumeGrid;

use crate::scalar::Real;

/// Voxel dimensions plus physical spacing of a regular grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridShape<T> {
    pub dims: [usize; 3],
    pub spacing: [T; 3],
}

impl<T: Real> GridShape<T> {
    pub fn new(dims: [usize; 3], spacing: [T; 3]) -> Self {
        GridShape { dims, spacing }
    }

    pub fn isotropic(dims: [usize; 3]) -> Self {
        GridShape {
            dims,
            spacing: [T::one(); 3],
        }
    }

    /// Total number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, j: usize) -> [usize; 3] {
        let x = j % self.dims[0];
        let r = j / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    /// Iterate voxel indices in storage order.
    pub fn iter_voxels(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        let shape = *self;
        (0..self.len()).map(move |j| (j, shape.coords(j)))
    }
}
