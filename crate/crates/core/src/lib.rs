//! Groupwise generative modelling engine for multi-channel volumetric images.
//!
//! Jointly learns a probabilistic tissue atlas and per-subject intensity,
//! bias, affine and diffeomorphic deformation parameters from a population
//! of volumes, and applies the learned atlas to segment unseen data.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`)
//! through the [`Real`] trait; concrete aliases for the common `f64`
//! instantiation live at the crate root.

// indexed loops mirror the stencil/matrix notation throughout the
// numerical kernels; reference constants keep their published digits
#![allow(clippy::needless_range_loop)]
#![allow(clippy::excessive_precision)]

pub mod affine;
pub mod bias;
pub mod diffeo;
pub mod error;
pub mod geometry;
pub mod io;
pub mod mixture;
pub mod pipeline;
pub mod scalar;
pub mod special;
pub mod template;

pub use error::{Error, Result};
pub use scalar::{cst, Real};

pub use nalgebra;

/// Multi-channel volume over `f64`.
pub type VolumeGrid = geometry::VolumeGrid<f64>;
/// Dense 3-vector field over `f64`.
pub type VectorField = geometry::VectorField<f64>;
/// Deformation (forward map, inverse map, Jacobian determinants) over `f64`.
pub type DeformationField = geometry::DeformationField<f64>;
/// Tissue probability maps over `f64`.
pub type TissueAtlas = template::TissueAtlas<f64>;
/// Gaussian-Wishart prior/posterior bundle over `f64`.
pub type GaussWishartBundle = mixture::GaussWishartBundle<f64>;
/// Per-voxel class responsibilities over `f64`.
pub type Responsibilities = mixture::Responsibilities<f64>;
/// Per-subject unknowns over `f64`.
pub type SubjectState = pipeline::SubjectState<f64>;
/// Fitting configuration over `f64`.
pub type ModelConfig = pipeline::ModelConfig<f64>;


