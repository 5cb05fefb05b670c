//! File formats: the native MVOL volume container and a minimal NIfTI-1
//! reader/writer.

mod mvol;
mod nifti;

pub use mvol::{read_mvol, write_mvol};
pub use nifti::{read_nifti, write_nifti};

use crate::error::{Error, Result};
use crate::geometry::{VectorField, VolumeGrid};
use crate::scalar::Real;
use std::path::Path;

/// Load a volume by extension: `.mvol` or `.nii`.
pub fn read_volume<T: Real>(path: &Path) -> Result<VolumeGrid<T>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mvol") => read_mvol(path),
        Some("nii") => read_nifti(path),
        other => Err(Error::invalid(format!(
            "unsupported volume extension {:?} for {}",
            other,
            path.display()
        ))),
    }
}

/// Store a vector field as a 3-channel volume (x, y, z components).
pub fn vector_field_to_volume<T: Real>(field: &VectorField<T>) -> VolumeGrid<T> {
    let shape = field.shape();
    let n = shape.len();
    let mut vol = VolumeGrid::zeros(shape.dims, shape.spacing, 3);
    for j in 0..n {
        let v = field.get(j);
        for c in 0..3 {
            vol.set_value(j, c, v[c]);
        }
    }
    vol
}
