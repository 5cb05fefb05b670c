//! Dense 3-vector field on a regular grid.

use super::GridShape;
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};
use nalgebra::Vector3;

/// One 3-vector per voxel: displacements, velocities or sampled map
/// coordinates, depending on context.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField<T> {
    shape: GridShape<T>,
    data: Vec<Vector3<T>>,
}

impl<T: Real> VectorField<T> {
    pub fn new(shape: GridShape<T>, data: Vec<Vector3<T>>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "vector field has {} entries, expected {}",
                data.len(),
                shape.len()
            )));
        }
        if data
            .iter()
            .any(|v| !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()))
        {
            return Err(Error::non_finite("vector field entry"));
        }
        Ok(VectorField { shape, data })
    }

    pub fn zeros(shape: GridShape<T>) -> Self {
        VectorField {
            shape,
            data: vec![Vector3::zeros(); shape.len()],
        }
    }

    /// The identity map: every voxel holds its own coordinates (voxel units).
    pub fn identity_map(shape: GridShape<T>) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for (_, [x, y, z]) in shape.iter_voxels() {
            data.push(Vector3::new(
                cst::<T>(x as f64),
                cst::<T>(y as f64),
                cst::<T>(z as f64),
            ));
        }
        VectorField { shape, data }
    }

    pub fn shape(&self) -> GridShape<T> {
        self.shape
    }

    pub fn dims(&self) -> [usize; 3] {
        self.shape.dims
    }

    pub fn spacing(&self) -> [T; 3] {
        self.shape.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, j: usize) -> Vector3<T> {
        self.data[j]
    }

    #[inline]
    pub fn set(&mut self, j: usize, v: Vector3<T>) {
        self.data[j] = v;
    }

    pub fn as_slice(&self) -> &[Vector3<T>] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Vector3<T>] {
        &mut self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vector3<T>> {
        self.data.iter()
    }

    /// Largest component magnitude over the field.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| {
            m.max(v.x.abs()).max(v.y.abs()).max(v.z.abs())
        })
    }

    /// Euclidean inner product viewing the field as one long vector.
    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (a, b)| acc + a.dot(b))
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }
}
