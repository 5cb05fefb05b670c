//! Per-subject data and unknowns.

use super::ModelConfig;
use crate::affine::AffineParams;
use crate::bias::{evaluate_bias, BiasBasis, BiasModel};
use crate::diffeo::{OperatorSpec, VelocityParams};
use crate::error::Result;
use crate::geometry::{DeformationField, GridShape, VolumeGrid};
use crate::mixture::{
    GaussWishartBundle, LabelData, MissingPosterior, PreparedSubject, Responsibilities,
    TissueWeights,
};
use crate::scalar::{cst, Real};
use crate::template::TissueAtlas;
use nalgebra::Vector3;

/// Immutable inputs for one subject.
#[derive(Debug, Clone)]
pub struct SubjectData<T> {
    pub volume: VolumeGrid<T>,
    pub labels: Option<LabelData<T>>,
    pub name: String,
}

/// All per-subject unknowns plus cached quantities.
#[derive(Debug, Clone)]
pub struct SubjectState<T> {
    pub weights: TissueWeights<T>,
    pub bias: BiasModel<T>,
    pub affine: AffineParams<T>,
    pub velocity: VelocityParams<T>,
    pub posterior: GaussWishartBundle<T>,
    pub gamma: Responsibilities<T>,
    pub missing: MissingPosterior<T>,
    /// Deformation consistent with the current velocity.
    pub deformation: DeformationField<T>,
    /// Adaptive Levenberg dampings per Gauss-Newton family.
    pub lev_bias: T,
    pub lev_affine: T,
    pub lev_velocity: T,
    /// Degeneracy counter reported by the last E-step.
    pub degenerate_voxels: usize,
}

impl<T: Real> SubjectState<T> {
    pub fn init(
        data: &SubjectData<T>,
        config: &ModelConfig<T>,
        atlas: &TissueAtlas<T>,
        prior: &GaussWishartBundle<T>,
        basis: &BiasBasis<T>,
    ) -> Result<Self> {
        let shape = data.volume.shape();
        let k = config.k;
        let operator = OperatorSpec::new(
            config.lambda_zero,
            config.lambda_membrane,
            config.lambda_bending,
            (config.lambda_elastic_mu, config.lambda_elastic_lambda),
            shape.spacing,
        )?;
        let mut affine = AffineParams::identity(AffineParams::diagonal_precision(
            config.prior_prec_rot,
            config.prior_prec_zoom,
            config.prior_prec_shear,
        ));
        if config.centroid_init {
            affine.t = centroid_translation(&data.volume, atlas);
        }
        Ok(SubjectState {
            weights: TissueWeights::unit(k),
            bias: BiasModel::zero(basis, data.volume.channels(), config.bias_reg),
            affine,
            velocity: VelocityParams::zero(shape, operator),
            posterior: prior.clone(),
            gamma: Responsibilities::uniform(shape.len(), k),
            missing: MissingPosterior::none(shape.len()),
            deformation: DeformationField::identity(shape),
            lev_bias: cst(1e-2),
            lev_affine: cst(1e-2),
            lev_velocity: cst(1e-2),
            degenerate_voxels: 0,
        })
    }

    /// Bias fields over the grid, channel-major.
    pub fn bias_field(&self, basis: &BiasBasis<T>) -> Result<Vec<T>> {
        evaluate_bias(&self.bias, basis)
    }

    pub fn prepare(&self, data: &SubjectData<T>, basis: &BiasBasis<T>) -> Result<PreparedSubject<T>> {
        let bias = self.bias_field(basis)?;
        PreparedSubject::new(&data.volume, Some(&bias))
    }
}

/// Translation (mm) aligning the subject's intensity centroid with the
/// template's probability-mass centroid.
pub fn centroid_translation<T: Real>(
    volume: &VolumeGrid<T>,
    atlas: &TissueAtlas<T>,
) -> Vector3<T> {
    let centroid = |weight: &dyn Fn(usize) -> T, shape: GridShape<T>| -> Vector3<T> {
        let mut acc = Vector3::zeros();
        let mut total = T::zero();
        for (j, [x, y, z]) in shape.iter_voxels() {
            let w = weight(j).max(T::zero());
            let p = Vector3::new(
                cst::<T>(x as f64) * shape.spacing[0],
                cst::<T>(y as f64) * shape.spacing[1],
                cst::<T>(z as f64) * shape.spacing[2],
            );
            acc += p * w;
            total += w;
        }
        if total > T::zero() {
            acc / total
        } else {
            // geometric centre
            Vector3::new(
                cst::<T>((shape.dims[0] - 1) as f64) * shape.spacing[0] * cst(0.5),
                cst::<T>((shape.dims[1] - 1) as f64) * shape.spacing[1] * cst(0.5),
                cst::<T>((shape.dims[2] - 1) as f64) * shape.spacing[2] * cst(0.5),
            )
        }
    };
    // subject: intensity mass above the per-channel median
    let n = volume.len();
    let mut med = vec![T::zero(); volume.channels()];
    for d in 0..volume.channels() {
        let mut vals: Vec<T> = (0..n)
            .filter(|&j| !volume.is_missing(j, d))
            .map(|j| volume.value(j, d))
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        if !vals.is_empty() {
            med[d] = vals[vals.len() / 2];
        }
    }
    let weight_subject = |j: usize| -> T {
        let mut w = T::zero();
        for d in 0..volume.channels() {
            if !volume.is_missing(j, d) {
                w += (volume.value(j, d) - med[d]).max(T::zero());
            }
        }
        w
    };
    let c_subject = centroid(&weight_subject, volume.shape());
    // template: use the deviation from a uniform row as foreground weight
    // (a freshly initialized uniform atlas then falls back to its centre)
    let k = atlas.classes();
    let uniform = T::one() / cst::<T>(k as f64);
    let weight_atlas = |j: usize| -> T {
        let mut dev = T::zero();
        for c in 0..k {
            dev += (atlas.value(j, c) - uniform).abs();
        }
        dev
    };
    let c_atlas = centroid(&weight_atlas, atlas.shape());
    c_atlas - c_subject
}
