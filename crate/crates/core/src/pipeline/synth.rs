//! Synthetic dataset generation: a known atlas, per-subject warps,
//! affines, biases and noise, with full ground truth emitted alongside.

use super::state::SubjectData;
use crate::affine::exp_map;
use crate::diffeo::{geodesic_shoot, OperatorSpec};
use crate::error::Result;
use crate::geometry::{DeformationField, GridShape, VolumeGrid};
use crate::mixture::LabelData;
use crate::scalar::{cst, Real};
use crate::template::TissueAtlas;
use nalgebra::{SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Knobs of the synthetic generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub subjects: usize,
    pub k: usize,
    pub channels: usize,
    /// Multiplicative bias amplitude: 0.1 keeps the field in [0.9, 1.1]
    /// (the "20%" preset), 0.2 in [0.8, 1.2] (the "40%" preset).
    pub bias_amplitude: f64,
    /// Additive noise standard deviation as percent of the intensity range.
    pub noise_percent: f64,
    /// Peak initial-velocity displacement in voxels.
    pub warp_max: f64,
    /// Scale of the random affine generator coordinates (0 disables).
    pub affine_scale: f64,
    /// Peak random translation in voxels (0 disables).
    pub translation_max: f64,
    /// Subjects whose true class maps are emitted as manual labels.
    pub labelled_subjects: Vec<usize>,
    /// Atlas smoothness (fwhm in voxels) and sharpness of class regions.
    pub atlas_fwhm: f64,
    pub atlas_sharpness: f64,
    /// Separation between consecutive class means, and within-class std.
    pub mean_separation: f64,
    pub within_std: f64,
    /// Bias field smoothness (fwhm in voxels).
    pub bias_fwhm: f64,
    pub shoot_steps: usize,
}

impl SynthConfig {
    pub fn new(dims: [usize; 3], subjects: usize, k: usize) -> Self {
        SynthConfig {
            dims,
            subjects,
            k,
            channels: 1,
            bias_amplitude: 0.1,
            noise_percent: 3.0,
            warp_max: 0.8,
            affine_scale: 0.0,
            translation_max: 0.0,
            labelled_subjects: Vec::new(),
            atlas_fwhm: dims[0] as f64 / 3.0,
            atlas_sharpness: 14.0,
            mean_separation: 1.0,
            within_std: 0.08,
            bias_fwhm: dims[0] as f64 / 1.5,
            shoot_steps: 8,
        }
    }

    /// Named presets: `bias20` keeps the field in [0.9, 1.1],
    /// `bias40` in [0.8, 1.2]; noise in percent.
    pub fn preset(mut self, preset: &str, noise: f64) -> Result<Self> {
        self.bias_amplitude = match preset {
            "bias20" => 0.1,
            "bias40" => 0.2,
            other => {
                return Err(crate::error::Error::invalid(format!(
                    "unknown preset {other} (expected bias20 or bias40)"
                )))
            }
        };
        self.noise_percent = noise;
        Ok(self)
    }
}

/// Everything the generator knows: data plus ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset<T> {
    pub data: Vec<SubjectData<T>>,
    pub atlas: TissueAtlas<T>,
    pub true_bias: Vec<Vec<T>>,
    pub true_warps: Vec<DeformationField<T>>,
    pub true_affines: Vec<(nalgebra::Matrix3<T>, Vector3<T>)>,
    pub true_classes: Vec<Vec<usize>>,
    pub class_means: Vec<Vec<T>>,
}

fn gaussian_smooth(values: &mut Vec<f64>, dims: [usize; 3], fwhm: f64) {
    if fwhm <= 0.0 {
        return;
    }
    let sigma = fwhm / (8.0 * (2.0f64).ln()).sqrt();
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|v| v / ksum).collect();
    let n = dims[0] * dims[1] * dims[2];
    for axis in 0..3 {
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let len = dims[axis];
        let mut out = vec![0.0; n];
        for (j, o) in out.iter_mut().enumerate() {
            let pos = match axis {
                0 => j % dims[0],
                1 => (j / dims[0]) % dims[1],
                _ => j / (dims[0] * dims[1]),
            } as i64;
            let base = j as i64 - pos * stride as i64;
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let q = (pos + t as i64 - radius).clamp(0, len as i64 - 1);
                acc += kv * values[(base + q * stride as i64) as usize];
            }
            *o = acc;
        }
        *values = out;
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Smooth zero-mean random scalar field, normalized to max-abs 1.
fn smooth_noise(rng: &mut ChaCha8Rng, dims: [usize; 3], fwhm: f64) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut f: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    gaussian_smooth(&mut f, dims, fwhm);
    let mean = f.iter().sum::<f64>() / n as f64;
    for v in &mut f {
        *v -= mean;
    }
    let max = f.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
    for v in &mut f {
        *v /= max;
    }
    f
}

/// Smooth random velocity (mm == voxels here), windowed to vanish at the
/// faces, scaled to a peak displacement.
fn random_velocity<T: Real>(
    rng: &mut ChaCha8Rng,
    shape: GridShape<T>,
    fwhm: f64,
    target_max: f64,
) -> crate::geometry::VectorField<T> {
    let dims = shape.dims;
    let mut u = crate::geometry::VectorField::zeros(shape);
    let comps: [Vec<f64>; 3] = std::array::from_fn(|_| smooth_noise(rng, dims, fwhm));
    let win = |a: usize, n: usize| {
        if n < 2 {
            0.0
        } else {
            (std::f64::consts::PI * a as f64 / (n - 1) as f64).sin().powi(2)
        }
    };
    let mut max = 0.0f64;
    let mut raw = vec![[0.0f64; 3]; shape.len()];
    for (j, [x, y, z]) in shape.iter_voxels() {
        let w = win(x, dims[0]) * win(y, dims[1]) * win(z, dims[2]);
        for c in 0..3 {
            raw[j][c] = w * comps[c][j];
            max = max.max(raw[j][c].abs());
        }
    }
    let scale = if max > 0.0 { target_max / max } else { 0.0 };
    for j in 0..shape.len() {
        u.set(
            j,
            Vector3::new(
                cst::<T>(raw[j][0] * scale),
                cst::<T>(raw[j][1] * scale),
                cst::<T>(raw[j][2] * scale),
            ),
        );
    }
    u
}

/// Draw the whole dataset from a counter-based generator; identical seeds
/// give identical bytes.
pub fn synthesize_dataset<T: Real>(config: &SynthConfig, seed: u64) -> Result<SynthDataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = config.dims;
    let shape = GridShape::<T>::isotropic(dims);
    let n = shape.len();
    let k = config.k;

    // coherent class regions: argmax of smooth random fields, rendered
    // near-binary and then lightly blurred so boundaries carry a thin
    // partial-volume band (the shape of real tissue maps)
    let fields: Vec<Vec<f64>> = (0..k)
        .map(|_| smooth_noise(&mut rng, dims, config.atlas_fwhm))
        .collect();
    let softness = (-config.atlas_sharpness).exp();
    let mut planes: Vec<Vec<f64>> = vec![vec![softness; n]; k];
    for j in 0..n {
        let mut best = 0usize;
        for c in 1..k {
            if fields[c][j] > fields[best][j] {
                best = c;
            }
        }
        planes[best][j] = 1.0;
    }
    for plane in planes.iter_mut() {
        gaussian_smooth(plane, dims, 1.2);
    }
    let mut pi = vec![T::zero(); k * n];
    for j in 0..n {
        let sum: f64 = (0..k).map(|c| planes[c][j]).sum();
        for c in 0..k {
            pi[c * n + j] = cst::<T>(planes[c][j] / sum);
        }
    }
    let atlas = TissueAtlas::new(shape, k, vec![cst(1.01); k], pi)?;

    // class means: separated along each channel, fixed within-class std
    let class_means: Vec<Vec<T>> = (0..k)
        .map(|c| {
            (0..config.channels)
                .map(|d| cst::<T>((c + 1) as f64 * config.mean_separation * (1.0 + 0.1 * d as f64)))
                .collect()
        })
        .collect();

    let operator = OperatorSpec::<T>::default_for([T::one(); 3]);
    let signal_range = config.mean_separation * k as f64;
    let noise_sigma = config.noise_percent / 100.0 * signal_range;

    let mut data = Vec::with_capacity(config.subjects);
    let mut true_bias = Vec::new();
    let mut true_warps = Vec::new();
    let mut true_affines = Vec::new();
    let mut true_classes = Vec::new();
    for i in 0..config.subjects {
        // deformation: shoot a smooth random initial velocity
        let u = random_velocity(&mut rng, shape, dims[0] as f64 / 2.0, config.warp_max);
        let warp = geodesic_shoot(&u, &operator, config.shoot_steps, &Default::default())?;

        // small random affine
        let mut a = SVector::<T, 9>::zeros();
        if config.affine_scale > 0.0 {
            for p in 0..9 {
                a[p] = cst::<T>(config.affine_scale * standard_normal(&mut rng));
            }
        }
        let mut t = Vector3::<T>::zeros();
        if config.translation_max > 0.0 {
            for p in 0..3 {
                t[p] = cst::<T>(config.translation_max * rng.gen_range(-1.0..1.0));
            }
        }
        let mat = exp_map(&a)?;

        // xi = T phi + t in voxel units (unit spacing); sample the atlas
        let mut coords = Vec::with_capacity(n);
        for j in 0..n {
            let p = warp.forward.get(j);
            coords.push(mat * p + t);
        }
        let rows = atlas.sample_rows(&coords);

        // draw classes and intensities
        let mut z = vec![0usize; n];
        let mut clean = vec![vec![0.0f64; n]; config.channels];
        for j in 0..n {
            let r: f64 = rng.gen_range(0.0..1.0);
            let mut acc = 0.0;
            let mut zc = k - 1;
            for c in 0..k {
                acc += rows[j * k + c].to_f64().unwrap_or(0.0);
                if r < acc {
                    zc = c;
                    break;
                }
            }
            z[j] = zc;
            for d in 0..config.channels {
                clean[d][j] = class_means[zc][d].to_f64().unwrap_or(0.0)
                    + config.within_std * signal_range * standard_normal(&mut rng) / k as f64;
            }
        }

        // multiplicative bias per channel: 1 + amplitude * smooth noise,
        // so the field range stays within [1-a, 1+a]
        let mut bias_fields = Vec::with_capacity(config.channels);
        let mut values = vec![T::zero(); config.channels * n];
        for d in 0..config.channels {
            let g = smooth_noise(&mut rng, dims, config.bias_fwhm);
            let mut bf = vec![T::zero(); n];
            for j in 0..n {
                let b = 1.0 + config.bias_amplitude * g[j];
                bf[j] = cst(b);
                // the model multiplies observed intensities by the bias to
                // correct them: observed = clean / b + noise
                let x = clean[d][j] / b + noise_sigma * standard_normal(&mut rng);
                values[d * n + j] = cst(x);
            }
            bias_fields.push(bf);
        }

        let volume = VolumeGrid::new(dims, [T::one(); 3], config.channels, values, None)?;
        let labels = if config.labelled_subjects.contains(&i) {
            Some(LabelData::new(
                z.iter().map(|&c| (c + 1) as u16).collect(),
                T::one(),
                k,
            )?)
        } else {
            None
        };
        data.push(SubjectData {
            volume,
            labels,
            name: format!("synth_{i:03}"),
        });
        let mut flat_bias = Vec::with_capacity(config.channels * n);
        for bf in &bias_fields {
            flat_bias.extend(bf.iter().copied());
        }
        true_bias.push(flat_bias);
        true_warps.push(warp);
        true_affines.push((mat, t));
        true_classes.push(z);
    }
    Ok(SynthDataset {
        data,
        atlas,
        true_bias,
        true_warps,
        true_affines,
        true_classes,
        class_means,
    })
}
