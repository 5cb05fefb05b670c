//! Variational E-step: posterior class responsibilities.

use super::bundle::GaussWishartBundle;
use super::labels::{LabelData, LabelModel};
use super::missing::{MissingPosterior, PatternInfo};
use super::{PreparedSubject, Responsibilities};
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};
use nalgebra::DVector;

/// Warped, weight-rescaled tissue prior: row j holds
/// `w_k pi_k(xi(y_j)) / sum_c w_c pi_c(xi(y_j))`.
#[derive(Debug, Clone)]
pub struct PriorField<T> {
    data: Vec<T>,
    k: usize,
}

impl<T: Real> PriorField<T> {
    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[T] {
        &self.data[j * self.k..(j + 1) * self.k]
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        PriorField {
            data: vec![T::one() / cst::<T>(k as f64); n * k],
            k,
        }
    }
}

/// Combine sampled template rows with subject tissue weights.
///
/// `pi_rows` is voxel-major (N x K) with entries already floored away from
/// zero by the atlas; the denominator is additionally clamped so the ratio
/// never divides by zero.
pub fn warped_prior<T: Real>(pi_rows: &[T], k: usize, weights: &[T]) -> Result<PriorField<T>> {
    if k == 0 || !pi_rows.len().is_multiple_of(k) || weights.len() != k {
        return Err(Error::invalid("warped_prior: inconsistent shapes"));
    }
    if weights.iter().any(|&w| w <= T::zero()) {
        return Err(Error::invalid("tissue weights must be positive"));
    }
    let floor = super::epsilon_pi::<T>();
    let n = pi_rows.len() / k;
    let mut data = vec![T::zero(); n * k];
    for j in 0..n {
        let row = &pi_rows[j * k..(j + 1) * k];
        let mut denom = T::zero();
        for c in 0..k {
            denom += weights[c] * row[c].max(floor);
        }
        denom = denom.max(floor);
        for c in 0..k {
            data[j * k + c] = weights[c] * row[c].max(floor) / denom;
        }
    }
    Ok(PriorField { data, k })
}

/// Everything the E-step produces besides the responsibilities themselves.
#[derive(Debug)]
pub struct EStepOutput<T> {
    pub gamma: Responsibilities<T>,
    pub missing: MissingPosterior<T>,
    /// E_q[ln p(x | z, theta)] including the bias volume terms.
    pub expected_log_likelihood: T,
    /// -E[ln q(Z)].
    pub entropy_z: T,
    /// Entropy of the missing-channel posterior factors.
    pub entropy_missing: T,
    /// sum gamma ln p(l | z) over labelled voxels.
    pub label_term: T,
    pub degenerate_voxels: usize,
}

/// Likelihood-side bound terms at fixed responsibilities, with the
/// missing-channel posteriors synced to the given bundle. Returns
/// `(E_q[ln p(x | z, theta)] including bias volume terms, entropy of the
/// missing-channel factors)`.
pub fn likelihood_bound_terms<T: Real>(
    prep: &PreparedSubject<T>,
    gamma: &Responsibilities<T>,
    bundle: &GaussWishartBundle<T>,
) -> Result<(T, T)> {
    let n = prep.n;
    let d = prep.d;
    let k = bundle.k();
    if gamma.len() != n || gamma.classes() != k || bundle.dim() != d {
        return Err(Error::invalid("likelihood_bound_terms: shape mismatch"));
    }
    let half: T = cst(0.5);
    let ln_2pi = T::two_pi().ln();
    let d_t = cst::<T>(d as f64);
    let eld: Vec<T> = bundle
        .classes
        .iter()
        .map(|gw| gw.expected_log_det_precision())
        .collect();
    let mut patterns: Vec<PatternInfo<T>> = Vec::new();
    let mut pattern_index = std::collections::HashMap::new();
    let mut ell = T::zero();
    let mut ent_missing = T::zero();
    let mut xbar = DVector::<T>::zeros(d);
    for j in 0..n {
        if prep.fully_missing(j) {
            continue;
        }
        let pat = prep.pattern[j];
        let mut pat_idx = usize::MAX;
        if pat != 0 {
            pat_idx = *pattern_index.entry(pat).or_insert_with(|| {
                patterns
                    .push(PatternInfo::build(pat, d, bundle).expect("validated bundle"));
                patterns.len() - 1
            });
        }
        let xrow = prep.row(j);
        let grow = gamma.row(j);
        for (c, gw) in bundle.classes.iter().enumerate() {
            let g = grow[c];
            if g <= T::zero() {
                continue;
            }
            for a in 0..d {
                xbar[a] = xrow[a];
            }
            let mut nh = 0usize;
            if pat_idx != usize::MAX {
                let info = &patterns[pat_idx];
                nh = info.missing_dims.len();
                let mean = info.mean_for(xrow, c, gw);
                for (a, &da) in info.missing_dims.iter().enumerate() {
                    xbar[da] = mean[a];
                }
            }
            let quad = gw.expected_quad(&xbar);
            let llk =
                half * eld[c] - d_t * half * ln_2pi - half * (quad + cst::<T>(nh as f64));
            ell += g * llk;
            if nh > 0 {
                let info = &patterns[pat_idx];
                ent_missing += g
                    * (cst::<T>(nh as f64) * half * (ln_2pi + T::one())
                        - half * info.log_det_p[c]);
            }
        }
        ell += prep.log_bias_sum[j];
    }
    Ok((ell, ent_missing))
}

/// One variational E-step for a subject.
///
/// Missing channels are integrated out: only observed sub-blocks contribute
/// to the class log-weights, through the conditional posterior mean and the
/// matching entropy correction. Fully-missing voxels fall back to the
/// (label-modulated) prior row and contribute no intensity terms.
pub fn e_step<T: Real>(
    prep: &PreparedSubject<T>,
    prior: &PriorField<T>,
    bundle: &GaussWishartBundle<T>,
    labels: Option<(&LabelData<T>, &LabelModel<T>)>,
) -> Result<EStepOutput<T>> {
    let n = prep.n;
    let d = prep.d;
    let k = bundle.k();
    if prior.len() != n || prior.classes() != k || bundle.dim() != d {
        return Err(Error::invalid("e_step: inconsistent shapes"));
    }
    if let Some((ld, lm)) = labels {
        if ld.labels.len() != n {
            return Err(Error::invalid("label volume size mismatch"));
        }
        if ld.labels.iter().any(|&l| l as usize > lm.num_labels()) {
            return Err(Error::invalid("label id outside the label model"));
        }
    }

    let half: T = cst(0.5);
    let ln_2pi = T::two_pi().ln();
    let d_t = cst::<T>(d as f64);
    let eld: Vec<T> = bundle
        .classes
        .iter()
        .map(|gw| gw.expected_log_det_precision())
        .collect();

    // pattern table for partially-missing voxels, built lazily in first-seen
    // order (deterministic: voxel order is fixed)
    let mut patterns: Vec<PatternInfo<T>> = Vec::new();
    let mut pattern_index = std::collections::HashMap::new();
    let mut missing = MissingPosterior::none(n);

    let mut gamma = vec![T::zero(); n * k];
    let mut ell = T::zero();
    let mut ent_missing = T::zero();
    let mut label_term = T::zero();
    let mut degenerate = 0usize;

    let mut log_w = vec![T::zero(); k];
    let mut llk = vec![T::zero(); k];
    let mut ent = vec![T::zero(); k];
    let mut allowed = vec![true; k];
    let mut xbar = DVector::<T>::zeros(d);

    for j in 0..n {
        let prior_row = prior.row(j);
        let label = labels.and_then(|(ld, lm)| {
            let l = ld.labels[j];
            (l > 0).then_some((l, lm))
        });

        for c in 0..k {
            allowed[c] = true;
            llk[c] = T::zero();
            ent[c] = T::zero();
            log_w[c] = prior_row[c].max(super::epsilon_pi()).ln();
            if let Some((l, lm)) = label {
                match lm.log_factor(l, c) {
                    Some(lp) => log_w[c] += lp,
                    None => allowed[c] = false,
                }
            }
        }

        let fully_missing = prep.fully_missing(j);
        let pat = prep.pattern[j];
        let mut pat_idx = usize::MAX;
        if !fully_missing {
            if pat != 0 {
                pat_idx = *pattern_index.entry(pat).or_insert_with(|| {
                    patterns.push(
                        PatternInfo::build(pat, d, bundle).expect("validated bundle sub-blocks"),
                    );
                    patterns.len() - 1
                });
            }
            let xrow = prep.row(j);
            // conditional means over missing dims, all classes, stored k-major
            if pat_idx != usize::MAX {
                let info = &patterns[pat_idx];
                let nh = info.missing_dims.len();
                let mut voxel_means = Vec::with_capacity(k * nh);
                for (c, gw) in bundle.classes.iter().enumerate() {
                    let mean = info.mean_for(xrow, c, gw);
                    voxel_means.extend(mean.iter().copied());
                }
                missing.voxel_mean[j] = missing.means.len();
                missing.means.push(voxel_means);
            }
            for (c, gw) in bundle.classes.iter().enumerate() {
                for a in 0..d {
                    xbar[a] = xrow[a];
                }
                let mut nh = 0usize;
                if pat_idx != usize::MAX {
                    let info = &patterns[pat_idx];
                    nh = info.missing_dims.len();
                    let stored = &missing.means[missing.voxel_mean[j]];
                    for (a, &da) in info.missing_dims.iter().enumerate() {
                        xbar[da] = stored[c * nh + a];
                    }
                }
                let quad = gw.expected_quad(&xbar);
                llk[c] =
                    half * eld[c] - d_t * half * ln_2pi - half * (quad + cst::<T>(nh as f64));
                if nh > 0 {
                    let info = &patterns[pat_idx];
                    ent[c] = cst::<T>(nh as f64) * half * (ln_2pi + T::one())
                        - half * info.log_det_p[c];
                }
                if allowed[c] {
                    log_w[c] += llk[c] + ent[c];
                }
            }
        }
        missing.voxel_pattern[j] = pat_idx;

        // normalize in log space over allowed classes
        let mut max_lw: Option<T> = None;
        for c in 0..k {
            if allowed[c] {
                max_lw = Some(match max_lw {
                    Some(m) => m.max(log_w[c]),
                    None => log_w[c],
                });
            }
        }
        let row = &mut gamma[j * k..(j + 1) * k];
        match max_lw {
            None => {
                degenerate += 1;
                let u = T::one() / cst::<T>(k as f64);
                row.iter_mut().for_each(|g| *g = u);
            }
            Some(m) => {
                let mut sum = T::zero();
                for c in 0..k {
                    if allowed[c] {
                        row[c] = (log_w[c] - m).exp();
                        sum += row[c];
                    } else {
                        row[c] = T::zero();
                    }
                }
                if sum <= T::zero() || !sum.is_finite() {
                    degenerate += 1;
                    let u = T::one() / cst::<T>(k as f64);
                    row.iter_mut().for_each(|g| *g = u);
                } else {
                    row.iter_mut().for_each(|g| *g /= sum);
                }
            }
        }

        // accumulate bound pieces under the final gamma
        if !fully_missing {
            for c in 0..k {
                let g = row[c];
                if g > T::zero() {
                    ell += g * llk[c];
                    ent_missing += g * ent[c];
                }
            }
            ell += prep.log_bias_sum[j];
        }
        if let Some((l, lm)) = label {
            for (c, &g) in row.iter().enumerate() {
                if g > T::zero() {
                    if let Some(lp) = lm.log_factor(l, c) {
                        label_term += g * lp;
                    }
                }
            }
        }
    }

    missing.patterns = patterns;
    let gamma = Responsibilities::new(gamma, k)?;
    let entropy_z = gamma.entropy();
    Ok(EStepOutput {
        gamma,
        missing,
        expected_log_likelihood: ell,
        entropy_z,
        entropy_missing: ent_missing,
        label_term,
        degenerate_voxels: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VolumeGrid;
    use crate::mixture::GaussWishart;
    use nalgebra::DMatrix;

    fn bundle_identical(k: usize, d: usize) -> GaussWishartBundle<f64> {
        let classes = (0..k)
            .map(|_| {
                GaussWishart::new(
                    DVector::from_element(d, 0.0),
                    1.0,
                    DMatrix::identity(d, d),
                    d as f64 + 2.0,
                )
                .unwrap()
            })
            .collect();
        GaussWishartBundle::new(classes).unwrap()
    }

    fn prep_from(values: Vec<f64>, dims: [usize; 3]) -> PreparedSubject<f64> {
        let vol = VolumeGrid::from_scalar(dims, values).unwrap();
        PreparedSubject::new(&vol, None).unwrap()
    }

    #[test]
    fn identical_gaussians_uniform_prior_give_uniform_gamma() {
        let prep = prep_from(vec![0.1, -0.4, 2.0, 0.7], [4, 1, 1]);
        let prior = PriorField::uniform(4, 3);
        let bundle = bundle_identical(3, 1);
        let out = e_step(&prep, &prior, &bundle, None).unwrap();
        for j in 0..4 {
            for &g in out.gamma.row(j) {
                assert!((g - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_label_forces_one_hot() {
        let prep = prep_from(vec![5.0], [1, 1, 1]);
        let prior = PriorField::uniform(1, 3);
        let bundle = bundle_identical(3, 1);
        let model = LabelModel::identity(1.0, 3).unwrap();
        let data = LabelData::new(vec![2], 1.0, 3).unwrap();
        let out = e_step(&prep, &prior, &bundle, Some((&data, &model))).unwrap();
        let row = out.gamma.row(0);
        assert!((row[1] - 1.0).abs() < 1e-12);
        assert_eq!(row[0], 0.0);
        assert_eq!(row[2], 0.0);
        assert!(out.entropy_z.abs() < 1e-12, "one-hot rows have zero entropy");
    }

    #[test]
    fn boundary_zeta_reproduces_unlabeled_posterior() {
        let values = vec![0.3, -1.2, 0.9, 2.2, -0.1, 0.5];
        let prep = prep_from(values, [6, 1, 1]);
        let mut bundle = bundle_identical(3, 1);
        bundle.classes[0].m[0] = -1.0;
        bundle.classes[1].m[0] = 0.5;
        bundle.classes[2].m[0] = 2.0;
        let prior = PriorField::uniform(6, 3);
        let unlabeled = e_step(&prep, &prior, &bundle, None).unwrap();
        let model = LabelModel::identity(1.0 / 3.0, 3).unwrap();
        let data = LabelData::new(vec![1, 2, 3, 1, 2, 3], 1.0 / 3.0, 3).unwrap();
        let labeled = e_step(&prep, &prior, &bundle, Some((&data, &model))).unwrap();
        for j in 0..6 {
            for c in 0..3 {
                let diff = (labeled.gamma.row(j)[c] - unlabeled.gamma.row(j)[c]).abs();
                assert!(diff <= 1e-12, "voxel {j} class {c}: diff {diff}");
            }
        }
    }

    #[test]
    fn warped_prior_hand_example() {
        // K=2, pi=(0.3,0.7), w=(2,1) -> (0.6/1.3, 0.7/1.3)
        let prior = warped_prior::<f64>(&[0.3, 0.7], 2, &[2.0, 1.0]).unwrap();
        let row = prior.row(0);
        assert!((row[0] - 0.6 / 1.3).abs() < 1e-12);
        assert!((row[1] - 0.7 / 1.3).abs() < 1e-12);
    }

    #[test]
    fn warped_prior_scale_invariance() {
        let pi: [f64; 6] = [0.2, 0.5, 0.3, 0.1, 0.6, 0.3];
        let a = warped_prior(&pi, 3, &[1.0, 1.0, 1.0]).unwrap();
        let b = warped_prior(&pi, 3, &[7.5, 7.5, 7.5]).unwrap();
        for j in 0..2 {
            for c in 0..3 {
                assert!((a.row(j)[c] - b.row(j)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_atlas_unit_weights_stay_uniform() {
        let prior = warped_prior::<f64>(&[0.25; 8], 4, &[1.0; 4]).unwrap();
        for c in 0..4 {
            assert!((prior.row(1)[c] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_missing_voxel_returns_prior_row() {
        let vol = VolumeGrid::new(
            [2, 1, 1],
            [1.0; 3],
            1,
            vec![9.0, 0.0],
            Some(vec![false, true]),
        )
        .unwrap();
        let prep = PreparedSubject::new(&vol, None).unwrap();
        let prior = warped_prior(&[0.8, 0.2, 0.3, 0.7], 2, &[1.0, 1.0]).unwrap();
        let mut bundle = bundle_identical(2, 1);
        bundle.classes[0].m[0] = 9.0; // likelihood favours class 0 strongly
        let out = e_step(&prep, &prior, &bundle, None).unwrap();
        // voxel 1 is fully missing: gamma equals its prior row
        assert!((out.gamma.row(1)[0] - 0.3).abs() < 1e-12);
        assert!((out.gamma.row(1)[1] - 0.7).abs() < 1e-12);
        // voxel 0 is observed at the class-0 mean: gamma should lean to 0
        assert!(out.gamma.row(0)[0] > 0.9);
    }
}
