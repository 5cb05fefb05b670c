//! Groupwise coordinate ascent: the outer loop over subjects and the
//! template, with the bound ledger kept exact.
//!
//! Per subject and sweep, the update order is E-step, M-step, tissue
//! weights, bias, affine, velocity; the template (and optional smoothing)
//! and the intensity hyperpriors follow once per sweep. Closed-form steps
//! are exact coordinate ascent; every gradient-based or approximate step
//! is acceptance-gated on the bound, so the ledger invariant holds by
//! construction.

use super::bound::{compute_lower_bound, subject_bound_slice, BoundBreakdown};
use super::config::ModelConfig;
use super::ledger::{BoundLedger, LedgerRow};
use super::state::{SubjectData, SubjectState};
use crate::affine::{gauss_newton_affine_update, warp_coordinates, AffineContext};
use crate::bias::{gauss_newton_bias_update, BiasBasis};
use crate::diffeo::{gauss_newton_velocity_update, VelocityContext};
use crate::error::{Error, Result};
use crate::geometry::{sample_vector, GridShape, VectorField};
use crate::mixture::{
    e_step, fit_intensity_hyperpriors, m_step, sufficient_stats, update_tissue_weights,
    warped_prior, GaussWishart, GaussWishartBundle, LabelModel,
};
use crate::scalar::{cst, Real};
use crate::template::{
    push_responsibilities, smooth_template, update_template_weighted, SubjectPush, TissueAtlas,
};
use nalgebra::{DMatrix, DVector, Vector3};
use std::time::Instant;

/// Everything a finished fit hands back.
pub struct FitResult<T> {
    pub atlas: TissueAtlas<T>,
    pub hyperprior: GaussWishartBundle<T>,
    pub states: Vec<SubjectState<T>>,
    pub ledger: BoundLedger,
    pub bound: BoundBreakdown<T>,
    pub sweeps_run: usize,
}

pub(super) struct LocalRow {
    pub(super) family: &'static str,
    pub(super) before: f64,
    pub(super) after: f64,
    pub(super) accepted: bool,
    pub(super) flags: String,
    pub(super) ms: u128,
}

/// Template-space grid: elementwise max dims, per-axis median spacing.
pub fn template_grid<T: Real>(data: &[SubjectData<T>]) -> GridShape<T> {
    let mut dims = [1usize; 3];
    let mut spacings: [Vec<T>; 3] = Default::default();
    for d in data {
        for a in 0..3 {
            dims[a] = dims[a].max(d.volume.dims()[a]);
            spacings[a].push(d.volume.spacing()[a]);
        }
    }
    let spacing = std::array::from_fn(|a| {
        let mut v = spacings[a].clone();
        v.sort_by(|x, y| x.partial_cmp(y).expect("finite spacing"));
        v[v.len() / 2]
    });
    GridShape::new(dims, spacing)
}

/// Data-driven initial hyperpriors: class means at pooled intensity
/// quantiles, weak mean coupling, precision matched to the quantile gap.
pub fn initial_hyperprior<T: Real>(
    data: &[SubjectData<T>],
    k: usize,
) -> Result<GaussWishartBundle<T>> {
    let channels = data[0].volume.channels();
    if data.iter().any(|d| d.volume.channels() != channels) {
        return Err(Error::invalid("subjects disagree on channel count"));
    }
    let mut pooled: Vec<Vec<T>> = vec![Vec::new(); channels];
    for d in data {
        for c in 0..channels {
            for j in 0..d.volume.len() {
                if !d.volume.is_missing(j, c) {
                    pooled[c].push(d.volume.value(j, c));
                }
            }
        }
    }
    for p in pooled.iter_mut() {
        if p.is_empty() {
            return Err(Error::invalid("a channel has no observed voxels"));
        }
        p.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    }
    let quantile = |c: usize, q: f64| -> T {
        let p = &pooled[c];
        let idx = ((p.len() - 1) as f64 * q).round() as usize;
        p[idx]
    };
    let mut classes = Vec::with_capacity(k);
    for class in 0..k {
        let q = (class as f64 + 0.5) / k as f64;
        let mut m = DVector::zeros(channels);
        let mut w = DMatrix::zeros(channels, channels);
        let nu = cst::<T>(channels as f64 + 2.0);
        for c in 0..channels {
            m[c] = quantile(c, q);
            let spread = (quantile(c, 0.95) - quantile(c, 0.05)).max(cst(1e-6));
            let sigma = spread / cst::<T>(k as f64) * cst::<T>(0.5);
            w[(c, c)] = T::one() / (nu * sigma * sigma);
        }
        classes.push(GaussWishart::new(m, cst(0.01), w, nu)?);
    }
    GaussWishartBundle::new(classes)
}

/// Template-voxel coordinates of the full warp for every subject voxel.
fn subject_coords<T: Real>(
    data: &SubjectData<T>,
    state: &SubjectState<T>,
    atlas: &TissueAtlas<T>,
) -> Result<Vec<Vector3<T>>> {
    let mat = state.affine.matrix()?;
    Ok(warp_coordinates(
        &state.deformation.forward,
        data.volume.spacing(),
        &mat,
        &state.affine.t,
        atlas.shape().spacing,
    ))
}

/// Inverse warp sampled on the template grid (subject voxel coordinates).
fn inverse_warp_on_template<T: Real>(
    data: &SubjectData<T>,
    state: &SubjectState<T>,
    atlas: &TissueAtlas<T>,
) -> Result<VectorField<T>> {
    let tshape = atlas.shape();
    let mat = state.affine.matrix()?;
    let inv = mat
        .try_inverse()
        .ok_or_else(|| Error::invalid("affine matrix not invertible"))?;
    let hs = data.volume.spacing();
    let ht = tshape.spacing;
    let mut out = VectorField::zeros(tshape);
    for (j, [x, y, z]) in tshape.iter_voxels() {
        let mm = Vector3::new(
            cst::<T>(x as f64) * ht[0],
            cst::<T>(y as f64) * ht[1],
            cst::<T>(z as f64) * ht[2],
        );
        let s_mm = inv * (mm - state.affine.t);
        let s_vox = Vector3::new(s_mm.x / hs[0], s_mm.y / hs[1], s_mm.z / hs[2]);
        out.set(j, sample_vector(&state.deformation.inverse, s_vox));
    }
    Ok(out)
}

/// One sweep of all per-subject families; returns the local ledger rows
/// (bound slices, to be rebased into global values by the caller).
#[allow(clippy::too_many_arguments)]
pub(super) fn subject_sweep_once<T: Real>(
    data: &SubjectData<T>,
    state: &mut SubjectState<T>,
    atlas: &TissueAtlas<T>,
    hyperprior: &GaussWishartBundle<T>,
    config: &ModelConfig<T>,
    basis: &BiasBasis<T>,
    label_model: Option<&LabelModel<T>>,
) -> Result<Vec<LocalRow>> {
    let mut rows = Vec::new();
    let slice = |state: &SubjectState<T>| -> Result<f64> {
        Ok(
            subject_bound_slice(data, state, atlas, hyperprior, config, basis)?
                .total
                .to_f64()
                .unwrap_or(f64::NAN),
        )
    };
    let mut before = slice(state)?;

    // E-step
    let t0 = Instant::now();
    {
        let prep = state.prepare(data, basis)?;
        let coords = subject_coords(data, state, atlas)?;
        let pi_rows = atlas.sample_rows(&coords);
        let prior_field = warped_prior(&pi_rows, config.k, &state.weights.w)?;
        let labels = match (&data.labels, label_model) {
            (Some(ld), Some(lm)) => Some((ld, lm)),
            _ => None,
        };
        let out = e_step(&prep, &prior_field, &state.posterior, labels)?;
        state.gamma = out.gamma;
        state.missing = out.missing;
        state.degenerate_voxels = out.degenerate_voxels;
        let after = slice(state)?;
        rows.push(LocalRow {
            family: "estep",
            before,
            after,
            accepted: true,
            flags: if out.degenerate_voxels > 0 {
                format!("degenerate={}", out.degenerate_voxels)
            } else {
                String::new()
            },
            ms: t0.elapsed().as_millis(),
        });
        before = after;
    }

    // M-step
    let t0 = Instant::now();
    {
        let prep = state.prepare(data, basis)?;
        let stats = sufficient_stats(&prep, &state.gamma, &state.missing)?;
        let (posterior, jitters) = m_step(&stats, hyperprior)?;
        state.posterior = posterior;
        // keep the stored missing-channel factors optimal for the new
        // posteriors; later families gate against these exact factors
        state.missing.resync(&prep, &state.posterior)?;
        let after = slice(state)?;
        rows.push(LocalRow {
            family: "mstep",
            before,
            after,
            accepted: true,
            flags: if jitters > 0 {
                format!("jitters={jitters}")
            } else {
                String::new()
            },
            ms: t0.elapsed().as_millis(),
        });
        before = after;
    }

    // tissue weights
    if config.update_weights {
        let t0 = Instant::now();
        let coords = subject_coords(data, state, atlas)?;
        let pi_rows = atlas.sample_rows(&coords);
        state.weights = update_tissue_weights(&state.gamma, &pi_rows, &state.weights)?;
        let after = slice(state)?;
        rows.push(LocalRow {
            family: "weights",
            before,
            after,
            accepted: true,
            flags: String::new(),
            ms: t0.elapsed().as_millis(),
        });
        before = after;
    }

    // bias, one Gauss-Newton step per channel
    if config.update_bias {
        let t0 = Instant::now();
        let mut accepted_any = false;
        let mut halvings = 0usize;
        for channel in 0..data.volume.channels() {
            let prep = state.prepare(data, basis)?;
            let out = gauss_newton_bias_update(
                &prep,
                &state.missing,
                &state.gamma,
                &state.posterior,
                &mut state.bias,
                basis,
                channel,
                state.lev_bias,
            )?;
            state.lev_bias = out.next_levenberg;
            accepted_any |= out.accepted;
            halvings += out.halvings;
        }
        let after = slice(state)?;
        rows.push(LocalRow {
            family: "bias",
            before,
            after,
            accepted: accepted_any,
            flags: if halvings > 0 {
                format!("halvings={halvings}")
            } else {
                String::new()
            },
            ms: t0.elapsed().as_millis(),
        });
        before = after;
    }

    // affine
    if config.update_affine {
        let t0 = Instant::now();
        let ctx = AffineContext {
            gamma: &state.gamma,
            weights: &state.weights.w,
            atlas,
            phi: &state.deformation.forward,
            subject_spacing: data.volume.spacing(),
        };
        let mut params = state.affine.clone();
        let out = gauss_newton_affine_update(&ctx, &mut params, state.lev_affine)?;
        state.affine = params;
        state.lev_affine = out.next_levenberg;
        let after = slice(state)?;
        rows.push(LocalRow {
            family: "affine",
            before,
            after,
            accepted: out.accepted,
            flags: if out.halvings > 0 {
                format!("halvings={}", out.halvings)
            } else {
                String::new()
            },
            ms: t0.elapsed().as_millis(),
        });
        before = after;
    }

    // velocity
    if config.update_velocity {
        let t0 = Instant::now();
        let ctx = VelocityContext {
            gamma: &state.gamma,
            weights: &state.weights.w,
            atlas,
            affine: &state.affine,
            subject_spacing: data.volume.spacing(),
            steps: config.shoot_steps,
        };
        let mut velocity = state.velocity.clone();
        let mut deformation = state.deformation.clone();
        let out = gauss_newton_velocity_update(
            &ctx,
            &mut velocity,
            &mut deformation,
            state.lev_velocity,
            &config.solver,
        )?;
        state.velocity = velocity;
        state.deformation = deformation;
        state.lev_velocity = out.next_levenberg;
        let after = slice(state)?;
        let mut flags = Vec::new();
        if out.halvings > 0 {
            flags.push(format!("halvings={}", out.halvings));
        }
        if out.foldovers > 0 {
            flags.push(format!("foldovers={}", out.foldovers));
        }
        if out.solver_stagnated {
            flags.push("mg_stagnated".into());
        }
        rows.push(LocalRow {
            family: "velocity",
            before,
            after,
            accepted: out.accepted,
            flags: flags.join(";"),
            ms: t0.elapsed().as_millis(),
        });
    }
    Ok(rows)
}

/// Final E-step so the stored responsibilities are consistent with the
/// final parameters (re-segmenting a converged subject is then a fixed
/// point).
pub(super) fn sync_estep_once<T: Real>(
    data: &SubjectData<T>,
    state: &mut SubjectState<T>,
    atlas: &TissueAtlas<T>,
    config: &ModelConfig<T>,
    basis: &BiasBasis<T>,
    label_model: Option<&LabelModel<T>>,
) -> Result<()> {
    let prep = state.prepare(data, basis)?;
    let coords = subject_coords(data, state, atlas)?;
    let pi_rows = atlas.sample_rows(&coords);
    let prior_field = warped_prior(&pi_rows, config.k, &state.weights.w)?;
    let labels = match (&data.labels, label_model) {
        (Some(ld), Some(lm)) => Some((ld, lm)),
        _ => None,
    };
    let out = e_step(&prep, &prior_field, &state.posterior, labels)?;
    state.gamma = out.gamma;
    state.missing = out.missing;
    state.degenerate_voxels = out.degenerate_voxels;
    Ok(())
}

/// Run the groupwise fit.
pub fn fit_groupwise<T: Real>(
    data: &[SubjectData<T>],
    config: &ModelConfig<T>,
) -> Result<FitResult<T>> {
    if data.is_empty() {
        return Err(Error::invalid("need at least one subject"));
    }
    config.validate()?;
    for d in data {
        if let Some(l) = &d.labels {
            if l.labels.len() != d.volume.len() {
                return Err(Error::invalid(format!(
                    "{}: label volume does not match data",
                    d.name
                )));
            }
        }
    }
    let tshape = template_grid(data);
    let mut atlas = TissueAtlas::uniform(tshape, config.k, vec![config.alpha0; config.k])?;
    let mut hyperprior = initial_hyperprior(data, config.k)?;
    let label_model = if data.iter().any(|d| d.labels.is_some()) {
        Some(LabelModel::new(&config.label_map, config.zeta, config.k)?)
    } else {
        None
    };

    // per-subject bias bases (grids may differ)
    let bases: Vec<BiasBasis<T>> = data
        .iter()
        .map(|d| {
            let shape = d.volume.shape();
            let orders = config
                .bias_orders
                .unwrap_or_else(|| BiasBasis::default_orders(shape, config.bias_cutoff_mm));
            BiasBasis::new(shape, orders)
        })
        .collect::<Result<_>>()?;
    let mut states: Vec<SubjectState<T>> = data
        .iter()
        .zip(&bases)
        .map(|(d, basis)| SubjectState::init(d, config, &atlas, &hyperprior, basis))
        .collect::<Result<_>>()?;

    let mut ledger = BoundLedger::new(config.timing_in_ledger);
    let bound_of = |states: &[SubjectState<T>],
                    atlas: &TissueAtlas<T>,
                    hyper: &GaussWishartBundle<T>|
     -> Result<BoundBreakdown<T>> {
        compute_lower_bound_multi(data, states, atlas, hyper, config, &bases)
    };

    let mut global = bound_of(&states, &atlas, &hyperprior)?
        .total
        .to_f64()
        .unwrap_or(f64::NAN);
    let mut sweeps_run = 0usize;
    for sweep in 1..=config.max_outer {
        let sweep_start = global;
        // per-subject phase (parallel between barriers when requested)
        let rows_per_subject = run_subject_phase(
            data,
            &mut states,
            &atlas,
            &hyperprior,
            config,
            &bases,
            label_model.as_ref(),
        )?;
        for (i, rows) in rows_per_subject.into_iter().enumerate() {
            for row in rows {
                let after_global = global + (row.after - row.before);
                ledger.record(LedgerRow {
                    iteration: sweep,
                    family: row.family,
                    subject: Some(i),
                    before: global,
                    after: after_global,
                    accepted: row.accepted,
                    flags: row.flags,
                    ms: row.ms,
                });
                global = after_global;
            }
        }

        // template update (gated on the exact bound)
        if config.update_template {
            let t0 = Instant::now();
            let before = bound_of(&states, &atlas, &hyperprior)?
                .total
                .to_f64()
                .unwrap_or(f64::NAN);
            let mut contribs: Vec<SubjectPush<T>> = Vec::with_capacity(data.len());
            for (d, s) in data.iter().zip(&states) {
                let xi_inv = inverse_warp_on_template(d, s, &atlas)?;
                contribs.push(push_responsibilities(
                    &s.gamma,
                    d.volume.shape(),
                    &xi_inv,
                )?);
            }
            let weights: Vec<_> = states.iter().map(|s| s.weights.clone()).collect();
            let mut trial = atlas.clone();
            let outcome = update_template_weighted(&mut trial, &contribs, &weights)?;
            let after = bound_of(&states, &trial, &hyperprior)?
                .total
                .to_f64()
                .unwrap_or(f64::NAN);
            let accepted = after >= before - 1e-8 * before.abs();
            let mut flags = Vec::new();
            if outcome.rejected_rows > 0 {
                flags.push(format!("rows_rejected={}", outcome.rejected_rows));
            }
            if accepted {
                atlas = trial;
                global = after;
            } else {
                flags.push("reverted".into());
            }
            ledger.record(LedgerRow {
                iteration: sweep,
                family: "template",
                subject: None,
                before,
                after: if accepted { after } else { before },
                accepted,
                flags: flags.join(";"),
                ms: t0.elapsed().as_millis(),
            });
        }

        // optional template smoothing, same gate
        if config.smooth_fwhm > T::zero() && config.update_template {
            let t0 = Instant::now();
            let before = global;
            let mut trial = atlas.clone();
            smooth_template(&mut trial, config.smooth_fwhm)?;
            let after = bound_of(&states, &trial, &hyperprior)?
                .total
                .to_f64()
                .unwrap_or(f64::NAN);
            let accepted = after >= before - 1e-8 * before.abs();
            if accepted {
                atlas = trial;
                global = after;
            }
            ledger.record(LedgerRow {
                iteration: sweep,
                family: "smooth",
                subject: None,
                before,
                after: if accepted { after } else { before },
                accepted,
                flags: if accepted { String::new() } else { "reverted".into() },
                ms: t0.elapsed().as_millis(),
            });
        }

        // hyperprior refit (gated: moment matching is not an exact ascent)
        if config.update_hyperprior && data.len() >= 2 {
            let t0 = Instant::now();
            let before = global;
            let bundles: Vec<&GaussWishartBundle<T>> =
                states.iter().map(|s| &s.posterior).collect();
            let trial = fit_intensity_hyperpriors(&bundles)?;
            let after = bound_of(&states, &atlas, &trial)?
                .total
                .to_f64()
                .unwrap_or(f64::NAN);
            let accepted = after >= before - 1e-8 * before.abs();
            if accepted {
                hyperprior = trial;
                global = after;
            }
            ledger.record(LedgerRow {
                iteration: sweep,
                family: "hyperprior",
                subject: None,
                before,
                after: if accepted { after } else { before },
                accepted,
                flags: if accepted { String::new() } else { "reverted".into() },
                ms: t0.elapsed().as_millis(),
            });
        }

        sweeps_run = sweep;
        let gain = (global - sweep_start) / sweep_start.abs().max(1e-12);
        if gain.abs() < config.tol {
            break;
        }
    }

    // final responsibility sync
    for i in 0..data.len() {
        let t0 = Instant::now();
        let before = global;
        let slice_before =
            subject_bound_slice(&data[i], &states[i], &atlas, &hyperprior, config, &bases[i])?
                .total
                .to_f64()
                .unwrap_or(f64::NAN);
        sync_estep_once(
            &data[i],
            &mut states[i],
            &atlas,
            config,
            &bases[i],
            label_model.as_ref(),
        )?;
        let slice_after =
            subject_bound_slice(&data[i], &states[i], &atlas, &hyperprior, config, &bases[i])?
                .total
                .to_f64()
                .unwrap_or(f64::NAN);
        global += slice_after - slice_before;
        ledger.record(LedgerRow {
            iteration: sweeps_run + 1,
            family: "estep",
            subject: Some(i),
            before,
            after: global,
            accepted: true,
            flags: "sync".into(),
            ms: t0.elapsed().as_millis(),
        });
    }

    ledger.validate()?;
    let bound = bound_of(&states, &atlas, &hyperprior)?;
    Ok(FitResult {
        atlas,
        hyperprior,
        states,
        ledger,
        bound,
        sweeps_run,
    })
}

/// Per-subject bases differ, so the bound helper threads them through.
fn compute_lower_bound_multi<T: Real>(
    data: &[SubjectData<T>],
    states: &[SubjectState<T>],
    atlas: &TissueAtlas<T>,
    hyperprior: &GaussWishartBundle<T>,
    config: &ModelConfig<T>,
    bases: &[BiasBasis<T>],
) -> Result<BoundBreakdown<T>> {
    compute_lower_bound(data, states, atlas, hyperprior, config, bases)
}

#[allow(clippy::too_many_arguments)]
fn run_subject_phase<T: Real>(
    data: &[SubjectData<T>],
    states: &mut [SubjectState<T>],
    atlas: &TissueAtlas<T>,
    hyperprior: &GaussWishartBundle<T>,
    config: &ModelConfig<T>,
    bases: &[BiasBasis<T>],
    label_model: Option<&LabelModel<T>>,
) -> Result<Vec<Vec<LocalRow>>> {
    if config.threads <= 1 || data.len() == 1 {
        let mut out = Vec::with_capacity(data.len());
        for (i, state) in states.iter_mut().enumerate() {
            out.push(subject_sweep_once(
                &data[i],
                state,
                atlas,
                hyperprior,
                config,
                &bases[i],
                label_model,
            )?);
        }
        return Ok(out);
    }
    // subjects are independent between barriers; one worker per subject,
    // results collected by index so the ledger order is deterministic
    let results: Vec<Result<Vec<LocalRow>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .iter()
            .zip(states.iter_mut())
            .zip(bases.iter())
            .map(|((d, s), basis)| {
                scope.spawn(move || {
                    subject_sweep_once(d, s, atlas, hyperprior, config, basis, label_model)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    results.into_iter().collect()
}
