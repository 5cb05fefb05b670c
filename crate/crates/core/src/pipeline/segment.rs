//! Segment unseen data against a frozen atlas and hyperpriors.

use super::bound::subject_bound_slice;
use super::config::ModelConfig;
use super::fit::{subject_sweep_once, sync_estep_once};
use super::ledger::{BoundLedger, LedgerRow};
use super::state::{SubjectData, SubjectState};
use crate::bias::BiasBasis;
use crate::error::{Error, Result};
use crate::mixture::{GaussWishartBundle, LabelModel};
use crate::scalar::Real;
use crate::template::TissueAtlas;

pub struct SegmentResult<T> {
    pub state: SubjectState<T>,
    pub ledger: BoundLedger,
    pub sweeps_run: usize,
}

/// Run the per-subject inner loop against a trained model.
///
/// The atlas and intensity hyperpriors stay frozen; everything subject-side
/// (responsibilities, posteriors, weights, bias, affine, velocity) is
/// estimated until the bound gain drops below the tolerance. Passing the
/// converged state of a training subject reproduces it (fixed point).
pub fn segment_unseen<T: Real>(
    data: &SubjectData<T>,
    atlas: &TissueAtlas<T>,
    hyperprior: &GaussWishartBundle<T>,
    config: &ModelConfig<T>,
    init: Option<SubjectState<T>>,
) -> Result<SegmentResult<T>> {
    config.validate()?;
    if data.volume.channels() != hyperprior.dim() {
        return Err(Error::invalid(format!(
            "volume has {} channels but the hyperpriors expect {}; declare absent channels as missing",
            data.volume.channels(),
            hyperprior.dim()
        )));
    }
    if atlas.classes() != config.k {
        return Err(Error::invalid("atlas class count does not match config"));
    }
    let shape = data.volume.shape();
    let orders = config
        .bias_orders
        .unwrap_or_else(|| BiasBasis::default_orders(shape, config.bias_cutoff_mm));
    let basis = BiasBasis::new(shape, orders)?;
    let label_model = if data.labels.is_some() {
        Some(LabelModel::new(&config.label_map, config.zeta, config.k)?)
    } else {
        None
    };
    let mut state = match init {
        Some(s) => s,
        None => SubjectState::init(data, config, atlas, hyperprior, &basis)?,
    };

    let mut ledger = BoundLedger::new(config.timing_in_ledger);
    let mut global = subject_bound_slice(data, &state, atlas, hyperprior, config, &basis)?
        .total
        .to_f64()
        .unwrap_or(f64::NAN);
    let mut sweeps_run = 0usize;
    for sweep in 1..=config.max_outer {
        let start = global;
        let rows = subject_sweep_once(
            data,
            &mut state,
            atlas,
            hyperprior,
            config,
            &basis,
            label_model.as_ref(),
        )?;
        for row in rows {
            let after = global + (row.after - row.before);
            ledger.record(LedgerRow {
                iteration: sweep,
                family: row.family,
                subject: Some(0),
                before: global,
                after,
                accepted: row.accepted,
                flags: row.flags,
                ms: row.ms,
            });
            global = after;
        }
        sweeps_run = sweep;
        let gain = (global - start) / start.abs().max(1e-12);
        if gain.abs() < config.tol {
            break;
        }
    }
    sync_estep_once(data, &mut state, atlas, config, &basis, label_model.as_ref())?;
    ledger.validate()?;
    Ok(SegmentResult {
        state,
        ledger,
        sweeps_run,
    })
}
