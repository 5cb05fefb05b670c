//! End-to-end behaviour of the groupwise fit and segmentation.

use atlasforge_core::geometry::{GridShape, VolumeGrid};
use atlasforge_core::mixture::{
    e_step, likelihood_bound_terms, m_step, sufficient_stats, PreparedSubject, PriorField,
};
use atlasforge_core::pipeline::{
    fit_groupwise, initial_hyperprior, segment_unseen, synthesize_dataset, ModelConfig,
    SubjectData, SynthConfig,
};

fn tiny_synth(seed: u64) -> atlasforge_core::pipeline::SynthDataset<f64> {
    let mut cfg = SynthConfig::new([12, 12, 12], 2, 3);
    cfg.noise_percent = 3.0;
    cfg.warp_max = 0.5;
    synthesize_dataset(&cfg, seed).unwrap()
}

fn fast_config(k: usize) -> ModelConfig<f64> {
    let mut config = ModelConfig::<f64>::new(k).unwrap();
    config.max_outer = 4;
    config.shoot_steps = 4;
    config.bias_orders = Some([2, 2, 2]);
    config.solver.rtol = 1e-5;
    config.solver.max_passes = 5;
    config
}

#[test]
fn fit_runs_and_bound_is_monotone() {
    let ds = tiny_synth(41);
    let config = fast_config(3);
    let fit = fit_groupwise(&ds.data, &config).unwrap();
    fit.ledger.validate().unwrap();
    // every accepted row is non-decreasing within slack
    let mut worst: f64 = 0.0;
    for row in &fit.ledger.rows {
        if row.accepted {
            worst = worst.max(row.before - row.after);
        }
    }
    let scale = fit.bound.total.abs().max(1.0);
    assert!(
        worst <= 1e-8 * scale,
        "worst accepted decrease {worst} (bound scale {scale})"
    );
    // and the final bound beats the initial one
    let first = fit.ledger.rows.first().unwrap().before;
    let last = fit.ledger.rows.last().unwrap().after;
    assert!(last > first, "no net improvement: {first} -> {last}");
}

#[test]
fn fit_is_deterministic() {
    let ds = tiny_synth(7);
    let mut config = fast_config(3);
    config.max_outer = 2;
    config.timing_in_ledger = false;
    let a = fit_groupwise(&ds.data, &config).unwrap();
    let b = fit_groupwise(&ds.data, &config).unwrap();
    assert_eq!(a.ledger.to_csv(), b.ledger.to_csv());
    for j in 0..a.atlas.len() {
        for c in 0..3 {
            assert_eq!(a.atlas.value(j, c), b.atlas.value(j, c));
        }
    }
}

#[test]
fn single_subject_vbem_reduction_matches_standalone_mixture() {
    // M=1, atlas fixed to uniform, registration and bias disabled: the fit
    // must reproduce the plain VBEM trajectory of the mixture module
    let n = 6 * 6 * 6;
    let values: Vec<f64> = (0..n)
        .map(|j| {
            let t = j as f64 / n as f64;
            if t < 0.5 {
                1.0 + 0.05 * (j as f64 * 0.7).sin()
            } else {
                2.0 + 0.05 * (j as f64 * 1.3).cos()
            }
        })
        .collect();
    let vol = VolumeGrid::from_scalar([6, 6, 6], values).unwrap();
    let data = vec![SubjectData {
        volume: vol.clone(),
        labels: None,
        name: "s0".into(),
    }];
    let mut config = ModelConfig::<f64>::new(2).unwrap();
    config.update_bias = false;
    config.update_affine = false;
    config.update_velocity = false;
    config.update_weights = false;
    config.update_template = false;
    config.update_hyperprior = false;
    config.centroid_init = false;
    config.max_outer = 10;
    config.tol = 0.0; // run all sweeps
    let fit = fit_groupwise(&data, &config).unwrap();

    // standalone VBEM with the same initialization
    let prior = initial_hyperprior(&data, 2).unwrap();
    let prep = PreparedSubject::new(&vol, None).unwrap();
    let uniform = PriorField::uniform(n, 2);
    let mut posterior = prior.clone();
    let mut trajectory = Vec::new();
    for _ in 0..10 {
        let out = e_step(&prep, &uniform, &posterior, None).unwrap();
        let stats = sufficient_stats(&prep, &out.gamma, &out.missing).unwrap();
        let (post, _) = m_step(&stats, &prior).unwrap();
        posterior = post;
        let (ell, ent_miss) =
            likelihood_bound_terms(&prep, &out.gamma, &posterior).unwrap();
        let (gw_p, gw_q) = posterior.prior_cross_entropy_terms(&prior);
        // prior-Z term for the uniform atlas
        let prior_z = (n as f64) * (0.5f64).ln();
        let bound = ell + ent_miss + out.gamma.entropy() + gw_p + gw_q + prior_z;
        trajectory.push(bound);
    }

    // compare the mixture-family rows of the ledger (after the m-step)
    let fit_bounds: Vec<f64> = fit
        .ledger
        .rows
        .iter()
        .filter(|r| r.family == "mstep")
        .map(|r| r.after - fit.bound.dirichlet_prior)
        .collect();
    assert!(fit_bounds.len() >= 10);
    for (i, (got, expect)) in fit_bounds.iter().zip(&trajectory).enumerate() {
        assert!(
            (got - expect).abs() <= 1e-10 * expect.abs().max(1.0),
            "sweep {i}: {got} vs {expect}"
        );
    }
}

#[test]
fn segment_converged_training_subject_is_fixed_point() {
    // a genuinely converged fit is the premise of the fixed-point claim
    let mut cfg = SynthConfig::new([10, 10, 10], 2, 2);
    cfg.noise_percent = 2.0;
    cfg.warp_max = 0.4;
    let ds: atlasforge_core::pipeline::SynthDataset<f64> =
        synthesize_dataset(&cfg, 3).unwrap();
    let mut config = fast_config(2);
    config.shoot_steps = 2;
    config.max_outer = 40;
    config.tol = 1e-7;
    let fit = fit_groupwise(&ds.data, &config).unwrap();
    assert!(
        fit.sweeps_run < 40,
        "fit did not converge within the sweep budget"
    );
    let before = fit.states[0].gamma.clone();
    let seg = segment_unseen(
        &ds.data[0],
        &fit.atlas,
        &fit.hyperprior,
        &config,
        Some(fit.states[0].clone()),
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..before.len() {
        for c in 0..2 {
            worst = worst.max((seg.state.gamma.row(j)[c] - before.row(j)[c]).abs());
        }
    }
    assert!(worst <= 1e-6, "gamma drift {worst}");
}

#[test]
fn segment_uniform_volume_returns_warped_prior() {
    // uniform intensities with equal hyperpriors: the likelihood is
    // uninformative and gamma equals the warped prior field
    let ds = tiny_synth(13);
    let mut config = fast_config(3);
    config.max_outer = 3;
    let fit = fit_groupwise(&ds.data, &config).unwrap();

    let n = 12 * 12 * 12;
    let flat = VolumeGrid::new([12, 12, 12], [1.0; 3], 1, vec![1.5; n], None).unwrap();
    let data = SubjectData {
        volume: flat,
        labels: None,
        name: "flat".into(),
    };
    // equal hyperpriors across classes, strong enough that the posteriors
    // stay pinned (otherwise the expected log-precision rewards whichever
    // class holds more prior mass and the likelihood stops being neutral)
    let mut hyper = fit.hyperprior.clone();
    let strength = 1e9;
    let shared = atlasforge_core::mixture::GaussWishart::new(
        nalgebra::DVector::from_element(1, 1.5),
        strength,
        nalgebra::DMatrix::from_element(1, 1, 4.0 / strength),
        strength,
    )
    .unwrap();
    for c in hyper.classes.iter_mut() {
        *c = shared.clone();
    }
    let mut cfg = config.clone();
    cfg.update_bias = false;
    cfg.update_affine = false;
    cfg.update_velocity = false;
    cfg.update_weights = false;
    cfg.centroid_init = false;
    cfg.max_outer = 2;
    let seg = segment_unseen(&data, &fit.atlas, &hyper, &cfg, None).unwrap();
    // gamma rows must match the atlas rows sampled at the identity warp
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for c in 0..3 {
            worst = worst.max((seg.state.gamma.row(j)[c] - fit.atlas.value(j, c)).abs());
        }
    }
    assert!(worst < 1e-6, "gamma deviates from prior by {worst}");
}

#[test]
fn subject_order_does_not_change_converged_bound() {
    let ds = tiny_synth(21);
    let mut config = fast_config(3);
    config.max_outer = 3;
    let forward = fit_groupwise(&ds.data, &config).unwrap();
    let reversed: Vec<SubjectData<f64>> = ds.data.iter().rev().cloned().collect();
    let backward = fit_groupwise(&reversed, &config).unwrap();
    let a = forward.bound.total;
    let b = backward.bound.total;
    let rel = (a - b).abs() / a.abs().max(1.0);
    assert!(rel < 1e-6, "order sensitivity {rel}: {a} vs {b}");
}

#[test]
fn duplicating_a_subject_doubles_its_terms() {
    use atlasforge_core::bias::BiasBasis;
    use atlasforge_core::pipeline::{compute_lower_bound, subject_bound_slice};
    let ds = tiny_synth(77);
    let config = fast_config(3);
    let fit = fit_groupwise(&ds.data[..1], &config).unwrap();
    let basis = BiasBasis::new(ds.data[0].volume.shape(), [2, 2, 2]).unwrap();
    let single = subject_bound_slice(
        &ds.data[0],
        &fit.states[0],
        &fit.atlas,
        &fit.hyperprior,
        &config,
        &basis,
    )
    .unwrap();
    // two copies of the same subject and state
    let data2 = vec![ds.data[0].clone(), ds.data[0].clone()];
    let states2 = vec![fit.states[0].clone(), fit.states[0].clone()];
    let bases = vec![basis.clone(), basis.clone()];
    let doubled = compute_lower_bound(
        &data2,
        &states2,
        &fit.atlas,
        &fit.hyperprior,
        &config,
        &bases,
    )
    .unwrap();
    let single_total = single.total;
    let dirichlet = doubled.dirichlet_prior;
    let expect = 2.0 * single_total + dirichlet;
    assert!(
        (doubled.total - expect).abs() < 1e-8 * expect.abs().max(1.0),
        "{} vs {}",
        doubled.total,
        expect
    );
}

#[test]
fn segment_atlas_rendering_is_self_consistent() {
    // render the atlas argmax with the hyperprior class means, no noise:
    // segmenting it back must reproduce the argmax almost exactly
    let ds = tiny_synth(55);
    let mut config = fast_config(3);
    config.max_outer = 6;
    let fit = fit_groupwise(&ds.data, &config).unwrap();
    let n = fit.atlas.len();
    let argmax: Vec<usize> = (0..n)
        .map(|j| {
            (0..3)
                .max_by(|&a, &b| {
                    fit.atlas
                        .value(j, a)
                        .partial_cmp(&fit.atlas.value(j, b))
                        .unwrap()
                })
                .unwrap()
        })
        .collect();
    let values: Vec<f64> = argmax
        .iter()
        .map(|&c| fit.hyperprior.classes[c].m[0])
        .collect();
    let vol = VolumeGrid::new([12, 12, 12], [1.0; 3], 1, values, None).unwrap();
    let data = SubjectData {
        volume: vol,
        labels: None,
        name: "render".into(),
    };
    let mut cfg = config.clone();
    cfg.update_affine = false;
    cfg.update_velocity = false;
    cfg.centroid_init = false;
    cfg.max_outer = 4;
    let seg = segment_unseen(&data, &fit.atlas, &fit.hyperprior, &cfg, None).unwrap();
    let pred = seg.state.gamma.argmax();
    use atlasforge_core::pipeline::dice_score;
    for c in 0..3 {
        let ma: Vec<bool> = argmax.iter().map(|&x| x == c).collect();
        let mb: Vec<bool> = pred.iter().map(|&x| x == c).collect();
        let d: f64 = dice_score(&ma, &mb).unwrap();
        assert!(d >= 0.99, "class {c} dice {d}");
    }
}

#[test]
fn fit_with_missing_channels_stays_monotone() {
    // two channels, the second partially missing in both subjects; the
    // ledger invariant (validated inside fit_groupwise) must hold through
    // bias and M-step interactions with the missing-channel posteriors
    let base = tiny_synth(99);
    let mut data = Vec::new();
    for (i, d) in base.data.iter().enumerate() {
        let n = d.volume.len();
        let mut values = Vec::with_capacity(2 * n);
        values.extend(d.volume.channel(0).iter().copied());
        values.extend(d.volume.channel(0).iter().map(|v| 0.5 * v + 1.0));
        let mut missing = vec![false; 2 * n];
        for j in 0..n {
            if (j + i) % 3 == 0 {
                missing[n + j] = true;
            }
        }
        let volume =
            VolumeGrid::new([12, 12, 12], [1.0; 3], 2, values, Some(missing)).unwrap();
        data.push(SubjectData {
            volume,
            labels: None,
            name: format!("m{i}"),
        });
    }
    let mut config = fast_config(3);
    config.max_outer = 6;
    let fit = fit_groupwise(&data, &config).unwrap();
    fit.ledger.validate().unwrap();
    let mut worst: f64 = 0.0;
    for row in &fit.ledger.rows {
        if row.accepted {
            worst = worst.max(row.before - row.after);
        }
    }
    assert!(
        worst <= 1e-8 * fit.bound.total.abs().max(1.0),
        "accepted decrease {worst}"
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let ds = tiny_synth(31);
    let mut config = fast_config(3);
    config.max_outer = 2;
    config.timing_in_ledger = false;
    config.threads = 1;
    let serial = fit_groupwise(&ds.data, &config).unwrap();
    config.threads = 3;
    let parallel = fit_groupwise(&ds.data, &config).unwrap();
    assert_eq!(serial.ledger.to_csv(), parallel.ledger.to_csv());
    for j in 0..serial.atlas.len() {
        for c in 0..3 {
            assert_eq!(serial.atlas.value(j, c), parallel.atlas.value(j, c));
        }
    }
}
