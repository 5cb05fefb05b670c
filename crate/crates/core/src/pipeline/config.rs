//! Fitting configuration and the flat `key = value` config format.

use crate::diffeo::SolveSettings;
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};

/// Everything the groupwise fit needs to know; every default can be
/// overridden from a config file or the CLI.
#[derive(Debug, Clone)]
pub struct ModelConfig<T> {
    /// Number of mixture classes.
    pub k: usize,
    /// Label id (1-based) -> mixture classes sharing that label.
    pub label_map: Vec<Vec<usize>>,
    /// Rater sensitivity used when a labelled subject does not carry its
    /// own value.
    pub zeta: T,
    /// Dirichlet concentration (one shared value per class).
    pub alpha0: T,
    /// Smoothness operator coefficients.
    pub lambda_zero: T,
    pub lambda_membrane: T,
    pub lambda_bending: T,
    pub lambda_elastic_mu: T,
    pub lambda_elastic_lambda: T,
    /// Geodesic shooting steps (1 = small-deformation mode).
    pub shoot_steps: usize,
    /// Bias basis orders; derived from the cutoff when absent.
    pub bias_orders: Option<[usize; 3]>,
    /// Coarsest retained bias period (mm) for the default orders.
    pub bias_cutoff_mm: f64,
    /// Bending-style regularization weight of the bias coefficients.
    pub bias_reg: T,
    /// Affine prior precisions (rotations, log-zooms, shears).
    pub prior_prec_rot: T,
    pub prior_prec_zoom: T,
    pub prior_prec_shear: T,
    /// Initialize translations by matching intensity centroids.
    pub centroid_init: bool,
    /// Template smoothing between outer sweeps (mm; 0 = off).
    pub smooth_fwhm: T,
    /// Outer loop control.
    pub max_outer: usize,
    pub tol: f64,
    /// Update toggles.
    pub update_weights: bool,
    pub update_bias: bool,
    pub update_affine: bool,
    pub update_velocity: bool,
    pub update_template: bool,
    pub update_hyperprior: bool,
    /// Gauss-Newton solver settings for the velocity system.
    pub solver: SolveSettings,
    /// RNG seed (synthesis and any randomized choices).
    pub seed: u64,
    pub threads: usize,
    /// Write wall-clock times into the ledger (off for byte-identical
    /// reproducibility checks).
    pub timing_in_ledger: bool,
}

impl<T: Real> ModelConfig<T> {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        Ok(ModelConfig {
            k,
            label_map: (0..k).map(|c| vec![c]).collect(),
            zeta: T::one(),
            alpha0: cst(1.01),
            lambda_zero: cst(1e-3),
            lambda_membrane: cst(0.1),
            lambda_bending: cst(0.5),
            lambda_elastic_mu: cst(0.25),
            lambda_elastic_lambda: cst(0.125),
            shoot_steps: 8,
            bias_orders: None,
            bias_cutoff_mm: 60.0,
            bias_reg: cst(100.0),
            prior_prec_rot: cst(1e-4),
            prior_prec_zoom: cst(1e-2),
            prior_prec_shear: cst(1e-4),
            centroid_init: true,
            smooth_fwhm: T::zero(),
            max_outer: 30,
            tol: 1e-6,
            update_weights: true,
            update_bias: true,
            update_affine: true,
            update_velocity: true,
            update_template: true,
            update_hyperprior: true,
            solver: SolveSettings {
                rtol: 1e-6,
                max_passes: 8,
                ..Default::default()
            },
            seed: 0,
            threads: 1,
            timing_in_ledger: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        for (li, set) in self.label_map.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::invalid(format!(
                    "label {} maps to no class",
                    li + 1
                )));
            }
            if set.iter().any(|&c| c >= self.k) {
                return Err(Error::invalid(format!(
                    "label {} maps to class >= K",
                    li + 1
                )));
            }
        }
        let lo = T::one() / cst::<T>(self.k as f64);
        if self.zeta < lo || self.zeta > T::one() {
            return Err(Error::invalid("zeta must lie in [1/K, 1]"));
        }
        if self.alpha0 < T::one() {
            return Err(Error::invalid("alpha0 must be >= 1"));
        }
        if self.shoot_steps == 0 {
            return Err(Error::invalid("shoot_steps must be >= 1"));
        }
        Ok(())
    }

    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f = |v: &str| -> Result<T> {
            v.parse::<f64>()
                .map(cst)
                .map_err(|_| Error::Format(format!("bad number for {key}: {v}")))
        };
        let parse_u = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad integer for {key}: {v}")))
        };
        let parse_b = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Format(format!("bad bool for {key}: {v}"))),
            }
        };
        match key {
            "classes" | "k" => self.k = parse_u(value)?,
            "zeta" => self.zeta = parse_f(value)?,
            "alpha0" => self.alpha0 = parse_f(value)?,
            "lambda_zero" => self.lambda_zero = parse_f(value)?,
            "lambda_membrane" => self.lambda_membrane = parse_f(value)?,
            "lambda_bending" => self.lambda_bending = parse_f(value)?,
            "lambda_elastic_mu" => self.lambda_elastic_mu = parse_f(value)?,
            "lambda_elastic_lambda" => self.lambda_elastic_lambda = parse_f(value)?,
            "shoot_steps" => self.shoot_steps = parse_u(value)?,
            "bias_orders" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Format(format!("bad bias_orders: {value}")))?;
                if parts.len() != 3 {
                    return Err(Error::Format("bias_orders wants three values".into()));
                }
                self.bias_orders = Some([parts[0], parts[1], parts[2]]);
            }
            "bias_cutoff_mm" => {
                self.bias_cutoff_mm = value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad bias_cutoff_mm: {value}")))?
            }
            "bias_reg" => self.bias_reg = parse_f(value)?,
            "prior_prec_rot" => self.prior_prec_rot = parse_f(value)?,
            "prior_prec_zoom" => self.prior_prec_zoom = parse_f(value)?,
            "prior_prec_shear" => self.prior_prec_shear = parse_f(value)?,
            "centroid_init" => self.centroid_init = parse_b(value)?,
            "smooth_fwhm" => self.smooth_fwhm = parse_f(value)?,
            "max_outer" => self.max_outer = parse_u(value)?,
            "tol" => {
                self.tol = value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad tol: {value}")))?
            }
            "update_weights" => self.update_weights = parse_b(value)?,
            "update_bias" => self.update_bias = parse_b(value)?,
            "update_affine" => self.update_affine = parse_b(value)?,
            "update_velocity" => self.update_velocity = parse_b(value)?,
            "update_template" => self.update_template = parse_b(value)?,
            "update_hyperprior" => self.update_hyperprior = parse_b(value)?,
            "solver_rtol" => {
                self.solver.rtol = value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad solver_rtol: {value}")))?
            }
            "solver_max_passes" => self.solver.max_passes = parse_u(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad seed: {value}")))?
            }
            "threads" => self.threads = parse_u(value)?.max(1),
            "timing_in_ledger" => self.timing_in_ledger = parse_b(value)?,
            "label_map" => {
                // format: "1>0,1 2>2" (label id > class list)
                let mut map: Vec<Vec<usize>> = Vec::new();
                for entry in value.split_whitespace() {
                    let (lid, classes) = entry
                        .split_once('>')
                        .ok_or_else(|| Error::Format(format!("bad label_map entry {entry}")))?;
                    let lid: usize = lid
                        .parse()
                        .map_err(|_| Error::Format(format!("bad label id {lid}")))?;
                    if lid == 0 {
                        return Err(Error::Format("label ids are 1-based".into()));
                    }
                    let classes: Vec<usize> = classes
                        .split(',')
                        .map(|c| c.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Format(format!("bad class list {classes}")))?;
                    if map.len() < lid {
                        map.resize(lid, Vec::new());
                    }
                    map[lid - 1] = classes;
                }
                self.label_map = map;
            }
            other => return Err(Error::Format(format!("unknown config key: {other}"))),
        }
        Ok(())
    }

    /// Parse a flat UTF-8 `key = value` file with `#` comments.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        // label_map defaults track K when untouched
        if self.label_map.len() < self.k && self.label_map.iter().all(|s| s.len() == 1) {
            let identity: Vec<Vec<usize>> = (0..self.k).map(|c| vec![c]).collect();
            if self
                .label_map
                .iter()
                .enumerate()
                .all(|(i, s)| s == &vec![i])
            {
                self.label_map = identity;
            }
        }
        Ok(())
    }
}
