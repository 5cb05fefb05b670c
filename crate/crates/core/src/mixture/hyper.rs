//! Empirical-Bayes intensity hyperpriors by moment matching.
//!
//! Given the per-subject Gaussian-Wishart posteriors, choose a shared prior
//! whose predictive moments match the across-subject sample moments:
//! `m0` is the mean of posterior means, `nu0`/`W0` match mean and dispersion
//! of the expected precisions, and `beta0` is set so the prior predictive
//! variance of the mean reproduces the across-subject variance of the
//! posterior means.

use super::bundle::{GaussWishart, GaussWishartBundle};
use crate::error::{Error, Result};
use crate::scalar::{cst, Real};
use nalgebra::{Cholesky, DMatrix, DVector};

const CAP: f64 = 1e6;

/// Fit a shared Gaussian-Wishart prior from at least two subject posteriors.
pub fn fit_intensity_hyperpriors<T: Real>(
    subjects: &[&GaussWishartBundle<T>],
) -> Result<GaussWishartBundle<T>> {
    let m_subj = subjects.len();
    if m_subj < 2 {
        return Err(Error::invalid(
            "hyperprior fitting needs at least 2 subjects",
        ));
    }
    let k = subjects[0].k();
    let d = subjects[0].dim();
    if subjects.iter().any(|b| b.k() != k || b.dim() != d) {
        return Err(Error::invalid("subject bundles disagree on K or D"));
    }
    let mf = cst::<T>(m_subj as f64);
    let cap: T = cst(CAP);
    let mut classes = Vec::with_capacity(k);
    for c in 0..k {
        // mean of posterior means
        let mut m0 = DVector::<T>::zeros(d);
        for s in subjects {
            m0 += &s.classes[c].m;
        }
        m0 /= mf;
        // across-subject variance of means (diagonal)
        let mut var_m = DVector::<T>::zeros(d);
        for s in subjects {
            let diff = &s.classes[c].m - &m0;
            for a in 0..d {
                var_m[a] += diff[a] * diff[a];
            }
        }
        var_m /= cst::<T>((m_subj - 1) as f64);

        // mean and dispersion of expected precisions
        let mut lam_mean = DMatrix::<T>::zeros(d, d);
        for s in subjects {
            lam_mean += s.classes[c].expected_precision();
        }
        lam_mean /= mf;
        let mut nu0_acc = T::zero();
        let mut nu0_terms = 0usize;
        for a in 0..d {
            let e = lam_mean[(a, a)];
            let mut v = T::zero();
            for s in subjects {
                let x = s.classes[c].expected_precision()[(a, a)] - e;
                v += x * x;
            }
            v /= cst::<T>((m_subj - 1) as f64);
            if v > cst::<T>(1e-30) * e * e {
                // Var[Lambda_dd] = 2 nu W_dd^2 = 2 E^2 / nu under W(W0, nu0)
                nu0_acc += cst::<T>(2.0) * e * e / v;
                nu0_terms += 1;
            }
        }
        let nu_floor = cst::<T>((d + 2) as f64);
        let nu0 = if nu0_terms > 0 {
            (nu0_acc / cst::<T>(nu0_terms as f64)).max(nu_floor).min(cap)
        } else {
            cap
        };
        let w0 = &lam_mean / nu0;

        // beta0 from prior predictive Var[mu_a] = [W0^-1]_aa / (beta0 (nu0-D-1))
        let chol = Cholesky::new(w0.clone()).ok_or(Error::NotPositiveDefinite { attempts: 0 })?;
        let w0_inv = chol.inverse();
        let dof = (nu0 - cst::<T>((d + 1) as f64)).max(cst(1e-3));
        let mut beta_acc = T::zero();
        let mut beta_terms = 0usize;
        for a in 0..d {
            let target = var_m[a];
            if target > cst::<T>(1e-30) {
                beta_acc += w0_inv[(a, a)] / (dof * target);
                beta_terms += 1;
            }
        }
        let beta0 = if beta_terms > 0 {
            (beta_acc / cst::<T>(beta_terms as f64))
                .max(cst(1e-6))
                .min(cap)
        } else {
            cap
        };
        classes.push(GaussWishart::new(m0, beta0, w0, nu0)?);
    }
    GaussWishartBundle::new(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle1(m: f64, lam: f64) -> GaussWishartBundle<f64> {
        GaussWishartBundle::new(vec![GaussWishart::new(
            DVector::from_element(1, m),
            50.0,
            DMatrix::from_element(1, 1, lam / 10.0),
            10.0,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn two_subject_mean() {
        let a = bundle1(0.0, 4.0);
        let b = bundle1(2.0, 4.0);
        let prior = fit_intensity_hyperpriors(&[&a, &b]).unwrap();
        assert!((prior.classes[0].m[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_posteriors_cap_beta() {
        let a = bundle1(1.5, 4.0);
        let b = bundle1(1.5, 4.0);
        let prior = fit_intensity_hyperpriors(&[&a, &b]).unwrap();
        assert!((prior.classes[0].m[0] - 1.5).abs() < 1e-12);
        assert!((prior.classes[0].beta - 1e6).abs() < 1.0);
    }

    #[test]
    fn requires_two_subjects() {
        let a = bundle1(0.0, 1.0);
        assert!(fit_intensity_hyperpriors(&[&a]).is_err());
    }

    #[test]
    fn predictive_variance_matches_sample_variance_of_means() {
        // five synthetic subject posteriors; Monte-Carlo predictive oracle
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let bundles: Vec<GaussWishartBundle<f64>> = (0..5)
            .map(|_| {
                let m = 1.0 + rng.gen_range(-0.6..0.6);
                let lam = 4.0 + rng.gen_range(-0.5..0.5);
                bundle1(m, lam)
            })
            .collect();
        let refs: Vec<&GaussWishartBundle<f64>> = bundles.iter().collect();
        let prior = fit_intensity_hyperpriors(&refs).unwrap();
        let gw = &prior.classes[0];

        // sample variance of the subject means
        let means: Vec<f64> = bundles.iter().map(|b| b.classes[0].m[0]).collect();
        let mbar = means.iter().sum::<f64>() / 5.0;
        let svar = means.iter().map(|m| (m - mbar).powi(2)).sum::<f64>() / 4.0;

        // Monte Carlo draw from the prior predictive of mu:
        // Lambda ~ W(w0, nu0) (D=1: Gamma(nu/2, rate 1/(2 w0))),
        // mu ~ N(m0, 1/(beta0 Lambda))
        let n_samples = 400_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n_samples {
            // Gamma(nu/2) via Marsaglia-Tsang
            let shape = gw.nu / 2.0;
            let dgt = shape - 1.0 / 3.0;
            let cgt = 1.0 / (9.0 * dgt).sqrt();
            let g = loop {
                let x: f64 = {
                    // Box-Muller normal
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
                let v = (1.0 + cgt * x).powi(3);
                if v <= 0.0 {
                    continue;
                }
                let u: f64 = rng.gen_range(0.0..1.0);
                if u.ln() < 0.5 * x * x + dgt - dgt * v + dgt * v.ln() {
                    break dgt * v;
                }
            };
            let lambda = g * 2.0 * gw.w[(0, 0)];
            let std = (1.0 / (gw.beta * lambda)).sqrt();
            let z: f64 = {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            let mu = gw.m[0] + std * z;
            acc += mu;
            acc2 += mu * mu;
        }
        let pred_var = acc2 / n_samples as f64 - (acc / n_samples as f64).powi(2);
        let rel = (pred_var - svar).abs() / svar;
        assert!(
            rel < 0.05,
            "predictive var {pred_var} vs sample var {svar} (rel {rel})"
        );
    }
}
