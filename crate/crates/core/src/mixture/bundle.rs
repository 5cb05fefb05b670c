//! Gaussian-Wishart prior/posterior over a Gaussian's mean and precision.

use crate::error::{Error, Result};
use crate::scalar::{cst, sum, Real};
use crate::special::{digamma, ln_gamma};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Cholesky with a trace-proportional diagonal jitter fallback.
///
/// Adds `1e-8 tr(M)/D` to the diagonal on failure, at most `max_attempts`
/// times. Returns the factorization and the number of jitters applied.
pub fn cholesky_with_jitter<T: Real>(
    mat: &DMatrix<T>,
    max_attempts: usize,
) -> Result<(Cholesky<T, Dyn>, usize)> {
    let d = mat.nrows();
    let mut m = mat.clone();
    for attempt in 0..=max_attempts {
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok((chol, attempt));
        }
        let jitter = cst::<T>(1e-8) * m.trace().abs().max(cst(1e-30)) / cst(d as f64);
        for i in 0..d {
            m[(i, i)] += jitter * cst::<T>(10f64.powi(attempt as i32));
        }
    }
    Err(Error::NotPositiveDefinite {
        attempts: max_attempts,
    })
}

/// One class: N(mu | m, (beta Lambda)^-1) W(Lambda | W, nu).
#[derive(Debug, Clone)]
pub struct GaussWishart<T> {
    pub m: DVector<T>,
    pub beta: T,
    pub w: DMatrix<T>,
    pub nu: T,
}

impl<T: Real> GaussWishart<T> {
    pub fn new(m: DVector<T>, beta: T, w: DMatrix<T>, nu: T) -> Result<Self> {
        let gw = GaussWishart { m, beta, w, nu };
        gw.validate()?;
        Ok(gw)
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.w.nrows() != d || self.w.ncols() != d {
            return Err(Error::invalid("scale matrix dimension mismatch"));
        }
        if self.beta <= T::zero() {
            return Err(Error::invalid("beta must be positive"));
        }
        if self.nu <= cst::<T>((d as f64) - 1.0) {
            return Err(Error::invalid("nu must exceed D - 1"));
        }
        let asym = (&self.w - self.w.transpose()).abs().max();
        if asym > cst::<T>(1e-8) * self.w.abs().max().max(T::one()) {
            return Err(Error::invalid("scale matrix must be symmetric"));
        }
        Cholesky::new(self.w.clone())
            .map(|_| ())
            .ok_or(Error::NotPositiveDefinite { attempts: 0 })
    }

    /// E[Lambda] = nu W.
    pub fn expected_precision(&self) -> DMatrix<T> {
        &self.w * self.nu
    }

    /// E[ln det Lambda] = sum_d psi((nu+1-d)/2) + D ln 2 + ln det W.
    pub fn expected_log_det_precision(&self) -> T {
        let d = self.dim();
        let half: T = cst(0.5);
        let mut acc = cst::<T>(d as f64) * cst::<T>(2.0).ln() + self.log_det_w();
        for i in 0..d {
            acc += digamma((self.nu - cst::<T>(i as f64)) * half);
        }
        acc
    }

    pub fn log_det_w(&self) -> T {
        let chol = Cholesky::new(self.w.clone()).expect("validated SPD scale matrix");
        let l = chol.l();
        cst::<T>(2.0) * sum((0..self.dim()).map(|i| l[(i, i)].ln()))
    }

    /// E[(x - mu)^T Lambda (x - mu)] = D/beta + nu (x-m)^T W (x-m).
    pub fn expected_quad(&self, x: &DVector<T>) -> T {
        let d = self.dim();
        let diff = x - &self.m;
        cst::<T>(d as f64) / self.beta + self.nu * (&self.w * &diff).dot(&diff)
    }

    /// ln B(W, nu): log normalizer of the Wishart density.
    pub fn ln_b(&self) -> T {
        ln_b_wishart(&self.w, self.nu)
    }

    /// Entropy of the Wishart factor.
    pub fn wishart_entropy(&self) -> T {
        let d = cst::<T>(self.dim() as f64);
        -self.ln_b() - (self.nu - d - T::one()) * cst::<T>(0.5) * self.expected_log_det_precision()
            + self.nu * d * cst::<T>(0.5)
    }

    /// E_q[ln q(mu, Lambda)]: negative entropy of the posterior factor.
    pub fn expected_log_q(&self) -> T {
        let d = cst::<T>(self.dim() as f64);
        let half: T = cst(0.5);
        let two_pi: T = T::two_pi();
        let e_ln_det = self.expected_log_det_precision();
        let e_ln_q_mu = half * (d * (self.beta / two_pi).ln() + e_ln_det - d);
        e_ln_q_mu - self.wishart_entropy()
    }

    /// E_q[ln p(mu, Lambda)] under a Gaussian-Wishart prior.
    pub fn expected_log_prior(&self, prior: &GaussWishart<T>) -> T {
        let d_us = self.dim();
        let d = cst::<T>(d_us as f64);
        let half: T = cst(0.5);
        let two_pi: T = T::two_pi();
        let e_ln_det = self.expected_log_det_precision();
        let diff = &self.m - &prior.m;
        let quad = prior.beta * self.nu * (&self.w * &diff).dot(&diff);
        let e_ln_p_mu =
            half * (d * (prior.beta / two_pi).ln() + e_ln_det - d * prior.beta / self.beta - quad);
        let w0_inv = Cholesky::new(prior.w.clone())
            .expect("validated SPD prior scale")
            .inverse();
        let tr = (w0_inv * &self.w).trace() * self.nu;
        let e_ln_p_lambda = ln_b_wishart(&prior.w, prior.nu)
            + (prior.nu - d - T::one()) * half * e_ln_det
            - half * tr;
        e_ln_p_mu + e_ln_p_lambda
    }
}

/// ln B(W, nu) = -nu/2 ln|W| - nu D/2 ln 2 - D(D-1)/4 ln pi - sum ln Gamma((nu+1-d)/2).
pub fn ln_b_wishart<T: Real>(w: &DMatrix<T>, nu: T) -> T {
    let d_us = w.nrows();
    let d = cst::<T>(d_us as f64);
    let half: T = cst(0.5);
    let chol = Cholesky::new(w.clone()).expect("SPD scale matrix");
    let l = chol.l();
    let log_det = cst::<T>(2.0) * sum((0..d_us).map(|i| l[(i, i)].ln()));
    let mut acc = -nu * half * log_det
        - nu * d * half * cst::<T>(2.0).ln()
        - d * (d - T::one()) * cst::<T>(0.25) * T::pi().ln();
    for i in 0..d_us {
        acc -= ln_gamma((nu - cst::<T>(i as f64)) * half);
    }
    acc
}

/// Per-class Gaussian-Wishart parameters for a K-class mixture.
#[derive(Debug, Clone)]
pub struct GaussWishartBundle<T> {
    pub classes: Vec<GaussWishart<T>>,
}

impl<T: Real> GaussWishartBundle<T> {
    pub fn new(classes: Vec<GaussWishart<T>>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("bundle needs at least one class"));
        }
        let d = classes[0].dim();
        if classes.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("bundle classes disagree on dimension"));
        }
        Ok(GaussWishartBundle { classes })
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.classes {
            c.validate()?;
        }
        Ok(())
    }

    /// Sum over classes of E[ln p] - E[ln q]: the two Gauss-Wishart rows of
    /// the lower bound.
    pub fn prior_cross_entropy_terms(&self, prior: &GaussWishartBundle<T>) -> (T, T) {
        let mut e_log_p = T::zero();
        let mut neg_e_log_q = T::zero();
        for (post, pri) in self.classes.iter().zip(&prior.classes) {
            e_log_p += post.expected_log_prior(pri);
            neg_e_log_q -= post.expected_log_q();
        }
        (e_log_p, neg_e_log_q)
    }
}
