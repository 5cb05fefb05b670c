//! The variational lower bound, term by term.

use super::state::{SubjectData, SubjectState};
use super::ModelConfig;
use crate::affine::{matching_term, warp_coordinates};
use crate::bias::BiasBasis;
use crate::error::{Error, Result};
use crate::mixture::{likelihood_bound_terms, GaussWishartBundle, LabelModel};
use crate::scalar::{cst, sum, Real};
use crate::special::ln_gamma;
use crate::template::TissueAtlas;

/// Additive breakdown of the lower bound; `total` is the sum of every
/// field. Normalization constants of the improper bias/affine/velocity
/// priors are dropped (they are constant in every parameter the fit
/// touches).
#[derive(Debug, Clone)]
pub struct BoundBreakdown<T> {
    /// E_q[ln p(X | Z, theta_mu, theta_sigma, theta_beta)] with the bias
    /// volume terms.
    pub expected_log_likelihood: T,
    /// E_q[ln p(Z | pi, w, u, a)].
    pub expected_log_prior_z: T,
    /// sum gamma ln p(l | z) over labelled voxels.
    pub label_likelihood: T,
    /// E_q[ln p(theta_mu, theta_sigma)] under the current hyperpriors.
    pub gauss_wishart_prior: T,
    /// ln p(Theta_pi): Dirichlet prior over the template.
    pub dirichlet_prior: T,
    /// ln p(Theta_beta): Gaussian penalty on bias coefficients.
    pub bias_prior: T,
    /// ln p(Theta_a): Gaussian penalty on the linear affine parameters.
    pub affine_prior: T,
    /// ln p(Theta_u) = -R(u).
    pub velocity_prior: T,
    /// -E[ln q(Z)].
    pub entropy_z: T,
    /// Entropy of the missing-channel posterior factors.
    pub entropy_missing: T,
    /// -E[ln q(theta_mu, theta_sigma)].
    pub gauss_wishart_entropy: T,
    pub total: T,
}

impl<T: Real> BoundBreakdown<T> {
    fn zero() -> Self {
        BoundBreakdown {
            expected_log_likelihood: T::zero(),
            expected_log_prior_z: T::zero(),
            label_likelihood: T::zero(),
            gauss_wishart_prior: T::zero(),
            dirichlet_prior: T::zero(),
            bias_prior: T::zero(),
            affine_prior: T::zero(),
            velocity_prior: T::zero(),
            entropy_z: T::zero(),
            entropy_missing: T::zero(),
            gauss_wishart_entropy: T::zero(),
            total: T::zero(),
        }
    }

    fn add(&mut self, other: &Self) {
        self.expected_log_likelihood += other.expected_log_likelihood;
        self.expected_log_prior_z += other.expected_log_prior_z;
        self.label_likelihood += other.label_likelihood;
        self.gauss_wishart_prior += other.gauss_wishart_prior;
        self.dirichlet_prior += other.dirichlet_prior;
        self.bias_prior += other.bias_prior;
        self.affine_prior += other.affine_prior;
        self.velocity_prior += other.velocity_prior;
        self.entropy_z += other.entropy_z;
        self.entropy_missing += other.entropy_missing;
        self.gauss_wishart_entropy += other.gauss_wishart_entropy;
    }

    fn finish(mut self) -> Result<Self> {
        self.total = self.expected_log_likelihood
            + self.expected_log_prior_z
            + self.label_likelihood
            + self.gauss_wishart_prior
            + self.dirichlet_prior
            + self.bias_prior
            + self.affine_prior
            + self.velocity_prior
            + self.entropy_z
            + self.entropy_missing
            + self.gauss_wishart_entropy;
        let named: [(&str, T); 12] = [
            ("expected_log_likelihood", self.expected_log_likelihood),
            ("expected_log_prior_z", self.expected_log_prior_z),
            ("label_likelihood", self.label_likelihood),
            ("gauss_wishart_prior", self.gauss_wishart_prior),
            ("dirichlet_prior", self.dirichlet_prior),
            ("bias_prior", self.bias_prior),
            ("affine_prior", self.affine_prior),
            ("velocity_prior", self.velocity_prior),
            ("entropy_z", self.entropy_z),
            ("entropy_missing", self.entropy_missing),
            ("gauss_wishart_entropy", self.gauss_wishart_entropy),
            ("total", self.total),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(Error::non_finite(format!("bound term {name}")));
            }
        }
        Ok(self)
    }
}

/// ln p(Theta_pi) for the whole template.
pub fn dirichlet_term<T: Real>(atlas: &TissueAtlas<T>) -> T {
    let k = atlas.classes();
    let alpha_bar: T = sum(atlas.alpha0.iter().copied());
    let ln_c = ln_gamma(alpha_bar) - sum(atlas.alpha0.iter().map(|&a| ln_gamma(a)));
    let mut acc = cst::<T>(atlas.len() as f64) * ln_c;
    for j in 0..atlas.len() {
        for c in 0..k {
            acc += (atlas.alpha0[c] - T::one()) * atlas.value(j, c).ln();
        }
    }
    acc
}

/// All bound terms belonging to one subject (everything except the
/// Dirichlet template prior). The missing-channel posteriors are synced to
/// the current Gaussian-Wishart posteriors, which is itself a coordinate
/// ascent step, so syncing never lowers the bound.
pub fn subject_bound_slice<T: Real>(
    data: &SubjectData<T>,
    state: &SubjectState<T>,
    atlas: &TissueAtlas<T>,
    hyperprior: &GaussWishartBundle<T>,
    config: &ModelConfig<T>,
    basis: &BiasBasis<T>,
) -> Result<BoundBreakdown<T>> {
    let mut b = BoundBreakdown::zero();
    let prep = state
        .prepare(data, basis)
        .map_err(|e| Error::invalid(format!("subject {}: {e}", data.name)))?;
    let (ell, ent_missing) = likelihood_bound_terms(&prep, &state.gamma, &state.posterior)?;
    b.expected_log_likelihood = ell;
    b.entropy_missing = ent_missing;
    b.entropy_z = state.gamma.entropy();

    let mat = state.affine.matrix()?;
    let coords = warp_coordinates(
        &state.deformation.forward,
        data.volume.spacing(),
        &mat,
        &state.affine.t,
        atlas.shape().spacing,
    );
    let sample = atlas.sample_with_gradients(&coords);
    b.expected_log_prior_z = matching_term(&state.gamma, &sample, &state.weights.w);

    if let Some(labels) = &data.labels {
        let model = LabelModel::new(&config.label_map, labels.zeta, config.k)?;
        for j in 0..state.gamma.len() {
            let l = labels.labels[j];
            if l == 0 {
                continue;
            }
            for (c, &g) in state.gamma.row(j).iter().enumerate() {
                if g > T::zero() {
                    if let Some(lp) = model.log_factor(l, c) {
                        b.label_likelihood += g * lp;
                    }
                }
            }
        }
    }

    let (prior, neg_q) = state.posterior.prior_cross_entropy_terms(hyperprior);
    b.gauss_wishart_prior = prior;
    b.gauss_wishart_entropy = neg_q;
    b.bias_prior = state.bias.log_prior();
    b.affine_prior = state.affine.log_prior();
    b.velocity_prior = -state.velocity.penalty();
    b.finish()
}

/// Full lower bound over all subjects, recomputed from the current state
/// (no cached terms); per-term breakdown for ledger attribution.
pub fn compute_lower_bound<T: Real>(
    data: &[SubjectData<T>],
    states: &[SubjectState<T>],
    atlas: &TissueAtlas<T>,
    hyperprior: &GaussWishartBundle<T>,
    config: &ModelConfig<T>,
    bases: &[BiasBasis<T>],
) -> Result<BoundBreakdown<T>> {
    if data.len() != states.len() || data.len() != bases.len() {
        return Err(Error::invalid("bound: subject count mismatch"));
    }
    let mut b = BoundBreakdown::zero();
    b.dirichlet_prior = dirichlet_term(atlas);
    for ((d, s), basis) in data.iter().zip(states).zip(bases) {
        let slice = subject_bound_slice(d, s, atlas, hyperprior, config, basis)?;
        b.add(&slice);
    }
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GridShape, VolumeGrid};
    use crate::mixture::{e_step, GaussWishart, PriorField, PreparedSubject};
    use nalgebra::{DMatrix, DVector};

    /// Independent single-Gaussian variational bound, written from the
    /// standard conjugate-update equations.
    #[allow(clippy::too_many_arguments)]
    fn single_gaussian_bound_oracle(
        x: &[f64],
        m0: f64,
        beta0: f64,
        w0: f64,
        nu0: f64,
        m: f64,
        beta: f64,
        w: f64,
        nu: f64,
    ) -> f64 {
        use crate::special::{digamma, ln_gamma};
        let n = x.len() as f64;
        let e_ln_lambda = digamma(nu / 2.0) + (2.0 * w).ln();
        let e_lambda = nu * w;
        let two_pi = 2.0 * std::f64::consts::PI;
        // E[ln p(X | mu, lambda)]
        let mut quad = 0.0;
        for &xi in x {
            quad += (xi - m).powi(2);
        }
        let e_llk = 0.5 * n * (e_ln_lambda - two_pi.ln())
            - 0.5 * (e_lambda * quad + n / beta);
        // E[ln p(mu, lambda)] for a Gauss-Gamma prior
        let e_p_mu = 0.5
            * ((beta0 / two_pi).ln() + e_ln_lambda
                - beta0 / beta
                - beta0 * e_lambda * (m - m0).powi(2));
        let ln_b0 = -0.5 * nu0 * (2.0 * w0).ln() - ln_gamma(nu0 / 2.0);
        let e_p_lambda = ln_b0 + (nu0 - 2.0) / 2.0 * e_ln_lambda - 0.5 * e_lambda / w0;
        // -E[ln q(mu, lambda)]
        let e_q_mu = 0.5 * ((beta / two_pi).ln() + e_ln_lambda - 1.0);
        let ln_b = -0.5 * nu * (2.0 * w).ln() - ln_gamma(nu / 2.0);
        let e_q_lambda = ln_b + (nu - 2.0) / 2.0 * e_ln_lambda - 0.5 * nu;
        e_llk + e_p_mu + e_p_lambda - e_q_mu - e_q_lambda
    }

    #[test]
    fn single_gaussian_bound_matches_oracle() {
        // K=1, M=1, u=0, a=0, b=1, uniform atlas: the bound reduces to the
        // standard single-Gaussian variational bound (the prior-Z and
        // Dirichlet terms vanish for K=1 since pi = 1 and C(alpha0) = 1)
        let x = vec![0.3, -0.7, 1.2, 0.4, -0.1, 0.9, 2.0, -1.5];
        let vol = VolumeGrid::from_scalar([8, 1, 1], x.clone()).unwrap();
        let (m0, beta0, w0, nu0) = (0.2, 1.5, 0.8, 3.0);
        let prior = GaussWishartBundle::new(vec![GaussWishart::new(
            DVector::from_element(1, m0),
            beta0,
            DMatrix::from_element(1, 1, w0),
            nu0,
        )
        .unwrap()])
        .unwrap();
        // one VBEM iteration by hand: gamma = 1, conjugate update
        let n = 8.0;
        let xbar: f64 = x.iter().sum::<f64>() / n;
        let ss: f64 = x.iter().map(|v| (v - xbar).powi(2)).sum();
        let beta = beta0 + n;
        let m = (beta0 * m0 + n * xbar) / beta;
        let nu = nu0 + n;
        let w_inv = 1.0 / w0 + ss + beta0 * n / beta * (xbar - m0).powi(2);
        let w = 1.0 / w_inv;

        let prep = PreparedSubject::new(&vol, None).unwrap();
        let post = GaussWishartBundle::new(vec![GaussWishart::new(
            DVector::from_element(1, m),
            beta,
            DMatrix::from_element(1, 1, w),
            nu,
        )
        .unwrap()])
        .unwrap();
        let out = e_step(&prep, &PriorField::uniform(8, 1), &post, None).unwrap();
        let (ell, ent_missing) = likelihood_bound_terms(&prep, &out.gamma, &post).unwrap();
        let (gw_prior, gw_entropy) = post.prior_cross_entropy_terms(&prior);
        let total = ell + ent_missing + gw_prior + gw_entropy + out.gamma.entropy();

        let oracle = single_gaussian_bound_oracle(&x, m0, beta0, w0, nu0, m, beta, w, nu);
        assert!(
            (total - oracle).abs() < 1e-8,
            "bound {total} vs oracle {oracle}"
        );
    }

    #[test]
    fn dirichlet_term_uniform_alpha_one() {
        // alpha = 1 everywhere: Dir is uniform, C = Gamma(K), term = N ln 2
        let shape = GridShape::isotropic([2, 2, 1]);
        let atlas = TissueAtlas::<f64>::uniform(shape, 3, vec![1.0; 3]).unwrap();
        let got = dirichlet_term(&atlas);
        let expect = 4.0 * (2.0f64).ln(); // ln Gamma(3) = ln 2
        assert!((got - expect).abs() < 1e-10);
    }
}
