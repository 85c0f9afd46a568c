//! ELBO pieces. Only the constants of the flat priors on `β` and `γ` are dropped;
//! everything else (Poisson `ln y!`, Gaussian and inverse-Wishart normalizers) is kept
//! so the bound can be compared against a marginal likelihood.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use super::state::{log_det_pd, GammaFactor, GaussianFactor, InverseWishart, ReFactor};
use crate::constrained::PseudoDetFormula;
use crate::error::Result;

fn gaussian_entropy_const(dim: usize) -> f64 {
    0.5 * dim as f64 * (1.0 + (2.0 * PI).ln())
}

/// `−Σ ln Γ(y + 1)`.
pub(crate) fn poisson_constant(y: &[f64]) -> f64 {
    -y.iter().map(|&v| ln_gamma(v + 1.0)).sum::<f64>()
}

/// `Σ y ψ̄ − Σ w` without the constant.
pub(crate) fn poisson_term(y: &[f64], psi_mean: &[f64], w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((yi, m), wi) in y.iter().zip(psi_mean).zip(w) {
        acc += yi * m - wi;
    }
    acc
}

/// Entropy of `q(β)`.
pub(crate) fn beta_term(beta: &GaussianFactor) -> Result<f64> {
    let p = beta.mean.len();
    if p == 0 {
        return Ok(0.0);
    }
    Ok(0.5 * log_det_pd(&beta.cov)? + gaussian_entropy_const(p))
}

/// Prior cross-terms and entropy for `α_j`, plus `E[ln p(Σ_j)] − E[ln q(Σ_j)]`.
pub(crate) fn re_term(alpha: &ReFactor, sigma: &InverseWishart, prior: &InverseWishart) -> Result<f64> {
    let d = alpha.d;
    let e_inv = sigma.expected_inverse()?;
    let e_log_det = sigma.expected_log_det()?;
    let per_level_const = -0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * e_log_det + gaussian_entropy_const(d);
    let mut acc = 0.0;
    for (l, cov) in alpha.covs.iter().enumerate() {
        let mu = alpha.level_mean(l);
        let mut quad = 0.0;
        for a in 0..d {
            for b in 0..d {
                quad += (mu[a] * mu[b] + cov[(a, b)]) * e_inv[(b, a)];
            }
        }
        acc += per_level_const - 0.5 * quad + 0.5 * log_det_pd(cov)?;
    }
    acc += prior.expected_log_density(e_log_det, &e_inv)? - sigma.expected_log_density(e_log_det, &e_inv)?;
    Ok(acc)
}

/// Entropy of the singular `q(γ)`.
pub(crate) fn gamma_term(gamma: &GammaFactor, formula: PseudoDetFormula) -> f64 {
    let rank = gamma.fast.n_levels() - 1;
    0.5 * gamma.fast.log_pdet_with(formula) + gaussian_entropy_const(rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn entropy_grows_with_variance() {
        let small = GaussianFactor { mean: vec![0.3, -0.1], cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]) };
        let mut big = small.clone();
        big.cov *= 1.5;
        let (a, b) = (beta_term(&small).unwrap(), beta_term(&big).unwrap());
        assert!(b > a);
        // ½ ln|1.5 Λ| − ½ ln|Λ| = ln 1.5 for a 2x2 matrix.
        assert!((b - a - 1.5f64.ln()).abs() < 1e-13);
        // Direct formula: ½ ln(2πe)^p |Λ|.
        let det: f64 = 0.5 - 0.04;
        let direct = 0.5 * ((2.0 * PI * std::f64::consts::E).powi(2) * det).ln();
        assert!((a - direct).abs() < 1e-13);
    }

    #[test]
    fn divergence_vanishes_when_q_equals_prior() {
        let prior = InverseWishart::new(3.0, DMatrix::identity(1, 1)).unwrap();
        let e_inv = prior.expected_inverse().unwrap();
        let e_ld = prior.expected_log_det().unwrap();
        let kl_part = prior.expected_log_density(e_ld, &e_inv).unwrap() - prior.expected_log_density(e_ld, &e_inv).unwrap();
        assert_eq!(kl_part, 0.0);
        // With q away from the prior, E_q[ln p] − E_q[ln q] is a negative KL.
        let q = InverseWishart::new(7.0, DMatrix::from_element(1, 1, 2.5)).unwrap();
        let (qi, ql) = (q.expected_inverse().unwrap(), q.expected_log_det().unwrap());
        let neg_kl = prior.expected_log_density(ql, &qi).unwrap() - q.expected_log_density(ql, &qi).unwrap();
        assert!(neg_kl < 0.0);
    }
}
