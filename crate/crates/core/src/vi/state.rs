use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::constrained::ConstrainedGaussianFast;
use crate::error::{Error, Result};

/// Dense Gaussian factor, used for `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFactor {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Gaussian factor for one random-effect term with block-diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReFactor {
    pub d: usize,
    /// Level-major, `g · d` entries.
    pub mean: Vec<f64>,
    /// One `d × d` block per level.
    pub covs: Vec<DMatrix<f64>>,
}

impl ReFactor {
    pub fn n_levels(&self) -> usize {
        self.covs.len()
    }

    pub fn level_mean(&self, l: usize) -> &[f64] {
        &self.mean[l * self.d..(l + 1) * self.d]
    }
}

/// Inverse-Wishart distribution `IW(ν, Φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseWishart {
    pub nu: f64,
    pub phi: DMatrix<f64>,
}

impl InverseWishart {
    pub fn new(nu: f64, phi: DMatrix<f64>) -> Result<Self> {
        let d = phi.nrows();
        if phi.ncols() != d || d == 0 {
            return Err(Error::Config(format!("inverse-Wishart scale must be square, got {}x{}", d, phi.ncols())));
        }
        if !(nu > d as f64 - 1.0) {
            return Err(Error::Config(format!("inverse-Wishart degrees of freedom {nu} must exceed {}", d - 1)));
        }
        if phi.clone().cholesky().is_none() {
            return Err(Error::Config("inverse-Wishart scale is not positive definite".into()));
        }
        Ok(InverseWishart { nu, phi })
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    /// `E[Σ⁻¹] = ν Φ⁻¹`.
    pub fn expected_inverse(&self) -> Result<DMatrix<f64>> {
        let chol = self
            .phi
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("inverse-Wishart scale lost positive definiteness".into()))?;
        Ok(chol.inverse() * self.nu)
    }

    pub fn log_det_phi(&self) -> Result<f64> {
        log_det_pd(&self.phi)
    }

    /// `E[ln|Σ|] = ln|Φ| − d ln 2 − Σ_i ψ((ν + 1 − i) / 2)`.
    pub fn expected_log_det(&self) -> Result<f64> {
        let d = self.dim();
        let psi: f64 = (1..=d).map(|i| digamma((self.nu + 1.0 - i as f64) / 2.0)).sum();
        Ok(self.log_det_phi()? - d as f64 * std::f64::consts::LN_2 - psi)
    }

    /// `E_q[ln IW(Σ | ν, Φ)]` where `q` supplies `E[ln|Σ|]` and `E[Σ⁻¹]`.
    pub fn expected_log_density(&self, e_log_det: f64, e_inv: &DMatrix<f64>) -> Result<f64> {
        let d = self.dim() as f64;
        Ok(0.5 * self.nu * self.log_det_phi()?
            - 0.5 * self.nu * d * std::f64::consts::LN_2
            - ln_multi_gamma(self.dim(), 0.5 * self.nu)
            - 0.5 * (self.nu + d + 1.0) * e_log_det
            - 0.5 * (&self.phi * e_inv).trace())
    }
}

/// `ln Γ_d(a)`.
pub fn ln_multi_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln() + (1..=d).map(|i| ln_gamma(a + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

pub(crate) fn log_det_pd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance block is not positive definite".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub(crate) fn inverse_pd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let inv = chol.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}

/// Factor for one `v_fe` term plus the working quantities it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaFactor {
    /// Surrogate precision diagonal (sum of weights per level).
    pub surrogate_d: Vec<f64>,
    /// Surrogate `Xᵀv`.
    pub surrogate_xtv: Vec<f64>,
    pub fast: ConstrainedGaussianFast,
}

/// Bookkeeping from one fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub iterations: usize,
    pub converged: bool,
    /// Block updates that needed at least one halving.
    pub damped_updates: usize,
    /// Sweeps that contained a damped or rejected update.
    pub damped_sweeps: usize,
    /// Block updates that exhausted the halvings and kept the old factor.
    pub rejected_updates: usize,
    pub wall_time_secs: f64,
}

/// The full mean-field approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub beta: GaussianFactor,
    pub alphas: Vec<ReFactor>,
    pub sigmas: Vec<InverseWishart>,
    pub priors: Vec<InverseWishart>,
    pub gammas: Vec<GammaFactor>,
    /// ELBO after initialization and after every sweep.
    pub elbo_trace: Vec<f64>,
    pub stats: FitStats,
}

impl VariationalState {
    /// Every variational mean, concatenated in block order.
    pub fn all_means(&self) -> Vec<f64> {
        let mut out = self.beta.mean.clone();
        for a in &self.alphas {
            out.extend_from_slice(&a.mean);
        }
        for g in &self.gammas {
            out.extend_from_slice(&g.fast.mean);
        }
        out
    }

    pub fn final_elbo(&self) -> f64 {
        self.elbo_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Checks the covariance and degrees-of-freedom invariants.
    pub fn validate(&self) -> Result<()> {
        if self.beta.mean.len() > 0 {
            log_det_pd(&self.beta.cov)?;
        }
        for (j, a) in self.alphas.iter().enumerate() {
            for (l, c) in a.covs.iter().enumerate() {
                log_det_pd(c).map_err(|_| Error::Numerical(format!("term {j} level {l}: covariance not positive definite")))?;
            }
        }
        for (j, s) in self.sigmas.iter().enumerate() {
            if !(s.nu > s.dim() as f64 - 1.0) {
                return Err(Error::Numerical(format!("term {j}: degrees of freedom {} too small", s.nu)));
            }
            log_det_pd(&s.phi)?;
        }
        Ok(())
    }
}

/// `x` as a column vector.
pub(crate) fn col(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multivariate_gamma_reduces_to_gamma() {
        assert!((ln_multi_gamma(1, 3.5) - ln_gamma(3.5)).abs() < 1e-14);
        // Γ_2(a) = π^{1/2} Γ(a) Γ(a − 1/2)
        let a = 2.25;
        let expected = 0.5 * std::f64::consts::PI.ln() + ln_gamma(a) + ln_gamma(a - 0.5);
        assert!((ln_multi_gamma(2, a) - expected).abs() < 1e-13);
    }

    #[test]
    fn inverse_gamma_moments() {
        // For d = 1, IW(ν, Φ) is inverse-gamma(ν/2, Φ/2).
        let iw = InverseWishart::new(5.0, DMatrix::from_element(1, 1, 3.0)).unwrap();
        // E[1/σ²] = (ν/2)/(Φ/2) = ν/Φ.
        assert!((iw.expected_inverse().unwrap()[(0, 0)] - 5.0 / 3.0).abs() < 1e-14);
        // E[ln σ²] = ln(Φ/2) − ψ(ν/2).
        let expected = (1.5f64).ln() - digamma(2.5);
        assert!((iw.expected_log_det().unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn inverse_wishart_validation() {
        assert!(InverseWishart::new(0.5, DMatrix::identity(2, 2)).is_err());
        assert!(InverseWishart::new(3.0, DMatrix::zeros(2, 2)).is_err());
        assert!(InverseWishart::new(1.5, DMatrix::identity(2, 2)).is_ok());
    }
}
