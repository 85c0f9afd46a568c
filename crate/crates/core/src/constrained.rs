//! Gaussian factors for fixed effects under linear equality constraints.
//!
//! With a flat prior and a Gaussian working likelihood `v ~ N(Xγ, I)`, the optimal
//! factor subject to `Lγ = 0` is a singular Gaussian. The dense form handles any `L`;
//! the fast form covers one-hot `X` with a single sum-to-zero constraint in `O(p)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Which log pseudo-determinant the fast path reports.
///
/// `Consistent` agrees with the dense identity and with eigendecomposition. `AsPrinted`
/// is the shorter `Σ ln u − ln Σu`, which is lower by `ln p` for a one-hot design. The two
/// differ by a constant, so the optimizer path is the same either way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoDetFormula {
    #[default]
    Consistent,
    AsPrinted,
}

#[derive(Debug, Clone)]
pub struct ConstrainedGaussianDense {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_pdet: f64,
    pub constraint: DMatrix<f64>,
}

/// Mean, covariance, and log pseudo-determinant given `XᵀX`, `Xᵀv`, and constraints `L`.
pub fn update_dense(xtx: &DMatrix<f64>, xtv: &DVector<f64>, l: &DMatrix<f64>) -> Result<ConstrainedGaussianDense> {
    let p = xtx.nrows();
    if xtx.ncols() != p || xtv.len() != p || l.ncols() != p {
        return Err(Error::Numerical(format!(
            "dimension mismatch: XᵀX {}x{}, Xᵀv {}, L {}x{}",
            xtx.nrows(),
            xtx.ncols(),
            xtv.len(),
            l.nrows(),
            l.ncols()
        )));
    }
    let chol = checked_cholesky(xtx).ok_or_else(|| Error::Numerical("XᵀX is singular or not positive definite".into()))?;
    let xtx_inv = chol.inverse();
    let llt = l * l.transpose();
    let llt_chol = checked_cholesky(&llt).ok_or_else(|| Error::Numerical("constraint matrix is rank deficient".into()))?;
    let m = l * &xtx_inv * l.transpose();
    let m_chol = checked_cholesky(&m).ok_or_else(|| Error::Numerical("L (XᵀX)⁻¹ Lᵀ is singular".into()))?;
    let proj = l.transpose() * m_chol.inverse() * l;
    let ols = &xtx_inv * xtv;
    let mean = &ols - &xtx_inv * (&proj * &ols);
    let mut cov = &xtx_inv - &xtx_inv * &proj * &xtx_inv;
    cov = (&cov + cov.transpose()) * 0.5;
    let log_pdet = log_det_chol(&llt_chol) - log_det_chol(&chol) - log_det_chol(&m_chol);
    Ok(ConstrainedGaussianDense { mean, cov, log_pdet, constraint: l.clone() })
}

/// Cholesky that also rejects numerically zero pivots.
fn checked_cholesky(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let c = m.clone().cholesky()?;
    let diag = c.l_dirty().diagonal();
    let top = diag.iter().fold(0.0f64, |a, v| a.max(*v));
    // Pivots below 1e-7 of the largest mean a condition number past about 1e14.
    (diag.iter().all(|&v| v > 1e-7 * top) && top > 0.0).then_some(c)
}

fn log_det_chol(c: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// The one-hot, sum-to-zero factor; off-diagonal covariance is never formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedGaussianFast {
    /// `diag(XᵀX)`.
    pub d: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    sum_ln_u: f64,
    ln_sum_u: f64,
}

impl ConstrainedGaussianFast {
    pub fn n_levels(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdet(&self) -> f64 {
        self.log_pdet_with(PseudoDetFormula::Consistent)
    }

    pub fn log_pdet_with(&self, formula: PseudoDetFormula) -> f64 {
        let printed = self.sum_ln_u - self.ln_sum_u;
        match formula {
            PseudoDetFormula::Consistent => (self.n_levels() as f64).ln() + printed,
            PseudoDetFormula::AsPrinted => printed,
        }
    }
}

/// Fast-path factor from level counts `d` and `Xᵀv`.
pub fn update_fast(d: &[f64], xtv: &[f64]) -> Result<ConstrainedGaussianFast> {
    if d.len() != xtv.len() {
        return Err(Error::Numerical(format!("length mismatch: d {} vs Xᵀv {}", d.len(), xtv.len())));
    }
    if d.is_empty() {
        return Err(Error::Numerical("fixed-effect factor has no levels".into()));
    }
    if let Some(j) = d.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Data(format!("fixed-effect level {j} is empty (XᵀX diagonal is {})", d[j])));
    }
    // The scalar sums run sequentially so the result does not depend on the thread count.
    let (mut sum_u, mut sum_ols, mut sum_ln_u) = (0.0, 0.0, 0.0);
    for (dj, xj) in d.iter().zip(xtv) {
        let u = 1.0 / dj;
        sum_u += u;
        sum_ols += u * xj;
        sum_ln_u += u.ln();
    }
    let shift = sum_ols / sum_u;
    let pairs = par::map_range(d.len(), |j| {
        let u = 1.0 / d[j];
        (u * xtv[j] - u * shift, u - u * u / sum_u)
    });
    let (mean, var) = pairs.into_iter().unzip();
    Ok(ConstrainedGaussianFast { d: d.to_vec(), mean, var, sum_ln_u, ln_sum_u: sum_u.ln() })
}

/// `(E[x_iᵀγ], Var[x_iᵀγ])` for a row in level `j`.
pub fn fe_row_moments(fast: &ConstrainedGaussianFast, j: usize) -> Result<(f64, f64)> {
    match (fast.mean.get(j), fast.var.get(j)) {
        (Some(&m), Some(&v)) => Ok((m, v)),
        _ => Err(Error::Numerical(format!("fixed-effect level {j} out of range ({} levels)", fast.n_levels()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eigen_log_pdet(cov: &DMatrix<f64>) -> f64 {
        let eig = cov.clone().symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
        eig.eigenvalues.iter().filter(|&&v| v > 1e-10 * top).map(|v| v.ln()).sum()
    }

    fn ones(p: usize) -> DMatrix<f64> {
        DMatrix::from_element(1, p, 1.0)
    }

    #[test]
    fn dense_identity_design() {
        let g = update_dense(&DMatrix::identity(2, 2), &DVector::from_vec(vec![3.0, -1.0]), &ones(2)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!((&g.cov - expected).abs().max() < 1e-14);
        assert!(g.log_pdet.abs() < 1e-14);
        assert!(eigen_log_pdet(&g.cov).abs() < 1e-12);
        assert!((&g.constraint * &g.mean)[0].abs() < 1e-12);
        assert!((&g.cov * g.constraint.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn dense_scaled_design() {
        let xtx = DMatrix::from_diagonal_element(2, 2, 2.0);
        let g = update_dense(&xtx, &DVector::zeros(2), &ones(2)).unwrap();
        assert!((g.log_pdet + 2f64.ln()).abs() < 1e-14);
        assert!((eigen_log_pdet(&g.cov) - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(g.mean, DVector::zeros(2));
    }

    #[test]
    fn dense_errors() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(update_dense(&singular, &DVector::zeros(2), &ones(2)).is_err());
        let rank_def = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(update_dense(&DMatrix::identity(2, 2), &DVector::zeros(2), &rank_def).is_err());
    }

    #[test]
    fn fast_examples() {
        let f = update_fast(&[2.0, 2.0], &[4.0, 6.0]).unwrap();
        assert!((f.mean[0] + 0.5).abs() < 1e-15 && (f.mean[1] - 0.5).abs() < 1e-15);
        assert!((f.var[0] - 0.25).abs() < 1e-15 && (f.var[1] - 0.25).abs() < 1e-15);
        assert_eq!(fe_row_moments(&f, 0).unwrap(), (-0.5, 0.25));
        assert!(fe_row_moments(&f, 2).is_err());

        let f = update_fast(&[3.0; 4], &[6.0; 4]).unwrap();
        assert!(f.mean.iter().all(|m| m.abs() < 1e-15));

        let f = update_fast(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(f.log_pdet().abs() < 1e-15);
        assert!((f.log_pdet_with(PseudoDetFormula::AsPrinted) + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fast_rejects_empty_level() {
        let e = update_fast(&[1.0, 0.0, 2.0], &[0.0; 3]).unwrap_err();
        assert!(e.to_string().contains("level 1"), "{e}");
    }

    #[test]
    fn variance_below_inverse_count() {
        let d = [1.0, 4.0, 9.0, 2.5];
        let f = update_fast(&d, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        for (v, dj) in f.var.iter().zip(&d) {
            assert!(*v >= 0.0 && *v < 1.0 / dj);
        }
    }

    #[test]
    fn fast_matches_dense_on_random_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let p = rng.random_range(2..=50);
            let n = rng.random_range(p..=500);
            // Every level gets at least one row.
            let levels: Vec<usize> = (0..n).map(|i| if i < p { i } else { rng.random_range(0..p) }).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut d = vec![0.0; p];
            let mut xtv = vec![0.0; p];
            for (&l, &vi) in levels.iter().zip(&v) {
                d[l] += 1.0;
                xtv[l] += vi;
            }
            let fast = update_fast(&d, &xtv).unwrap();
            let dense = update_dense(
                &DMatrix::from_diagonal(&DVector::from_vec(d.clone())),
                &DVector::from_vec(xtv.clone()),
                &ones(p),
            )
            .unwrap();
            for j in 0..p {
                assert!((fast.mean[j] - dense.mean[j]).abs() < 1e-10);
                assert!((fast.var[j] - dense.cov[(j, j)]).abs() < 1e-10);
            }
            assert!(fast.mean.iter().sum::<f64>().abs() < 1e-12);
            let eig = eigen_log_pdet(&dense.cov);
            assert!((fast.log_pdet() - eig).abs() < 1e-8);
            assert!((dense.log_pdet - eig).abs() < 1e-8);
            let gap = fast.log_pdet() - fast.log_pdet_with(PseudoDetFormula::AsPrinted);
            assert!((gap - (p as f64).ln()).abs() < 1e-12);
        }
    }
}
