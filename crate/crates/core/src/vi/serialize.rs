//! Versioned JSON form of a fitted state. Covariances are stored as packed lower
//! triangles (row-major, `i ≥ j`).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::state::{FitStats, GammaFactor, GaussianFactor, InverseWishart, ReFactor, VariationalState};
use crate::constrained::ConstrainedGaussianFast;
use crate::error::{Error, Result};

pub const STATE_VERSION: u32 = 1;

fn pack(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn unpack(v: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if v.len() != n * (n + 1) / 2 {
        return Err(Error::Data(format!("packed matrix has {} entries, expected {} for {n}x{n}", v.len(), n * (n + 1) / 2)));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GaussianDoc {
    mean: Vec<f64>,
    cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReDoc {
    d: usize,
    mean: Vec<f64>,
    covs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IwDoc {
    nu: f64,
    d: usize,
    phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GammaDoc {
    surrogate_d: Vec<f64>,
    surrogate_xtv: Vec<f64>,
    fast: ConstrainedGaussianFast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDocument {
    pub version: u32,
    beta: GaussianDoc,
    alphas: Vec<ReDoc>,
    sigmas: Vec<IwDoc>,
    priors: Vec<IwDoc>,
    gammas: Vec<GammaDoc>,
    pub elbo_trace: Vec<f64>,
    pub stats: FitStats,
}

fn iw_doc(s: &InverseWishart) -> IwDoc {
    IwDoc { nu: s.nu, d: s.dim(), phi: pack(&s.phi) }
}

fn iw_from(doc: &IwDoc) -> Result<InverseWishart> {
    Ok(InverseWishart { nu: doc.nu, phi: unpack(&doc.phi, doc.d)? })
}

impl From<&VariationalState> for StateDocument {
    fn from(s: &VariationalState) -> Self {
        StateDocument {
            version: STATE_VERSION,
            beta: GaussianDoc { mean: s.beta.mean.clone(), cov: pack(&s.beta.cov) },
            alphas: s
                .alphas
                .iter()
                .map(|a| ReDoc { d: a.d, mean: a.mean.clone(), covs: a.covs.iter().map(pack).collect() })
                .collect(),
            sigmas: s.sigmas.iter().map(iw_doc).collect(),
            priors: s.priors.iter().map(iw_doc).collect(),
            gammas: s
                .gammas
                .iter()
                .map(|g| GammaDoc {
                    surrogate_d: g.surrogate_d.clone(),
                    surrogate_xtv: g.surrogate_xtv.clone(),
                    fast: g.fast.clone(),
                })
                .collect(),
            elbo_trace: s.elbo_trace.clone(),
            stats: s.stats.clone(),
        }
    }
}

impl StateDocument {
    pub fn into_state(self) -> Result<VariationalState> {
        if self.version != STATE_VERSION {
            return Err(Error::Data(format!("unsupported state version {} (expected {STATE_VERSION})", self.version)));
        }
        let p = self.beta.mean.len();
        let alphas = self
            .alphas
            .iter()
            .map(|a| {
                let covs = a.covs.iter().map(|c| unpack(c, a.d)).collect::<Result<Vec<_>>>()?;
                if a.mean.len() != covs.len() * a.d {
                    return Err(Error::Data("random-effect mean length does not match its blocks".into()));
                }
                Ok(ReFactor { d: a.d, mean: a.mean.clone(), covs })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VariationalState {
            beta: GaussianFactor { mean: self.beta.mean, cov: unpack(&self.beta.cov, p)? },
            alphas,
            sigmas: self.sigmas.iter().map(iw_from).collect::<Result<_>>()?,
            priors: self.priors.iter().map(iw_from).collect::<Result<_>>()?,
            gammas: self
                .gammas
                .into_iter()
                .map(|g| GammaFactor { surrogate_d: g.surrogate_d, surrogate_xtv: g.surrogate_xtv, fast: g.fast })
                .collect(),
            elbo_trace: self.elbo_trace,
            stats: self.stats,
        })
    }
}
