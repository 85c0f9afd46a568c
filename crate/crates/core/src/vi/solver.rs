use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::elbo;
use super::state::{col, inverse_pd, FitStats, GammaFactor, GaussianFactor, InverseWishart, ReFactor, VariationalState};
use crate::constrained::{update_fast, PseudoDetFormula};
use crate::design::DesignSet;
use crate::error::{Error, Result};
use crate::par;

/// `ν = d + nu_offset`, `Φ = phi_scale · I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub nu_offset: f64,
    pub phi_scale: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { nu_offset: 1.0, phi_scale: 1.0 }
    }
}

impl PriorSpec {
    pub fn build(&self, d: usize) -> Result<InverseWishart> {
        if !(self.phi_scale > 0.0) {
            return Err(Error::Config(format!("prior scale must be positive, got {}", self.phi_scale)));
        }
        InverseWishart::new(d as f64 + self.nu_offset, DMatrix::identity(d, d) * self.phi_scale)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    /// Relative change in the ELBO between sweeps.
    #[default]
    Elbo,
    /// Sup-norm change of every variational mean between sweeps.
    Parameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub elbo_rel_tol: f64,
    pub param_tol: f64,
    pub convergence: Convergence,
    pub damping: bool,
    pub max_halvings: u32,
    /// ELBO drops smaller than this are treated as rounding.
    pub decrease_tol: f64,
    pub prior: PriorSpec,
    /// Per-term priors keyed by the term as written, e.g. `(1 | state)`.
    pub prior_overrides: BTreeMap<String, PriorSpec>,
    pub pseudo_det: PseudoDetFormula,
    /// Consecutive sweeps with rejected updates before giving up.
    pub max_stalled_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 500,
            elbo_rel_tol: 1e-8,
            param_tol: 1e-6,
            convergence: Convergence::Elbo,
            damping: true,
            max_halvings: 10,
            decrease_tol: 1e-9,
            prior: PriorSpec::default(),
            prior_overrides: BTreeMap::new(),
            pseudo_det: PseudoDetFormula::Consistent,
            max_stalled_sweeps: 5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.elbo_rel_tol > 0.0) || !(self.param_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.decrease_tol >= 0.0) {
            return Err(Error::Config("decrease_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-row Poisson rates in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonWeights {
    pub log_w: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Gamma(usize),
    Beta,
    Alpha(usize),
    Sigma(usize),
}

/// What happened to one block update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Damped(u32),
    Rejected,
}

#[derive(Debug, Clone, Default)]
struct RowTerms {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl RowTerms {
    fn from_pairs(pairs: Vec<(f64, f64)>) -> Self {
        let (mean, var) = pairs.into_iter().unzip();
        RowTerms { mean, var }
    }
}

fn beta_rows(designs: &DesignSet, beta: &GaussianFactor) -> RowTerms {
    let x = &designs.x;
    if x.n_cols() == 0 {
        return RowTerms { mean: vec![0.0; x.n_rows()], var: vec![0.0; x.n_rows()] };
    }
    RowTerms::from_pairs(par::map_range(x.n_rows(), |r| (x.row_dot(r, &beta.mean), x.row_quad(r, &beta.cov))))
}

fn alpha_rows(designs: &DesignSet, j: usize, alpha: &ReFactor) -> RowTerms {
    let block = &designs.re_blocks[j];
    let d = block.d;
    RowTerms::from_pairs(par::map_range(block.n_rows(), |r| {
        let l = block.levels[r] as usize;
        let z = block.slots(r);
        let mu = alpha.level_mean(l);
        let cov = &alpha.covs[l];
        let mut m = 0.0;
        let mut v = 0.0;
        for a in 0..d {
            m += z[a] * mu[a];
            for b in 0..d {
                v += z[a] * cov[(a, b)] * z[b];
            }
        }
        (m, v)
    }))
}

fn gamma_rows(designs: &DesignSet, k: usize, gamma: &GammaFactor) -> RowTerms {
    let levels = &designs.fe_blocks[k].levels;
    RowTerms::from_pairs(levels.iter().map(|&l| (gamma.fast.mean[l as usize], gamma.fast.var[l as usize])).collect())
}

/// Initial state: zero means, `10⁻² I` covariances, `q(Σ)` at the prior, and a first
/// fast-path pass for every `v_fe` factor with unit weights.
pub fn initial_state(designs: &DesignSet, y: &[f64], config: &SolverConfig) -> Result<VariationalState> {
    let p = designs.x.n_cols();
    let beta = GaussianFactor { mean: vec![0.0; p], cov: DMatrix::identity(p, p) * 1e-2 };
    let mut alphas = Vec::new();
    let mut priors = Vec::new();
    for (block, lay) in designs.re_blocks.iter().zip(&designs.layout.re) {
        alphas.push(ReFactor {
            d: block.d,
            mean: vec![0.0; block.g * block.d],
            covs: vec![DMatrix::identity(block.d, block.d) * 1e-2; block.g],
        });
        let key = lay.term.to_string();
        let spec = config.prior_overrides.get(&key).unwrap_or(&config.prior);
        priors.push(spec.build(block.d)?);
    }
    let gammas = designs
        .fe_blocks
        .iter()
        .map(|fe| {
            let surrogate_d = fe.counts();
            let mut xtv = vec![0.0; fe.n_levels];
            for (r, &l) in fe.levels.iter().enumerate() {
                xtv[l as usize] += y[r] - 1.0;
            }
            let fast = update_fast(&surrogate_d, &xtv)?;
            Ok(GammaFactor { surrogate_d, surrogate_xtv: xtv, fast })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VariationalState {
        beta,
        alphas,
        sigmas: priors.clone(),
        priors,
        gammas,
        elbo_trace: Vec::new(),
        stats: FitStats::default(),
    })
}

/// From-scratch log weights `ψ̄ + ½ var` for every row.
pub fn compute_weights(state: &VariationalState, designs: &DesignSet) -> Result<PoissonWeights> {
    let mut parts = vec![("beta".to_string(), beta_rows(designs, &state.beta))];
    for (j, a) in state.alphas.iter().enumerate() {
        parts.push((designs.layout.re[j].term.to_string(), alpha_rows(designs, j, a)));
    }
    for (k, g) in state.gammas.iter().enumerate() {
        parts.push((format!("v_fe({})", designs.layout.fe[k].name), gamma_rows(designs, k, g)));
    }
    let n = designs.n_rows();
    let log_w: Vec<f64> = (0..n).map(|r| parts.iter().map(|(_, t)| t.mean[r] + 0.5 * t.var[r]).sum()).collect();
    let w: Vec<f64> = log_w.iter().map(|v| v.exp()).collect();
    if let Some(r) = (0..n).find(|&r| !w[r].is_finite() || log_w[r].is_nan()) {
        let (name, _) = parts
            .iter()
            .map(|(name, t)| (name, (t.mean[r] + 0.5 * t.var[r]).abs()))
            .fold((&parts[0].0, f64::NEG_INFINITY), |best, (n, v)| if v > best.1 { (n, v) } else { best });
        return Err(Error::Numerical(format!("row {r}: weight is not finite (log weight {}; dominated by {name})", log_w[r])));
    }
    Ok(PoissonWeights { log_w, w })
}

/// A proposal in natural parameters for damped interpolation.
enum Proposal {
    Beta { p_old: DMatrix<f64>, eta_old: DVector<f64>, p_new: DMatrix<f64>, eta_new: DVector<f64>, full: GaussianFactor },
    Alpha { levels: Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>)>, full: ReFactor },
    Gamma { d_old: Vec<f64>, x_old: Vec<f64>, d_new: Vec<f64>, x_new: Vec<f64>, full: GammaFactor },
    Sigma { old: InverseWishart, full: InverseWishart },
}

fn interp_gaussian(
    p_old: &DMatrix<f64>,
    eta_old: &DVector<f64>,
    p_new: &DMatrix<f64>,
    eta_new: &DVector<f64>,
    t: f64,
) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let p = p_old * (1.0 - t) + p_new * t;
    let eta = eta_old * (1.0 - t) + eta_new * t;
    let cov = inverse_pd(&p)?;
    let mean = &cov * eta;
    Some((mean.iter().copied().collect(), cov))
}

/// Coordinate-ascent driver holding the state and cached per-row quantities.
pub struct Solver<'a> {
    designs: &'a DesignSet,
    y: &'a [f64],
    config: SolverConfig,
    state: VariationalState,
    re_rows: Vec<Vec<Vec<u32>>>,
    fe_rows: Vec<Vec<Vec<u32>>>,
    /// Row terms per block: β, then α_j, then γ_k.
    rows: Vec<RowTerms>,
    psi_mean: Vec<f64>,
    psi_var: Vec<f64>,
    w: Vec<f64>,
    /// Non-Poisson ELBO pieces: β, then each (α_j, Σ_j), then each γ_k.
    terms: Vec<f64>,
    poisson_const: f64,
    elbo: f64,
}

impl<'a> Solver<'a> {
    pub fn new(designs: &'a DesignSet, y: &'a [f64], config: SolverConfig) -> Result<Self> {
        let state = initial_state(designs, y, &config)?;
        Self::from_state(designs, y, config, state)
    }

    /// Resumes from an existing state (trace and stats are kept).
    pub fn from_state(designs: &'a DesignSet, y: &'a [f64], config: SolverConfig, state: VariationalState) -> Result<Self> {
        config.validate()?;
        let n = designs.n_rows();
        if y.len() != n {
            return Err(Error::Design(format!("response has {} rows but the design has {n}", y.len())));
        }
        if let Some(r) = y.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Data(format!("row {r}: response {} is not a non-negative count", y[r])));
        }
        check_shapes(designs, &state)?;
        let re_rows = designs.re_blocks.iter().map(|b| b.rows_by_level()).collect();
        let fe_rows = designs
            .fe_blocks
            .iter()
            .map(|b| {
                let mut out = vec![Vec::new(); b.n_levels];
                for (r, &l) in b.levels.iter().enumerate() {
                    out[l as usize].push(r as u32);
                }
                out
            })
            .collect();
        let mut rows = vec![beta_rows(designs, &state.beta)];
        for (j, a) in state.alphas.iter().enumerate() {
            rows.push(alpha_rows(designs, j, a));
        }
        for (k, g) in state.gammas.iter().enumerate() {
            rows.push(gamma_rows(designs, k, g));
        }
        let weights = compute_weights(&state, designs)?;
        let mut psi_mean = vec![0.0; n];
        let mut psi_var = vec![0.0; n];
        for t in &rows {
            for r in 0..n {
                psi_mean[r] += t.mean[r];
                psi_var[r] += t.var[r];
            }
        }
        let mut solver = Solver {
            designs,
            y,
            config,
            state,
            re_rows,
            fe_rows,
            rows,
            psi_mean,
            psi_var,
            w: weights.w,
            terms: Vec::new(),
            poisson_const: elbo::poisson_constant(y),
            elbo: 0.0,
        };
        solver.terms = solver.all_terms()?;
        solver.elbo = solver.total_elbo(&solver.psi_mean, &solver.w, &solver.terms);
        if !solver.elbo.is_finite() {
            return Err(Error::Numerical(format!("initial ELBO is not finite ({})", solver.elbo)));
        }
        if solver.state.elbo_trace.is_empty() {
            solver.state.elbo_trace.push(solver.elbo);
        }
        Ok(solver)
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn into_state(self) -> VariationalState {
        self.state
    }

    pub fn elbo(&self) -> f64 {
        self.elbo
    }

    /// Cached weights, kept current by incremental updates.
    pub fn weights(&self) -> PoissonWeights {
        let log_w = self.psi_mean.iter().zip(&self.psi_var).map(|(m, v)| m + 0.5 * v).collect();
        PoissonWeights { log_w, w: self.w.clone() }
    }

    fn n_re(&self) -> usize {
        self.state.alphas.len()
    }

    fn all_terms(&self) -> Result<Vec<f64>> {
        let mut t = vec![elbo::beta_term(&self.state.beta)?];
        for j in 0..self.n_re() {
            t.push(elbo::re_term(&self.state.alphas[j], &self.state.sigmas[j], &self.state.priors[j])?);
        }
        for g in &self.state.gammas {
            t.push(elbo::gamma_term(g, self.config.pseudo_det));
        }
        Ok(t)
    }

    fn total_elbo(&self, psi_mean: &[f64], w: &[f64], terms: &[f64]) -> f64 {
        self.poisson_const + elbo::poisson_term(self.y, psi_mean, w) + terms.iter().sum::<f64>()
    }

    /// Full ELBO recomputed from the state (no caches).
    pub fn elbo_from_scratch(&self) -> Result<f64> {
        let weights = compute_weights(&self.state, self.designs)?;
        let n = self.designs.n_rows();
        let mut psi_mean = vec![0.0; n];
        let mut add = |t: RowTerms| psi_mean.iter_mut().zip(&t.mean).for_each(|(p, m)| *p += m);
        add(beta_rows(self.designs, &self.state.beta));
        for (j, a) in self.state.alphas.iter().enumerate() {
            add(alpha_rows(self.designs, j, a));
        }
        for (k, g) in self.state.gammas.iter().enumerate() {
            add(gamma_rows(self.designs, k, g));
        }
        Ok(self.total_elbo(&psi_mean, &weights.w, &self.all_terms()?))
    }

    fn row_slot(&self, block: Block) -> Option<usize> {
        match block {
            Block::Beta => Some(0),
            Block::Alpha(j) => Some(1 + j),
            Block::Gamma(k) => Some(1 + self.n_re() + k),
            Block::Sigma(_) => None,
        }
    }

    fn term_slot(&self, block: Block) -> usize {
        match block {
            Block::Beta => 0,
            Block::Alpha(j) | Block::Sigma(j) => 1 + j,
            Block::Gamma(k) => 1 + self.n_re() + k,
        }
    }

    fn propose(&self, block: Block) -> Result<Proposal> {
        let y = self.y;
        let w = &self.w;
        match block {
            Block::Beta => {
                let x = &self.designs.x;
                let h = x.weighted_gram(w);
                let resid: Vec<f64> = y.iter().zip(w).map(|(a, b)| a - b).collect();
                let grad = col(&x.t_mul_vec(&resid));
                let cov = inverse_pd(&h).ok_or_else(|| {
                    Error::Numerical(
                        "XᵀWX is singular; the unregularized terms are probably collinear (run check-formula for a rank report)"
                            .into(),
                    )
                })?;
                let mean_old = col(&self.state.beta.mean);
                let mean = &mean_old + &cov * grad;
                let p_old = inverse_pd(&self.state.beta.cov)
                    .ok_or_else(|| Error::Numerical("β covariance lost positive definiteness".into()))?;
                let eta_old = &p_old * &mean_old;
                let eta_new = &h * &mean;
                let full = GaussianFactor { mean: mean.iter().copied().collect(), cov };
                Ok(Proposal::Beta { p_old, eta_old, p_new: h, eta_new, full })
            }
            Block::Alpha(j) => {
                let block = &self.designs.re_blocks[j];
                let alpha = &self.state.alphas[j];
                let s = self.state.sigmas[j].expected_inverse()?;
                let d = block.d;
                let rows_by_level = &self.re_rows[j];
                let levels = par::map_range(block.g, |l| {
                    let mut h = s.clone();
                    let mu_old = col(alpha.level_mean(l));
                    let mut g = -(&s * &mu_old);
                    for &r in &rows_by_level[l] {
                        let r = r as usize;
                        let z = block.slots(r);
                        let (wr, res) = (w[r], y[r] - w[r]);
                        for a in 0..d {
                            g[a] += z[a] * res;
                            for b in 0..d {
                                h[(a, b)] += wr * z[a] * z[b];
                            }
                        }
                    }
                    let cov = inverse_pd(&h)?;
                    let mean = &mu_old + &cov * g;
                    let p_old = inverse_pd(&alpha.covs[l])?;
                    let eta_old = &p_old * &mu_old;
                    let eta_new = &h * &mean;
                    Some((p_old, eta_old, h, eta_new, mean, cov))
                });
                let mut full = ReFactor { d, mean: Vec::with_capacity(block.g * d), covs: Vec::with_capacity(block.g) };
                let mut nat = Vec::with_capacity(block.g);
                for (l, lv) in levels.into_iter().enumerate() {
                    let (p_old, eta_old, h, eta_new, mean, cov) = lv.ok_or_else(|| {
                        Error::Numerical(format!(
                            "{} level `{}`: precision block is not positive definite",
                            self.designs.layout.re[j].term, block.level_names[l]
                        ))
                    })?;
                    full.mean.extend(mean.iter());
                    full.covs.push(cov);
                    nat.push((p_old, eta_old, h, eta_new));
                }
                Ok(Proposal::Alpha { levels: nat, full })
            }
            Block::Gamma(k) => {
                let gamma = &self.state.gammas[k];
                let rows_by_level = &self.fe_rows[k];
                let pairs = par::map_range(rows_by_level.len(), |l| {
                    let mut dl = 0.0;
                    let mut res = 0.0;
                    for &r in &rows_by_level[l] {
                        dl += w[r as usize];
                        res += y[r as usize] - w[r as usize];
                    }
                    (dl, dl * gamma.fast.mean[l] + res)
                });
                let (d_new, x_new): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let fast = update_fast(&d_new, &x_new).map_err(|e| match e {
                    Error::Data(m) => Error::Data(format!("v_fe({}): {m}", self.designs.layout.fe[k].name)),
                    other => other,
                })?;
                let full = GammaFactor { surrogate_d: d_new.clone(), surrogate_xtv: x_new.clone(), fast };
                Ok(Proposal::Gamma {
                    d_old: gamma.surrogate_d.clone(),
                    x_old: gamma.surrogate_xtv.clone(),
                    d_new,
                    x_new,
                    full,
                })
            }
            Block::Sigma(j) => {
                let alpha = &self.state.alphas[j];
                let prior = &self.state.priors[j];
                let mut phi = prior.phi.clone();
                for (l, cov) in alpha.covs.iter().enumerate() {
                    let m = col(alpha.level_mean(l));
                    phi += &m * m.transpose() + cov;
                }
                phi = (&phi + phi.transpose()) * 0.5;
                let full = InverseWishart { nu: prior.nu + alpha.n_levels() as f64, phi };
                Ok(Proposal::Sigma { old: self.state.sigmas[j].clone(), full })
            }
        }
    }

    /// Installs the proposal at step `t` into a copy of the block; `None` if it is not valid.
    fn candidate(&self, proposal: &Proposal, t: f64) -> Result<Option<Candidate>> {
        Ok(match proposal {
            Proposal::Beta { full, .. } if t == 1.0 => Some(Candidate::Beta(full.clone())),
            Proposal::Beta { p_old, eta_old, p_new, eta_new, .. } => {
                interp_gaussian(p_old, eta_old, p_new, eta_new, t).map(|(mean, cov)| Candidate::Beta(GaussianFactor { mean, cov }))
            }
            Proposal::Alpha { full, .. } if t == 1.0 => Some(Candidate::Alpha(full.clone())),
            Proposal::Alpha { levels, full } => {
                let mut out = ReFactor { d: full.d, mean: Vec::with_capacity(full.mean.len()), covs: Vec::new() };
                for (p_old, eta_old, p_new, eta_new) in levels {
                    match interp_gaussian(p_old, eta_old, p_new, eta_new, t) {
                        Some((mean, cov)) => {
                            out.mean.extend(mean);
                            out.covs.push(cov);
                        }
                        None => return Ok(None),
                    }
                }
                Some(Candidate::Alpha(out))
            }
            Proposal::Gamma { full, .. } if t == 1.0 => Some(Candidate::Gamma(full.clone())),
            Proposal::Gamma { d_old, x_old, d_new, x_new, .. } => {
                let d: Vec<f64> = d_old.iter().zip(d_new).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let x: Vec<f64> = x_old.iter().zip(x_new).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let fast = update_fast(&d, &x)?;
                Some(Candidate::Gamma(GammaFactor { surrogate_d: d, surrogate_xtv: x, fast }))
            }
            Proposal::Sigma { full, .. } if t == 1.0 => Some(Candidate::Sigma(full.clone())),
            Proposal::Sigma { old, full } => {
                let phi = &old.phi * (1.0 - t) + &full.phi * t;
                Some(Candidate::Sigma(InverseWishart { nu: (1.0 - t) * old.nu + t * full.nu, phi }))
            }
        })
    }

    /// Evaluates a candidate without committing it.
    fn evaluate(&self, block: Block, cand: &Candidate) -> Result<Trial> {
        let new_rows = match (block, cand) {
            (Block::Beta, Candidate::Beta(b)) => Some(beta_rows(self.designs, b)),
            (Block::Alpha(j), Candidate::Alpha(a)) => Some(alpha_rows(self.designs, j, a)),
            (Block::Gamma(k), Candidate::Gamma(g)) => Some(gamma_rows(self.designs, k, g)),
            _ => None,
        };
        let term = match (block, cand) {
            (Block::Beta, Candidate::Beta(b)) => elbo::beta_term(b)?,
            (Block::Alpha(j), Candidate::Alpha(a)) => elbo::re_term(a, &self.state.sigmas[j], &self.state.priors[j])?,
            (Block::Sigma(j), Candidate::Sigma(s)) => elbo::re_term(&self.state.alphas[j], s, &self.state.priors[j])?,
            (Block::Gamma(_), Candidate::Gamma(g)) => elbo::gamma_term(g, self.config.pseudo_det),
            _ => unreachable!("candidate does not match block"),
        };
        let mut terms = self.terms.clone();
        terms[self.term_slot(block)] = term;
        let (psi_mean, psi_var, w) = match (&new_rows, self.row_slot(block)) {
            (Some(new), Some(slot)) => {
                let old = &self.rows[slot];
                let upd = par::map_range(self.psi_mean.len(), |r| {
                    let m = self.psi_mean[r] - old.mean[r] + new.mean[r];
                    let v = self.psi_var[r] - old.var[r] + new.var[r];
                    (m, v, (m + 0.5 * v).exp())
                });
                let mut pm = Vec::with_capacity(upd.len());
                let mut pv = Vec::with_capacity(upd.len());
                let mut w = Vec::with_capacity(upd.len());
                for (m, v, e) in upd {
                    pm.push(m);
                    pv.push(v);
                    w.push(e);
                }
                (Some(pm), Some(pv), Some(w))
            }
            _ => (None, None, None),
        };
        let elbo = self.total_elbo(
            psi_mean.as_deref().unwrap_or(&self.psi_mean),
            w.as_deref().unwrap_or(&self.w),
            &terms,
        );
        Ok(Trial { rows: new_rows, psi_mean, psi_var, w, terms, elbo })
    }

    fn commit(&mut self, block: Block, cand: Candidate, trial: Trial) {
        match cand {
            Candidate::Beta(b) => self.state.beta = b,
            Candidate::Alpha(a) => {
                if let Block::Alpha(j) = block {
                    self.state.alphas[j] = a;
                }
            }
            Candidate::Gamma(g) => {
                if let Block::Gamma(k) = block {
                    self.state.gammas[k] = g;
                }
            }
            Candidate::Sigma(s) => {
                if let Block::Sigma(j) = block {
                    self.state.sigmas[j] = s;
                }
            }
        }
        if let (Some(rows), Some(slot)) = (trial.rows, self.row_slot(block)) {
            self.rows[slot] = rows;
        }
        if let Some(m) = trial.psi_mean {
            self.psi_mean = m;
        }
        if let Some(v) = trial.psi_var {
            self.psi_var = v;
        }
        if let Some(w) = trial.w {
            self.w = w;
        }
        self.terms = trial.terms;
        self.elbo = trial.elbo;
    }

    /// One block update with damping.
    pub fn update(&mut self, block: Block) -> Result<StepOutcome> {
        if block == Block::Beta && self.designs.x.n_cols() == 0 {
            return Ok(StepOutcome::Accepted);
        }
        let proposal = self.propose(block)?;
        let old = self.elbo;
        let mut t = 1.0;
        for halving in 0..=self.config.max_halvings {
            if let Some(cand) = self.candidate(&proposal, t)? {
                let trial = self.evaluate(block, &cand)?;
                let ok = trial.elbo.is_finite() && trial.elbo >= old - self.config.decrease_tol;
                if ok || (!self.config.damping && trial.elbo.is_finite()) {
                    self.commit(block, cand, trial);
                    return Ok(if halving == 0 { StepOutcome::Accepted } else { StepOutcome::Damped(halving) });
                }
            }
            if !self.config.damping {
                break;
            }
            t *= 0.5;
        }
        log::debug!("{block:?}: no step size increased the ELBO; keeping the previous factor");
        Ok(StepOutcome::Rejected)
    }

    pub fn update_beta(&mut self) -> Result<StepOutcome> {
        self.update(Block::Beta)
    }

    pub fn update_alpha(&mut self, j: usize) -> Result<StepOutcome> {
        self.update(Block::Alpha(j))
    }

    pub fn update_sigma(&mut self, j: usize) -> Result<StepOutcome> {
        self.update(Block::Sigma(j))
    }

    pub fn update_gamma(&mut self, k: usize) -> Result<StepOutcome> {
        self.update(Block::Gamma(k))
    }

    /// Update order: every `γ`, then `β`, then each `α_j`, then each `Σ_j`.
    pub fn sweep_order(&self) -> Vec<Block> {
        let mut order: Vec<Block> = (0..self.state.gammas.len()).map(Block::Gamma).collect();
        order.push(Block::Beta);
        order.extend((0..self.n_re()).map(Block::Alpha));
        order.extend((0..self.n_re()).map(Block::Sigma));
        order
    }

    /// One full sweep; returns the outcome of every block update.
    pub fn sweep(&mut self) -> Result<Vec<StepOutcome>> {
        let order = self.sweep_order();
        let mut out = Vec::with_capacity(order.len());
        for b in order {
            out.push(self.update(b)?);
        }
        self.state.elbo_trace.push(self.elbo);
        Ok(out)
    }

    /// Sweeps until convergence or `max_iter`.
    pub fn run(mut self) -> Result<VariationalState> {
        let start = Instant::now();
        let mut stalled = 0usize;
        let mut prev_means = self.state.all_means();
        self.state.stats.converged = false;
        for _ in 0..self.config.max_iter {
            let before = self.elbo;
            let outcomes = self.sweep()?;
            self.state.stats.iterations += 1;
            let damped = outcomes.iter().filter(|o| matches!(o, StepOutcome::Damped(_))).count();
            let rejected = outcomes.iter().filter(|o| **o == StepOutcome::Rejected).count();
            self.state.stats.damped_updates += damped;
            self.state.stats.rejected_updates += rejected;
            if damped + rejected > 0 {
                self.state.stats.damped_sweeps += 1;
                log::debug!(
                    "sweep {}: {damped} damped, {rejected} rejected updates (ELBO {:.6})",
                    self.state.stats.iterations,
                    self.elbo
                );
            }
            if rejected > 0 {
                stalled += 1;
                if stalled >= self.config.max_stalled_sweeps {
                    let tail: Vec<String> =
                        self.state.elbo_trace.iter().rev().take(10).rev().map(|v| format!("{v:.10}")).collect();
                    return Err(Error::Numerical(format!(
                        "damping exhausted in {stalled} consecutive sweeps; last ELBO values: [{}]",
                        tail.join(", ")
                    )));
                }
                continue;
            }
            stalled = 0;
            let done = match self.config.convergence {
                Convergence::Elbo => (self.elbo - before).abs() / self.elbo.abs().max(1e-300) < self.config.elbo_rel_tol,
                Convergence::Parameters => {
                    let means = self.state.all_means();
                    let delta = means.iter().zip(&prev_means).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    prev_means = means;
                    delta < self.config.param_tol
                }
            };
            if done {
                self.state.stats.converged = true;
                break;
            }
        }
        self.state.stats.wall_time_secs += start.elapsed().as_secs_f64();
        if !self.state.stats.converged {
            log::warn!(
                "stopped after {} sweeps without meeting the convergence tolerance",
                self.state.stats.iterations
            );
        }
        Ok(self.state)
    }
}

enum Candidate {
    Beta(GaussianFactor),
    Alpha(ReFactor),
    Gamma(GammaFactor),
    Sigma(InverseWishart),
}

struct Trial {
    rows: Option<RowTerms>,
    psi_mean: Option<Vec<f64>>,
    psi_var: Option<Vec<f64>>,
    w: Option<Vec<f64>>,
    terms: Vec<f64>,
    elbo: f64,
}

fn check_shapes(designs: &DesignSet, state: &VariationalState) -> Result<()> {
    let bad = |what: &str| Err(Error::Design(format!("state does not match the design: {what}")));
    if state.beta.mean.len() != designs.x.n_cols() {
        return bad("β length");
    }
    if state.alphas.len() != designs.re_blocks.len() || state.sigmas.len() != state.alphas.len() {
        return bad("number of random-effect terms");
    }
    for (a, b) in state.alphas.iter().zip(&designs.re_blocks) {
        if a.d != b.d || a.covs.len() != b.g || a.mean.len() != b.g * b.d {
            return bad("random-effect block size");
        }
    }
    if state.gammas.len() != designs.fe_blocks.len() {
        return bad("number of v_fe terms");
    }
    for (g, b) in state.gammas.iter().zip(&designs.fe_blocks) {
        if g.fast.n_levels() != b.n_levels {
            return bad("v_fe levels");
        }
    }
    Ok(())
}

/// Fits the model from the default initialization.
pub fn fit(designs: &DesignSet, y: &[f64], config: &SolverConfig) -> Result<VariationalState> {
    Solver::new(designs, y, config.clone())?.run()
}
