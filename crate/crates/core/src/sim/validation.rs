//! Sample → fit → post-stratify → MAE, repeated over replications.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::{Superpoll, TruthKind};
use crate::baselines::{fit_estimator, Estimator, SurveyInput};
use crate::data::write_delimited;
use crate::error::{Error, Result};
use crate::formula::parse_formula;
use crate::model::FitOptions;
use crate::par;
use crate::poststrat::{aggregate, mae, QoiReport, Quantity};

/// Default model for the synthetic data: additive question structure, joint
/// interactions, and contextual slopes.
pub const DEFAULT_FORMULA: &str = "response ~ choice + (1 | state : choice) + (1 | division : choice) \
    + (1 | race : choice) + (1 | educ : choice) + (1 | age : choice) + (1 | gender : choice) \
    + (1 | state : party) + (1 | state : policy) + (0 + demvote + evang | choice) + v_fe(case_id)";

/// The default model plus lagged copartisanship as an alternative-specific covariate.
pub const COPART_FORMULA: &str = "response ~ choice + lag_copart + (1 | state : choice) + (1 | division : choice) \
    + (1 | race : choice) + (1 | educ : choice) + (1 | age : choice) + (1 | gender : choice) \
    + (1 | state : party) + (1 | state : policy) + (0 + demvote + evang | choice) + v_fe(case_id)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fit { estimator: Estimator, formula: String },
    /// Reports the truth itself; useful as a plumbing check.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub label: String,
    pub method: Method,
}

impl EstimatorSpec {
    pub fn fit(label: &str, estimator: Estimator, formula: &str) -> Self {
        EstimatorSpec { label: label.into(), method: Method::Fit { estimator, formula: formula.into() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPlan {
    pub estimators: Vec<EstimatorSpec>,
    /// Label of the estimator percentage changes are computed against.
    pub reference: String,
    pub truth: TruthKind,
    pub fit: FitOptions,
    pub variance_adjusted: bool,
    /// Replications run concurrently on at most this many threads; 0 uses the global pool.
    pub jobs: usize,
}

impl ValidationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::Config("validation needs at least one estimator".into()));
        }
        if !self.estimators.iter().any(|e| e.label == self.reference) {
            return Err(Error::Config(format!("reference estimator `{}` is not in the plan", self.reference)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.estimators {
            if !seen.insert(&e.label) {
                return Err(Error::Config(format!("duplicate estimator label `{}`", e.label)));
            }
            if let Method::Fit { formula, .. } = &e.method {
                parse_formula(formula)?;
            }
        }
        self.fit.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaeRecord {
    pub replication: usize,
    pub estimator: String,
    pub quantity: String,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub replication: usize,
    pub estimator: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub quantity: String,
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    /// `(median − reference median) / reference median · 100`.
    pub pct_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub records: Vec<MaeRecord>,
    pub failures: Vec<Failure>,
    pub summary: Vec<SummaryRow>,
}

/// Fits one method on one sample and returns its geography report.
pub fn estimate(sp: &Superpoll, method: &Method, survey: &crate::data::SurveyTable, plan: &ValidationPlan) -> Result<QoiReport> {
    match method {
        Method::Truth => Ok(sp.truth(plan.truth).clone()),
        Method::Fit { estimator, formula } => {
            let ast = parse_formula(formula)?;
            let input = SurveyInput { survey, categories: &sp.categories, alts: &sp.alts };
            let fitted = fit_estimator(*estimator, &ast, input, &plan.fit)?;
            let cells = fitted.predict(&sp.frame, &sp.categories, &sp.alts, plan.variance_adjusted)?;
            aggregate(&cells, &sp.categories)
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every replication and summarizes the MAE per estimator and quantity.
pub fn run_validation(sp: &Superpoll, plan: &ValidationPlan) -> Result<ValidationReport> {
    plan.validate()?;
    let quantities = Quantity::all(&sp.categories);
    let truth = sp.truth(plan.truth);
    let reps = sp.spec.replications;
    let per_rep = par::with_jobs(plan.jobs, || {
        par::map_range(reps, |rep| {
            let survey = sp.sample(rep as u64);
            let mut records = Vec::new();
            let mut failures = Vec::new();
            for e in &plan.estimators {
                let result = estimate(sp, &e.method, &survey, plan).and_then(|report| {
                    quantities
                        .iter()
                        .map(|q| Ok(MaeRecord { replication: rep, estimator: e.label.clone(), quantity: q.to_string(), mae: mae(&report, truth, q)? }))
                        .collect::<Result<Vec<_>>>()
                });
                match result {
                    Ok(r) => records.extend(r),
                    Err(err) => {
                        log::warn!("replication {rep}, estimator {}: {err}", e.label);
                        failures.push(Failure { replication: rep, estimator: e.label.clone(), message: err.to_string() });
                    }
                }
            }
            (records, failures)
        })
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_rep {
        records.extend(r);
        failures.extend(f);
    }
    if !failures.is_empty() {
        log::warn!("{} estimator fits failed and were excluded", failures.len());
    }

    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.estimator.clone(), r.quantity.clone())).or_default().push(r.mae);
    }
    let medians: BTreeMap<(String, String), f64> =
        groups.iter().map(|(k, v)| (k.clone(), median(&mut v.clone()))).collect();
    let mut summary = Vec::new();
    for e in &plan.estimators {
        for q in &quantities {
            let key = (e.label.clone(), q.to_string());
            let Some(vals) = groups.get(&key) else { continue };
            let med = medians[&key];
            let reference = medians.get(&(plan.reference.clone(), q.to_string())).copied();
            summary.push(SummaryRow {
                estimator: e.label.clone(),
                quantity: q.to_string(),
                n: vals.len(),
                median: med,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                pct_change: reference.map_or(f64::NAN, |r| (med - r) / r * 100.0),
            });
        }
    }
    Ok(ValidationReport { records, failures, summary })
}

impl ValidationReport {
    /// Per-replication MAE for one estimator and quantity, in replication order.
    pub fn series(&self, estimator: &str, quantity: &Quantity) -> BTreeMap<usize, f64> {
        let q = quantity.to_string();
        self.records.iter().filter(|r| r.estimator == estimator && r.quantity == q).map(|r| (r.replication, r.mae)).collect()
    }

    /// Writes `mae.csv`, `mae_summary.csv`, and `failures.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| vec![r.replication.to_string(), r.estimator.clone(), r.quantity.clone(), r.mae.to_string()])
            .collect();
        write_delimited(&dir.join("mae.csv"), &["replication", "estimator", "quantity", "mae"], &rows)?;
        let rows: Vec<Vec<String>> = self
            .summary
            .iter()
            .map(|s| {
                vec![
                    s.estimator.clone(),
                    s.quantity.clone(),
                    s.n.to_string(),
                    s.median.to_string(),
                    s.mean.to_string(),
                    s.pct_change.to_string(),
                ]
            })
            .collect();
        write_delimited(
            &dir.join("mae_summary.csv"),
            &["estimator", "quantity", "n", "median", "mean", "pct_change"],
            &rows,
        )?;
        let rows: Vec<Vec<String>> = self
            .failures
            .iter()
            .map(|f| vec![f.replication.to_string(), f.estimator.clone(), f.message.clone()])
            .collect();
        write_delimited(&dir.join("failures.csv"), &["replication", "estimator", "message"], &rows)
    }
}
