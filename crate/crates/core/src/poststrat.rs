//! Cell predictions, aggregation to geographies, and the derived quantities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_delimited, CategorySet, ExpandedFrame};
use crate::error::{Error, Result};
use crate::model::FittedModel;
use crate::par;

/// Conditioning events below this probability give a missing conditional.
pub const MIN_CONDITIONING_PROB: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub cell_id: String,
    pub geography: String,
    pub probs: Vec<f64>,
    pub weight: f64,
}

/// `exp(v − max v) / Σ exp(v − max v)`.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Softmax over the `L̄` rows of every cell of an expanded frame.
pub fn softmax_cells(frame: &ExpandedFrame, lp: &[f64]) -> Result<Vec<CellPrediction>> {
    let l_bar = frame.categories.len();
    if lp.len() != frame.n_rows() {
        return Err(Error::Data(format!("{} linear predictors for {} frame rows", lp.len(), frame.n_rows())));
    }
    let mut per_cell = vec![vec![f64::NAN; l_bar]; frame.n_cells()];
    for r in 0..frame.n_rows() {
        per_cell[frame.cell_index[r] as usize][frame.category[r] as usize] = lp[r];
    }
    Ok(par::map_range(frame.n_cells(), |c| CellPrediction {
        cell_id: frame.cell_ids[c].clone(),
        geography: frame.geographies[c].clone(),
        probs: softmax(&per_cell[c]),
        weight: frame.weights[c],
    }))
}

/// Per-cell joint probabilities from a fitted model. The fixed-effect terms are left out.
pub fn predict_cells(model: &FittedModel, frame: &ExpandedFrame, variance_adjusted: bool) -> Result<Vec<CellPrediction>> {
    if model.categories != frame.categories {
        return Err(Error::Data("frame was expanded with a different category set than the model".into()));
    }
    let lp = model.linear_predictor(&frame.table, variance_adjusted)?;
    softmax_cells(frame, &lp)
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditional {
    pub target: usize,
    pub given: usize,
    /// Distribution of `target` for each level of `given`; `None` when that level has
    /// (numerically) zero probability.
    pub by_level: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeographyQoi {
    pub geography: String,
    pub joint: Vec<f64>,
    pub marginals: Vec<Vec<f64>>,
    /// Every ordered pair of distinct questions.
    pub conditionals: Vec<Conditional>,
    pub entropy: f64,
    /// `entropy / ln L̄`, in `[0, 1]`.
    pub entropy_std: f64,
    /// For each question and level, the entropy of the other questions given that level.
    pub conditional_entropy: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiReport {
    pub categories: CategorySet,
    /// Sorted by geography name.
    pub geographies: Vec<GeographyQoi>,
}

/// Derives marginals, conditionals, and entropies from one joint distribution.
pub fn qoi_from_joint(geography: &str, joint: Vec<f64>, categories: &CategorySet) -> GeographyQoi {
    let nq = categories.questions.len();
    let l_bar = categories.len();
    let mut marginals: Vec<Vec<f64>> = categories.questions.iter().map(|q| vec![0.0; q.levels.len()]).collect();
    for (c, p) in joint.iter().enumerate() {
        for (q, m) in marginals.iter_mut().enumerate() {
            m[categories.component(c, q)] += p;
        }
    }
    let mut conditionals = Vec::new();
    for given in 0..nq {
        for target in 0..nq {
            if target == given {
                continue;
            }
            let n_given = categories.questions[given].levels.len();
            let n_target = categories.questions[target].levels.len();
            let mut pair = vec![vec![0.0; n_target]; n_given];
            for (c, p) in joint.iter().enumerate() {
                pair[categories.component(c, given)][categories.component(c, target)] += p;
            }
            let by_level = pair
                .into_iter()
                .enumerate()
                .map(|(k, row)| {
                    let denom = marginals[given][k];
                    (denom >= MIN_CONDITIONING_PROB).then(|| row.iter().map(|v| v / denom).collect())
                })
                .collect();
            conditionals.push(Conditional { target, given, by_level });
        }
    }
    let h = entropy(&joint);
    let conditional_entropy = (0..nq)
        .map(|q| {
            (0..categories.questions[q].levels.len())
                .map(|k| {
                    let denom = marginals[q][k];
                    (denom >= MIN_CONDITIONING_PROB).then(|| {
                        let rest: Vec<f64> =
                            (0..l_bar).filter(|&c| categories.component(c, q) == k).map(|c| joint[c] / denom).collect();
                        entropy(&rest)
                    })
                })
                .collect()
        })
        .collect();
    let h_max = (l_bar as f64).ln();
    GeographyQoi {
        geography: geography.to_string(),
        joint,
        marginals,
        conditionals,
        entropy: h,
        entropy_std: if h_max > 0.0 { h / h_max } else { 0.0 },
        conditional_entropy,
    }
}

/// Weighted average of cell joints within each geography, then every derived quantity.
pub fn aggregate(preds: &[CellPrediction], categories: &CategorySet) -> Result<QoiReport> {
    let l_bar = categories.len();
    let mut groups: BTreeMap<&str, Vec<&CellPrediction>> = BTreeMap::new();
    for p in preds {
        if p.probs.len() != l_bar {
            return Err(Error::Data(format!("cell `{}` has {} probabilities, expected {l_bar}", p.cell_id, p.probs.len())));
        }
        groups.entry(p.geography.as_str()).or_default().push(p);
    }
    let groups: Vec<(&str, Vec<&CellPrediction>)> = groups.into_iter().collect();
    let out = par::map_slice(&groups, |(geo, cells)| {
        let total: f64 = cells.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::Data(format!("geography `{geo}` has zero total weight")));
        }
        let mut joint = vec![0.0; l_bar];
        for c in cells {
            for (j, p) in joint.iter_mut().zip(&c.probs) {
                *j += c.weight * p;
            }
        }
        joint.iter_mut().for_each(|j| *j /= total);
        Ok(qoi_from_joint(geo, joint, categories))
    });
    Ok(QoiReport { categories: categories.clone(), geographies: out.into_iter().collect::<Result<_>>()? })
}

/// A quantity compared between estimates and truth.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    Joint,
    Marginal(String),
    Conditional { target: String, given: String },
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quantity::Joint => write!(f, "joint"),
            Quantity::Marginal(q) => write!(f, "marginal[{q}]"),
            Quantity::Conditional { target, given } => write!(f, "conditional[{target}|{given}]"),
        }
    }
}

impl Quantity {
    /// Joint, every marginal, and every ordered conditional.
    pub fn all(categories: &CategorySet) -> Vec<Quantity> {
        let names: Vec<&String> = categories.questions.iter().map(|q| &q.name).collect();
        let mut out = vec![Quantity::Joint];
        out.extend(names.iter().map(|n| Quantity::Marginal((*n).clone())));
        for g in &names {
            for t in &names {
                if t != g {
                    out.push(Quantity::Conditional { target: (*t).clone(), given: (*g).clone() });
                }
            }
        }
        out
    }

    fn values(&self, geo: &GeographyQoi, categories: &CategorySet) -> Result<Vec<Option<f64>>> {
        let qi = |name: &str| {
            categories.question_index(name).ok_or_else(|| Error::Data(format!("unknown question `{name}` in quantity")))
        };
        Ok(match self {
            Quantity::Joint => geo.joint.iter().map(|v| Some(*v)).collect(),
            Quantity::Marginal(q) => geo.marginals[qi(q)?].iter().map(|v| Some(*v)).collect(),
            Quantity::Conditional { target, given } => {
                let (t, g) = (qi(target)?, qi(given)?);
                let cond = geo
                    .conditionals
                    .iter()
                    .find(|c| c.target == t && c.given == g)
                    .ok_or_else(|| Error::Data(format!("no conditional {target}|{given}")))?;
                let n_t = categories.questions[t].levels.len();
                cond.by_level
                    .iter()
                    .flat_map(|lv| match lv {
                        Some(v) => v.iter().map(|x| Some(*x)).collect::<Vec<_>>(),
                        None => vec![None; n_t],
                    })
                    .collect()
            }
        })
    }
}

/// Mean absolute error over geographies and categories. Entries missing on either
/// side are skipped.
pub fn mae(estimate: &QoiReport, truth: &QoiReport, quantity: &Quantity) -> Result<f64> {
    let est: BTreeSet<&str> = estimate.geographies.iter().map(|g| g.geography.as_str()).collect();
    let tru: BTreeSet<&str> = truth.geographies.iter().map(|g| g.geography.as_str()).collect();
    if est != tru {
        let diff: Vec<&str> = est.symmetric_difference(&tru).copied().collect();
        return Err(Error::Data(format!("geographies differ between estimate and truth: {}", diff.join(", "))));
    }
    if estimate.categories != truth.categories {
        return Err(Error::Data("estimate and truth use different category sets".into()));
    }
    let truth_by: BTreeMap<&str, &GeographyQoi> = truth.geographies.iter().map(|g| (g.geography.as_str(), g)).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for g in &estimate.geographies {
        let a = quantity.values(g, &estimate.categories)?;
        let b = quantity.values(truth_by[g.geography.as_str()], &truth.categories)?;
        for (x, y) in a.iter().zip(&b) {
            if let (Some(x), Some(y)) = (x, y) {
                sum += (x - y).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data(format!("no comparable values for {quantity}")));
    }
    Ok(sum / n as f64)
}

impl QoiReport {
    /// `(geography, quantity, category, value)` rows; missing conditionals are `NA`.
    pub fn tidy_rows(&self) -> Vec<Vec<String>> {
        let cats = &self.categories;
        let labels = cats.labels();
        let mut rows = Vec::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for g in &self.geographies {
            let geo = &g.geography;
            for (c, p) in g.joint.iter().enumerate() {
                rows.push(vec![geo.clone(), "joint".into(), labels[c].clone(), fmt(Some(*p))]);
            }
            for (q, m) in g.marginals.iter().enumerate() {
                let spec = &cats.questions[q];
                for (k, p) in m.iter().enumerate() {
                    rows.push(vec![geo.clone(), format!("marginal[{}]", spec.name), spec.levels[k].clone(), fmt(Some(*p))]);
                }
            }
            for cond in &g.conditionals {
                let (t, gv) = (&cats.questions[cond.target], &cats.questions[cond.given]);
                for (k, lv) in cond.by_level.iter().enumerate() {
                    for (j, tl) in t.levels.iter().enumerate() {
                        rows.push(vec![
                            geo.clone(),
                            format!("conditional[{}|{}]", t.name, gv.name),
                            format!("{tl}|{}", gv.levels[k]),
                            fmt(lv.as_ref().map(|v| v[j])),
                        ]);
                    }
                }
            }
            rows.push(vec![geo.clone(), "entropy".into(), String::new(), fmt(Some(g.entropy))]);
            rows.push(vec![geo.clone(), "entropy_std".into(), String::new(), fmt(Some(g.entropy_std))]);
            for (q, per_level) in g.conditional_entropy.iter().enumerate() {
                let spec = &cats.questions[q];
                for (k, h) in per_level.iter().enumerate() {
                    rows.push(vec![
                        geo.clone(),
                        format!("conditional_entropy[{}]", spec.name),
                        spec.levels[k].clone(),
                        fmt(*h),
                    ]);
                }
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_delimited(path, &["geography", "quantity", "category", "value"], &self.tidy_rows())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QuestionSpec;

    fn cats() -> CategorySet {
        CategorySet::new(vec![
            QuestionSpec::new("party", &["D", "R", "I"]).unwrap(),
            QuestionSpec::new("policy", &["yes", "no"]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert!(softmax(&[2.0; 4]).iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = softmax(&[1000.0, 1000.0 + 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let v = [0.3, -1.2, 2.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        for (a, b) in softmax(&v).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cell_entropy() {
        let two = CategorySet::new(vec![QuestionSpec::new("q", &["a", "b"]).unwrap()]).unwrap();
        let preds = vec![CellPrediction { cell_id: "c".into(), geography: "g".into(), probs: vec![0.6, 0.4], weight: 3.0 }];
        let r = aggregate(&preds, &two).unwrap();
        assert!((r.geographies[0].joint[0] - 0.6).abs() < 1e-15 && (r.geographies[0].joint[1] - 0.4).abs() < 1e-15);
        let h = -(0.6f64 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
        assert!((r.geographies[0].entropy - h).abs() < 1e-15);
        assert!((h - 0.673).abs() < 1e-3);
    }

    #[test]
    fn uniform_is_the_maximum() {
        let two_by_two = CategorySet::new(vec![
            QuestionSpec::new("a", &["x", "y"]).unwrap(),
            QuestionSpec::new("b", &["u", "v"]).unwrap(),
        ])
        .unwrap();
        let g = qoi_from_joint("g", vec![0.25; 4], &two_by_two);
        assert!((g.entropy - 4f64.ln()).abs() < 1e-15);
        assert!((g.entropy_std - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_conditionals_are_missing() {
        let c = cats();
        // No mass on party I.
        let joint = vec![0.2, 0.3, 0.1, 0.4, 0.0, 0.0];
        let g = qoi_from_joint("g", joint, &c);
        let cond = g.conditionals.iter().find(|x| x.given == 0 && x.target == 1).unwrap();
        assert!(cond.by_level[2].is_none());
        assert_eq!(g.conditional_entropy[0][2], None);
        let rows = QoiReport { categories: c, geographies: vec![g] }.tidy_rows();
        assert!(rows.iter().any(|r| r[1] == "conditional[policy|party]" && r[2] == "yes|I" && r[3] == "NA"));
    }

    #[test]
    fn weighted_aggregation() {
        let c = cats();
        let mk = |geo: &str, probs: Vec<f64>, weight: f64| CellPrediction { cell_id: "x".into(), geography: geo.into(), probs, weight };
        let preds = vec![
            mk("b", vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1.0),
            mk("b", vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 3.0),
            mk("a", vec![1.0 / 6.0; 6], 2.0),
        ];
        let r = aggregate(&preds, &c).unwrap();
        assert_eq!(r.geographies[0].geography, "a");
        let b = &r.geographies[1];
        assert_eq!(b.joint[..2], [0.25, 0.75]);
        assert_eq!(b.marginals[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(b.marginals[1], vec![0.25, 0.75]);
        let zero = vec![mk("z", vec![1.0 / 6.0; 6], 0.0)];
        assert!(aggregate(&zero, &c).is_err());
    }

    #[test]
    fn mae_examples() {
        let c = cats();
        let base = qoi_from_joint("g1", vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1], &c);
        let other = qoi_from_joint("g2", vec![0.15, 0.15, 0.2, 0.2, 0.2, 0.1], &c);
        let truth = QoiReport { categories: c.clone(), geographies: vec![base.clone(), other.clone()] };
        for q in Quantity::all(&c) {
            assert_eq!(mae(&truth, &truth, &q).unwrap(), 0.0);
        }
        let shift = |g: &GeographyQoi| {
            let mut g = g.clone();
            g.marginals[1] = g.marginals[1].iter().map(|v| v + 0.02).collect();
            g
        };
        let est = QoiReport { categories: c.clone(), geographies: vec![shift(&base), shift(&other)] };
        let m = mae(&est, &truth, &Quantity::Marginal("policy".into())).unwrap();
        assert!((m - 0.02).abs() < 1e-15);
        let wrong = QoiReport { categories: c.clone(), geographies: vec![base.clone()] };
        let e = mae(&wrong, &truth, &Quantity::Joint).unwrap_err().to_string();
        assert!(e.contains("g2"), "{e}");
    }
}
