//! Comparison estimators built from transformations of the user's formula.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    expand_augmented, expand_poststrat, AltCovariate, AugmentedTable, CategorySet, Column, ExpandedFrame,
    PostStratFrame, SurveyTable, CHOICE,
};
use crate::error::{Error, Result};
use crate::formula::{FormulaAst, Intercept};
use crate::model::{fit_model, FitOptions, FittedModel, ModelDocument};
use crate::par;
use crate::poststrat::{predict_cells, softmax_cells, CellPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// One Poisson regression per joint category, fixed effect dropped, softmax-combined.
    SeparatePoisson,
    /// The full model with `v_fe` removed.
    PartiallyPooledOvA,
    /// One multinomial model per question; joint is the product of marginals.
    NaiveIndependent,
}

/// Every estimator selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    #[default]
    Mvmrp,
    PpOva,
    Separate,
    Naive,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Mvmrp, Estimator::PpOva, Estimator::Separate, Estimator::Naive];

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Estimator::Mvmrp => None,
            Estimator::PpOva => Some(BaselineKind::PartiallyPooledOvA),
            Estimator::Separate => Some(BaselineKind::SeparatePoisson),
            Estimator::Naive => Some(BaselineKind::NaiveIndependent),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Mvmrp => "mvmrp",
            Estimator::PpOva => "pp-ova",
            Estimator::Separate => "separate",
            Estimator::Naive => "naive",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}` (expected mvmrp, pp-ova, separate, or naive)")))
    }
}

/// Survey inputs in their wide form; the naive estimator re-expands per question.
#[derive(Debug, Clone, Copy)]
pub struct SurveyInput<'a> {
    pub survey: &'a SurveyTable,
    pub categories: &'a CategorySet,
    pub alts: &'a [AltCovariate],
}

#[derive(Debug, Clone)]
pub enum Fitted {
    /// A single engine fit, used by mvMRP and partially pooled One-vs-All.
    Single(FittedModel),
    /// One fit per joint category, in category order.
    Separate(Vec<FittedModel>),
    /// One fit per question, in question order.
    Naive(Vec<FittedModel>),
}

/// Formula minus every `v_fe` term. The dropped fixed effect absorbed the overall
/// level, so an intercept is kept unless it was explicitly suppressed.
pub fn without_fixed_effects(ast: &FormulaAst) -> FormulaAst {
    let mut out = ast.clone();
    out.fe_terms.clear();
    if ast.intercept == Intercept::Default && ast.has_intercept() {
        out.intercept = Intercept::Explicit;
    }
    out
}

/// Per-question formula for the naive estimator: `choice` becomes the question,
/// terms that only involve other questions are dropped, and alternative covariates
/// are kept only when they vary over this question's levels.
pub fn naive_formula(ast: &FormulaAst, categories: &CategorySet, alts: &[AltCovariate], q: usize) -> Result<FormulaAst> {
    let name = &categories.questions[q].name;
    let questions: BTreeSet<&str> = categories.questions.iter().map(|s| s.name.as_str()).collect();
    let foreign_alt = |v: &str| alts.iter().any(|a| a.name == v && a.question != *name);
    let rename = |v: &String| if v == CHOICE { name.clone() } else { v.clone() };
    // A term survives if it mentions no questions other than `q` (after renaming).
    let classify = |vars: &[String]| -> Result<bool> {
        let mentioned: BTreeSet<String> =
            vars.iter().map(rename).filter(|v| questions.contains(v.as_str())).collect();
        if mentioned.len() > 1 {
            return Err(Error::Formula(format!(
                "naive estimator needs per-question terms, but a term crosses questions {}; remove it",
                mentioned.into_iter().collect::<Vec<_>>().join(" and ")
            )));
        }
        Ok(mentioned.iter().all(|m| m == name))
    };
    let mut out = ast.clone();
    out.fixed_terms.clear();
    for t in &ast.fixed_terms {
        if foreign_alt(t) || !classify(std::slice::from_ref(t))? {
            continue;
        }
        let t = rename(t);
        if !out.fixed_terms.contains(&t) {
            out.fixed_terms.push(t);
        }
    }
    out.re_terms.clear();
    for t in &ast.re_terms {
        let mut all = t.group_expr.clone();
        all.extend(t.inner_terms.iter().cloned());
        if !classify(&all)? {
            continue;
        }
        let mut t2 = t.clone();
        t2.group_expr = t.group_expr.iter().map(rename).collect();
        t2.inner_terms = t.inner_terms.iter().filter(|v| !foreign_alt(v)).map(rename).collect();
        if t2.dim() == 0 {
            continue;
        }
        let key = t2.canonical_key();
        if !out.re_terms.iter().any(|r| r.canonical_key() == key) {
            out.re_terms.push(t2);
        }
    }
    Ok(out)
}

fn single_question(categories: &CategorySet, q: usize) -> Result<CategorySet> {
    CategorySet::new(vec![categories.questions[q].clone()])
}

fn question_alts(alts: &[AltCovariate], name: &str) -> Vec<AltCovariate> {
    alts.iter().filter(|a| a.question == name).cloned().collect()
}

/// Fixed terms that are constant on `data` are aliased with the intercept.
fn drop_constant_fixed(ast: &FormulaAst, data: &AugmentedTable) -> Result<FormulaAst> {
    let mut out = ast.clone();
    out.fixed_terms.clear();
    for t in &ast.fixed_terms {
        let constant = match data.table.column(t)? {
            Column::Factor(f) => f.codes.windows(2).all(|w| w[0] == w[1]),
            Column::Numeric(v) => v.windows(2).all(|w| w[0] == w[1]),
        };
        if !constant {
            out.fixed_terms.push(t.clone());
        }
    }
    Ok(out)
}

fn separate_formula(ast: &FormulaAst, data: &AugmentedTable) -> Result<FormulaAst> {
    drop_constant_fixed(&without_fixed_effects(ast), data)
}

/// Fits an estimator on wide survey data.
pub fn fit_estimator(estimator: Estimator, ast: &FormulaAst, input: SurveyInput<'_>, options: &FitOptions) -> Result<Fitted> {
    match estimator.baseline() {
        None => {
            let data = expand_augmented(input.survey, input.categories, input.alts)?;
            Ok(Fitted::Single(fit_model(ast, &data, options)?))
        }
        Some(kind) => fit_baseline(kind, ast, input, options),
    }
}

pub fn fit_baseline(kind: BaselineKind, ast: &FormulaAst, input: SurveyInput<'_>, options: &FitOptions) -> Result<Fitted> {
    match kind {
        BaselineKind::PartiallyPooledOvA => {
            let data = expand_augmented(input.survey, input.categories, input.alts)?;
            Ok(Fitted::Single(fit_model(&without_fixed_effects(ast), &data, options)?))
        }
        BaselineKind::SeparatePoisson => {
            let data = expand_augmented(input.survey, input.categories, input.alts)?;
            let fits = par::map_range(input.categories.len(), |c| {
                let subset = data.select_rows(&data.category_rows(c));
                let f = separate_formula(ast, &subset)?;
                fit_model(&f, &subset, options)
                    .map_err(|e| e.with_context(&format!("separate fit for category `{}`", input.categories.label(c))))
            });
            Ok(Fitted::Separate(fits.into_iter().collect::<Result<_>>()?))
        }
        BaselineKind::NaiveIndependent => {
            let nq = input.categories.questions.len();
            let formulas = (0..nq).map(|q| naive_formula(ast, input.categories, input.alts, q)).collect::<Result<Vec<_>>>()?;
            let fits = par::map_range(nq, |q| {
                let name = &input.categories.questions[q].name;
                let cats = single_question(input.categories, q)?;
                let data = expand_augmented(input.survey, &cats, &question_alts(input.alts, name))?;
                fit_model(&formulas[q], &data, options).map_err(|e| e.with_context(&format!("naive fit for `{name}`")))
            });
            Ok(Fitted::Naive(fits.into_iter().collect::<Result<_>>()?))
        }
    }
}

impl Fitted {
    /// Per-cell joint predictions on the full category set.
    pub fn predict(
        &self,
        frame: &PostStratFrame,
        categories: &CategorySet,
        alts: &[AltCovariate],
        variance_adjusted: bool,
    ) -> Result<Vec<CellPrediction>> {
        match self {
            Fitted::Single(model) => {
                let expanded = expand_poststrat(frame, categories, alts)?;
                predict_cells(model, &expanded, variance_adjusted)
            }
            Fitted::Separate(models) => {
                let expanded = expand_poststrat(frame, categories, alts)?;
                predict_separate(models, &expanded, variance_adjusted)
            }
            Fitted::Naive(models) => {
                let marginals = models
                    .iter()
                    .enumerate()
                    .map(|(q, m)| {
                        let name = &categories.questions[q].name;
                        let cats = single_question(categories, q)?;
                        let expanded = expand_poststrat(frame, &cats, &question_alts(alts, name))?;
                        predict_cells(m, &expanded, variance_adjusted)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(par::map_range(frame.n_cells(), |i| {
                    let probs = (0..categories.len())
                        .map(|c| (0..models.len()).map(|q| marginals[q][i].probs[categories.component(c, q)]).product())
                        .collect();
                    CellPrediction {
                        cell_id: frame.cell_ids[i].clone(),
                        geography: frame.geographies[i].clone(),
                        probs,
                        weight: frame.weights[i],
                    }
                }))
            }
        }
    }

    pub fn models(&self) -> Vec<&FittedModel> {
        match self {
            Fitted::Single(m) => vec![m],
            Fitted::Separate(v) | Fitted::Naive(v) => v.iter().collect(),
        }
    }
}

/// On-disk form of any fitted estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedDocument {
    pub estimator: Estimator,
    pub models: Vec<ModelDocument>,
}

impl FittedDocument {
    pub fn new(estimator: Estimator, fitted: &Fitted) -> Self {
        FittedDocument { estimator, models: fitted.models().into_iter().map(FittedModel::to_document).collect() }
    }

    pub fn into_fitted(self) -> Result<Fitted> {
        let models = self.models.into_iter().map(ModelDocument::into_model).collect::<Result<Vec<_>>>()?;
        match self.estimator {
            Estimator::Mvmrp | Estimator::PpOva => {
                let [m]: [FittedModel; 1] = models
                    .try_into()
                    .map_err(|v: Vec<_>| Error::Data(format!("{} models stored for a single-model estimator", v.len())))?;
                Ok(Fitted::Single(m))
            }
            Estimator::Separate => Ok(Fitted::Separate(models)),
            Estimator::Naive => Ok(Fitted::Naive(models)),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn predict_separate(models: &[FittedModel], frame: &ExpandedFrame, variance_adjusted: bool) -> Result<Vec<CellPrediction>> {
    let mut lp = vec![0.0; frame.n_rows()];
    for (c, model) in models.iter().enumerate() {
        let rows: Vec<usize> = (0..frame.n_rows()).filter(|&r| frame.category[r] as usize == c).collect();
        let sub = frame.table.gather(&rows);
        let vals = model.linear_predictor(&sub, variance_adjusted)?;
        for (r, v) in rows.into_iter().zip(vals) {
            lp[r] = v;
        }
    }
    softmax_cells(frame, &lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QuestionSpec;
    use crate::formula::parse_formula;

    fn cats() -> CategorySet {
        CategorySet::new(vec![
            QuestionSpec::new("party", &["D", "R", "I"]).unwrap(),
            QuestionSpec::new("policy", &["yes", "no"]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn removing_fixed_effects_keeps_the_intercept() {
        let f = parse_formula("y ~ (1 | state : choice) + v_fe(case_id)").unwrap();
        let g = without_fixed_effects(&f);
        assert!(g.fe_terms.is_empty() && g.has_intercept());
        let f = parse_formula("y ~ 0 + (1 | state : choice) + v_fe(case_id)").unwrap();
        assert!(!without_fixed_effects(&f).has_intercept());
    }

    #[test]
    fn naive_rewrites_choice_and_drops_other_questions() {
        let alts = vec![
            AltCovariate::new("lag", &["state"], "party"),
            AltCovariate::new("joint_x", &["state"], CHOICE),
        ];
        let f = parse_formula(
            "y ~ party + policy + lag + joint_x + (1 | state : choice) + (1 | state : party) + (1 | race : policy) \
             + (0 + lag + joint_x | state) + v_fe(case_id)",
        )
        .unwrap();
        let p = naive_formula(&f, &cats(), &alts, 0).unwrap();
        let want = parse_formula("y ~ party + lag + (1 | state : party) + (0 + lag | state) + v_fe(case_id)").unwrap();
        assert_eq!(p, want, "{p}");
        let q = naive_formula(&f, &cats(), &alts, 1).unwrap();
        let want = parse_formula("y ~ policy + (1 | state : policy) + (1 | race : policy) + v_fe(case_id)").unwrap();
        assert_eq!(q, want, "{q}");
    }

    #[test]
    fn naive_rejects_cross_question_terms() {
        let f = parse_formula("y ~ (1 | state : party : policy) + v_fe(case_id)").unwrap();
        let e = naive_formula(&f, &cats(), &[], 0).unwrap_err().to_string();
        assert!(e.contains("remove"), "{e}");
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.to_string().parse::<Estimator>().unwrap(), e);
        }
        assert!("multinomial".parse::<Estimator>().is_err());
    }
}
