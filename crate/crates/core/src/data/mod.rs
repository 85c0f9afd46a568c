//! Survey ingest and expansion into the long (case, category) format.
//!
//! A survey with `N` cases answering questions with `L_1, ..., L_J` options is
//! expanded to `N * L̄` rows, `L̄ = Π L_j`, one per (case, joint category). Each
//! row carries an indicator outcome, the case-level covariates, the combined
//! category label (`choice`), its per-question components, and any
//! alternative-specific covariates.

mod expand;
mod table;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use expand::{expand_augmented, expand_poststrat, AugmentedTable, ExpandedFrame};
pub use table::{load_table, write_delimited, Column, ColumnKind, FactorColumn, LoadedTable, Table, TableSchema};

/// Name of the combined-category column in expanded tables.
pub const CHOICE: &str = "choice";
/// Name of the case identifier factor in expanded survey tables.
pub const CASE_ID: &str = "case_id";
/// Default name of the indicator outcome in expanded survey tables.
pub const RESPONSE: &str = "response";

/// One survey question and its ordered answer options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub name: String,
    pub levels: Vec<String>,
}

impl QuestionSpec {
    pub fn new(name: impl Into<String>, levels: &[&str]) -> Result<Self> {
        let q = QuestionSpec { name: name.into(), levels: levels.iter().map(|s| s.to_string()).collect() };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Data(format!("question `{}` needs at least two levels", self.name)));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.levels {
            if !seen.insert(l) {
                return Err(Error::Data(format!("question `{}` repeats level `{l}`", self.name)));
            }
        }
        if self.name == CHOICE || self.name == CASE_ID {
            return Err(Error::Data(format!("`{}` is reserved and cannot name a question", self.name)));
        }
        Ok(())
    }
}

/// Parses `name=a,b,c;other=x,y`.
pub fn parse_questions(src: &str) -> Result<Vec<QuestionSpec>> {
    let mut out = Vec::new();
    for part in src.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, levels) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("question spec `{part}` must look like name=level1,level2")))?;
        let levels: Vec<&str> = levels.split(',').map(str::trim).collect();
        out.push(QuestionSpec::new(name.trim(), &levels)?);
    }
    if out.is_empty() {
        return Err(Error::Config("no questions declared".into()));
    }
    Ok(out)
}

/// The joint category space `S̄`, enumerated with the last question varying fastest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    pub questions: Vec<QuestionSpec>,
}

impl CategorySet {
    pub fn new(questions: Vec<QuestionSpec>) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::Data("at least one question is required".into()));
        }
        for q in &questions {
            q.validate()?;
        }
        let mut names = std::collections::HashSet::new();
        for q in &questions {
            if !names.insert(&q.name) {
                return Err(Error::Data(format!("question `{}` declared twice", q.name)));
            }
        }
        Ok(CategorySet { questions })
    }

    pub fn len(&self) -> usize {
        self.questions.iter().map(|q| q.levels.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Level index of question `q` within joint category `category`.
    pub fn component(&self, category: usize, q: usize) -> usize {
        let stride: usize = self.questions[q + 1..].iter().map(|x| x.levels.len()).product();
        (category / stride) % self.questions[q].levels.len()
    }

    pub fn components(&self, category: usize) -> Vec<usize> {
        (0..self.questions.len()).map(|q| self.component(category, q)).collect()
    }

    /// Joint category index of a component tuple.
    pub fn index_of(&self, components: &[usize]) -> usize {
        components.iter().zip(&self.questions).fold(0, |acc, (c, q)| acc * q.levels.len() + c)
    }

    /// Combined label, components joined by `-`.
    pub fn label(&self, category: usize) -> String {
        self.components(category)
            .iter()
            .zip(&self.questions)
            .map(|(c, q)| q.levels[*c].as_str())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.len()).map(|c| self.label(c)).collect()
    }

    pub fn question_index(&self, name: &str) -> Option<usize> {
        self.questions.iter().position(|q| q.name == name)
    }
}

/// Survey responses: one row per case.
#[derive(Debug, Clone)]
pub struct SurveyTable {
    /// Case-level covariates plus one factor column per question holding the response.
    pub table: Table,
    pub case_ids: Vec<String>,
    pub weights: Option<Vec<f64>>,
    pub dropped_rows: usize,
}

impl SurveyTable {
    pub fn n_cases(&self) -> usize {
        self.table.n_rows()
    }

    /// Reads a survey file; question columns are typed against their declared levels.
    pub fn load(path: &Path, mut schema: TableSchema, questions: &[QuestionSpec]) -> Result<Self> {
        for q in questions {
            schema = schema.column(q.name.clone(), ColumnKind::Factor(Some(q.levels.clone())));
        }
        let loaded = load_table(path, &schema)?;
        Ok(SurveyTable {
            table: loaded.table,
            case_ids: loaded.ids,
            weights: loaded.weights,
            dropped_rows: loaded.dropped_rows,
        })
    }

    /// Joint category index chosen by each case.
    pub fn responses(&self, categories: &CategorySet) -> Result<Vec<usize>> {
        let cols: Vec<&FactorColumn> =
            categories.questions.iter().map(|q| self.table.factor(&q.name)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.n_cases());
        for i in 0..self.n_cases() {
            let mut comps = Vec::with_capacity(cols.len());
            for (col, q) in cols.iter().zip(&categories.questions) {
                // Columns may carry their own dictionary; map through labels.
                let label = col.label(i);
                let c = q.levels.iter().position(|l| l == label).ok_or_else(|| {
                    Error::Data(format!(
                        "case `{}`: response `{label}` to `{}` is not a declared level",
                        self.case_ids[i], q.name
                    ))
                })?;
                comps.push(c);
            }
            out.push(categories.index_of(&comps));
        }
        Ok(out)
    }
}

/// Post-stratification cells: one row per (geography, demographic) cell.
#[derive(Debug, Clone)]
pub struct PostStratFrame {
    pub table: Table,
    pub cell_ids: Vec<String>,
    pub geographies: Vec<String>,
    pub weights: Vec<f64>,
}

impl PostStratFrame {
    pub fn new(table: Table, cell_ids: Vec<String>, geographies: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        let n = table.n_rows();
        if cell_ids.len() != n || geographies.len() != n || weights.len() != n {
            return Err(Error::Data("post-stratification frame columns have inconsistent lengths".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Data(format!("cell weight {w} is not a nonnegative number")));
        }
        let mut totals: HashMap<&str, f64> = HashMap::new();
        for (g, w) in geographies.iter().zip(&weights) {
            *totals.entry(g).or_default() += w;
        }
        let mut zero: Vec<&&str> = totals.iter().filter(|(_, t)| **t <= 0.0).map(|(g, _)| g).collect();
        zero.sort();
        if let Some(g) = zero.first() {
            return Err(Error::Data(format!("geography `{g}` has zero total weight")));
        }
        Ok(PostStratFrame { table, cell_ids, geographies, weights })
    }

    pub fn n_cells(&self) -> usize {
        self.table.n_rows()
    }

    /// Reads a frame; the geography column is kept both as metadata and as a factor column.
    pub fn load(path: &Path, schema: TableSchema, geography_column: &str) -> Result<Self> {
        if schema.weight_column.is_none() {
            return Err(Error::Config("post-stratification frame needs a weight column".into()));
        }
        let schema = if schema.columns.iter().any(|(n, _)| n == geography_column) {
            schema
        } else {
            schema.column(geography_column, ColumnKind::Factor(None))
        };
        let loaded = load_table(path, &schema)?;
        let geographies = match loaded.table.column(geography_column)? {
            Column::Factor(f) => (0..f.codes.len()).map(|i| f.label(i).to_string()).collect(),
            Column::Numeric(v) => v.iter().map(|x| x.to_string()).collect(),
        };
        let weights = loaded.weights.unwrap_or_default();
        PostStratFrame::new(loaded.table, loaded.ids, geographies, weights)
    }
}

/// Alternative-specific covariate: a value per (case-level key, category component).
///
/// For example lagged copartisanship keyed by `state` and the `partyID` component:
/// the row for case `i` and category `ℓ` receives `value[(state(i), ℓ_partyID)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltCovariate {
    /// Column name in the expanded table.
    pub name: String,
    /// Case-level key columns.
    pub keys: Vec<String>,
    /// Question whose component selects the value, or `choice` for the joint label.
    pub question: String,
    pub values: std::collections::BTreeMap<(Vec<String>, String), f64>,
}

impl AltCovariate {
    pub fn new(name: impl Into<String>, keys: &[&str], question: impl Into<String>) -> Self {
        AltCovariate {
            name: name.into(),
            keys: keys.iter().map(|s| s.to_string()).collect(),
            question: question.into(),
            values: Default::default(),
        }
    }

    pub fn insert(&mut self, key: &[&str], component: &str, value: f64) {
        self.values.insert((key.iter().map(|s| s.to_string()).collect(), component.to_string()), value);
    }

    /// Reads columns `keys..., level_column, value_column` from a delimited file.
    pub fn load(
        path: &Path,
        name: &str,
        keys: &[String],
        question: &str,
        level_column: &str,
        value_column: &str,
    ) -> Result<Self> {
        let mut schema = TableSchema::default();
        for k in keys {
            schema = schema.column(k.clone(), ColumnKind::Factor(None));
        }
        schema = schema.column(level_column, ColumnKind::Factor(None)).column(value_column, ColumnKind::Numeric);
        let loaded = load_table(path, &schema)?;
        let t = &loaded.table;
        let key_cols: Vec<&Column> = keys.iter().map(|k| t.column(k)).collect::<Result<_>>()?;
        let level = t.column(level_column)?;
        let value = t.numeric(value_column)?;
        let mut out = AltCovariate {
            name: name.to_string(),
            keys: keys.to_vec(),
            question: question.to_string(),
            values: Default::default(),
        };
        for r in 0..t.n_rows() {
            let key: Vec<String> = key_cols.iter().map(|c| c.key(r)).collect();
            out.values.insert((key, level.key(r)), value[r]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_enumeration_matches_declaration_order() {
        let cats = CategorySet::new(vec![
            QuestionSpec::new("partyID", &["D", "R", "I"]).unwrap(),
            QuestionSpec::new("abortion", &["yes", "no"]).unwrap(),
        ])
        .unwrap();
        assert_eq!(cats.labels(), vec!["D-yes", "D-no", "R-yes", "R-no", "I-yes", "I-no"]);
        for c in 0..cats.len() {
            assert_eq!(cats.index_of(&cats.components(c)), c);
        }
        assert_eq!(cats.component(3, 0), 1);
        assert_eq!(cats.component(3, 1), 1);
    }

    #[test]
    fn question_validation() {
        assert!(QuestionSpec::new("q", &["a"]).is_err());
        assert!(QuestionSpec::new("q", &["a", "a"]).is_err());
        assert!(QuestionSpec::new("choice", &["a", "b"]).is_err());
        let qs = parse_questions("partyID=D,R,I; policy=yes,no").unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[1].levels, vec!["yes", "no"]);
        assert!(parse_questions("partyID").is_err());
    }
}
