use super::{AltCovariate, CategorySet, Column, FactorColumn, PostStratFrame, SurveyTable, Table, CASE_ID, CHOICE, RESPONSE};
use crate::error::{Error, Result};
use crate::par;

/// Long-format survey data: one row per (case, joint category), sorted by case then category.
#[derive(Debug, Clone)]
pub struct AugmentedTable {
    pub table: Table,
    pub case_index: Vec<u32>,
    pub category: Vec<u32>,
    /// Indicator outcome; exactly one 1 per case.
    pub y: Vec<f64>,
    pub categories: CategorySet,
    pub n_cases: usize,
    pub case_ids: Vec<String>,
    /// Name of the outcome column inside `table`.
    pub response_name: String,
}

impl AugmentedTable {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Joint category with `y = 1` for each case.
    pub fn chosen_categories(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_cases];
        for r in 0..self.n_rows() {
            if self.y[r] > 0.5 {
                out[self.case_index[r] as usize] = self.category[r] as usize;
            }
        }
        out
    }

    /// Renames the outcome column (and its copy inside `table`).
    pub fn with_response_name(mut self, name: &str) -> Result<Self> {
        self.table.insert(name, Column::Numeric(self.y.clone()))?;
        self.response_name = name.to_string();
        Ok(self)
    }

    /// Rows belonging to one joint category, used by per-category fits.
    pub fn category_rows(&self, category: usize) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| self.category[r] as usize == category).collect()
    }

    /// Restriction to a subset of rows; case and category bookkeeping is carried along.
    pub fn select_rows(&self, rows: &[usize]) -> AugmentedTable {
        AugmentedTable {
            table: self.table.gather(rows),
            case_index: rows.iter().map(|&r| self.case_index[r]).collect(),
            category: rows.iter().map(|&r| self.category[r]).collect(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            categories: self.categories.clone(),
            n_cases: self.n_cases,
            case_ids: self.case_ids.clone(),
            response_name: self.response_name.clone(),
        }
    }
}

/// Post-stratification frame expanded to one row per (cell, joint category).
#[derive(Debug, Clone)]
pub struct ExpandedFrame {
    pub table: Table,
    pub cell_index: Vec<u32>,
    pub category: Vec<u32>,
    pub categories: CategorySet,
    pub cell_ids: Vec<String>,
    pub geographies: Vec<String>,
    /// Per-cell weights (also replicated on each expanded row via `row_weight`).
    pub weights: Vec<f64>,
}

impl ExpandedFrame {
    pub fn n_rows(&self) -> usize {
        self.cell_index.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn row_weight(&self, row: usize) -> f64 {
        self.weights[self.cell_index[row] as usize]
    }
}

/// Replicates `base` to `units × L̄` rows and adds choice, component, and alternative columns.
fn expand_rows(
    base: &Table,
    unit_ids: &[String],
    categories: &CategorySet,
    alts: &[AltCovariate],
    skip: &[&str],
) -> Result<(Table, Vec<u32>, Vec<u32>)> {
    let n_units = base.n_rows();
    let l_bar = categories.len();
    let n_rows = n_units * l_bar;
    let unit_index: Vec<u32> = (0..n_rows).map(|r| (r / l_bar) as u32).collect();
    let category: Vec<u32> = (0..n_rows).map(|r| (r % l_bar) as u32).collect();
    let replicate: Vec<usize> = (0..n_rows).map(|r| r / l_bar).collect();

    let kept: Vec<(&str, &Column)> = base.columns().filter(|(n, _)| !skip.contains(n)).collect();
    let replicated = par::map_slice(&kept, |(_, c)| c.gather(&replicate));
    let mut table = Table::new(n_rows);
    for ((name, _), col) in kept.iter().zip(replicated) {
        table.insert(*name, col)?;
    }

    table.insert(
        CHOICE,
        Column::Factor(FactorColumn { codes: category.clone(), levels: categories.labels() }),
    )?;
    for (q, spec) in categories.questions.iter().enumerate() {
        let codes = category.iter().map(|&c| categories.component(c as usize, q) as u32).collect();
        table.insert(spec.name.clone(), Column::Factor(FactorColumn { codes, levels: spec.levels.clone() }))?;
    }

    for alt in alts {
        let key_cols: Vec<&Column> = alt.keys.iter().map(|k| base.column(k)).collect::<Result<_>>()?;
        let labels: Vec<String> = if alt.question == CHOICE {
            categories.labels()
        } else {
            let q = categories.question_index(&alt.question).ok_or_else(|| {
                Error::Data(format!("alternative covariate `{}` refers to unknown question `{}`", alt.name, alt.question))
            })?;
            (0..l_bar).map(|c| categories.questions[q].levels[categories.component(c, q)].clone()).collect()
        };
        let per_unit: Vec<Result<Vec<f64>>> = par::map_range(n_units, |i| {
            let key: Vec<String> = key_cols.iter().map(|c| c.key(i)).collect();
            labels
                .iter()
                .map(|label| {
                    alt.values.get(&(key.clone(), label.clone())).copied().ok_or_else(|| {
                        Error::Data(format!(
                            "alternative covariate `{}` has no value for key ({}) and component `{label}` (unit `{}`)",
                            alt.name,
                            key.join(", "),
                            unit_ids[i]
                        ))
                    })
                })
                .collect()
        });
        let mut values = Vec::with_capacity(n_rows);
        for chunk in per_unit {
            values.extend(chunk?);
        }
        table.insert(alt.name.clone(), Column::Numeric(values))?;
    }
    Ok((table, unit_index, category))
}

/// Expands survey responses to the augmented long format with indicator outcomes.
pub fn expand_augmented(
    survey: &SurveyTable,
    categories: &CategorySet,
    alts: &[AltCovariate],
) -> Result<AugmentedTable> {
    let chosen = survey.responses(categories)?;
    let skip: Vec<&str> = categories.questions.iter().map(|q| q.name.as_str()).collect();
    let (mut table, case_index, category) = expand_rows(&survey.table, &survey.case_ids, categories, alts, &skip)?;
    let y: Vec<f64> = case_index
        .iter()
        .zip(&category)
        .map(|(&i, &c)| if chosen[i as usize] == c as usize { 1.0 } else { 0.0 })
        .collect();
    table.insert(
        CASE_ID,
        Column::Factor(FactorColumn { codes: case_index.clone(), levels: survey.case_ids.clone() }),
    )?;
    table.insert(RESPONSE, Column::Numeric(y.clone()))?;
    Ok(AugmentedTable {
        table,
        case_index,
        category,
        y,
        categories: categories.clone(),
        n_cases: survey.n_cases(),
        case_ids: survey.case_ids.clone(),
        response_name: RESPONSE.to_string(),
    })
}

/// Expands post-stratification cells to one row per (cell, joint category).
pub fn expand_poststrat(
    frame: &PostStratFrame,
    categories: &CategorySet,
    alts: &[AltCovariate],
) -> Result<ExpandedFrame> {
    let skip: Vec<&str> = categories.questions.iter().map(|q| q.name.as_str()).collect();
    let (table, cell_index, category) = expand_rows(&frame.table, &frame.cell_ids, categories, alts, &skip)?;
    Ok(ExpandedFrame {
        table,
        cell_index,
        category,
        categories: categories.clone(),
        cell_ids: frame.cell_ids.clone(),
        geographies: frame.geographies.clone(),
        weights: frame.weights.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QuestionSpec;
    use proptest::prelude::*;

    fn survey(rows: &[(&str, &[&str])], questions: &[QuestionSpec], extra: &[(&str, Vec<&str>)]) -> SurveyTable {
        let mut table = Table::new(rows.len());
        for (k, q) in questions.iter().enumerate() {
            let vals: Vec<&str> = rows.iter().map(|(_, r)| r[k]).collect();
            table.insert(q.name.clone(), Column::Factor(FactorColumn::with_levels(&vals, &q.levels).unwrap())).unwrap();
        }
        for (name, vals) in extra {
            table.insert(*name, Column::Factor(FactorColumn::from_values(vals))).unwrap();
        }
        SurveyTable {
            table,
            case_ids: rows.iter().map(|(id, _)| id.to_string()).collect(),
            weights: None,
            dropped_rows: 0,
        }
    }

    fn party_abortion() -> CategorySet {
        CategorySet::new(vec![
            QuestionSpec::new("partyID", &["D", "R", "I"]).unwrap(),
            QuestionSpec::new("abortion", &["yes", "no"]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn single_case_two_questions() {
        let cats = party_abortion();
        let s = survey(&[("1", &["D", "no"])], &cats.questions, &[]);
        let aug = expand_augmented(&s, &cats, &[]).unwrap();
        assert_eq!(aug.n_rows(), 6);
        let choice = aug.table.factor(CHOICE).unwrap();
        let ones: Vec<String> = (0..6).filter(|&r| aug.y[r] == 1.0).map(|r| choice.label(r).to_string()).collect();
        assert_eq!(ones, vec!["D-no"]);
        let party = aug.table.factor("partyID").unwrap();
        let abortion = aug.table.factor("abortion").unwrap();
        for r in 0..6 {
            assert_eq!(choice.label(r), format!("{}-{}", party.label(r), abortion.label(r)));
        }
    }

    #[test]
    fn binary_question() {
        let cats = CategorySet::new(vec![QuestionSpec::new("q", &["a", "b"]).unwrap()]).unwrap();
        let s = survey(&[("x", &["b"])], &cats.questions, &[]);
        let aug = expand_augmented(&s, &cats, &[]).unwrap();
        assert_eq!(aug.y, vec![0.0, 1.0]);
    }

    #[test]
    fn alternative_covariate_join() {
        let cats = party_abortion();
        let states = ["AL", "AK", "AZ"];
        let rows: Vec<(String, Vec<&str>)> =
            (0..6).map(|i| (format!("c{i}"), vec![["D", "R", "I"][i % 3], ["yes", "no"][i % 2]])).collect();
        let rows_ref: Vec<(&str, &[&str])> = rows.iter().map(|(id, r)| (id.as_str(), r.as_slice())).collect();
        let state_col: Vec<&str> = (0..6).map(|i| states[i / 2]).collect();
        let s = survey(&rows_ref, &cats.questions, &[("state", state_col.clone())]);
        let mut alt = AltCovariate::new("lag_copart", &["state"], "partyID");
        let mut hand = std::collections::HashMap::new();
        for (si, st) in states.iter().enumerate() {
            for (pi, p) in ["D", "R", "I"].iter().enumerate() {
                let v = 0.1 * si as f64 + 0.01 * pi as f64 + 0.3;
                alt.insert(&[st], p, v);
                hand.insert((st.to_string(), p.to_string()), v);
            }
        }
        let aug = expand_augmented(&s, &cats, &[alt]).unwrap();
        let lag = aug.table.numeric("lag_copart").unwrap();
        let party = aug.table.factor("partyID").unwrap();
        for r in 0..aug.n_rows() {
            let st = state_col[aug.case_index[r] as usize];
            assert_eq!(lag[r], hand[&(st.to_string(), party.label(r).to_string())]);
        }
    }

    #[test]
    fn missing_alternative_key_is_reported() {
        let cats = party_abortion();
        let s = survey(&[("1", &["D", "no"])], &cats.questions, &[("state", vec!["AL"])]);
        let mut alt = AltCovariate::new("lag_copart", &["state"], "partyID");
        alt.insert(&["AL"], "D", 0.4);
        alt.insert(&["AL"], "R", 0.4);
        let err = expand_augmented(&s, &cats, &[alt]).unwrap_err().to_string();
        assert!(err.contains("component `I`") && err.contains("AL"), "{err}");
    }

    #[test]
    fn poststrat_expansion_preserves_weights() {
        let cats = party_abortion();
        let mut table = Table::new(1);
        table.insert("race", Column::Factor(FactorColumn::from_values(&["w"]))).unwrap();
        let frame = PostStratFrame::new(table, vec!["cell1".into()], vec!["AL".into()], vec![12.5]).unwrap();
        let ex = expand_poststrat(&frame, &cats, &[]).unwrap();
        assert_eq!(ex.n_rows(), 6);
        for r in 0..6 {
            assert_eq!(ex.row_weight(r), 12.5);
        }
        let race = ex.table.factor("race").unwrap();
        assert!((0..6).all(|r| race.label(r) == "w"));
    }

    #[test]
    fn zero_weight_geography_rejected() {
        let table = Table::new(1);
        assert!(PostStratFrame::new(table, vec!["c".into()], vec!["AL".into()], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn row_count_and_recovery(sizes in proptest::collection::vec(2usize..5, 1..4),
                                  n in 1usize..12, seed in any::<u64>()) {
            prop_assume!(sizes.iter().product::<usize>() <= 24);
            let questions: Vec<QuestionSpec> = sizes.iter().enumerate().map(|(k, &l)| {
                let levels: Vec<String> = (0..l).map(|i| format!("l{i}")).collect();
                let refs: Vec<&str> = levels.iter().map(String::as_str).collect();
                QuestionSpec::new(format!("q{k}"), &refs).unwrap()
            }).collect();
            let cats = CategorySet::new(questions.clone()).unwrap();
            let mut state = seed;
            let mut answers: Vec<Vec<String>> = Vec::new();
            for _ in 0..n {
                answers.push(sizes.iter().map(|&l| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    format!("l{}", (state >> 33) as usize % l)
                }).collect());
            }
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let refs: Vec<Vec<&str>> = answers.iter().map(|a| a.iter().map(String::as_str).collect()).collect();
            let rows: Vec<(&str, &[&str])> = ids.iter().zip(&refs).map(|(id, r)| (id.as_str(), r.as_slice())).collect();
            let s = survey(&rows, &questions, &[]);
            let aug = expand_augmented(&s, &cats, &[]).unwrap();
            prop_assert_eq!(aug.n_rows(), n * cats.len());
            let mut per_case = vec![0.0; n];
            for r in 0..aug.n_rows() { per_case[aug.case_index[r] as usize] += aug.y[r]; }
            prop_assert!(per_case.iter().all(|&t| t == 1.0));
            let chosen = aug.chosen_categories();
            for i in 0..n {
                let comps = cats.components(chosen[i]);
                for (q, c) in comps.iter().enumerate() {
                    prop_assert_eq!(&cats.questions[q].levels[*c], &answers[i][q]);
                }
            }
        }
    }
}
