#![allow(dead_code)]

pub mod oracles;

use mvmrp::data::{Column, FactorColumn, Table};
use mvmrp::design::{build_designs_on_table, DesignSet};
use mvmrp::formula::parse_formula;

/// Builds a table from numeric and factor columns, plus a `response` column.
pub fn table(y: &[f64], numeric: &[(&str, Vec<f64>)], factors: &[(&str, Vec<String>)]) -> Table {
    let mut t = Table::new(y.len());
    t.insert("response", Column::Numeric(y.to_vec())).unwrap();
    for (name, v) in numeric {
        t.insert(*name, Column::Numeric(v.clone())).unwrap();
    }
    for (name, v) in factors {
        t.insert(*name, Column::Factor(FactorColumn::from_values(v))).unwrap();
    }
    t
}

pub fn labels(prefix: &str, codes: impl IntoIterator<Item = usize>) -> Vec<String> {
    codes.into_iter().map(|c| format!("{prefix}{c}")).collect()
}

pub fn designs(formula: &str, t: &Table) -> DesignSet {
    build_designs_on_table(&parse_formula(formula).unwrap(), t, Default::default()).unwrap()
}
