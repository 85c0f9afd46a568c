//! Sparse design blocks for the general-design Poisson model.
//!
//! `X` holds the unregularized coefficients, each random-effect term `j` becomes a
//! block with `g_j` levels of dimension `d_j` (columns level-major), and each
//! `v_fe(...)` term becomes a one-hot block with a sum-to-zero constraint.

mod rank;
mod sparse;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentedTable, Column, Table};
use crate::error::{Error, Result};
use crate::formula::{FormulaAst, RandomEffectTerm};

pub use rank::{check_rank, Dependency, RankReport, RANK_CHECK_MAX_COLS};
pub use sparse::SparseMatrix;

/// Marks a prediction row whose random-effect level was never seen during fitting.
pub const UNSEEN: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    /// Scale numeric covariates to unit variance before fitting.
    pub standardize: bool,
}

/// One source of columns in the unregularized block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FixedTerm {
    Intercept,
    Numeric { name: String, scale: f64 },
    /// Sum-to-zero contrasts: level `k < K - 1` maps to column `k`; the last level is `-1` everywhere.
    Categorical { name: String, levels: Vec<String> },
}

impl FixedTerm {
    pub fn n_cols(&self) -> usize {
        match self {
            FixedTerm::Intercept | FixedTerm::Numeric { .. } => 1,
            FixedTerm::Categorical { levels, .. } => levels.len() - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReLayout {
    pub term: RandomEffectTerm,
    pub level_names: Vec<String>,
    /// Divisor applied to each inner covariate.
    pub scales: Vec<f64>,
}

impl ReLayout {
    pub fn dim(&self) -> usize {
        self.term.dim()
    }

    /// Name of each `z^b` slot.
    pub fn slot_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.term.include_intercept {
            out.push("(Intercept)".to_string());
        }
        out.extend(self.term.inner_terms.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeLayout {
    pub name: String,
    pub level_names: Vec<String>,
}

/// Everything needed to rebuild the design on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub response: String,
    pub fixed: Vec<FixedTerm>,
    pub x_names: Vec<String>,
    pub re: Vec<ReLayout>,
    pub fe: Vec<FeLayout>,
}

impl DesignLayout {
    pub fn n_fixed(&self) -> usize {
        self.x_names.len()
    }

    /// Divisor of each `X` column; coefficients on the original scale are `beta / scale`.
    pub fn x_scales(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.fixed {
            match t {
                FixedTerm::Numeric { scale, .. } => out.push(*scale),
                other => out.extend(std::iter::repeat_n(1.0, other.n_cols())),
            }
        }
        out
    }

    /// Builds the unregularized and random-effect blocks for new rows.
    ///
    /// Random-effect levels not present at fit time are marked [`UNSEEN`] and counted; an
    /// unseen level of a categorical fixed term is an error. `v_fe` blocks are not built.
    pub fn predict_blocks(&self, table: &Table) -> Result<PredictionBlocks> {
        let x = build_x_rows(&self.fixed, table, true)?;
        let mut re_blocks = Vec::with_capacity(self.re.len());
        let mut unseen = 0usize;
        for lay in &self.re {
            let lookup: HashMap<&str, u32> =
                lay.level_names.iter().enumerate().map(|(i, n)| (n.as_str(), i as u32)).collect();
            let names = group_labels(table, &lay.term.group_expr)?;
            let levels: Vec<u32> = names
                .iter()
                .map(|n| match lookup.get(n.as_str()) {
                    Some(&l) => l,
                    None => {
                        unseen += 1;
                        UNSEEN
                    }
                })
                .collect();
            let zb = slot_values(table, &lay.term, &lay.scales)?;
            re_blocks.push(ReBlock { levels, zb, g: lay.level_names.len(), d: lay.dim(), level_names: lay.level_names.clone() });
        }
        if unseen > 0 {
            log::info!("{unseen} prediction row-term pairs fall in unseen random-effect levels (contribute 0)");
        }
        Ok(PredictionBlocks { x, re_blocks, unseen })
    }
}

/// Design rows for prediction (no `v_fe` blocks).
#[derive(Debug, Clone)]
pub struct PredictionBlocks {
    pub x: SparseMatrix,
    pub re_blocks: Vec<ReBlock>,
    /// Row-term pairs that fell in unseen random-effect levels.
    pub unseen: usize,
}

/// Random-effect block `Z_j = m_j ⊗ z^b_j`, stored by membership plus slot values.
#[derive(Debug, Clone, PartialEq)]
pub struct ReBlock {
    /// Level of each row (or [`UNSEEN`] at prediction time).
    pub levels: Vec<u32>,
    /// Row-major `n × d` slot values `z^b`.
    pub zb: Vec<f64>,
    pub g: usize,
    pub d: usize,
    pub level_names: Vec<String>,
}

impl ReBlock {
    pub fn n_rows(&self) -> usize {
        self.levels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.g * self.d
    }

    pub fn slots(&self, r: usize) -> &[f64] {
        &self.zb[r * self.d..(r + 1) * self.d]
    }

    /// Expanded sparse `Z_j` with level-major columns.
    pub fn to_sparse(&self) -> SparseMatrix {
        let rows = (0..self.n_rows())
            .map(|r| {
                let l = self.levels[r];
                if l == UNSEEN {
                    return Vec::new();
                }
                let base = l as usize * self.d;
                self.slots(r).iter().enumerate().map(|(k, &v)| ((base + k) as u32, v)).collect()
            })
            .collect();
        SparseMatrix::from_rows(self.n_cols(), rows)
    }

    /// Rows of each level, in row order.
    pub fn rows_by_level(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.g];
        for (r, &l) in self.levels.iter().enumerate() {
            if l != UNSEEN {
                out[l as usize].push(r as u32);
            }
        }
        out
    }
}

/// One-hot block for a `v_fe(...)` term; the constraint is `1ᵀγ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeBlock {
    pub levels: Vec<u32>,
    pub n_levels: usize,
    pub level_names: Vec<String>,
}

impl FeBlock {
    pub fn to_sparse(&self) -> SparseMatrix {
        SparseMatrix::from_rows(self.n_levels, self.levels.iter().map(|&l| vec![(l, 1.0)]).collect())
    }

    /// `diag(XᵀX)`: rows per level.
    pub fn counts(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_levels];
        for &l in &self.levels {
            out[l as usize] += 1.0;
        }
        out
    }
}

/// All blocks of a model, immutable after construction.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub x: SparseMatrix,
    pub re_blocks: Vec<ReBlock>,
    pub fe_blocks: Vec<FeBlock>,
    pub layout: DesignLayout,
}

impl DesignSet {
    pub fn n_rows(&self) -> usize {
        self.x.n_rows()
    }

    /// Linear predictor `Xβ + Σ_j Z_j α_j + Σ_k F_k γ_k` evaluated block by block.
    pub fn linear_predictor(&self, beta: &[f64], alphas: &[Vec<f64>], gammas: &[Vec<f64>]) -> Vec<f64> {
        let mut psi = self.x.mul_vec(beta);
        for (block, a) in self.re_blocks.iter().zip(alphas) {
            for (r, p) in psi.iter_mut().enumerate() {
                let l = block.levels[r] as usize;
                let coef = &a[l * block.d..(l + 1) * block.d];
                *p += block.slots(r).iter().zip(coef).map(|(z, c)| z * c).sum::<f64>();
            }
        }
        for (block, g) in self.fe_blocks.iter().zip(gammas) {
            for (r, p) in psi.iter_mut().enumerate() {
                *p += g[block.levels[r] as usize];
            }
        }
        psi
    }

    /// Writes `X.mtx`, `Z_<j>.mtx`, and `F_<k>.mtx` into `dir`.
    pub fn dump_sparsity(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.x.write_matrix_market(&dir.join("X.mtx"))?;
        for (j, b) in self.re_blocks.iter().enumerate() {
            b.to_sparse().write_matrix_market(&dir.join(format!("Z_{j}.mtx")))?;
        }
        for (k, b) in self.fe_blocks.iter().enumerate() {
            b.to_sparse().write_matrix_market(&dir.join(format!("F_{k}.mtx")))?;
        }
        Ok(())
    }
}

fn column_key_labels(col: &Column) -> Vec<String> {
    (0..col.len()).map(|r| col.key(r)).collect()
}

/// Joined grouping labels (`a:b`) of every row.
fn group_labels(table: &Table, group: &[String]) -> Result<Vec<String>> {
    let cols: Vec<&Column> = group
        .iter()
        .map(|g| table.get(g).ok_or_else(|| Error::Design(format!("unknown grouping variable `{g}`"))))
        .collect::<Result<_>>()?;
    let labels: Vec<Vec<String>> = cols.iter().map(|c| column_key_labels(c)).collect();
    Ok((0..table.n_rows())
        .map(|r| labels.iter().map(|l| l[r].as_str()).collect::<Vec<_>>().join(":"))
        .collect())
}

fn numeric_column<'a>(table: &'a Table, name: &str, role: &str) -> Result<&'a [f64]> {
    match table.get(name) {
        Some(Column::Numeric(v)) => Ok(v),
        Some(Column::Factor(_)) => Err(Error::Design(format!("{role} `{name}` must be numeric"))),
        None => Err(Error::Design(format!("unknown variable `{name}`"))),
    }
}

fn slot_values(table: &Table, term: &RandomEffectTerm, scales: &[f64]) -> Result<Vec<f64>> {
    let inner: Vec<&[f64]> = term
        .inner_terms
        .iter()
        .map(|v| numeric_column(table, v, "random-slope covariate"))
        .collect::<Result<_>>()?;
    let d = term.dim();
    let mut zb = Vec::with_capacity(table.n_rows() * d);
    for r in 0..table.n_rows() {
        if term.include_intercept {
            zb.push(1.0);
        }
        for (col, s) in inner.iter().zip(scales) {
            zb.push(col[r] / s);
        }
    }
    Ok(zb)
}

fn build_x_rows(fixed: &[FixedTerm], table: &Table, prediction: bool) -> Result<SparseMatrix> {
    let n = table.n_rows();
    let n_cols: usize = fixed.iter().map(FixedTerm::n_cols).sum();
    if n_cols == 0 {
        return Ok(SparseMatrix::empty(n));
    }
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    let mut offset = 0u32;
    for term in fixed {
        match term {
            FixedTerm::Intercept => rows.iter_mut().for_each(|r| r.push((offset, 1.0))),
            FixedTerm::Numeric { name, scale } => {
                let v = numeric_column(table, name, "unregularized term")?;
                for (row, x) in rows.iter_mut().zip(v) {
                    row.push((offset, x / scale));
                }
            }
            FixedTerm::Categorical { name, levels } => {
                let col = table.get(name).ok_or_else(|| Error::Design(format!("unknown variable `{name}`")))?;
                let lookup: HashMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                let k_last = levels.len() - 1;
                for (r, row) in rows.iter_mut().enumerate() {
                    let label = col.key(r);
                    let k = *lookup.get(label.as_str()).ok_or_else(|| {
                        let what = if prediction { "unseen level" } else { "unknown level" };
                        Error::Design(format!("{what} `{label}` of unregularized term `{name}` (no prior to fall back on)"))
                    })?;
                    if k < k_last {
                        row.push((offset + k as u32, 1.0));
                    } else {
                        row.extend((0..k_last as u32).map(|c| (offset + c, -1.0)));
                    }
                }
            }
        }
        offset += term.n_cols() as u32;
    }
    Ok(SparseMatrix::from_rows(n_cols, rows))
}

fn sd_scale(v: &[f64], standardize: bool) -> f64 {
    if !standardize || v.is_empty() {
        return 1.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0
    }
}

/// Levels in order of first appearance plus the level index of each row.
fn intern(labels: &[String]) -> (Vec<String>, Vec<u32>) {
    let mut lookup: HashMap<&str, u32> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    let mut codes = Vec::with_capacity(labels.len());
    for l in labels {
        let code = *lookup.entry(l.as_str()).or_insert_with(|| {
            names.push(l.clone());
            (names.len() - 1) as u32
        });
        codes.push(code);
    }
    (names, codes)
}

/// Builds every design block from a formula and long-format data.
///
/// Random-effect terms (and `v_fe` terms) are put in canonical order so the solve
/// order does not depend on how the formula was written.
pub fn build_designs(ast: &FormulaAst, data: &AugmentedTable, options: DesignOptions) -> Result<DesignSet> {
    build_designs_on_table(ast, &data.table, options)
}

/// [`build_designs`] on any table holding the response and every formula variable.
pub fn build_designs_on_table(ast: &FormulaAst, table: &Table, options: DesignOptions) -> Result<DesignSet> {
    let ast = ast.canonicalized();
    numeric_column(table, &ast.response, "response")?;
    for v in ast.variables() {
        if !table.has(&v) {
            return Err(Error::Design(format!("unknown variable `{v}`")));
        }
    }

    let mut fixed = Vec::new();
    let mut x_names = Vec::new();
    if ast.has_intercept() {
        fixed.push(FixedTerm::Intercept);
        x_names.push("(Intercept)".to_string());
    }
    for name in &ast.fixed_terms {
        match table.column(name)? {
            Column::Numeric(v) => {
                fixed.push(FixedTerm::Numeric { name: name.clone(), scale: sd_scale(v, options.standardize) });
                x_names.push(name.clone());
            }
            Column::Factor(f) => {
                let mut present = vec![false; f.n_levels()];
                for &c in &f.codes {
                    present[c as usize] = true;
                }
                let levels: Vec<String> =
                    f.levels.iter().zip(&present).filter(|(_, p)| **p).map(|(l, _)| l.clone()).collect();
                if levels.len() < 2 {
                    return Err(Error::Design(format!(
                        "categorical term `{name}` has a single observed level; it cannot be contrast coded"
                    )));
                }
                x_names.extend(levels[..levels.len() - 1].iter().map(|l| format!("{name}[{l}]")));
                fixed.push(FixedTerm::Categorical { name: name.clone(), levels });
            }
        }
    }
    let x = build_x_rows(&fixed, table, false)?;

    let mut re_layouts = Vec::new();
    let mut re_blocks = Vec::new();
    for term in &ast.re_terms {
        let labels = group_labels(table, &term.group_expr)?;
        let (level_names, levels) = intern(&labels);
        if level_names.len() == 1 {
            log::warn!("random effect {term} has a single level");
        }
        let scales: Vec<f64> = term
            .inner_terms
            .iter()
            .map(|v| numeric_column(table, v, "random-slope covariate").map(|c| sd_scale(c, options.standardize)))
            .collect::<Result<_>>()?;
        let zb = slot_values(table, term, &scales)?;
        re_blocks.push(ReBlock { levels, zb, g: level_names.len(), d: term.dim(), level_names: level_names.clone() });
        re_layouts.push(ReLayout { term: term.clone(), level_names, scales });
    }

    let mut fe_terms = ast.fe_terms.clone();
    fe_terms.sort();
    let mut fe_layouts = Vec::new();
    let mut fe_blocks = Vec::new();
    for name in &fe_terms {
        let col = table.column(name)?;
        let (level_names, levels) = intern(&column_key_labels(col));
        fe_blocks.push(FeBlock { levels, n_levels: level_names.len(), level_names: level_names.clone() });
        fe_layouts.push(FeLayout { name: name.clone(), level_names });
    }

    let layout = DesignLayout { response: ast.response.clone(), fixed, x_names, re: re_layouts, fe: fe_layouts };
    Ok(DesignSet { x, re_blocks, fe_blocks, layout })
}
