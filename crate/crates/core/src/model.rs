//! A fitted model: formula, design layout, category set, and variational state together.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentedTable, CategorySet, Table};
use crate::design::{build_designs, check_rank, DesignLayout, DesignOptions, DesignSet, RankReport, UNSEEN};
use crate::error::{Error, Result};
use crate::formula::{parse_formula, FormulaAst};
use crate::vi::{fit, SolverConfig, StateDocument, VariationalState};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub solver: SolverConfig,
    pub design: DesignOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub formula: FormulaAst,
    pub categories: CategorySet,
    pub layout: DesignLayout,
    pub state: VariationalState,
}

/// Rejects collinear unregularized columns before the solver sees them.
pub fn ensure_full_rank(designs: &DesignSet) -> Result<()> {
    match check_rank(&designs.x, &designs.layout.x_names) {
        RankReport::FullRank => Ok(()),
        RankReport::Skipped { n_cols } => {
            log::info!("rank check skipped for {n_cols} unregularized columns");
            Ok(())
        }
        RankReport::Deficient { rank, dependencies } => {
            let detail: Vec<String> = dependencies
                .iter()
                .map(|d| {
                    let on: Vec<String> = d.on.iter().map(|(n, c)| format!("{c:+.4}·{n}")).collect();
                    format!("`{}` = {}", d.column, if on.is_empty() { "0".into() } else { on.join(" ") })
                })
                .collect();
            Err(Error::Design(format!(
                "unregularized design has rank {rank} < {} columns: {}",
                designs.layout.n_fixed(),
                detail.join("; ")
            )))
        }
    }
}

/// Builds designs for `ast` on long-format data and runs the solver.
pub fn fit_model(ast: &FormulaAst, data: &AugmentedTable, options: &FitOptions) -> Result<FittedModel> {
    let renamed;
    let data = if ast.response != data.response_name {
        renamed = data.clone().with_response_name(&ast.response)?;
        &renamed
    } else {
        data
    };
    let designs = build_designs(ast, data, options.design)?;
    ensure_full_rank(&designs)?;
    let state = fit(&designs, &data.y, &options.solver)?;
    Ok(FittedModel { formula: ast.canonicalized(), categories: data.categories.clone(), layout: designs.layout, state })
}

impl FittedModel {
    /// Linear predictor means per row of `table`, excluding every `v_fe` term. With
    /// `variance_adjusted`, half the predictor variance is added.
    pub fn linear_predictor(&self, table: &Table, variance_adjusted: bool) -> Result<Vec<f64>> {
        let blocks = self.layout.predict_blocks(table)?;
        let beta = &self.state.beta;
        let mut lp: Vec<f64> = (0..table.n_rows())
            .map(|r| {
                let mut v = blocks.x.row_dot(r, &beta.mean);
                if variance_adjusted && !beta.mean.is_empty() {
                    v += 0.5 * blocks.x.row_quad(r, &beta.cov);
                }
                v
            })
            .collect();
        for (block, alpha) in blocks.re_blocks.iter().zip(&self.state.alphas) {
            for (r, out) in lp.iter_mut().enumerate() {
                let l = block.levels[r];
                if l == UNSEEN {
                    continue;
                }
                let l = l as usize;
                let z = block.slots(r);
                let mu = alpha.level_mean(l);
                *out += z.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>();
                if variance_adjusted {
                    let c = &alpha.covs[l];
                    let mut q = 0.0;
                    for a in 0..block.d {
                        for b in 0..block.d {
                            q += z[a] * c[(a, b)] * z[b];
                        }
                    }
                    *out += 0.5 * q;
                }
            }
        }
        Ok(lp)
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            version: MODEL_VERSION,
            formula: self.formula.to_string(),
            categories: self.categories.clone(),
            layout: self.layout.clone(),
            state: StateDocument::from(&self.state),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ModelDocument = serde_json::from_str(&text)?;
        doc.into_model()
    }
}

/// On-disk form of a [`FittedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: u32,
    pub formula: String,
    pub categories: CategorySet,
    pub layout: DesignLayout,
    pub state: StateDocument,
}

impl ModelDocument {
    pub fn into_model(self) -> Result<FittedModel> {
        if self.version != MODEL_VERSION {
            return Err(Error::Data(format!("unsupported model version {} (expected {MODEL_VERSION})", self.version)));
        }
        Ok(FittedModel {
            formula: parse_formula(&self.formula)?,
            categories: self.categories,
            layout: self.layout,
            state: self.state.into_state()?,
        })
    }
}
