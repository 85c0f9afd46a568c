//! Run configuration: a TOML file whose every key also has a command-line flag.

use std::path::{Path, PathBuf};

use mvmrp::baselines::Estimator;
use mvmrp::data::{AltCovariate, QuestionSpec};
use mvmrp::design::DesignOptions;
use mvmrp::sim::{GeneratorSpec, TruthKind};
use mvmrp::vi::SolverConfig;
use mvmrp::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableConfig {
    pub path: Option<PathBuf>,
    pub id_column: Option<String>,
    pub weight_column: Option<String>,
    pub delimiter: Option<char>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoststratConfig {
    pub path: Option<PathBuf>,
    pub id_column: Option<String>,
    pub weight_column: Option<String>,
    pub geography: Option<String>,
    pub delimiter: Option<char>,
}

/// An alternative-specific covariate file with columns `keys..., level_column, value_column`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AltConfig {
    pub name: String,
    pub path: PathBuf,
    pub keys: Vec<String>,
    pub question: String,
    pub level_column: String,
    pub value_column: String,
}

impl AltConfig {
    pub fn load(&self, base: &Path) -> Result<AltCovariate> {
        AltCovariate::load(&base.join(&self.path), &self.name, &self.keys, &self.question, &self.level_column, &self.value_column)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub generator: Option<GeneratorSpec>,
    pub truth: Option<TruthKind>,
    /// Estimator labels: `mvmrp`, `copart`, `pp-ova`, `separate`, `naive`, `truth`.
    pub estimators: Option<Vec<String>>,
    pub reference: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub formula: Option<String>,
    pub estimator: Option<Estimator>,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub variance_adjusted: Option<bool>,
    pub survey: TableConfig,
    pub poststrat: PoststratConfig,
    pub questions: Vec<QuestionSpec>,
    pub alt: Vec<AltConfig>,
    pub solver: SolverConfig,
    pub design: DesignOptions,
    pub simulate: SimulateConfig,
    /// Directory relative paths are resolved against; set from the file location.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for q in &cfg.questions {
            q.validate()?;
        }
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn alts(&self) -> Result<Vec<AltCovariate>> {
        self.alt.iter().map(|a| a.load(&self.base_dir)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_section() {
        let cfg: RunConfig = toml::from_str(
            r#"
            formula = "y ~ (1 | state)"
            estimator = "pp-ova"
            jobs = 2
            [survey]
            path = "survey.csv"
            id_column = "id"
            [poststrat]
            path = "cells.csv"
            geography = "state"
            weight_column = "n"
            [[questions]]
            name = "party"
            levels = ["D", "R"]
            [[alt]]
            name = "lag_copart"
            path = "lag.csv"
            keys = ["state"]
            question = "party"
            level_column = "party"
            value_column = "lag"
            [solver]
            max_iter = 10
            [simulate]
            truth = "superpoll"
            estimators = ["mvmrp", "naive"]
            [simulate.generator]
            replications = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.estimator, Some(Estimator::PpOva));
        assert_eq!(cfg.solver.max_iter, 10);
        assert_eq!(cfg.solver.elbo_rel_tol, SolverConfig::default().elbo_rel_tol);
        assert_eq!(cfg.simulate.generator.unwrap().replications, 3);
        assert_eq!(cfg.simulate.truth, Some(TruthKind::Superpoll));
        assert_eq!(cfg.alt[0].keys, vec!["state"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("formla = \"y ~ (1|g)\"").is_err());
    }
}
