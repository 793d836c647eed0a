//! Analysis and simulation configuration files.
//!
//! Both files are TOML key-value documents. Relative data paths resolve
//! against the directory holding the configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::LambdaRule;
use crate::inference::VarianceMethod;
use crate::weighting::TiltingFunction;

/// Source of the propensity scores used to build the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsModel {
    /// Main-effects logistic regression fitted by maximum likelihood.
    LogisticMain,
    /// L1-penalized logistic regression on the full interaction design.
    Lasso,
    /// Maximum-likelihood refit on the interactions selected by the LASSO.
    PostLasso,
    /// Full interaction design fitted by maximum likelihood.
    FullInteraction,
    /// Propensity scores read from a column of the input data.
    External,
}

impl PsModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PsModel::LogisticMain => "logistic-main",
            PsModel::Lasso => "lasso",
            PsModel::PostLasso => "post-lasso",
            PsModel::FullInteraction => "full-interaction",
            PsModel::External => "external",
        }
    }
}

fn default_tilting() -> TiltingFunction {
    TiltingFunction::Overlap
}
fn default_ps_model() -> PsModel {
    PsModel::PostLasso
}
fn default_bootstrap_b() -> usize {
    1000
}
fn default_cv_folds() -> usize {
    10
}
fn default_n_lambda() -> usize {
    100
}
fn default_lambda_ratio() -> f64 {
    1e-4
}
fn default_true() -> bool {
    true
}
fn default_ci_level() -> f64 {
    0.95
}
fn default_thresholds() -> Vec<f64> {
    vec![0.05, 0.10, 0.20]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// CSV input; may be overridden on the command line.
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub subgroups: Vec<String>,
    /// Optional declared level order per subgroup variable. Declared levels
    /// with no members are kept and reported as degenerate cells.
    #[serde(default)]
    pub levels: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_tilting")]
    pub tilting: TiltingFunction,
    #[serde(default = "default_ps_model")]
    pub ps_model: PsModel,
    /// Column carrying externally estimated propensity scores.
    #[serde(default)]
    pub propensity_column: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub variance: VarianceMethod,
    #[serde(rename = "bootstrap_B", alias = "bootstrap_b", default = "default_bootstrap_b")]
    pub bootstrap_b: usize,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_n_lambda")]
    pub n_lambda: usize,
    #[serde(default = "default_lambda_ratio")]
    pub lambda_ratio: f64,
    #[serde(default)]
    pub lambda_rule: LambdaRule,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub clip_propensity: Option<f64>,
    #[serde(default = "default_thresholds")]
    pub asmd_thresholds: Vec<f64>,
}

impl AnalysisConfig {
    /// Minimal configuration with every optional key at its default.
    pub fn new(
        outcome: impl Into<String>,
        treatment: impl Into<String>,
        covariates: Vec<String>,
        subgroups: Vec<String>,
    ) -> Self {
        AnalysisConfig {
            data: None,
            outcome: outcome.into(),
            treatment: treatment.into(),
            covariates,
            subgroups,
            levels: BTreeMap::new(),
            tilting: default_tilting(),
            ps_model: default_ps_model(),
            propensity_column: None,
            seed: None,
            variance: VarianceMethod::default(),
            bootstrap_b: default_bootstrap_b(),
            ci_level: default_ci_level(),
            cv_folds: default_cv_folds(),
            n_lambda: default_n_lambda(),
            lambda_ratio: default_lambda_ratio(),
            lambda_rule: LambdaRule::default(),
            standardize: true,
            clip_propensity: None,
            asmd_thresholds: default_thresholds(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: AnalysisConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file; a relative `data` path is resolved
    /// against the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(data) = cfg.data.as_mut() {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Config("at least one covariate is required".into()));
        }
        if self.ps_model == PsModel::External && self.propensity_column.is_none() {
            return Err(Error::Config(
                "ps_model = \"external\" requires propensity_column".into(),
            ));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if self.n_lambda < 2 {
            return Err(Error::Config("n_lambda must be at least 2".into()));
        }
        if !(self.lambda_ratio > 0.0 && self.lambda_ratio < 1.0) {
            return Err(Error::Config("lambda_ratio must lie in (0, 1)".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config("ci_level must lie in (0, 1)".into()));
        }
        if self.variance == VarianceMethod::Bootstrap && self.bootstrap_b < 100 {
            return Err(Error::Config("bootstrap_B must be at least 100".into()));
        }
        if let Some(eps) = self.clip_propensity {
            if !(eps > 0.0 && eps < 0.5) {
                return Err(Error::Config("clip_propensity must lie in (0, 0.5)".into()));
            }
        }
        if self.asmd_thresholds.is_empty()
            || self.asmd_thresholds.windows(2).any(|w| w[0] >= w[1])
            || self.asmd_thresholds[0] <= 0.0
        {
            return Err(Error::Config(
                "asmd_thresholds must be positive and strictly increasing".into(),
            ));
        }
        for name in self.levels.keys() {
            if !self.subgroups.contains(name) {
                return Err(Error::Config(format!(
                    "levels declared for `{name}`, which is not a subgroup variable"
                )));
            }
        }
        Ok(())
    }
}
