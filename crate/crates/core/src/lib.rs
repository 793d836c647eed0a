//! Propensity score weighting for subgroup treatment effects.
//!
//! The crate fits a propensity model (plain logistic, LASSO with
//! covariate-by-subgroup interactions, or the post-LASSO refit), turns it
//! into inverse probability or overlap weights, estimates Hájek contrasts
//! in every subgroup cell, and reports balance through the Connect-S grid.
//! The `sim` module holds the Monte Carlo harness used to check all of it.

pub mod analysis;
pub mod config;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod glm;
pub mod inference;
pub mod sim;
pub mod svg;
pub mod weighting;

pub use config::{AnalysisConfig, PsModel};
pub use data::{enumerate_cells, load_csv, AnalysisDataset, SubgroupCell, SubgroupVariable};
pub use design::{build_design, DesignMatrix, InteractionSelector};
pub use diagnostics::{build_connect_s, ConnectSGrid, Metric};
pub use error::{Error, ErrorClass, Result};
pub use inference::{InferenceConfig, VarianceMethod};
pub use weighting::{compute_weights, estimate_effect, EffectEstimate, TiltingFunction, WeightSet};
