//! End-to-end analysis: propensity model, weights, subgroup effects,
//! inference and balance grids.

use std::io::Write;

use serde::Serialize;

use crate::config::{AnalysisConfig, PsModel};
use crate::data::{enumerate_cells, AnalysisDataset, SubgroupCell};
use crate::design::{build_design, ColumnKind, DesignMatrix, InteractionSelector};
use crate::diagnostics::{build_connect_s, ConnectSGrid};
use crate::error::{Error, Result};
use crate::glm::{
    clamp_propensities, fit_lasso_logistic, fit_logistic_irls, linear_predictor, post_lasso_refit,
    IrlsOptions, LambdaRule, LassoOptions, LassoPath, LogisticFit,
};
use crate::inference::{apply_inference, BootstrapReport, InferenceConfig, VarianceMethod};
use crate::weighting::{
    clip_propensities, compute_weights, estimate_effect, EffectEstimate, TiltingFunction, WeightSet,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PropensityOptions {
    pub lasso: LassoOptions,
    pub irls: IrlsOptions,
}

impl PropensityOptions {
    pub fn from_config(cfg: &AnalysisConfig) -> Self {
        let irls = IrlsOptions::default();
        PropensityOptions {
            lasso: LassoOptions {
                n_lambda: cfg.n_lambda,
                lambda_ratio: cfg.lambda_ratio,
                folds: cfg.cv_folds,
                seed: cfg.seed.unwrap_or(0),
                standardize: cfg.standardize,
                rule: cfg.lambda_rule,
                irls,
                ..LassoOptions::default()
            },
            irls,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.lasso.seed = seed;
        self
    }
}

/// A covariate-by-subgroup interaction kept by the LASSO.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectedInteraction {
    pub column: String,
    pub covariate: String,
    pub subgroup: String,
}

/// Cross-validation summary of a LASSO fit.
#[derive(Debug, Clone, Serialize)]
pub struct LassoSummary {
    pub lambdas: Vec<f64>,
    pub cv_mean: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub rule: LambdaRule,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    pub folds: usize,
    pub fold_seed: u64,
    pub standardize: bool,
    /// Coefficients at the chosen λ, in design column order.
    pub coefficients: Vec<f64>,
}

impl From<&LassoPath> for LassoSummary {
    fn from(p: &LassoPath) -> Self {
        LassoSummary {
            lambdas: p.lambdas.clone(),
            cv_mean: p.cv_mean.clone(),
            cv_se: p.cv_se.clone(),
            rule: p.rule,
            chosen_index: p.chosen_index,
            chosen_lambda: p.chosen_lambda,
            folds: p.folds,
            fold_seed: p.fold_seed,
            standardize: p.options.standardize,
            coefficients: p.chosen_coefficients().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropensityModelFit {
    pub model: PsModel,
    #[serde(skip)]
    pub propensity: Vec<f64>,
    /// Columns of the model that produced the propensities.
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub lasso: Option<LassoSummary>,
    /// Maximum-likelihood fit (logistic-main, full-interaction, post-lasso).
    pub ml_fit: Option<LogisticFit>,
    pub selected: Vec<SelectedInteraction>,
    /// Fitted values clamped to machine precision away from 0 or 1.
    pub clamped: usize,
}

fn selected_interactions(ds: &AnalysisDataset, dm: &DesignMatrix, cols: &[usize]) -> Vec<SelectedInteraction> {
    cols.iter()
        .filter_map(|&j| match dm.columns[j].kind {
            ColumnKind::Interaction { p, r } => Some(SelectedInteraction {
                column: dm.columns[j].name.clone(),
                covariate: ds.covariate_names[p].clone(),
                subgroup: ds.indicators()[r].display(),
            }),
            _ => None,
        })
        .collect()
}

fn ml_model(model: PsModel, dm: DesignMatrix, z: &[bool], opts: &IrlsOptions) -> Result<PropensityModelFit> {
    let fit = fit_logistic_irls(&dm, z, opts)?;
    fit.ensure_converged()?;
    Ok(PropensityModelFit {
        model,
        propensity: fit.propensities.clone(),
        columns: dm.column_names(),
        coefficients: fit.coefficients.clone(),
        lasso: None,
        clamped: fit.clamped,
        ml_fit: Some(fit),
        selected: Vec::new(),
    })
}

/// Fits the propensity model `model` to `ds`.
pub fn fit_propensity(
    ds: &AnalysisDataset,
    model: PsModel,
    opts: &PropensityOptions,
) -> Result<PropensityModelFit> {
    match model {
        PsModel::LogisticMain => ml_model(
            model,
            build_design(ds, &InteractionSelector::None)?,
            &ds.z,
            &opts.irls,
        ),
        PsModel::FullInteraction => ml_model(
            model,
            build_design(ds, &InteractionSelector::All)?,
            &ds.z,
            &opts.irls,
        ),
        PsModel::Lasso | PsModel::PostLasso => {
            let full = build_design(ds, &InteractionSelector::All)?;
            if full.interaction_columns().is_empty() {
                return Err(Error::Config(
                    "LASSO propensity model needs at least one subgroup indicator".into(),
                ));
            }
            let path = fit_lasso_logistic(&full, &ds.z, &opts.lasso)?;
            let selected = selected_interactions(ds, &full, &path.selected);
            if model == PsModel::Lasso {
                let beta = path.chosen_coefficients().to_vec();
                let p = clamp_propensities(&linear_predictor(&full.matrix, &beta));
                return Ok(PropensityModelFit {
                    model,
                    propensity: p.values,
                    columns: full.column_names(),
                    coefficients: beta,
                    lasso: Some(LassoSummary::from(&path)),
                    ml_fit: None,
                    selected,
                    clamped: p.clamped,
                });
            }
            let (reduced, fit) = post_lasso_refit(&full, &ds.z, &path.selected, &opts.irls)?;
            fit.ensure_converged()?;
            Ok(PropensityModelFit {
                model,
                propensity: fit.propensities.clone(),
                columns: reduced.column_names(),
                coefficients: fit.coefficients.clone(),
                lasso: Some(LassoSummary::from(&path)),
                clamped: fit.clamped,
                ml_fit: Some(fit),
                selected,
            })
        }
        PsModel::External => {
            let e = ds.external_propensity.clone().ok_or_else(|| {
                Error::Config("external propensity model selected but no propensity column loaded".into())
            })?;
            Ok(PropensityModelFit {
                model,
                propensity: e,
                columns: Vec::new(),
                coefficients: Vec::new(),
                lasso: None,
                ml_fit: None,
                selected: Vec::new(),
                clamped: 0,
            })
        }
    }
}

/// Weights from fitted propensities, with optional clipping.
pub fn weights_from_propensity(
    e: &[f64],
    z: &[bool],
    tilt: TiltingFunction,
    clip: Option<f64>,
    source: &str,
) -> Result<WeightSet> {
    let (e, _) = match clip {
        Some(eps) => clip_propensities(e, eps),
        None => (e.to_vec(), 0),
    };
    let mut ws = compute_weights(&e, z, tilt)?.with_source(source);
    ws.clip = clip;
    Ok(ws)
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceSummary {
    pub method: VarianceMethod,
    pub level: f64,
    pub bootstrap: Option<BootstrapReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub ps_model: PsModel,
    pub tilting: TiltingFunction,
    pub estimand: String,
    pub propensity: PropensityModelFit,
    #[serde(skip)]
    pub weights: WeightSet,
    pub estimates: Vec<EffectEstimate>,
    /// Cells without both treated and control members; no estimate.
    pub degenerate_cells: Vec<String>,
    pub inference: InferenceSummary,
    #[serde(skip)]
    pub balance_before: ConnectSGrid,
    #[serde(skip)]
    pub balance_after: ConnectSGrid,
    pub warnings: Vec<String>,
}

/// Hájek estimates for every non-degenerate cell, plus the labels of the
/// degenerate ones.
pub fn estimate_cells(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cells: &[SubgroupCell],
) -> Result<(Vec<EffectEstimate>, Vec<String>)> {
    let mut estimates = Vec::new();
    let mut degenerate = Vec::new();
    for cell in cells {
        if cell.is_degenerate() {
            degenerate.push(cell.label());
        } else {
            estimates.push(estimate_effect(ds, ws, cell)?);
        }
    }
    Ok((estimates, degenerate))
}

pub fn model_label(model: PsModel, tilt: TiltingFunction) -> String {
    format!("{} + {}", model.as_str(), tilt.as_str().to_uppercase())
}

/// Runs the configured pipeline. With the defaults this is post-LASSO
/// propensity estimation followed by overlap weighting.
pub fn run_analysis(ds: &AnalysisDataset, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    cfg.validate()?;
    let needs_seed = matches!(cfg.ps_model, PsModel::Lasso | PsModel::PostLasso)
        || cfg.variance == VarianceMethod::Bootstrap;
    if needs_seed && cfg.seed.is_none() {
        return Err(Error::Config(
            "a seed is required for cross-validation and bootstrap resampling".into(),
        ));
    }
    let seed = cfg.seed.unwrap_or(0);
    let cells = enumerate_cells(ds);
    let opts = PropensityOptions::from_config(cfg);
    let propensity = fit_propensity(ds, cfg.ps_model, &opts)?;
    let label = model_label(cfg.ps_model, cfg.tilting);
    let mut ws = weights_from_propensity(
        &propensity.propensity,
        &ds.z,
        cfg.tilting,
        cfg.clip_propensity,
        &label,
    )?;
    ws.normalize_cells(ds, &cells);

    let mut warnings = Vec::new();
    if !ws.extreme_units.is_empty() {
        warnings.push(format!(
            "{} units have propensity at the numerical boundary; inverse probability weights are extreme",
            ws.extreme_units.len()
        ));
    }
    if propensity.clamped > 0 {
        warnings.push(format!(
            "{} fitted propensities were clamped to machine precision",
            propensity.clamped
        ));
    }

    let (mut estimates, degenerate_cells) = estimate_cells(ds, &ws, &cells)?;
    for d in &degenerate_cells {
        warnings.push(format!("cell {d} lacks a treatment arm; no estimate"));
    }
    let inf_cfg = InferenceConfig {
        method: cfg.variance,
        level: cfg.ci_level,
        bootstrap_b: cfg.bootstrap_b,
        seed,
    };
    let bootstrap = apply_inference(ds, &ws, &cells, &mut estimates, &inf_cfg)?;
    for est in estimates.iter().filter(|e| e.se.is_none()) {
        warnings.push(format!("cell {} has an arm of one unit; no standard error", est.cell));
    }

    let balance_before = build_connect_s(ds, &WeightSet::unit(ds.n()), &cells, &cfg.asmd_thresholds)
        .with_title("Unadjusted");
    let balance_after = build_connect_s(ds, &ws, &cells, &cfg.asmd_thresholds).with_title(label);

    Ok(AnalysisReport {
        ps_model: cfg.ps_model,
        tilting: cfg.tilting,
        estimand: cfg.tilting.estimand().to_string(),
        propensity,
        weights: ws,
        estimates,
        degenerate_cells,
        inference: InferenceSummary {
            method: cfg.variance,
            level: cfg.ci_level,
            bootstrap,
        },
        balance_before,
        balance_after,
        warnings,
    })
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{v:.10e}"))
}

/// Effects table, one row per estimated cell.
pub fn write_effects_csv<W: Write>(report: &AnalysisReport, mut out: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io_err)?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "cell", "variable", "level", "estimand", "estimate", "se", "ci_lower", "ci_upper",
        "variance_method", "treated_mean", "control_mean", "n_treated", "n_control",
        "ess_treated", "ess_control",
    ])?;
    for e in &report.estimates {
        w.write_record([
            e.cell.clone(),
            e.variable.clone(),
            e.level.clone(),
            e.estimand.clone(),
            format!("{:.10e}", e.estimate),
            opt(e.se),
            opt(e.ci_lower),
            opt(e.ci_upper),
            e.variance_method.clone().unwrap_or_else(|| "NA".into()),
            format!("{:.10e}", e.treated_mean),
            format!("{:.10e}", e.control_mean),
            e.n_treated.to_string(),
            e.n_control.to_string(),
            format!("{:.6}", e.ess_treated),
            format!("{:.6}", e.ess_control),
        ])?;
    }
    for d in &report.degenerate_cells {
        w.write_record([
            d.as_str(), "", "", &report.estimand, "NA", "NA", "NA", "NA", "NA", "NA", "NA", "", "",
            "", "",
        ])?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Per-unit propensity and weight table.
pub fn write_weights_csv<W: Write>(
    ds: &AnalysisDataset,
    report: &AnalysisReport,
    mut out: W,
    comment: Option<&str>,
) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io_err)?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "treatment", "propensity", "weight"])?;
    for i in 0..ds.n() {
        w.write_record([
            (i + 1).to_string(),
            (ds.z[i] as u8).to_string(),
            format!("{:.15e}", report.propensity.propensity[i]),
            format!("{:.15e}", report.weights.weights[i]),
        ])?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Reads a weights table written by [`write_weights_csv`] (or any CSV with
/// a `weight` column), skipping `#` comment lines.
pub fn read_weights_csv(path: &std::path::Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h == "weight")
        .ok_or_else(|| Error::Data(format!("{} has no `weight` column", path.display())))?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec[col].trim().parse().map_err(|_| {
            Error::Data(format!("row {} of {}: weight {:?} is not a number", k + 1, path.display(), &rec[col]))
        })?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Data(format!("row {}: weight must be finite and nonnegative", k + 1)));
        }
        out.push(v);
    }
    Ok(out)
}
