//! Replicated simulation runs: fit each propensity method to each simulated
//! dataset, estimate subgroup effects, and summarize bias, RMSE, variance,
//! coverage and balance against the Monte Carlo truth.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{generate_with_rng, ScenarioConfig, SimulatedData};
use super::truth::{true_estimands, TrueEstimands};
use crate::analysis::{fit_propensity, weights_from_propensity, PropensityOptions};
use crate::config::PsModel;
use crate::data::{enumerate_cells, OVERALL};
use crate::diagnostics::build_connect_s;
use crate::error::{Error, Result};
use crate::inference::{normal_critical, sandwich_variance};
use crate::weighting::{estimate_effect, TiltingFunction};

/// Label of the rows averaging the subgroup cells (the overall cell is
/// reported separately).
pub const SUBGROUP_AVERAGE: &str = "Subgroup-average";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsSource {
    /// Maximum-likelihood fit of the full covariate-by-subgroup design,
    /// which contains the data-generating treatment model.
    TrueModel,
    LogisticMain,
    Lasso,
    PostLasso,
    /// The known data-generating propensities.
    External,
}

impl PsSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            PsSource::TrueModel => "true-model",
            PsSource::LogisticMain => "logistic-main",
            PsSource::Lasso => "lasso",
            PsSource::PostLasso => "post-lasso",
            PsSource::External => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct MethodSpec {
    pub ps: PsSource,
    pub tilt: TiltingFunction,
}

impl MethodSpec {
    pub fn new(ps: PsSource, tilt: TiltingFunction) -> Self {
        MethodSpec { ps, tilt }
    }

    pub fn label(&self) -> String {
        format!("{}+{}", self.ps.as_str(), self.tilt.as_str())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    /// Parses `"<ps-source>+<ipw|ow>"`, e.g. `"post-lasso+ow"`.
    fn from_str(s: &str) -> Result<Self> {
        let (ps, tilt) = s
            .split_once('+')
            .ok_or_else(|| Error::Config(format!("method {s:?} is not of the form source+tilt")))?;
        let ps = match ps.trim() {
            "true-model" => PsSource::TrueModel,
            "logistic-main" => PsSource::LogisticMain,
            "lasso" => PsSource::Lasso,
            "post-lasso" => PsSource::PostLasso,
            "external" => PsSource::External,
            other => return Err(Error::Config(format!("unknown propensity source {other:?}"))),
        };
        Ok(MethodSpec::new(ps, tilt.trim().parse()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StudyOptions {
    pub mc_draws: usize,
    pub propensity: PropensityOptions,
    pub ci_level: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            mc_draws: 1_000_000,
            propensity: PropensityOptions::default(),
            ci_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub scenario: String,
    pub replicate: usize,
    pub method: String,
    pub cell: String,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub max_asmd: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub method: String,
    pub cell: String,
    pub truth: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    pub relative_bias: f64,
    pub rmse: f64,
    pub empirical_variance: f64,
    pub mean_max_asmd: f64,
    /// Share of replicates whose sandwich interval covers the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub scenario: ScenarioConfig,
    pub label: String,
    pub truth: TrueEstimands,
    pub records: Vec<ReplicateRecord>,
    pub metrics: Vec<MetricsRow>,
}

impl ScenarioResult {
    pub fn metric(&self, method: &MethodSpec, cell: &str) -> Option<&MetricsRow> {
        let m = method.label();
        self.metrics.iter().find(|r| r.method == m && r.cell == cell)
    }
}

/// Seed of the truth oracle for a scenario; kept apart from the replicate
/// streams.
pub fn truth_seed(cfg: &ScenarioConfig) -> u64 {
    cfg.seed ^ 0x5eed_0f_7a_u64.rotate_left(17)
}

fn propensity_for(
    sim: &SimulatedData,
    ps: PsSource,
    opts: &PropensityOptions,
) -> Result<Vec<f64>> {
    let model = match ps {
        PsSource::TrueModel => PsModel::FullInteraction,
        PsSource::LogisticMain => PsModel::LogisticMain,
        PsSource::Lasso => PsModel::Lasso,
        PsSource::PostLasso => PsModel::PostLasso,
        PsSource::External => return Ok(sim.true_propensity.clone()),
    };
    Ok(fit_propensity(&sim.dataset, model, opts)?.propensity)
}

fn run_replicate(
    cfg: &ScenarioConfig,
    label: &str,
    rep: usize,
    methods: &[MethodSpec],
    truth: &TrueEstimands,
    opts: &StudyOptions,
) -> Vec<ReplicateRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64);
    let data = generate_with_rng(cfg, &mut rng);
    let fold_seed = rng.next_u64();
    let popts = opts.propensity.with_seed(fold_seed);

    let mut out = Vec::new();
    let record = |method: &MethodSpec, cell: &str, failure: Option<String>| ReplicateRecord {
        scenario: label.to_string(),
        replicate: rep,
        method: method.label(),
        cell: cell.to_string(),
        truth: truth.target(cell, method.tilt).unwrap_or(f64::NAN),
        estimate: None,
        se: None,
        max_asmd: None,
        failure,
    };
    let labels: Vec<String> = truth.cells.iter().map(|c| c.cell.clone()).collect();
    let sim = match data {
        Ok(sim) => sim,
        Err(e) => {
            for m in methods {
                for c in &labels {
                    out.push(record(m, c, Some(format!("data generation: {e}"))));
                }
            }
            return out;
        }
    };
    let ds = &sim.dataset;
    let cells = enumerate_cells(ds);

    let mut fits: BTreeMap<PsSource, Result<Vec<f64>>> = BTreeMap::new();
    for m in methods {
        fits.entry(m.ps)
            .or_insert_with(|| propensity_for(&sim, m.ps, &popts));
    }
    for m in methods {
        let e = match &fits[&m.ps] {
            Ok(e) => e,
            Err(err) => {
                for c in &labels {
                    out.push(record(m, c, Some(err.to_string())));
                }
                continue;
            }
        };
        let ws = match weights_from_propensity(e, &ds.z, m.tilt, None, &m.label()) {
            Ok(ws) => ws,
            Err(err) => {
                for c in &labels {
                    out.push(record(m, c, Some(err.to_string())));
                }
                continue;
            }
        };
        let grid = build_connect_s(ds, &ws, &cells, &[]);
        for cell in &cells {
            let label = cell.label();
            let mut rec = record(m, &label, None);
            match estimate_effect(ds, &ws, cell) {
                Ok(est) => {
                    rec.estimate = Some(est.estimate);
                    rec.se = sandwich_variance(ds, &ws, cell).ok().map(f64::sqrt);
                    rec.max_asmd = grid.row(&label).and_then(|r| r.max_asmd());
                }
                Err(err) => rec.failure = Some(err.to_string()),
            }
            out.push(rec);
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregates replicate records into one row per (method, cell), then adds
/// the subgroup-average row per method.
pub fn aggregate(
    label: &str,
    methods: &[MethodSpec],
    truth: &TrueEstimands,
    records: &[ReplicateRecord],
    ci_level: f64,
) -> Vec<MetricsRow> {
    let zc = normal_critical(ci_level);
    let mut rows = Vec::new();
    for m in methods {
        let name = m.label();
        let mut per_method = Vec::new();
        for tc in &truth.cells {
            let t = truth.target(&tc.cell, m.tilt).expect("cell in truth");
            let recs: Vec<&ReplicateRecord> = records
                .iter()
                .filter(|r| r.method == name && r.cell == tc.cell)
                .collect();
            let ok: Vec<&&ReplicateRecord> = recs.iter().filter(|r| r.estimate.is_some()).collect();
            let est: Vec<f64> = ok.iter().map(|r| r.estimate.unwrap()).collect();
            let n_ok = est.len();
            let (mean_est, var) = if n_ok > 0 {
                let me = mean(&est);
                let var = if n_ok > 1 {
                    est.iter().map(|v| (v - me).powi(2)).sum::<f64>() / (n_ok - 1) as f64
                } else {
                    f64::NAN
                };
                (me, var)
            } else {
                (f64::NAN, f64::NAN)
            };
            let bias = mean_est - t;
            let rmse = (est.iter().map(|v| (v - t).powi(2)).sum::<f64>() / n_ok as f64).sqrt();
            let asmd: Vec<f64> = ok.iter().filter_map(|r| r.max_asmd).collect();
            let with_se: Vec<&&&ReplicateRecord> = ok.iter().filter(|r| r.se.is_some()).collect();
            let covered = with_se
                .iter()
                .filter(|r| (r.estimate.unwrap() - t).abs() <= zc * r.se.unwrap())
                .count();
            per_method.push(MetricsRow {
                scenario: label.to_string(),
                method: name.clone(),
                cell: tc.cell.clone(),
                truth: t,
                n_ok,
                n_failed: recs.len() - n_ok,
                mean_estimate: mean_est,
                bias,
                relative_bias: if t != 0.0 { bias / t } else { f64::NAN },
                rmse,
                empirical_variance: var,
                mean_max_asmd: if asmd.is_empty() { f64::NAN } else { mean(&asmd) },
                coverage: if with_se.is_empty() {
                    f64::NAN
                } else {
                    covered as f64 / with_se.len() as f64
                },
            });
        }
        let subs: Vec<&MetricsRow> = per_method.iter().filter(|r| r.cell != OVERALL).collect();
        if !subs.is_empty() {
            let avg = |f: &dyn Fn(&MetricsRow) -> f64| subs.iter().map(|r| f(r)).sum::<f64>() / subs.len() as f64;
            let row = MetricsRow {
                scenario: label.to_string(),
                method: name.clone(),
                cell: SUBGROUP_AVERAGE.to_string(),
                truth: avg(&|r| r.truth),
                n_ok: subs.iter().map(|r| r.n_ok).min().unwrap_or(0),
                n_failed: subs.iter().map(|r| r.n_failed).max().unwrap_or(0),
                mean_estimate: avg(&|r| r.mean_estimate),
                bias: avg(&|r| r.bias),
                relative_bias: avg(&|r| r.relative_bias),
                rmse: avg(&|r| r.rmse),
                empirical_variance: avg(&|r| r.empirical_variance),
                mean_max_asmd: avg(&|r| r.mean_max_asmd),
                coverage: avg(&|r| r.coverage),
            };
            per_method.push(row);
        }
        rows.extend(per_method);
    }
    rows
}

/// Runs `cfg.n_replicates` replicates of the scenario. Replicate `k` draws
/// its data from stream `k` of a generator seeded with `cfg.seed`, so
/// results do not depend on scheduling.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    methods: &[MethodSpec],
    opts: &StudyOptions,
) -> Result<ScenarioResult> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods to compare".into()));
    }
    let truth = true_estimands(cfg, opts.mc_draws, truth_seed(cfg))?;
    let label = cfg.label();
    let records: Vec<ReplicateRecord> = (0..cfg.n_replicates)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, &label, rep, methods, &truth, opts))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let metrics = aggregate(&label, methods, &truth, &records, opts.ci_level);
    Ok(ScenarioResult {
        scenario: cfg.clone(),
        label,
        truth,
        records,
        metrics,
    })
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.10e}")
    } else {
        "NA".into()
    }
}

fn optnum(v: Option<f64>) -> String {
    v.map_or("NA".into(), num)
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io_err)?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario", "method", "cell", "truth", "n_ok", "n_failed", "mean_estimate", "bias",
        "relative_bias", "rmse", "empirical_variance", "mean_max_asmd", "coverage",
    ])?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.method.clone(),
            r.cell.clone(),
            num(r.truth),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
            num(r.mean_estimate),
            num(r.bias),
            num(r.relative_bias),
            num(r.rmse),
            num(r.empirical_variance),
            num(r.mean_max_asmd),
            num(r.coverage),
        ])?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn write_records_csv<W: Write>(
    records: &[ReplicateRecord],
    mut out: W,
    comment: Option<&str>,
) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io_err)?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario", "replicate", "method", "cell", "truth", "estimate", "se", "max_asmd", "failure",
    ])?;
    for r in records {
        w.write_record([
            r.scenario.clone(),
            r.replicate.to_string(),
            r.method.clone(),
            r.cell.clone(),
            num(r.truth),
            optnum(r.estimate),
            optnum(r.se),
            optnum(r.max_asmd),
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Truth table for one or more scenarios, one row per (scenario, cell).
pub fn write_truth_csv<W: Write>(
    truths: &[(String, TrueEstimands)],
    mut out: W,
    comment: Option<&str>,
) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io_err)?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "cell", "ate", "ate_se", "ato", "ato_se", "share", "mc_draws"])?;
    for (label, truth) in truths {
        for c in &truth.cells {
            w.write_record([
                label.clone(),
                c.cell.clone(),
                num(c.ate),
                num(c.ate_se),
                num(c.ato),
                num(c.ato_se),
                format!("{:.6}", c.share),
                truth.mc_draws.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kappa: f64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::new(18, 0.25, 1.0, kappa, [0.5, 0.5]);
        cfg.n = 1500;
        cfg.n_replicates = 4;
        cfg.seed = 21;
        cfg
    }

    fn quick() -> StudyOptions {
        StudyOptions {
            mc_draws: 100_000,
            ..StudyOptions::default()
        }
    }

    #[test]
    fn method_labels_round_trip() {
        for s in ["post-lasso+ow", "logistic-main+ipw", "true-model+ow", "external+ipw", "lasso+ow"] {
            assert_eq!(s.parse::<MethodSpec>().unwrap().label(), s);
        }
        assert!("post-lasso".parse::<MethodSpec>().is_err());
        assert!("forest+ow".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn true_model_overlap_weights_balance_every_replicate() {
        let m = [MethodSpec::new(PsSource::TrueModel, TiltingFunction::Overlap)];
        let r = run_scenario(&small(0.75), &m, &quick()).unwrap();
        assert_eq!(r.records.len(), 4 * 5);
        for rec in &r.records {
            assert!(rec.max_asmd.unwrap() <= 1e-8, "{rec:?}");
        }
        let rows: Vec<_> = r.metrics.iter().map(|m| m.cell.as_str()).collect();
        assert_eq!(rows, vec!["S1=0", "S1=1", "S2=0", "S2=1", "Overall", SUBGROUP_AVERAGE]);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let m = [
            MethodSpec::new(PsSource::LogisticMain, TiltingFunction::Ipw),
            MethodSpec::new(PsSource::External, TiltingFunction::Overlap),
        ];
        let a = run_scenario(&small(0.5), &m, &quick()).unwrap();
        let b = run_scenario(&small(0.5), &m, &quick()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn metrics_arithmetic() {
        let truth = TrueEstimands {
            cells: vec![super::super::truth::TrueCell {
                cell: OVERALL.into(),
                ate: -1.0,
                ato: -0.5,
                ate_se: 0.0,
                ato_se: 0.0,
                share: 1.0,
            }],
            mc_draws: 0,
            seed: 0,
        };
        let m = MethodSpec::new(PsSource::External, TiltingFunction::Overlap);
        let rec = |k: usize, est: Option<f64>| ReplicateRecord {
            scenario: "s".into(),
            replicate: k,
            method: m.label(),
            cell: OVERALL.into(),
            truth: -0.5,
            estimate: est,
            se: est.map(|_| 0.1),
            max_asmd: est.map(|_| 0.01 * k as f64),
            failure: if est.is_none() { Some("x".into()) } else { None },
        };
        let records = vec![rec(1, Some(-0.4)), rec(2, Some(-0.8)), rec(3, None)];
        let rows = aggregate("s", &[m], &truth, &records, 0.95);
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!((r.n_ok, r.n_failed), (2, 1));
        assert!((r.mean_estimate + 0.6).abs() < 1e-12);
        assert!((r.bias + 0.1).abs() < 1e-12);
        assert!((r.relative_bias - 0.2).abs() < 1e-12);
        assert!((r.rmse - (0.05f64).sqrt()).abs() < 1e-12);
        assert!((r.empirical_variance - 0.08).abs() < 1e-12);
        assert!((r.mean_max_asmd - 0.015).abs() < 1e-12);
        // only the first interval (|−0.4 + 0.5| ≤ 0.196) covers
        assert!((r.coverage - 0.5).abs() < 1e-12);
    }
}
