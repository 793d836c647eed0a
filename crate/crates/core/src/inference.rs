//! Standard errors and confidence intervals for subgroup effect estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{AnalysisDataset, SubgroupCell};
use crate::error::{Error, Result};
use crate::weighting::{degenerate, EffectEstimate, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    /// Weighted sandwich variance with the propensity treated as known.
    #[default]
    Sandwich,
    /// Nonparametric bootstrap over units with the fitted propensity held fixed.
    Bootstrap,
}

impl VarianceMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            VarianceMethod::Sandwich => "sandwich",
            VarianceMethod::Bootstrap => "bootstrap",
        }
    }
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sandwich" => Ok(VarianceMethod::Sandwich),
            "bootstrap" => Ok(VarianceMethod::Bootstrap),
            other => Err(Error::Config(format!(
                "unknown variance method {other:?} (expected sandwich or bootstrap)"
            ))),
        }
    }
}

pub const MIN_BOOTSTRAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InferenceConfig {
    pub method: VarianceMethod,
    pub level: f64,
    pub bootstrap_b: usize,
    pub seed: u64,
}

impl InferenceConfig {
    pub fn sandwich(level: f64) -> Self {
        InferenceConfig {
            method: VarianceMethod::Sandwich,
            level,
            bootstrap_b: 1000,
            seed: 0,
        }
    }

    pub fn bootstrap(level: f64, b: usize, seed: u64) -> Self {
        InferenceConfig {
            method: VarianceMethod::Bootstrap,
            level,
            bootstrap_b: b,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!(
                "confidence level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if self.method == VarianceMethod::Bootstrap && self.bootstrap_b < MIN_BOOTSTRAP {
            return Err(Error::Config(format!(
                "bootstrap needs at least {MIN_BOOTSTRAP} replicates, got {}",
                self.bootstrap_b
            )));
        }
        Ok(())
    }
}

/// Two-sided standard normal critical value for `level`.
pub fn normal_critical(level: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.inverse_cdf(0.5 + level / 2.0)
}

/// Sandwich variance `Σ_z Σ w²(Y − μ̂_z)² / (Σw)²` of the Hájek contrast.
pub fn sandwich_variance(ds: &AnalysisDataset, ws: &WeightSet, cell: &SubgroupCell) -> Result<f64> {
    if cell.n_treated < 2 || cell.n_control < 2 {
        return Err(Error::DegenerateCell {
            cell: cell.label(),
            reason: format!(
                "variance needs two units per arm (has {} treated, {} control)",
                cell.n_treated, cell.n_control
            ),
        });
    }
    let mut total = 0.0;
    for arm in [true, false] {
        let units = || cell.members.iter().copied().filter(|&i| ds.z[i] == arm);
        let sw: f64 = units().map(|i| ws.weights[i]).sum();
        let mu = units().map(|i| ws.weights[i] * ds.y[i]).sum::<f64>() / sw;
        let num: f64 = units()
            .map(|i| (ws.weights[i] * (ds.y[i] - mu)).powi(2))
            .sum();
        total += num / (sw * sw);
    }
    Ok(total)
}

/// Fills `se` and a normal-approximation interval into `est`.
pub fn attach_sandwich(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cell: &SubgroupCell,
    est: &mut EffectEstimate,
    level: f64,
) -> Result<()> {
    let se = sandwich_variance(ds, ws, cell)?.sqrt();
    let zc = normal_critical(level);
    est.se = Some(se);
    est.ci_lower = Some(est.estimate - zc * se);
    est.ci_upper = Some(est.estimate + zc * se);
    est.variance_method = Some(VarianceMethod::Sandwich.as_str().into());
    Ok(())
}

/// Sample quantile with linear interpolation between order statistics
/// (the default `type = 7` definition).
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub cell: String,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapReport {
    pub replicates: usize,
    pub attempts: usize,
    /// Resamples redrawn because some cell lost an arm.
    pub discarded: usize,
    pub seed: u64,
    pub summaries: Vec<BootstrapSummary>,
}

/// Hájek estimates in every cell for one resample; `None` when a cell that
/// has both arms in the data loses one.
fn replicate(
    ds: &AnalysisDataset,
    weights: &[f64],
    cells: &[&SubgroupCell],
    seed: u64,
    stream: u64,
) -> Option<Vec<f64>> {
    let n = ds.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut mult = vec![0u32; n];
    for _ in 0..n {
        mult[rng.random_range(0..n)] += 1;
    }
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut s = [0.0f64; 4];
        for &i in &cell.members {
            let m = mult[i] as f64;
            if m == 0.0 {
                continue;
            }
            let w = m * weights[i];
            let k = if ds.z[i] { 0 } else { 2 };
            s[k] += w * ds.y[i];
            s[k + 1] += w;
        }
        if s[1] <= 0.0 || s[3] <= 0.0 {
            return None;
        }
        out.push(s[0] / s[1] - s[2] / s[3]);
    }
    Some(out)
}

/// Percentile bootstrap over whole-dataset resamples with the weights held
/// fixed. Resample `k` draws from stream `k` of a generator seeded with
/// `seed`; resamples emptying an arm of some cell are skipped, and the first
/// `b` usable ones are kept. Gives up after `10·b` attempts.
pub fn bootstrap(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cells: &[SubgroupCell],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapReport> {
    let active: Vec<&SubgroupCell> = cells.iter().filter(|c| !c.is_degenerate()).collect();
    let cap = 10 * b;
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut attempts = 0usize;
    while draws.len() < b && attempts < cap {
        let want = (b - draws.len()).min(cap - attempts);
        let batch: Vec<Option<Vec<f64>>> = (attempts..attempts + want)
            .into_par_iter()
            .map(|k| replicate(ds, &ws.weights, &active, seed, k as u64))
            .collect();
        attempts += want;
        draws.extend(batch.into_iter().flatten());
    }
    if draws.len() < b {
        return Err(Error::Convergence {
            stage: "bootstrap".into(),
            detail: format!(
                "only {} of {b} usable resamples after {attempts} attempts; some subgroup arm is too small",
                draws.len()
            ),
        });
    }
    let alpha = 1.0 - level;
    let summaries = active
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let mut v: Vec<f64> = draws.iter().map(|d| d[c]).collect();
            let mean = v.iter().sum::<f64>() / b as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
            v.sort_by(f64::total_cmp);
            BootstrapSummary {
                cell: cell.label(),
                se: var.sqrt(),
                ci_lower: quantile_type7(&v, alpha / 2.0),
                ci_upper: quantile_type7(&v, 1.0 - alpha / 2.0),
            }
        })
        .collect();
    Ok(BootstrapReport {
        replicates: b,
        attempts,
        discarded: attempts - b,
        seed,
        summaries,
    })
}

/// Adds standard errors and intervals to `estimates` (matched to `cells` by
/// label). Cells whose variance is undefined keep empty fields.
pub fn apply_inference(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cells: &[SubgroupCell],
    estimates: &mut [EffectEstimate],
    cfg: &InferenceConfig,
) -> Result<Option<BootstrapReport>> {
    cfg.validate()?;
    match cfg.method {
        VarianceMethod::Sandwich => {
            for est in estimates.iter_mut() {
                if let Some(cell) = cells.iter().find(|c| c.label() == est.cell) {
                    match attach_sandwich(ds, ws, cell, est, cfg.level) {
                        Ok(()) | Err(Error::DegenerateCell { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok(None)
        }
        VarianceMethod::Bootstrap => {
            let report = bootstrap(ds, ws, cells, cfg.bootstrap_b, cfg.level, cfg.seed)?;
            for est in estimates.iter_mut() {
                if let Some(s) = report.summaries.iter().find(|s| s.cell == est.cell) {
                    est.se = Some(s.se);
                    est.ci_lower = Some(s.ci_lower);
                    est.ci_upper = Some(s.ci_upper);
                    est.variance_method = Some(VarianceMethod::Bootstrap.as_str().into());
                }
            }
            Ok(Some(report))
        }
    }
}

/// Hájek estimate with sandwich inference for each non-degenerate cell.
pub fn estimate_all(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cells: &[SubgroupCell],
) -> Vec<Result<EffectEstimate>> {
    cells
        .iter()
        .map(|cell| {
            if cell.is_degenerate() {
                return Err(degenerate(cell));
            }
            crate::weighting::estimate_effect(ds, ws, cell)
        })
        .collect()
}
