//! Tilting functions, balancing weights, and the Hájek subgroup estimator.

use serde::{Deserialize, Serialize};

use crate::data::{AnalysisDataset, SubgroupCell};
use crate::error::{Error, Result};

/// Target population of the weighted comparison, through its tilting
/// function `h(e)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TiltingFunction {
    /// `h = 1`; inverse probability weights, estimand S-ATE.
    #[serde(rename = "ipw")]
    Ipw,
    /// `h = e(1 − e)`; overlap weights, estimand S-ATO.
    #[serde(rename = "ow")]
    Overlap,
}

impl TiltingFunction {
    pub fn h(&self, e: f64) -> f64 {
        match self {
            TiltingFunction::Ipw => 1.0,
            TiltingFunction::Overlap => e * (1.0 - e),
        }
    }

    pub fn treated_weight(&self, e: f64) -> f64 {
        match self {
            TiltingFunction::Ipw => 1.0 / e,
            TiltingFunction::Overlap => 1.0 - e,
        }
    }

    pub fn control_weight(&self, e: f64) -> f64 {
        match self {
            TiltingFunction::Ipw => 1.0 / (1.0 - e),
            TiltingFunction::Overlap => e,
        }
    }

    pub fn weight(&self, e: f64, treated: bool) -> f64 {
        if treated {
            self.treated_weight(e)
        } else {
            self.control_weight(e)
        }
    }

    pub fn estimand(&self) -> &'static str {
        match self {
            TiltingFunction::Ipw => "S-ATE",
            TiltingFunction::Overlap => "S-ATO",
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TiltingFunction::Ipw => "ipw",
            TiltingFunction::Overlap => "ow",
        }
    }
}

impl std::str::FromStr for TiltingFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ipw" => Ok(TiltingFunction::Ipw),
            "ow" | "overlap" => Ok(TiltingFunction::Overlap),
            other => Err(Error::Config(format!("unknown tilting function `{other}`"))),
        }
    }
}

/// Arm totals of the raw weights within one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellNormalization {
    pub cell: String,
    pub treated_sum: f64,
    pub control_sum: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightSet {
    /// Raw weight per unit: h/e for treated, h/(1 − e) for controls.
    pub weights: Vec<f64>,
    pub tilt: TiltingFunction,
    /// Label of the propensity model the weights came from.
    pub source: String,
    /// Propensity clipping applied before weighting, if any.
    pub clip: Option<f64>,
    /// Units whose propensity sat at the machine-precision clamp while
    /// using IPW.
    pub extreme_units: Vec<usize>,
    pub normalizations: Vec<CellNormalization>,
}

impl WeightSet {
    /// All-ones weights: the unadjusted comparison.
    pub fn unit(n: usize) -> WeightSet {
        WeightSet {
            weights: vec![1.0; n],
            tilt: TiltingFunction::Ipw,
            source: "unadjusted".into(),
            clip: None,
            extreme_units: Vec::new(),
            normalizations: Vec::new(),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    /// Arm totals within `cell`; dividing by them gives weights summing to
    /// one in each arm.
    pub fn normalization(&self, ds: &AnalysisDataset, cell: &SubgroupCell) -> CellNormalization {
        let (mut t, mut c) = (0.0, 0.0);
        for &i in &cell.members {
            if ds.z[i] {
                t += self.weights[i];
            } else {
                c += self.weights[i];
            }
        }
        CellNormalization {
            cell: cell.label(),
            treated_sum: t,
            control_sum: c,
        }
    }

    /// Records the normalization constants of every cell.
    pub fn normalize_cells(&mut self, ds: &AnalysisDataset, cells: &[SubgroupCell]) {
        self.normalizations = cells.iter().map(|c| self.normalization(ds, c)).collect();
    }

    /// Multiplies every weight by `c`.
    pub fn scaled(&self, c: f64) -> WeightSet {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= c);
        out.normalizations.clear();
        out
    }
}

/// Clips propensities into `[eps, 1 − eps]`; returns the count changed.
pub fn clip_propensities(e: &[f64], eps: f64) -> (Vec<f64>, usize) {
    let mut changed = 0;
    let out = e
        .iter()
        .map(|&v| {
            let c = v.clamp(eps, 1.0 - eps);
            if c != v {
                changed += 1;
            }
            c
        })
        .collect();
    (out, changed)
}

pub fn compute_weights(e: &[f64], z: &[bool], tilt: TiltingFunction) -> Result<WeightSet> {
    if e.len() != z.len() {
        return Err(Error::Dimension(format!(
            "{} propensities for {} units",
            e.len(),
            z.len()
        )));
    }
    if let Some(i) = e.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Data(format!(
            "propensity score {} at unit {} is outside (0, 1)",
            e[i],
            i + 1
        )));
    }
    let boundary = 2.0 * f64::EPSILON;
    let extreme_units = if tilt == TiltingFunction::Ipw {
        (0..e.len())
            .filter(|&i| e[i] <= boundary || e[i] >= 1.0 - boundary)
            .collect()
    } else {
        Vec::new()
    };
    Ok(WeightSet {
        weights: e.iter().zip(z).map(|(&p, &t)| tilt.weight(p, t)).collect(),
        tilt,
        source: String::new(),
        clip: None,
        extreme_units,
        normalizations: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    pub cell: String,
    pub variable: String,
    pub level: String,
    pub estimand: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub variance_method: Option<String>,
    pub treated_mean: f64,
    pub control_mean: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub ess_treated: f64,
    pub ess_control: f64,
}

/// Kish effective sample size (Σw)²/Σw².
pub fn effective_sample_size(weights: impl Iterator<Item = f64>) -> f64 {
    let (s, s2) = weights.fold((0.0, 0.0), |(s, s2), w| (s + w, s2 + w * w));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

pub(crate) fn degenerate(cell: &SubgroupCell) -> Error {
    Error::DegenerateCell {
        cell: cell.label(),
        reason: format!(
            "needs treated and control members (has {} treated, {} control)",
            cell.n_treated, cell.n_control
        ),
    }
}

/// Weighted arm means of `values` within `cell`, each normalized by its own
/// weight total.
pub(crate) fn arm_means(
    ds: &AnalysisDataset,
    weights: &[f64],
    cell: &SubgroupCell,
    values: impl Fn(usize) -> f64,
) -> (f64, f64) {
    let (mut st, mut wt, mut sc, mut wc) = (0.0, 0.0, 0.0, 0.0);
    for &i in &cell.members {
        let w = weights[i];
        if ds.z[i] {
            st += w * values(i);
            wt += w;
        } else {
            sc += w * values(i);
            wc += w;
        }
    }
    (st / wt, sc / wc)
}

/// Hájek estimate of the weighted treatment effect in `cell`; standard errors
/// are attached separately.
pub fn estimate_effect(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cell: &SubgroupCell,
) -> Result<EffectEstimate> {
    if cell.is_degenerate() {
        return Err(degenerate(cell));
    }
    let (mt, mc) = arm_means(ds, &ws.weights, cell, |i| ds.y[i]);
    let arm = |treated: bool| {
        cell.members
            .iter()
            .filter(move |&&i| ds.z[i] == treated)
            .map(|&i| ws.weights[i])
    };
    Ok(EffectEstimate {
        cell: cell.label(),
        variable: cell.variable.clone(),
        level: cell.level.clone(),
        estimand: ws.tilt.estimand().to_string(),
        estimate: mt - mc,
        se: None,
        ci_lower: None,
        ci_upper: None,
        variance_method: None,
        treated_mean: mt,
        control_mean: mc,
        n_treated: cell.n_treated,
        n_control: cell.n_control,
        ess_treated: effective_sample_size(arm(true)),
        ess_control: effective_sample_size(arm(false)),
    })
}
