//! Data-generating process for the simulation study: two binary subgroup
//! variables whose covariate effects on treatment are modified by subgroup
//! membership, and a linear outcome.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{AnalysisDataset, SubgroupVariable};
use crate::error::{Error, Result};
use crate::glm::sigmoid;

/// Probability of each binary covariate.
pub const BINARY_COVARIATE_P: f64 = 0.3;
/// Probability of each subgroup indicator.
pub const SUBGROUP_P: f64 = 0.25;

fn default_n() -> usize {
    3000
}
fn default_p() -> usize {
    18
}
fn default_replicates() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    /// Number of covariates; half continuous, half binary.
    #[serde(default = "default_p")]
    pub p: usize,
    /// Fraction of each covariate block with a nonzero coefficient.
    pub psi: f64,
    /// Scale of the nonzero covariate coefficients.
    pub gamma: f64,
    /// Strength of the covariate-by-subgroup interactions in the treatment
    /// model.
    pub kappa: f64,
    /// Treatment-effect modification by S1 and S2.
    pub beta_sz: [f64; 2],
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides `floor(psi * p / 2)` as the nonzero count per block.
    #[serde(default)]
    pub nonzero_per_block: Option<usize>,
}

impl ScenarioConfig {
    pub fn new(p: usize, psi: f64, gamma: f64, kappa: f64, beta_sz: [f64; 2]) -> Self {
        ScenarioConfig {
            n: default_n(),
            p,
            psi,
            gamma,
            kappa,
            beta_sz,
            n_replicates: default_replicates(),
            seed: 0,
            nonzero_per_block: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.p % 2 != 0 {
            return Err(Error::Config(format!("p must be a positive even number, got {}", self.p)));
        }
        if self.n < 10 {
            return Err(Error::Config(format!("n = {} is too small", self.n)));
        }
        if !(0.0..=1.0).contains(&self.psi) {
            return Err(Error::Config(format!("psi must lie in [0, 1], got {}", self.psi)));
        }
        if let Some(m) = self.nonzero_per_block {
            if m > self.p / 2 {
                return Err(Error::Config(format!(
                    "nonzero_per_block {m} exceeds block size {}",
                    self.p / 2
                )));
            }
        }
        if ![self.gamma, self.kappa, self.beta_sz[0], self.beta_sz[1]]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("scenario coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Nonzero coefficients per covariate block.
    pub fn nonzero_count(&self) -> usize {
        self.nonzero_per_block
            .unwrap_or((self.psi * (self.p / 2) as f64 + 1e-9).floor() as usize)
    }

    /// Short identifier used in output tables.
    pub fn label(&self) -> String {
        format!(
            "P{}_psi{}_gamma{}_kappa{}_bsz{}-{}",
            self.p, self.psi, self.gamma, self.kappa, self.beta_sz[0], self.beta_sz[1]
        )
    }
}

/// The 72-scenario factorial design: P ∈ {18, 48}, ψ ∈ {0.25, 0.75},
/// γ ∈ {1, 1.25, 1.5}, κ ∈ {0.25, 0.5, 0.75}, β_sz ∈ {(0, 0), (0.5, 0.5)}.
/// Seeds are left at 0 for the caller to assign.
pub fn factorial_grid() -> Vec<ScenarioConfig> {
    let mut out = Vec::with_capacity(72);
    for p in [18, 48] {
        for psi in [0.25, 0.75] {
            for gamma in [1.0, 1.25, 1.5] {
                for kappa in [0.25, 0.5, 0.75] {
                    for b in [0.0, 0.5] {
                        out.push(ScenarioConfig::new(p, psi, gamma, kappa, [b, b]));
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientSet {
    pub alpha_r: f64,
    pub alpha_s: [f64; 2],
    pub alpha_x: Vec<f64>,
    /// Interaction coefficients, shared by the S1 and S2 interactions.
    pub alpha_xs: Vec<f64>,
    pub beta_0: f64,
    pub beta_x: Vec<f64>,
    pub beta_s: [f64; 2],
    pub beta_z: f64,
    pub beta_sz: [f64; 2],
}

impl CoefficientSet {
    /// Treatment log-odds for one unit.
    pub fn logit(&self, x: &[f64], s: [bool; 2]) -> f64 {
        let mut eta = self.alpha_r;
        let mut inter = 0.0;
        for (p, &v) in x.iter().enumerate() {
            eta += self.alpha_x[p] * v;
            inter += self.alpha_xs[p] * v;
        }
        for k in 0..2 {
            if s[k] {
                eta += self.alpha_s[k] + inter;
            }
        }
        eta
    }

    /// Conditional treatment effect `β_z + Σ_k S_k β_sz,k`.
    pub fn effect(&self, s: [bool; 2]) -> f64 {
        self.beta_z
            + (0..2)
                .filter(|&k| s[k])
                .map(|k| self.beta_sz[k])
                .sum::<f64>()
    }

    /// Outcome mean given covariates, subgroups and treatment.
    pub fn outcome_mean(&self, x: &[f64], s: [bool; 2], z: bool) -> f64 {
        let mut mu = self.beta_0;
        for (p, &v) in x.iter().enumerate() {
            mu += self.beta_x[p] * v;
        }
        for k in 0..2 {
            if s[k] {
                mu += self.beta_s[k];
            }
        }
        if z {
            mu += self.effect(s);
        }
        mu
    }
}

/// Coefficients of the scenario. Within each block of `p/2` covariates the
/// first `m` coefficients are equally spaced from `0.25γ` to `0.5γ`
/// inclusive (a single one sits at `0.5γ`); the rest are zero.
pub fn build_alpha(cfg: &ScenarioConfig) -> CoefficientSet {
    let half = cfg.p / 2;
    let m = cfg.nonzero_count().min(half);
    let (lo, hi) = (0.25 * cfg.gamma, 0.5 * cfg.gamma);
    let mut block = vec![0.0; half];
    for (k, b) in block.iter_mut().take(m).enumerate() {
        *b = if m == 1 {
            hi
        } else {
            lo + (hi - lo) * k as f64 / (m - 1) as f64
        };
    }
    let alpha_x: Vec<f64> = block.iter().chain(block.iter()).copied().collect();
    let alpha_xs = alpha_x.iter().map(|a| -cfg.kappa * a).collect();
    CoefficientSet {
        alpha_r: -2.0,
        alpha_s: [1.0, 1.0],
        beta_x: alpha_x.clone(),
        alpha_x,
        alpha_xs,
        beta_0: 0.0,
        beta_s: [0.8, 0.8],
        beta_z: -1.0,
        beta_sz: cfg.beta_sz,
    }
}

/// Draws one unit's covariates and subgroup memberships.
pub(crate) fn draw_unit<R: Rng>(rng: &mut R, p: usize, x: &mut [f64]) -> [bool; 2] {
    let half = p / 2;
    for v in x.iter_mut().take(half) {
        *v = rng.sample(StandardNormal);
    }
    for v in x.iter_mut().skip(half) {
        *v = rng.random_bool(BINARY_COVARIATE_P) as u8 as f64;
    }
    [rng.random_bool(SUBGROUP_P), rng.random_bool(SUBGROUP_P)]
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: AnalysisDataset,
    pub true_propensity: Vec<f64>,
    pub coefficients: CoefficientSet,
}

/// One simulated dataset drawn from `rng`.
pub fn generate_with_rng<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Result<SimulatedData> {
    cfg.validate()?;
    let coef = build_alpha(cfg);
    let (n, p) = (cfg.n, cfg.p);
    let mut x = DMatrix::zeros(n, p);
    let mut row = vec![0.0; p];
    let mut s1 = Vec::with_capacity(n);
    let mut s2 = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for i in 0..n {
        let s = draw_unit(rng, p, &mut row);
        let ei = sigmoid(coef.logit(&row, s));
        let zi = rng.random_bool(ei);
        let noise: f64 = rng.sample(StandardNormal);
        y.push(coef.outcome_mean(&row, s, zi) + noise);
        for (q, &v) in row.iter().enumerate() {
            x[(i, q)] = v;
        }
        s1.push(s[0]);
        s2.push(s[1]);
        z.push(zi);
        e.push(ei);
    }
    let dataset = AnalysisDataset::new(
        y,
        z,
        x,
        (1..=p).map(|q| format!("x{q}")).collect(),
        vec![
            SubgroupVariable::from_binary("S1", &s1),
            SubgroupVariable::from_binary("S2", &s2),
        ],
    )?;
    Ok(SimulatedData {
        dataset,
        true_propensity: e,
        coefficients: coef,
    })
}

pub fn generate_dataset(cfg: &ScenarioConfig, seed: u64) -> Result<SimulatedData> {
    generate_with_rng(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_example() {
        let c = build_alpha(&ScenarioConfig::new(18, 0.25, 1.0, 0.5, [0.0, 0.0]));
        let mut block = vec![0.0; 9];
        block[0] = 0.25;
        block[1] = 0.5;
        let expect: Vec<f64> = block.iter().chain(&block).copied().collect();
        assert_eq!(c.alpha_x, expect);
        let xs: Vec<f64> = expect.iter().map(|a| -0.5 * a).collect();
        assert_eq!(c.alpha_xs, xs);
        assert_eq!(c.beta_x, c.alpha_x);
    }

    #[test]
    fn spacing_and_boundaries() {
        let c = build_alpha(&ScenarioConfig::new(48, 0.75, 1.5, 0.25, [0.0, 0.0]));
        // floor(0.75 * 24) = 18 per block
        assert_eq!(c.alpha_x.iter().filter(|&&a| a != 0.0).count(), 36);
        assert!((c.alpha_x[0] - 0.375).abs() < 1e-15);
        assert!((c.alpha_x[17] - 0.75).abs() < 1e-15);
        assert_eq!(c.alpha_x[18], 0.0);
        let mut cfg = ScenarioConfig::new(18, 0.1, 1.0, 0.5, [0.0, 0.0]);
        assert_eq!(cfg.nonzero_count(), 0);
        assert!(build_alpha(&cfg).alpha_x.iter().all(|&a| a == 0.0));
        cfg.nonzero_per_block = Some(1);
        assert_eq!(build_alpha(&cfg).alpha_x[0], 0.5);
        let c = build_alpha(&ScenarioConfig::new(18, 0.25, 1.0, 0.0, [0.0, 0.0]));
        assert!(c.alpha_xs.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn generation_is_seeded_and_plausible() {
        let cfg = ScenarioConfig::new(18, 0.25, 1.0, 0.75, [0.5, 0.5]);
        let a = generate_dataset(&cfg, 3).unwrap();
        let b = generate_dataset(&cfg, 3).unwrap();
        assert_eq!(a.dataset.y, b.dataset.y);
        assert_eq!(a.dataset.x, b.dataset.x);
        assert_eq!(a.true_propensity, b.true_propensity);
        let ds = &a.dataset;
        assert_eq!((ds.n(), ds.p(), ds.r()), (3000, 18, 4));
        let s1 = ds.subgroups[0].codes.iter().filter(|&&c| c == 1).count() as f64 / 3000.0;
        assert!((s1 - 0.25).abs() < 0.025, "{s1}");
        let bin = (0..3000).map(|i| ds.x[(i, 12)]).sum::<f64>() / 3000.0;
        assert!((bin - 0.3).abs() < 0.03);
        assert!(ds.n_treated() > 300 && ds.n_treated() < 1500);
    }

    #[test]
    fn rejects_odd_p() {
        let cfg = ScenarioConfig::new(17, 0.25, 1.0, 0.75, [0.5, 0.5]);
        assert!(generate_dataset(&cfg, 1).is_err());
    }

    #[test]
    fn factorial_grid_has_72_distinct_valid_scenarios() {
        let grid = factorial_grid();
        assert_eq!(grid.len(), 72);
        let labels: std::collections::BTreeSet<String> = grid.iter().map(|c| c.label()).collect();
        assert_eq!(labels.len(), 72);
        assert!(grid.iter().all(|c| c.validate().is_ok()));
    }
}
