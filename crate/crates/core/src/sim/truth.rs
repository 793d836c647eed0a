//! Monte Carlo values of the true weighted estimands of a scenario.
//!
//! Draws covariates from their population law, evaluates the true
//! propensity and conditional effect, and averages the effect with tilt
//! `h = 1` (ATE) or `h = e(1 − e)` (ATO), overall and within each subgroup
//! level. Written against the scenario coefficients only; it shares no code
//! with the estimators it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::dgp::{build_alpha, ScenarioConfig, BINARY_COVARIATE_P, SUBGROUP_P};
use crate::data::OVERALL;
use crate::error::{Error, Result};
use crate::weighting::TiltingFunction;

pub const MIN_MC_DRAWS: usize = 100_000;
const CHUNK: usize = 1 << 15;

/// Sums for one target population: ATE-type (h = 1) and ATO-type tilts.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    n: f64,
    tau: f64,
    tau2: f64,
    h: f64,
    h2: f64,
    h_tau: f64,
    h2_tau: f64,
    h2_tau2: f64,
}

impl Sums {
    fn add(&mut self, tau: f64, h: f64) {
        self.n += 1.0;
        self.tau += tau;
        self.tau2 += tau * tau;
        self.h += h;
        self.h2 += h * h;
        self.h_tau += h * tau;
        self.h2_tau += h * h * tau;
        self.h2_tau2 += h * h * tau * tau;
    }

    fn merge(&mut self, o: &Sums) {
        self.n += o.n;
        self.tau += o.tau;
        self.tau2 += o.tau2;
        self.h += o.h;
        self.h2 += o.h2;
        self.h_tau += o.h_tau;
        self.h2_tau += o.h2_tau;
        self.h2_tau2 += o.h2_tau2;
    }

    fn ate(&self) -> (f64, f64) {
        let m = self.tau / self.n;
        let var = (self.tau2 / self.n - m * m).max(0.0);
        (m, (var / self.n).sqrt())
    }

    /// Ratio Σhτ/Σh with its linearized standard error.
    fn ato(&self) -> (f64, f64) {
        let r = self.h_tau / self.h;
        let ss = (self.h2_tau2 - 2.0 * r * self.h2_tau + r * r * self.h2).max(0.0);
        (r, ss.sqrt() / self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrueCell {
    pub cell: String,
    pub ate: f64,
    pub ato: f64,
    pub ate_se: f64,
    pub ato_se: f64,
    /// Share of the population in the cell.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrueEstimands {
    /// Subgroup cells `S1=0, S1=1, S2=0, S2=1`, then the overall cell.
    pub cells: Vec<TrueCell>,
    pub mc_draws: usize,
    pub seed: u64,
}

impl TrueEstimands {
    pub fn cell(&self, label: &str) -> Option<&TrueCell> {
        self.cells.iter().find(|c| c.cell == label)
    }

    pub fn overall(&self) -> &TrueCell {
        self.cell(OVERALL).expect("overall cell present")
    }

    /// Truth for `label` under the estimand targeted by `tilt`.
    pub fn target(&self, label: &str, tilt: TiltingFunction) -> Option<f64> {
        self.cell(label).map(|c| match tilt {
            TiltingFunction::Ipw => c.ate,
            TiltingFunction::Overlap => c.ato,
        })
    }
}

const LABELS: [&str; 5] = ["S1=0", "S1=1", "S2=0", "S2=1", OVERALL];

fn chunk_sums(cfg: &ScenarioConfig, seed: u64, stream: u64, draws: usize) -> [Sums; 5] {
    let coef = build_alpha(cfg);
    let half = cfg.p / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = [Sums::default(); 5];
    for _ in 0..draws {
        let mut main = coef.alpha_r;
        let mut inter = 0.0;
        for q in 0..cfg.p {
            let v: f64 = if q < half {
                rng.sample(StandardNormal)
            } else if rng.random::<f64>() < BINARY_COVARIATE_P {
                1.0
            } else {
                0.0
            };
            main += coef.alpha_x[q] * v;
            inter += coef.alpha_xs[q] * v;
        }
        let s1 = rng.random::<f64>() < SUBGROUP_P;
        let s2 = rng.random::<f64>() < SUBGROUP_P;
        let mut eta = main;
        let mut tau = coef.beta_z;
        if s1 {
            eta += coef.alpha_s[0] + inter;
            tau += coef.beta_sz[0];
        }
        if s2 {
            eta += coef.alpha_s[1] + inter;
            tau += coef.beta_sz[1];
        }
        let e = 1.0 / (1.0 + (-eta).exp());
        let h = e * (1.0 - e);
        out[s1 as usize].add(tau, h);
        out[2 + s2 as usize].add(tau, h);
        out[4].add(tau, h);
    }
    out
}

/// True ATE/ATO overall and per subgroup level from `mc_draws` Monte Carlo
/// draws. Chunks of draws use separate streams of the seeded generator, so
/// the result does not depend on the thread count.
pub fn true_estimands(cfg: &ScenarioConfig, mc_draws: usize, seed: u64) -> Result<TrueEstimands> {
    cfg.validate()?;
    if mc_draws < MIN_MC_DRAWS {
        return Err(Error::Config(format!(
            "truth oracle needs at least {MIN_MC_DRAWS} draws, got {mc_draws}"
        )));
    }
    let n_chunks = mc_draws.div_ceil(CHUNK);
    let parts: Vec<[Sums; 5]> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let draws = CHUNK.min(mc_draws - c * CHUNK);
            chunk_sums(cfg, seed, c as u64, draws)
        })
        .collect();
    let mut total = [Sums::default(); 5];
    for part in &parts {
        for k in 0..5 {
            total[k].merge(&part[k]);
        }
    }
    let cells = LABELS
        .iter()
        .zip(total.iter())
        .map(|(label, s)| {
            let (ate, ate_se) = s.ate();
            let (ato, ato_se) = s.ato();
            TrueCell {
                cell: label.to_string(),
                ate,
                ato,
                ate_se,
                ato_se,
                share: s.n / mc_draws as f64,
            }
        })
        .collect();
    Ok(TrueEstimands {
        cells,
        mc_draws,
        seed,
    })
}
