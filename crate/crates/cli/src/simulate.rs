//! The `simulate` and `truth` subcommands.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::SystemTime;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use subgroup_ow::analysis::PropensityOptions;
use subgroup_ow::glm::{LambdaRule, LassoOptions};
use subgroup_ow::sim::dgp::{factorial_grid, ScenarioConfig};
use subgroup_ow::sim::study::{
    run_scenario, truth_seed, write_metrics_csv, write_records_csv, write_truth_csv, MethodSpec, StudyOptions,
};
use subgroup_ow::sim::truth::{true_estimands, MIN_MC_DRAWS};

use crate::manifest::RunManifest;
use crate::{create_out_dir, CliError, GlobalArgs};

fn default_replicates() -> usize {
    100
}
fn default_mc_draws() -> usize {
    1_000_000
}
fn default_methods() -> Vec<String> {
    ["true-model", "logistic-main", "lasso", "post-lasso"]
        .iter()
        .flat_map(|ps| ["ipw", "ow"].map(|t| format!("{ps}+{t}")))
        .collect()
}
fn default_cv_folds() -> usize {
    10
}
fn default_n_lambda() -> usize {
    100
}
fn default_ci_level() -> f64 {
    0.95
}

/// A simulation grid file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Replicates for scenarios that do not set their own.
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_n_lambda")]
    pub n_lambda: usize,
    #[serde(default)]
    pub lambda_rule: LambdaRule,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<toml::Table>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        toml::from_str("").expect("all keys have defaults")
    }
}

/// Seed of scenario `k`: the first draw of stream `k` of the master seed.
fn scenario_seed(master: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(k as u64);
    rng.next_u64()
}

fn parse_scenarios(cfg: &SimulationConfig, full_grid: bool, master: u64) -> Result<Vec<ScenarioConfig>, CliError> {
    let stage = "reading configuration";
    let mut out = if full_grid {
        factorial_grid()
    } else {
        let mut v = Vec::new();
        for (k, t) in cfg.scenarios.iter().enumerate() {
            if t.contains_key("seed") {
                return Err(CliError::config(
                    stage,
                    format!("scenario {}: seeds are derived from the master seed and cannot be set", k + 1),
                ));
            }
            let mut t = t.clone();
            t.entry("n_replicates")
                .or_insert(toml::Value::Integer(cfg.n_replicates as i64));
            let s: ScenarioConfig = t
                .try_into()
                .map_err(|e| CliError::config(stage, format!("scenario {}: {e}", k + 1)))?;
            v.push(s);
        }
        v
    };
    if out.is_empty() {
        return Err(CliError::config(stage, "no scenarios (add [[scenario]] tables or pass --full-grid)"));
    }
    for (k, s) in out.iter_mut().enumerate() {
        if full_grid {
            s.n_replicates = cfg.n_replicates;
        }
        s.seed = scenario_seed(master, k);
        s.validate().map_err(CliError::at(stage))?;
    }
    Ok(out)
}

fn csv_file(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data("writing outputs", format!("{}: {e}", path.display())))
}

pub fn simulate(
    g: &GlobalArgs,
    full_grid: bool,
    truth_only: bool,
    replicates: Option<usize>,
) -> Result<(), CliError> {
    let started = SystemTime::now();
    let stage = "reading configuration";
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::data(stage, format!("{}: {e}", path.display())))?;
            toml::from_str::<SimulationConfig>(&text).map_err(|e| CliError::config(stage, e.to_string()))?
        }
        None if full_grid => SimulationConfig::default(),
        None => return Err(CliError::config(stage, "--config is required unless --full-grid is given")),
    };
    if let Some(r) = replicates {
        cfg.n_replicates = r;
        for t in &mut cfg.scenarios {
            t.insert("n_replicates".into(), toml::Value::Integer(r as i64));
        }
    }
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if let Some(r) = g.lambda_rule {
        cfg.lambda_rule = r.into();
    }
    if g.clip_propensity.is_some() {
        return Err(CliError::config(stage, "--clip-propensity does not apply to simulations"));
    }
    let master = cfg
        .seed
        .ok_or_else(|| CliError::config(stage, "a seed is required (set `seed` or pass --seed)"))?;
    if cfg.mc_draws < MIN_MC_DRAWS {
        return Err(CliError::config(stage, format!("mc_draws must be at least {MIN_MC_DRAWS}")));
    }
    if !(cfg.ci_level > 0.0 && cfg.ci_level < 1.0) {
        return Err(CliError::config(stage, "ci_level must lie in (0, 1)"));
    }
    let methods: Vec<MethodSpec> = cfg
        .methods
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()
        .map_err(CliError::at(stage))?;
    if methods.is_empty() && !truth_only {
        return Err(CliError::config(stage, "no methods listed"));
    }
    let scenarios = parse_scenarios(&cfg, full_grid, master)?;

    let mut m = RunManifest::new(if truth_only { "truth" } else { "simulate" }, &cfg, Some(master));
    for s in &scenarios {
        m.derived_seeds.insert(format!("{}/replicates", s.label()), s.seed);
        m.derived_seeds.insert(format!("{}/truth", s.label()), truth_seed(s));
    }
    m.decide("full_grid", full_grid);
    m.decide("true_model", "full covariate-by-subgroup interaction logistic fit");
    m.decide("lambda_rule", format!("{:?}", cfg.lambda_rule));
    m.decide("standardize", !g.no_standardize);
    m.decide("variance", "sandwich");
    m.decide("scenarios", scenarios.len());

    let dir = &g.out_dir;
    create_out_dir(dir)?;
    let comment = m.comment();

    if truth_only {
        let mut truths = Vec::new();
        for s in &scenarios {
            let t = true_estimands(s, cfg.mc_draws, truth_seed(s)).map_err(CliError::at("truth oracle"))?;
            truths.push((s.label(), t));
        }
        write_truth_csv(&truths, csv_file(dir, "truth.csv")?, Some(&comment))
            .map_err(CliError::at("writing outputs"))?;
        m.write(dir, started, rayon::current_num_threads())?;
        println!("true estimands for {} scenarios written to {}", truths.len(), dir.display());
        return Ok(());
    }

    let irls = subgroup_ow::glm::IrlsOptions::default();
    let opts = StudyOptions {
        mc_draws: cfg.mc_draws,
        propensity: PropensityOptions {
            lasso: LassoOptions {
                n_lambda: cfg.n_lambda,
                folds: cfg.cv_folds,
                rule: cfg.lambda_rule,
                standardize: !g.no_standardize,
                irls,
                ..LassoOptions::default()
            },
            irls,
        },
        ci_level: cfg.ci_level,
    };
    let mut truths = Vec::new();
    let mut metrics = Vec::new();
    let mut records = Vec::new();
    let mut failures = 0;
    for (k, s) in scenarios.iter().enumerate() {
        let res = run_scenario(s, &methods, &opts).map_err(CliError::at("simulation"))?;
        let failed = res.records.iter().filter(|r| r.failure.is_some()).count();
        failures += failed;
        println!(
            "[{}/{}] {}: {} replicates, {} failed cell estimates",
            k + 1,
            scenarios.len(),
            res.label,
            s.n_replicates,
            failed
        );
        truths.push((res.label.clone(), res.truth));
        metrics.extend(res.metrics);
        records.extend(res.records);
    }
    write_truth_csv(&truths, csv_file(dir, "truth.csv")?, Some(&comment)).map_err(CliError::at("writing outputs"))?;
    write_metrics_csv(&metrics, csv_file(dir, "metrics.csv")?, Some(&comment))
        .map_err(CliError::at("writing outputs"))?;
    write_records_csv(&records, csv_file(dir, "replicates.csv")?, Some(&comment))
        .map_err(CliError::at("writing outputs"))?;
    m.write(dir, started, rayon::current_num_threads())?;
    if failures > 0 {
        eprintln!("warning: {failures} replicate cell estimates failed; see replicates.csv");
    }
    println!("outputs written to {}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_seeds_are_distinct_and_stable() {
        assert_eq!(scenario_seed(1, 0), scenario_seed(1, 0));
        assert_ne!(scenario_seed(1, 0), scenario_seed(1, 1));
        assert_ne!(scenario_seed(1, 0), scenario_seed(2, 0));
    }

    #[test]
    fn default_methods_cover_four_sources_and_two_tilts() {
        let m = default_methods();
        assert_eq!(m.len(), 8);
        assert!(m.iter().all(|s| s.parse::<MethodSpec>().is_ok()));
    }

    #[test]
    fn scenario_tables_inherit_replicates_and_reject_seeds() {
        let cfg: SimulationConfig = toml::from_str(
            "seed = 3\nn_replicates = 7\n[[scenario]]\np = 18\npsi = 0.25\ngamma = 1.0\nkappa = 0.5\nbeta_sz = [0.5, 0.5]\n",
        )
        .unwrap();
        let s = parse_scenarios(&cfg, false, 3).unwrap();
        assert_eq!(s[0].n_replicates, 7);
        assert_eq!(s[0].seed, scenario_seed(3, 0));
        let mut bad = cfg.clone();
        bad.scenarios[0].insert("seed".into(), toml::Value::Integer(1));
        assert!(parse_scenarios(&bad, false, 3).is_err());
        assert_eq!(parse_scenarios(&cfg, true, 3).unwrap().len(), 72);
    }
}
