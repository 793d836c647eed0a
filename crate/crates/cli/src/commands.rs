//! The `analyze` and `connect-s` subcommands.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::Serialize;
use subgroup_ow::analysis::{read_weights_csv, run_analysis, write_effects_csv, write_weights_csv, AnalysisReport};
use subgroup_ow::diagnostics::POOLED_SD_CONVENTION;
use subgroup_ow::glm::LassoOptions;
use subgroup_ow::svg::render_svg;
use subgroup_ow::{build_connect_s, enumerate_cells, load_csv, AnalysisConfig, ConnectSGrid, PsModel, WeightSet};

use crate::manifest::{InputFile, RunManifest};
use crate::{create_out_dir, write_file, CliError, GlobalArgs};

fn load_config(g: &GlobalArgs, data: Option<PathBuf>) -> Result<AnalysisConfig, CliError> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("reading configuration", "--config is required"))?;
    let mut cfg = AnalysisConfig::from_file(path).map_err(CliError::at("reading configuration"))?;
    if let Some(d) = data {
        cfg.data = Some(d);
    }
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.clip_propensity.is_some() {
        cfg.clip_propensity = g.clip_propensity;
    }
    if let Some(r) = g.lambda_rule {
        cfg.lambda_rule = r.into();
    }
    if g.no_standardize {
        cfg.standardize = false;
    }
    cfg.validate().map_err(CliError::at("reading configuration"))?;
    Ok(cfg)
}

fn data_path(cfg: &AnalysisConfig) -> Result<PathBuf, CliError> {
    cfg.data
        .clone()
        .ok_or_else(|| CliError::config("reading configuration", "no data file given (set `data` or pass --data)"))
}

fn csv_file(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data("writing outputs", format!("{}: {e}", path.display())))
}

fn write_grid(dir: &Path, stem: &str, grid: &ConnectSGrid, m: &RunManifest) -> Result<(), CliError> {
    let grid = grid.clone().with_config_hash(m.hash());
    grid.write_csv(csv_file(dir, &format!("{stem}.csv"))?, Some(&m.comment()))
        .map_err(CliError::at("writing outputs"))?;
    write_file(&dir.join(format!("{stem}.svg")), render_svg(&grid).as_bytes())
}

fn analysis_decisions(m: &mut RunManifest, cfg: &AnalysisConfig) {
    let lasso = LassoOptions::default();
    m.decide("ps_model", cfg.ps_model.as_str());
    m.decide("tilting", cfg.tilting.as_str());
    m.decide("estimand", cfg.tilting.estimand());
    m.decide("lambda_rule", format!("{:?}", cfg.lambda_rule));
    m.decide("standardize", cfg.standardize);
    m.decide("lasso_min_dev_change", lasso.min_dev_change);
    m.decide("lasso_max_dev_ratio", lasso.max_dev_ratio);
    m.decide(
        "clip_propensity",
        cfg.clip_propensity.map_or("none".to_string(), |e| e.to_string()),
    );
    m.decide("variance", cfg.variance.as_str());
    m.decide("ci_level", cfg.ci_level);
    m.decide("asmd_sd", POOLED_SD_CONVENTION);
    m.decide(
        "asmd_thresholds",
        cfg.asmd_thresholds.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
    );
}

#[derive(Serialize)]
struct ReportFile<'a> {
    manifest_sha256: String,
    #[serde(flatten)]
    report: &'a AnalysisReport,
}

pub fn analyze(g: &GlobalArgs, data: Option<PathBuf>) -> Result<(), CliError> {
    let started = SystemTime::now();
    let cfg = load_config(g, data)?;
    let seed = cfg.seed.ok_or_else(|| {
        CliError::config("reading configuration", "a seed is required (set `seed` or pass --seed)")
    })?;
    let path = data_path(&cfg)?;
    let ds = load_csv(&path, &cfg).map_err(CliError::at("loading data"))?;

    let mut m = RunManifest::new("analyze", &cfg, Some(seed));
    if matches!(cfg.ps_model, PsModel::Lasso | PsModel::PostLasso) {
        m.derived_seeds.insert("cv_folds".into(), seed);
    }
    if cfg.variance == subgroup_ow::VarianceMethod::Bootstrap {
        m.derived_seeds.insert("bootstrap".into(), seed);
    }
    m.inputs.push(InputFile::hash(&path)?);
    analysis_decisions(&mut m, &cfg);

    let report = run_analysis(&ds, &cfg).map_err(CliError::at("analysis"))?;

    let dir = &g.out_dir;
    create_out_dir(dir)?;
    let comment = m.comment();
    write_effects_csv(&report, csv_file(dir, "effects.csv")?, Some(&comment))
        .map_err(CliError::at("writing outputs"))?;
    write_weights_csv(&ds, &report, csv_file(dir, "weights.csv")?, Some(&comment))
        .map_err(CliError::at("writing outputs"))?;
    write_grid(dir, "balance_unadjusted", &report.balance_before, &m)?;
    write_grid(dir, "balance_weighted", &report.balance_after, &m)?;
    let json = serde_json::to_string_pretty(&ReportFile {
        manifest_sha256: m.hash(),
        report: &report,
    })
    .expect("report serializes");
    write_file(&dir.join("report.json"), json.as_bytes())?;
    m.write(dir, started, rayon::current_num_threads())?;

    println!("{} estimates ({} weights)", report.estimand, report.weights.source);
    for e in &report.estimates {
        match (e.ci_lower, e.ci_upper) {
            (Some(lo), Some(hi)) => println!("  {:<24} {:>10.4}  [{lo:.4}, {hi:.4}]", e.cell, e.estimate),
            _ => println!("  {:<24} {:>10.4}", e.cell, e.estimate),
        }
    }
    if !report.propensity.selected.is_empty() {
        let names: Vec<&str> = report.propensity.selected.iter().map(|s| s.column.as_str()).collect();
        println!("selected interactions: {}", names.join(", "));
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("outputs written to {}", dir.display());
    Ok(())
}

pub fn connect_s(g: &GlobalArgs, weights: &Path, data: Option<PathBuf>) -> Result<(), CliError> {
    let started = SystemTime::now();
    let cfg = load_config(g, data)?;
    let path = data_path(&cfg)?;
    let ds = load_csv(&path, &cfg).map_err(CliError::at("loading data"))?;
    let w = read_weights_csv(weights).map_err(CliError::at("loading weights"))?;
    if w.len() != ds.n() {
        return Err(CliError::data(
            "loading weights",
            format!("{} has {} rows but the data have {}", weights.display(), w.len(), ds.n()),
        ));
    }

    let mut m = RunManifest::new("connect-s", &cfg, cfg.seed);
    m.inputs.push(InputFile::hash(&path)?);
    m.inputs.push(InputFile::hash(weights)?);
    m.decide("asmd_sd", POOLED_SD_CONVENTION);

    let cells = enumerate_cells(&ds);
    let supplied = WeightSet {
        weights: w,
        ..WeightSet::unit(ds.n()).with_source("supplied")
    };
    let weighted = build_connect_s(&ds, &supplied, &cells, &cfg.asmd_thresholds).with_title("Supplied weights");
    let unit = build_connect_s(&ds, &WeightSet::unit(ds.n()), &cells, &cfg.asmd_thresholds).with_title("Unadjusted");

    let dir = &g.out_dir;
    create_out_dir(dir)?;
    write_grid(dir, "connect_s_weighted", &weighted, &m)?;
    write_grid(dir, "connect_s_unadjusted", &unit, &m)?;
    m.write(dir, started, rayon::current_num_threads())?;

    for (name, grid) in [("unadjusted", &unit), ("weighted", &weighted)] {
        let worst = grid.rows.iter().filter_map(|r| r.max_asmd()).fold(0.0, f64::max);
        println!("{name}: max ASMD {worst:.4}");
    }
    println!("outputs written to {}", dir.display());
    Ok(())
}
