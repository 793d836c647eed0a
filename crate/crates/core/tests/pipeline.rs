mod common;

use std::io::Write;

use common::benchmark_dataset;
use subgroup_ow::analysis::{read_weights_csv, run_analysis, write_effects_csv, write_weights_csv};
use subgroup_ow::sim::dgp::generate_dataset;
use subgroup_ow::{load_csv, AnalysisConfig, ErrorClass, PsModel, TiltingFunction, VarianceMethod};

fn config(ds: &subgroup_ow::AnalysisDataset) -> AnalysisConfig {
    let mut cfg = AnalysisConfig::new("y", "z", ds.covariate_names.clone(), vec!["S1".into(), "S2".into()]);
    cfg.seed = Some(99);
    cfg.n_lambda = 40;
    cfg.cv_folds = 5;
    cfg
}

#[test]
fn default_pipeline_is_reproducible() {
    let ds = benchmark_dataset(31);
    let cfg = config(&ds);
    let a = run_analysis(&ds, &cfg).unwrap();
    let b = run_analysis(&ds, &cfg).unwrap();
    assert_eq!(a.estimand, "S-ATO");
    assert_eq!(a.propensity.model, PsModel::PostLasso);
    assert!(!a.propensity.selected.is_empty());
    assert_eq!(a.propensity.selected, b.propensity.selected);
    assert_eq!(a.weights.weights, b.weights.weights);
    for (x, y) in a.estimates.iter().zip(&b.estimates) {
        assert_eq!(x.estimate, y.estimate);
        assert_eq!(x.se, y.se);
    }
    assert_eq!(a.estimates.last().unwrap().cell, "Overall");
    assert_eq!(a.estimates.len(), 5);
    // post-LASSO balance is far better than unadjusted balance
    let before = a.balance_before.rows.iter().filter_map(|r| r.max_asmd()).fold(0.0, f64::max);
    let after = a.balance_after.rows.iter().filter_map(|r| r.max_asmd()).fold(0.0, f64::max);
    assert!(after < before / 2.0, "{after} vs {before}");
}

#[test]
fn external_propensities_are_used_verbatim() {
    let sim = generate_dataset(&common::benchmark(), 8).unwrap();
    let ds = sim.dataset.with_external_propensity(sim.true_propensity.clone()).unwrap();
    let mut cfg = config(&ds);
    cfg.ps_model = PsModel::External;
    cfg.propensity_column = Some("e".into());
    cfg.tilting = TiltingFunction::Ipw;
    let report = run_analysis(&ds, &cfg).unwrap();
    assert_eq!(report.estimand, "S-ATE");
    for (i, w) in report.weights.weights.iter().enumerate() {
        let e = sim.true_propensity[i];
        let expected = if ds.z[i] { 1.0 / e } else { 1.0 / (1.0 - e) };
        assert!((w - expected).abs() <= 1e-12 * expected);
    }
}

#[test]
fn bootstrap_intervals_are_reproducible() {
    let ds = benchmark_dataset(12);
    let mut cfg = config(&ds);
    cfg.ps_model = PsModel::FullInteraction;
    cfg.variance = VarianceMethod::Bootstrap;
    cfg.bootstrap_b = 200;
    let a = run_analysis(&ds, &cfg).unwrap();
    let b = run_analysis(&ds, &cfg).unwrap();
    let rep = a.inference.bootstrap.as_ref().unwrap();
    assert_eq!(rep.replicates, 200);
    for (x, y) in a.estimates.iter().zip(&b.estimates) {
        assert_eq!(x.ci_lower, y.ci_lower);
        let (lo, hi) = (x.ci_lower.unwrap(), x.ci_upper.unwrap());
        assert!(lo < x.estimate && x.estimate < hi, "{}", x.cell);
    }
    cfg.seed = Some(100);
    let c = run_analysis(&ds, &cfg).unwrap();
    assert_ne!(a.estimates[4].ci_lower, c.estimates[4].ci_lower);
}

#[test]
fn lasso_without_seed_is_a_config_error() {
    let ds = benchmark_dataset(1);
    let mut cfg = config(&ds);
    cfg.seed = None;
    let err = run_analysis(&ds, &cfg).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Config);
}

#[test]
fn csv_round_trip_through_files() {
    let ds = benchmark_dataset(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    write!(f, "y,z").unwrap();
    for name in &ds.covariate_names {
        write!(f, ",{name}").unwrap();
    }
    writeln!(f, ",S1,S2").unwrap();
    for i in 0..ds.n() {
        write!(f, "{},{}", ds.y[i], ds.z[i] as u8).unwrap();
        for p in 0..ds.p() {
            write!(f, ",{}", ds.x[(i, p)]).unwrap();
        }
        writeln!(f, ",{},{}", ds.subgroups[0].codes[i], ds.subgroups[1].codes[i]).unwrap();
    }
    drop(f);

    let mut cfg = config(&ds);
    cfg.ps_model = PsModel::FullInteraction;
    let loaded = load_csv(&path, &cfg).unwrap();
    assert_eq!(loaded.y, ds.y);
    assert_eq!(loaded.x, ds.x);
    let direct = run_analysis(&ds, &cfg).unwrap();
    let report = run_analysis(&loaded, &cfg).unwrap();
    for (a, b) in direct.estimates.iter().zip(&report.estimates) {
        assert_eq!(a.cell, b.cell);
        assert_eq!(a.estimate, b.estimate);
    }

    let wpath = dir.path().join("weights.csv");
    write_weights_csv(&loaded, &report, std::fs::File::create(&wpath).unwrap(), Some("run=test")).unwrap();
    let back = read_weights_csv(&wpath).unwrap();
    for (a, b) in back.iter().zip(&report.weights.weights) {
        assert!((a - b).abs() <= 1e-14 * b.abs());
    }

    let mut buf = Vec::new();
    write_effects_csv(&report, &mut buf, Some("run=test")).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# run=test"));
    assert!(lines.next().unwrap().starts_with("cell,variable,level,estimand,estimate,se"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn missing_covariate_value_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "y,z,x1,S\n1,1,0.5,a\n0,0,,b\n").unwrap();
    let cfg = AnalysisConfig::new("y", "z", vec!["x1".into()], vec!["S".into()]);
    let err = load_csv(&path, &cfg).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
    assert!(err.to_string().contains("x1"), "{err}");
}
