#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use subgroup_ow::data::{AnalysisDataset, SubgroupVariable};
use subgroup_ow::design::{build_design, DesignMatrix, InteractionSelector};
use subgroup_ow::sim::dgp::{generate_dataset, ScenarioConfig};

/// The benchmark scenario: P = 18, ψ = 0.25, γ = 1, κ = 0.75, β_sz = (0.5, 0.5).
pub fn benchmark() -> ScenarioConfig {
    ScenarioConfig::new(18, 0.25, 1.0, 0.75, [0.5, 0.5])
}

pub fn benchmark_dataset(seed: u64) -> AnalysisDataset {
    generate_dataset(&benchmark(), seed).unwrap().dataset
}

/// Random logistic data with `p` Gaussian covariates and one binary
/// subgroup, with covariate effects that differ by subgroup.
pub fn small_instance(seed: u64, n: usize, p: usize) -> (AnalysisDataset, DesignMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    let a: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z: Vec<bool> = (0..n)
        .map(|i| {
            let mut eta = -0.3 + 0.5 * s[i] as u8 as f64;
            for q in 0..p {
                eta += x[(i, q)] * (a[q] + if s[i] { b[q] } else { 0.0 });
            }
            rng.random_bool(1.0 / (1.0 + (-eta).exp()))
        })
        .collect();
    let ds = AnalysisDataset::new(
        vec![0.0; n],
        z,
        x,
        (1..=p).map(|q| format!("x{q}")).collect(),
        vec![SubgroupVariable::from_binary("S", &s)],
    )
    .unwrap();
    let dm = build_design(&ds, &InteractionSelector::All).unwrap();
    (ds, dm)
}

/// Benchmark covariates with the two binary subgroups merged into one
/// four-level variable (a partition of the units), and a noiseless outcome
/// `Y = Σ_r β_r S_r + Σ_r Σ_p β_rp S_r X_p + Σ_r τ_r S_r Z`. Returns the
/// dataset and τ by level.
pub fn partition_fixture(seed: u64) -> (AnalysisDataset, Vec<f64>) {
    let base = benchmark_dataset(seed);
    let labels: Vec<String> = (0..base.n())
        .map(|i| format!("{}{}", base.subgroups[0].codes[i], base.subgroups[1].codes[i]))
        .collect();
    let sg = SubgroupVariable::from_labels("S", &labels);
    assert_eq!(sg.levels, vec!["00", "01", "10", "11"]);
    let tau = vec![-1.0, -0.5, 0.25, 1.5];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let beta_r: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let beta_rp: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..base.p()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y: Vec<f64> = (0..base.n())
        .map(|i| {
            let r = sg.codes[i];
            let mut v = beta_r[r];
            for q in 0..base.p() {
                v += beta_rp[r][q] * base.x[(i, q)];
            }
            if base.z[i] {
                v += tau[r];
            }
            v
        })
        .collect();
    let ds = AnalysisDataset::new(y, base.z.clone(), base.x.clone(), base.covariate_names.clone(), vec![sg])
        .unwrap();
    (ds, tau)
}
