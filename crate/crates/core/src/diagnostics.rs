//! Subgroup balance diagnostics: ASMD, variance inflation, target alignment,
//! and the Connect-S grid.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{AnalysisDataset, SubgroupCell};
use crate::error::Result;
use crate::weighting::{arm_means, WeightSet};

/// Convention used for the ASMD denominator, carried in every export.
pub const POOLED_SD_CONVENTION: &str = "unweighted within-cell sqrt((s1^2 + s0^2) / 2), n-1 variances";

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.05, 0.10, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegenerateReason {
    /// The cell lacks treated or control members.
    EmptyArm,
    /// Zero pooled standard deviation with a nonzero mean difference.
    ZeroSd,
}

/// A diagnostic value, or the reason it is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", content = "value", rename_all = "kebab-case")]
pub enum Metric {
    Value(f64),
    Degenerate(DegenerateReason),
}

impl Metric {
    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Degenerate(_) => None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Metric::Degenerate(_))
    }

    fn csv(&self) -> String {
        match self {
            Metric::Value(v) => format!("{v:.10e}"),
            Metric::Degenerate(DegenerateReason::EmptyArm) => "NA:empty-arm".into(),
            Metric::Degenerate(DegenerateReason::ZeroSd) => "NA:zero-sd".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceCell {
    pub cell: String,
    pub covariate: usize,
    pub covariate_name: String,
    pub asmd: Metric,
    pub treated_mean: Option<f64>,
    pub control_mean: Option<f64>,
    pub pooled_sd: Option<f64>,
    /// Shade bin, 1 (lightest) to thresholds+1 (darkest).
    pub bin: Option<usize>,
}

/// Shade bin of an ASMD value: one plus the number of thresholds it reaches.
pub fn shade_bin(asmd: f64, thresholds: &[f64]) -> usize {
    1 + thresholds.iter().filter(|&&t| asmd >= t).count()
}

fn sample_variance(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Unweighted pooled standard deviation of covariate `p` within `cell`.
pub fn pooled_sd(ds: &AnalysisDataset, cell: &SubgroupCell, p: usize) -> f64 {
    let arm = |t: bool| {
        sample_variance(
            cell.members
                .iter()
                .filter(move |&&i| ds.z[i] == t)
                .map(|&i| ds.x[(i, p)]),
        )
    };
    ((arm(true) + arm(false)) / 2.0).sqrt()
}

pub fn balance_cell(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cell: &SubgroupCell,
    p: usize,
    thresholds: &[f64],
) -> BalanceCell {
    let mut out = BalanceCell {
        cell: cell.label(),
        covariate: p,
        covariate_name: ds.covariate_names[p].clone(),
        asmd: Metric::Degenerate(DegenerateReason::EmptyArm),
        treated_mean: None,
        control_mean: None,
        pooled_sd: None,
        bin: None,
    };
    if cell.is_degenerate() {
        return out;
    }
    let (mt, mc) = arm_means(ds, &ws.weights, cell, |i| ds.x[(i, p)]);
    let sd = pooled_sd(ds, cell, p);
    let diff = (mt - mc).abs();
    out.treated_mean = Some(mt);
    out.control_mean = Some(mc);
    out.pooled_sd = Some(sd);
    out.asmd = if sd > 0.0 {
        Metric::Value(diff / sd)
    } else if diff == 0.0 {
        Metric::Value(0.0)
    } else {
        Metric::Degenerate(DegenerateReason::ZeroSd)
    };
    out.bin = out.asmd.value().map(|a| shade_bin(a, thresholds));
    out
}

/// Absolute standardized mean difference of covariate `p` in `cell`: the
/// normalized weighted mean difference over the unweighted pooled SD.
pub fn asmd(ds: &AnalysisDataset, ws: &WeightSet, cell: &SubgroupCell, p: usize) -> Metric {
    balance_cell(ds, ws, cell, p, &DEFAULT_THRESHOLDS).asmd
}

/// Kish-type variance inflation
/// `(1/N₁ + 1/N₀)⁻¹ Σ_z Σw²/(Σw)²` over the arms of `cell`.
pub fn variance_inflation(ds: &AnalysisDataset, ws: &WeightSet, cell: &SubgroupCell) -> Metric {
    if cell.is_degenerate() {
        return Metric::Degenerate(DegenerateReason::EmptyArm);
    }
    let mut s = [0.0f64; 2];
    let mut s2 = [0.0f64; 2];
    for &i in &cell.members {
        let a = ds.z[i] as usize;
        let w = ws.weights[i];
        s[a] += w;
        s2[a] += w * w;
    }
    // written as a quotient so that unit weights give exactly 1
    let base = 1.0 / cell.n_treated as f64 + 1.0 / cell.n_control as f64;
    Metric::Value((s2[1] / (s[1] * s[1]) + s2[0] / (s[0] * s[0])) / base)
}

/// Distance between the treated weighted mean of covariate `p` and its
/// `h_hat`-weighted mean over the whole cell.
pub fn target_alignment(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cell: &SubgroupCell,
    p: usize,
    h_hat: &[f64],
) -> Metric {
    if cell.n_treated == 0 {
        return Metric::Degenerate(DegenerateReason::EmptyArm);
    }
    let (mut st, mut wt, mut sh, mut wh) = (0.0, 0.0, 0.0, 0.0);
    for &i in &cell.members {
        let x = ds.x[(i, p)];
        if ds.z[i] {
            st += ws.weights[i] * x;
            wt += ws.weights[i];
        }
        sh += h_hat[i] * x;
        wh += h_hat[i];
    }
    Metric::Value((st / wt - sh / wh).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub cell: String,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub vi: Metric,
    pub cells: Vec<BalanceCell>,
}

impl GridRow {
    pub fn is_degenerate(&self) -> bool {
        self.vi.is_degenerate()
    }

    /// Largest ASMD in the row, ignoring undefined entries.
    pub fn max_asmd(&self) -> Option<f64> {
        self.cells
            .iter()
            .filter_map(|c| c.asmd.value())
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }
}

/// Subgroup-by-covariate balance grid, overall row last.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConnectSGrid {
    pub title: String,
    pub covariates: Vec<String>,
    pub rows: Vec<GridRow>,
    pub thresholds: Vec<f64>,
    pub sd_convention: String,
    pub config_hash: Option<String>,
}

pub fn build_connect_s(
    ds: &AnalysisDataset,
    ws: &WeightSet,
    cells: &[SubgroupCell],
    thresholds: &[f64],
) -> ConnectSGrid {
    let ordered: Vec<&SubgroupCell> = cells
        .iter()
        .filter(|c| !c.is_overall())
        .chain(cells.iter().filter(|c| c.is_overall()))
        .collect();
    let rows = ordered
        .par_iter()
        .map(|cell| GridRow {
            cell: cell.label(),
            n: cell.n_members,
            n_treated: cell.n_treated,
            n_control: cell.n_control,
            vi: variance_inflation(ds, ws, cell),
            cells: (0..ds.p())
                .map(|p| balance_cell(ds, ws, cell, p, thresholds))
                .collect(),
        })
        .collect();
    ConnectSGrid {
        title: ws.source.clone(),
        covariates: ds.covariate_names.clone(),
        rows,
        thresholds: thresholds.to_vec(),
        sd_convention: POOLED_SD_CONVENTION.to_string(),
        config_hash: None,
    }
}

impl ConnectSGrid {
    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = title.into();
        self
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    /// Number of populated or explicitly degenerate entries.
    pub fn entry_count(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum()
    }

    pub fn row(&self, label: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.cell == label)
    }

    /// One line per (cell, covariate) with the row's VI and size repeated.
    pub fn write_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(c) = comment {
            writeln!(out, "# {c}").map_err(|e| crate::error::Error::io("<csv>", e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "cell",
            "covariate",
            "asmd",
            "treated_mean",
            "control_mean",
            "pooled_sd",
            "bin",
            "vi",
            "n",
            "n_treated",
            "n_control",
        ])?;
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.10e}"));
        for row in &self.rows {
            for c in &row.cells {
                w.write_record([
                    row.cell.clone(),
                    c.covariate_name.clone(),
                    c.asmd.csv(),
                    opt(c.treated_mean),
                    opt(c.control_mean),
                    opt(c.pooled_sd),
                    c.bin.map_or("NA".to_string(), |b| b.to_string()),
                    row.vi.csv(),
                    row.n.to_string(),
                    row.n_treated.to_string(),
                    row.n_control.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| crate::error::Error::io("<csv>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{enumerate_cells, SubgroupVariable};
    use crate::weighting::TiltingFunction;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn ds_with(x: Vec<f64>, z: Vec<bool>) -> AnalysisDataset {
        let n = x.len();
        AnalysisDataset::new(
            vec![0.0; n],
            z,
            DMatrix::from_vec(n, 1, x),
            vec!["x".into()],
            vec![],
        )
        .unwrap()
    }

    fn fixed(w: Vec<f64>) -> WeightSet {
        let mut ws = WeightSet::unit(w.len());
        ws.weights = w;
        ws
    }

    #[test]
    fn asmd_hand_example() {
        let ds = ds_with(vec![1.0, 3.0, 0.0, 2.0], vec![true, true, false, false]);
        let cell = SubgroupCell::overall(&ds);
        let b = balance_cell(&ds, &WeightSet::unit(4), &cell, 0, &DEFAULT_THRESHOLDS);
        assert_eq!(b.treated_mean, Some(2.0));
        assert_eq!(b.control_mean, Some(1.0));
        assert!((b.pooled_sd.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((b.asmd.value().unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.bin, Some(4));
    }

    #[test]
    fn asmd_zero_sd_cases() {
        let ds = ds_with(vec![1.0, 1.0, 1.0, 2.0, 5.0], vec![true, true, false, false, true]);
        // treated {1,1,5}, control {1,2}: nonzero SD
        let cell = SubgroupCell::overall(&ds);
        assert!(asmd(&ds, &WeightSet::unit(5), &cell, 0).value().is_some());
        // put all weight on x=1 units in both arms: zero difference
        let ws = fixed(vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(asmd(&ds, &ws, &cell, 0), Metric::Value(0.0));
    }

    #[test]
    fn zero_sd_with_difference_is_degenerate() {
        let x = vec![1.0, 1.0, 2.0, 2.0, 0.0, 9.0];
        let n = x.len();
        let sg = SubgroupVariable::from_binary("S", &[true, true, true, true, false, false]);
        let ds = AnalysisDataset::new(
            vec![0.0; n],
            vec![true, true, false, false, true, false],
            DMatrix::from_vec(n, 1, x),
            vec!["x".into()],
            vec![sg],
        )
        .unwrap();
        let cells = enumerate_cells(&ds);
        let s1 = &cells[1];
        assert_eq!(
            asmd(&ds, &WeightSet::unit(n), s1, 0),
            Metric::Degenerate(DegenerateReason::ZeroSd)
        );
    }

    #[test]
    fn variance_inflation_examples() {
        let ds = ds_with(vec![0.0, 1.0, 2.0, 3.0], vec![true, true, false, false]);
        let cell = SubgroupCell::overall(&ds);
        assert_eq!(variance_inflation(&ds, &WeightSet::unit(4), &cell), Metric::Value(1.0));
        let vi = variance_inflation(&ds, &fixed(vec![1.0, 3.0, 1.0, 1.0]), &cell);
        assert!((vi.value().unwrap() - 1.125).abs() < 1e-15);
        let vi = variance_inflation(&ds, &fixed(vec![0.37; 4]), &cell);
        assert!((vi.value().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn target_alignment_with_constant_tilt() {
        let ds = ds_with(vec![1.0, 3.0, 0.0, 8.0], vec![true, true, false, false]);
        let cell = SubgroupCell::overall(&ds);
        let e = vec![0.5; 4];
        let ws = crate::weighting::compute_weights(&e, &ds.z, TiltingFunction::Overlap).unwrap();
        let h: Vec<f64> = e.iter().map(|&v| TiltingFunction::Overlap.h(v)).collect();
        let d = target_alignment(&ds, &ws, &cell, 0, &h).value().unwrap();
        // treated mean 2, overall mean 3
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn target_alignment_hand_fixture() {
        let ds = ds_with(vec![1.0, 2.0, 4.0, 3.0], vec![true, true, false, true]);
        let cell = SubgroupCell::overall(&ds);
        let ws = fixed(vec![0.5, 1.5, 1.0, 2.0]);
        let h = vec![1.0, 2.0, 1.0, 0.0];
        // treated: (0.5 + 3 + 6) / 4 = 2.375; h-mean: (1 + 4 + 4) / 4 = 2.25
        let d = target_alignment(&ds, &ws, &cell, 0, &h).value().unwrap();
        assert!((d - 0.125).abs() < 1e-15);
    }

    #[test]
    fn shade_bins() {
        assert_eq!(shade_bin(0.0, &DEFAULT_THRESHOLDS), 1);
        assert_eq!(shade_bin(0.07, &DEFAULT_THRESHOLDS), 2);
        assert_eq!(shade_bin(0.15, &DEFAULT_THRESHOLDS), 3);
        assert_eq!(shade_bin(0.2, &DEFAULT_THRESHOLDS), 4);
    }

    #[test]
    fn grid_shape_and_overall_last() {
        let n = 40;
        let x = DMatrix::from_fn(n, 3, |i, p| ((i * (p + 2)) % 9) as f64);
        let ds = AnalysisDataset::new(
            vec![0.0; n],
            (0..n).map(|i| i % 2 == 0).collect(),
            x,
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                SubgroupVariable::from_binary("S1", &(0..n).map(|i| i % 3 == 0).collect::<Vec<_>>()),
                SubgroupVariable::from_binary("S2", &(0..n).map(|i| i % 5 < 2).collect::<Vec<_>>()),
            ],
        )
        .unwrap();
        let mut cells = enumerate_cells(&ds);
        cells.rotate_right(1); // overall first on input
        let grid = build_connect_s(&ds, &WeightSet::unit(n), &cells, &DEFAULT_THRESHOLDS);
        assert_eq!(grid.rows.len(), 5);
        assert_eq!(grid.entry_count(), 15);
        assert_eq!(grid.rows.last().unwrap().cell, "Overall");
        for row in &grid.rows {
            assert_eq!(row.vi, Metric::Value(1.0));
        }
    }

    proptest! {
        #[test]
        fn asmd_invariant_to_weight_scale_and_affine_covariate(
            x in proptest::collection::vec(-5.0f64..5.0, 8),
            w in proptest::collection::vec(0.05f64..3.0, 8),
            c in 0.01f64..100.0,
            a in 0.1f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let z = vec![true, false, true, false, true, false, true, false];
            prop_assume!(x.iter().any(|&v| v != x[0]));
            let ds = ds_with(x.clone(), z.clone());
            let shifted = ds_with(x.iter().map(|v| a * v + b).collect(), z);
            let cell = SubgroupCell::overall(&ds);
            let ws = fixed(w);
            let base = asmd(&ds, &ws, &cell, 0);
            if let Metric::Value(v) = base {
                let scaled = asmd(&ds, &ws.scaled(c), &cell, 0).value().unwrap();
                let affine = asmd(&shifted, &ws, &SubgroupCell::overall(&shifted), 0).value().unwrap();
                prop_assert!((v - scaled).abs() <= 1e-9 * (1.0 + v));
                prop_assert!((v - affine).abs() <= 1e-8 * (1.0 + v));
            }
        }

        #[test]
        fn variance_inflation_scale_invariant(w in proptest::collection::vec(0.05f64..3.0, 6), c in 0.01f64..100.0) {
            let ds = ds_with(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![true, false, true, false, true, false]);
            let cell = SubgroupCell::overall(&ds);
            let ws = fixed(w);
            let a = variance_inflation(&ds, &ws, &cell).value().unwrap();
            let b = variance_inflation(&ds, &ws.scaled(c), &cell).value().unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a);
            prop_assert!(a >= 1.0 - 1e-12);
        }
    }
}
