//! Propensity-model design matrices with subgroup-covariate interactions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::AnalysisDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ColumnKind {
    Intercept,
    CovariateMain { p: usize },
    SubgroupMain { r: usize },
    Interaction { p: usize, r: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
    /// Multiplier on the L1 penalty: 0 leaves the column unpenalized.
    pub penalty_factor: f64,
}

/// Which covariate-subgroup interactions enter the design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InteractionSelector {
    None,
    All,
    /// Explicit `(covariate p, indicator r)` pairs; `r` must be a
    /// non-reference level.
    Pairs(Vec<(usize, usize)>),
}

#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub columns: Vec<DesignColumn>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn penalty_factors(&self) -> Vec<f64> {
        self.columns.iter().map(|c| c.penalty_factor).collect()
    }

    /// Indices of the interaction columns.
    pub fn interaction_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c.kind, ColumnKind::Interaction { .. }))
            .map(|(j, _)| j)
            .collect()
    }

    /// Column index of interaction `(p, r)`, if present.
    pub fn find_interaction(&self, p: usize, r: usize) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.kind == ColumnKind::Interaction { p, r })
    }

    /// Keeps the given columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> DesignMatrix {
        DesignMatrix {
            matrix: self.matrix.select_columns(keep),
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
        }
    }

    /// Every non-interaction column plus the interaction columns listed in
    /// `selected`.
    pub fn reduce_to(&self, selected: &[usize]) -> Result<DesignMatrix> {
        for &j in selected {
            match self.columns.get(j) {
                Some(c) if matches!(c.kind, ColumnKind::Interaction { .. }) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "column {j} is not an interaction column of the design"
                    )))
                }
            }
        }
        let keep: Vec<usize> = (0..self.ncols())
            .filter(|&j| {
                !matches!(self.columns[j].kind, ColumnKind::Interaction { .. })
                    || selected.contains(&j)
            })
            .collect();
        Ok(self.select_columns(&keep))
    }

    /// Checks that `other` has the same column layout.
    pub fn same_columns(&self, other: &[DesignColumn]) -> bool {
        self.columns.len() == other.len()
            && self
                .columns
                .iter()
                .zip(other)
                .all(|(a, b)| a.kind == b.kind && a.name == b.name)
    }
}

/// Indicator columns entering the design: every level except the first of
/// each variable, skipping levels without members.
pub fn included_indicators(ds: &AnalysisDataset) -> Vec<usize> {
    ds.indicators()
        .iter()
        .enumerate()
        .filter(|(r, label)| label.level > 0 && (0..ds.n()).any(|i| ds.in_indicator(*r, i)))
        .map(|(r, _)| r)
        .collect()
}

/// Builds intercept, covariate mains, reference-coded subgroup mains, and the
/// selected covariate-subgroup interactions.
pub fn build_design(ds: &AnalysisDataset, selector: &InteractionSelector) -> Result<DesignMatrix> {
    let n = ds.n();
    let included = included_indicators(ds);
    let pairs: Vec<(usize, usize)> = match selector {
        InteractionSelector::None => Vec::new(),
        InteractionSelector::All => included
            .iter()
            .flat_map(|&r| (0..ds.p()).map(move |p| (p, r)))
            .collect(),
        InteractionSelector::Pairs(pairs) => {
            for &(p, r) in pairs {
                if p >= ds.p() || !included.contains(&r) {
                    return Err(Error::Config(format!(
                        "unknown interaction (covariate {p}, indicator {r})"
                    )));
                }
            }
            pairs.clone()
        }
    };

    let mut columns = Vec::with_capacity(1 + ds.p() + included.len() + pairs.len());
    let mut data: Vec<f64> = Vec::with_capacity(n * columns.capacity());

    columns.push(DesignColumn {
        name: "(Intercept)".into(),
        kind: ColumnKind::Intercept,
        penalty_factor: 0.0,
    });
    data.extend(std::iter::repeat_n(1.0, n));

    for p in 0..ds.p() {
        columns.push(DesignColumn {
            name: ds.covariate_names[p].clone(),
            kind: ColumnKind::CovariateMain { p },
            penalty_factor: 0.0,
        });
        data.extend(ds.x.column(p).iter());
    }
    let indicators: Vec<Vec<f64>> = included.iter().map(|&r| ds.indicator_column(r)).collect();
    for (k, &r) in included.iter().enumerate() {
        columns.push(DesignColumn {
            name: ds.indicators()[r].display(),
            kind: ColumnKind::SubgroupMain { r },
            penalty_factor: 0.0,
        });
        data.extend(&indicators[k]);
    }
    for &(p, r) in &pairs {
        let k = included.iter().position(|&q| q == r).expect("validated above");
        columns.push(DesignColumn {
            name: format!("{}:{}", ds.covariate_names[p], ds.indicators()[r].display()),
            kind: ColumnKind::Interaction { p, r },
            penalty_factor: 1.0,
        });
        data.extend(
            ds.x
                .column(p)
                .iter()
                .zip(&indicators[k])
                .map(|(x, s)| x * s),
        );
    }
    let matrix = DMatrix::from_vec(n, columns.len(), data);
    Ok(DesignMatrix { matrix, columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubgroupVariable;

    fn dataset(p: usize, n_binary_sg: usize) -> AnalysisDataset {
        let n = 40;
        let x = DMatrix::from_fn(n, p, |i, q| ((i as f64 + 1.0) * (q as f64 + 1.3)).sin());
        let subgroups = (0..n_binary_sg)
            .map(|v| {
                let vals: Vec<bool> = (0..n).map(|i| (i / (v + 1)) % 2 == 0).collect();
                SubgroupVariable::from_binary(format!("S{}", v + 1), &vals)
            })
            .collect();
        AnalysisDataset::new(
            vec![0.0; n],
            (0..n).map(|i| i % 3 == 0).collect(),
            x,
            (0..p).map(|q| format!("x{}", q + 1)).collect(),
            subgroups,
        )
        .unwrap()
    }

    #[test]
    fn column_counts() {
        let ds = dataset(2, 1);
        assert_eq!(build_design(&ds, &InteractionSelector::All).unwrap().ncols(), 6);
        assert_eq!(build_design(&ds, &InteractionSelector::None).unwrap().ncols(), 4);
        let ds = dataset(18, 2);
        assert_eq!(build_design(&ds, &InteractionSelector::All).unwrap().ncols(), 57);
    }

    #[test]
    fn interaction_columns_are_products_and_penalized() {
        let ds = dataset(3, 2);
        let dm = build_design(&ds, &InteractionSelector::All).unwrap();
        let intercepts = dm
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Intercept)
            .count();
        assert_eq!(intercepts, 1);
        for (j, col) in dm.columns.iter().enumerate() {
            match col.kind {
                ColumnKind::Interaction { p, r } => {
                    assert_eq!(col.penalty_factor, 1.0);
                    let s = ds.indicator_column(r);
                    for i in 0..ds.n() {
                        assert_eq!(dm.matrix[(i, j)], ds.x[(i, p)] * s[i]);
                    }
                }
                _ => assert_eq!(col.penalty_factor, 0.0),
            }
        }
    }

    #[test]
    fn reference_level_is_dropped() {
        let labels: Vec<String> = (0..30).map(|i| ["lo", "mid", "hi"][i % 3].to_string()).collect();
        let ds = AnalysisDataset::new(
            vec![0.0; 30],
            (0..30).map(|i| i % 2 == 0).collect(),
            DMatrix::from_fn(30, 1, |i, _| i as f64),
            vec!["x".into()],
            vec![SubgroupVariable::from_labels("band", &labels)],
        )
        .unwrap();
        let dm = build_design(&ds, &InteractionSelector::All).unwrap();
        // levels sort lexicographically: hi (reference), lo, mid
        assert_eq!(
            dm.column_names(),
            ["(Intercept)", "x", "band=lo", "band=mid", "x:band=lo", "x:band=mid"]
        );
    }

    #[test]
    fn explicit_pairs_and_unknown_pairs() {
        let ds = dataset(2, 2);
        // indicators: S1=0 (0), S1=1 (1), S2=0 (2), S2=1 (3)
        let dm = build_design(&ds, &InteractionSelector::Pairs(vec![(1, 3)])).unwrap();
        assert_eq!(dm.ncols(), 1 + 2 + 2 + 1);
        assert!(dm.find_interaction(1, 3).is_some());
        assert!(build_design(&ds, &InteractionSelector::Pairs(vec![(0, 0)])).is_err());
        assert!(build_design(&ds, &InteractionSelector::Pairs(vec![(5, 1)])).is_err());
    }

    #[test]
    fn reduce_keeps_mains() {
        let ds = dataset(2, 1);
        let full = build_design(&ds, &InteractionSelector::All).unwrap();
        let inter = full.interaction_columns();
        let reduced = full.reduce_to(&inter[..1]).unwrap();
        assert_eq!(reduced.ncols(), 5);
        let none = full.reduce_to(&[]).unwrap();
        let mains = build_design(&ds, &InteractionSelector::None).unwrap();
        assert_eq!(none.matrix, mains.matrix);
        assert!(full.reduce_to(&[0]).is_err());
    }
}
