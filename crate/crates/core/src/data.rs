//! Observational dataset, subgroup variables, and one-at-a-time subgroup cells.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{AnalysisConfig, PsModel};
use crate::error::{Error, Result};

/// A categorical subgroup variable with an ordered list of levels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupVariable {
    pub name: String,
    pub levels: Vec<String>,
    /// Level index per unit.
    pub codes: Vec<usize>,
}

impl SubgroupVariable {
    /// Builds a variable from raw labels. Levels are ordered numerically when
    /// every label parses as a number, lexicographically otherwise.
    pub fn from_labels(name: impl Into<String>, labels: &[String]) -> Self {
        let distinct: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        let mut levels: Vec<String> = distinct.into_iter().map(str::to_owned).collect();
        let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse::<f64>().ok()).collect();
        if let Some(values) = numeric {
            let mut paired: Vec<(f64, String)> = values.into_iter().zip(levels).collect();
            paired.sort_by(|a, b| a.0.total_cmp(&b.0));
            levels = paired.into_iter().map(|(_, l)| l).collect();
        }
        Self::with_levels(name, levels, labels).expect("levels derived from labels")
    }

    /// Builds a variable against a declared level list; labels outside it are
    /// rejected.
    pub fn with_levels(
        name: impl Into<String>,
        levels: Vec<String>,
        labels: &[String],
    ) -> Result<Self> {
        let name = name.into();
        let index: HashMap<&str, usize> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        if index.len() != levels.len() {
            return Err(Error::Config(format!("duplicate level declared for `{name}`")));
        }
        let codes = labels
            .iter()
            .map(|l| {
                index.get(l.as_str()).copied().ok_or_else(|| {
                    Error::Data(format!("value `{l}` of `{name}` is not a declared level"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubgroupVariable { name, levels, codes })
    }

    pub fn from_binary(name: impl Into<String>, values: &[bool]) -> Self {
        SubgroupVariable {
            name: name.into(),
            levels: vec!["0".into(), "1".into()],
            codes: values.iter().map(|&v| v as usize).collect(),
        }
    }
}

/// Label of one subgroup indicator column `S_r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndicatorLabel {
    pub variable: usize,
    pub variable_name: String,
    pub level: usize,
    pub level_name: String,
}

impl IndicatorLabel {
    pub fn display(&self) -> String {
        format!("{}={}", self.variable_name, self.level_name)
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisDataset {
    pub outcome_name: String,
    pub treatment_name: String,
    pub y: Vec<f64>,
    pub z: Vec<bool>,
    /// n × P covariate matrix.
    pub x: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub subgroups: Vec<SubgroupVariable>,
    /// Externally supplied propensity scores, when read from the input.
    pub external_propensity: Option<Vec<f64>>,
    indicators: Vec<IndicatorLabel>,
}

impl AnalysisDataset {
    pub fn new(
        y: Vec<f64>,
        z: Vec<bool>,
        x: DMatrix<f64>,
        covariate_names: Vec<String>,
        subgroups: Vec<SubgroupVariable>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if z.len() != n || x.nrows() != n {
            return Err(Error::Dimension(format!(
                "outcome has {n} rows, treatment {}, covariates {}",
                z.len(),
                x.nrows()
            )));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                x.ncols()
            )));
        }
        if !z.iter().any(|&t| t) || z.iter().all(|&t| t) {
            return Err(Error::Data(
                "treatment must contain both treated (1) and control (0) units".into(),
            ));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("outcome is not finite at row {}", i + 1)));
        }
        for (p, name) in covariate_names.iter().enumerate() {
            let col = x.column(p);
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "covariate `{name}` is not finite at row {}",
                    i + 1
                )));
            }
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(Error::Data(format!("covariate `{name}` is constant")));
            }
        }
        let mut indicators = Vec::new();
        for (v, sg) in subgroups.iter().enumerate() {
            if sg.codes.len() != n {
                return Err(Error::Dimension(format!(
                    "subgroup `{}` has {} rows, expected {n}",
                    sg.name,
                    sg.codes.len()
                )));
            }
            if sg.codes.iter().any(|&c| c >= sg.levels.len()) {
                return Err(Error::Data(format!("subgroup `{}` has an unknown level code", sg.name)));
            }
            for (l, level) in sg.levels.iter().enumerate() {
                indicators.push(IndicatorLabel {
                    variable: v,
                    variable_name: sg.name.clone(),
                    level: l,
                    level_name: level.clone(),
                });
            }
        }
        Ok(AnalysisDataset {
            outcome_name: "y".into(),
            treatment_name: "z".into(),
            y,
            z,
            x,
            covariate_names,
            subgroups,
            external_propensity: None,
            indicators,
        })
    }

    pub fn with_external_propensity(mut self, e: Vec<f64>) -> Result<Self> {
        if e.len() != self.n() {
            return Err(Error::Dimension(format!(
                "{} propensity scores for {} units",
                e.len(),
                self.n()
            )));
        }
        if let Some(i) = e.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Data(format!(
                "external propensity score at row {} is outside (0, 1)",
                i + 1
            )));
        }
        self.external_propensity = Some(e);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of covariates `P`.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Total number of subgroup indicator columns `R` across all variables.
    pub fn r(&self) -> usize {
        self.indicators.len()
    }

    pub fn indicators(&self) -> &[IndicatorLabel] {
        &self.indicators
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&t| t).count()
    }

    /// Whether unit `i` belongs to indicator column `r`.
    pub fn in_indicator(&self, r: usize, i: usize) -> bool {
        let label = &self.indicators[r];
        self.subgroups[label.variable].codes[i] == label.level
    }

    /// The n-vector `S_r` as 0/1 reals.
    pub fn indicator_column(&self, r: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.in_indicator(r, i) as u8 as f64).collect()
    }

    /// Recovers the categorical labels of variable `v` from its indicator
    /// columns.
    pub fn collapse_indicators(&self, v: usize) -> Vec<String> {
        let cols: Vec<(usize, Vec<f64>)> = self
            .indicators
            .iter()
            .enumerate()
            .filter(|(_, l)| l.variable == v)
            .map(|(r, l)| (l.level, self.indicator_column(r)))
            .collect();
        (0..self.n())
            .map(|i| {
                let level = cols
                    .iter()
                    .find(|(_, c)| c[i] == 1.0)
                    .map(|(l, _)| *l)
                    .expect("indicators are exhaustive");
                self.subgroups[v].levels[level].clone()
            })
            .collect()
    }

    /// Keeps the listed rows, in order. Used by resampling and tests; the
    /// result is validated like any other dataset.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, p| self.x[(rows[i], p)]);
        let subgroups = self
            .subgroups
            .iter()
            .map(|sg| SubgroupVariable {
                name: sg.name.clone(),
                levels: sg.levels.clone(),
                codes: rows.iter().map(|&i| sg.codes[i]).collect(),
            })
            .collect();
        let mut out = AnalysisDataset::new(
            rows.iter().map(|&i| self.y[i]).collect(),
            rows.iter().map(|&i| self.z[i]).collect(),
            x,
            self.covariate_names.clone(),
            subgroups,
        )?;
        out.outcome_name = self.outcome_name.clone();
        out.treatment_name = self.treatment_name.clone();
        if let Some(e) = &self.external_propensity {
            out.external_propensity = Some(rows.iter().map(|&i| e[i]).collect());
        }
        Ok(out)
    }
}

/// One row of a one-at-a-time subgroup analysis: a single level of a single
/// subgroup variable, or the whole sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupCell {
    pub variable: String,
    pub level: String,
    /// Indicator column index; `None` for the overall cell.
    pub indicator: Option<usize>,
    #[serde(skip)]
    pub members: Vec<usize>,
    pub n_members: usize,
    pub n_treated: usize,
    pub n_control: usize,
}

pub const OVERALL: &str = "Overall";

impl SubgroupCell {
    fn from_members(
        ds: &AnalysisDataset,
        variable: String,
        level: String,
        indicator: Option<usize>,
        members: Vec<usize>,
    ) -> Self {
        let n_treated = members.iter().filter(|&&i| ds.z[i]).count();
        SubgroupCell {
            variable,
            level,
            indicator,
            n_members: members.len(),
            n_treated,
            n_control: members.len() - n_treated,
            members,
        }
    }

    pub fn overall(ds: &AnalysisDataset) -> Self {
        Self::from_members(ds, OVERALL.into(), "all".into(), None, (0..ds.n()).collect())
    }

    pub fn is_overall(&self) -> bool {
        self.indicator.is_none()
    }

    /// A cell without at least one treated and one control member.
    pub fn is_degenerate(&self) -> bool {
        self.n_treated == 0 || self.n_control == 0
    }

    pub fn label(&self) -> String {
        if self.is_overall() {
            OVERALL.to_string()
        } else {
            format!("{}={}", self.variable, self.level)
        }
    }
}

/// One cell per (variable, level) in variable then level order, followed by
/// the overall cell.
pub fn enumerate_cells(ds: &AnalysisDataset) -> Vec<SubgroupCell> {
    let mut cells: Vec<SubgroupCell> = ds
        .indicators()
        .iter()
        .enumerate()
        .map(|(r, label)| {
            let members = (0..ds.n()).filter(|&i| ds.in_indicator(r, i)).collect();
            SubgroupCell::from_members(
                ds,
                label.variable_name.clone(),
                label.level_name.clone(),
                Some(r),
                members,
            )
        })
        .collect();
    cells.push(SubgroupCell::overall(ds));
    cells
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "null" | "NULL" | ".")
}

/// Reads a comma-delimited CSV with a header row and builds a validated
/// dataset from the columns named in `config`.
pub fn load_csv(path: impl AsRef<Path>, config: &AnalysisConfig) -> Result<AnalysisDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_reader(file, config)
}

pub fn load_csv_reader<R: Read>(reader: R, config: &AnalysisConfig) -> Result<AnalysisDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    };
    let y_col = find(&config.outcome)?;
    let z_col = find(&config.treatment)?;
    let x_cols = config
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let s_cols = config
        .subgroups
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let e_col = match (&config.ps_model, &config.propensity_column) {
        (PsModel::External, Some(c)) => Some(find(c)?),
        _ => None,
    };

    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut s_labels: Vec<Vec<String>> = vec![Vec::new(); s_cols.len()];
    let mut e = Vec::new();

    let numeric = |record: &csv::StringRecord, col: usize, row: usize| -> Result<f64> {
        let raw = record.get(col).unwrap_or("");
        if is_missing(raw) {
            return Err(Error::Data(format!(
                "missing value in column `{}` at data row {row}",
                &headers[col]
            )));
        }
        raw.parse::<f64>().map_err(|_| {
            Error::Data(format!(
                "non-numeric value `{raw}` in column `{}` at data row {row}",
                &headers[col]
            ))
        })
    };

    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k + 1;
        y.push(numeric(&record, y_col, row)?);
        let t = numeric(&record, z_col, row)?;
        if t == 0.0 {
            z.push(false);
        } else if t == 1.0 {
            z.push(true);
        } else {
            return Err(Error::Data(format!(
                "treatment must be binary 0/1 (found `{t}` at data row {row})"
            )));
        }
        x_rows.push(
            x_cols
                .iter()
                .map(|&c| numeric(&record, c, row))
                .collect::<Result<Vec<_>>>()?,
        );
        for (labels, &c) in s_labels.iter_mut().zip(&s_cols) {
            let raw = record.get(c).unwrap_or("");
            if is_missing(raw) {
                return Err(Error::Data(format!(
                    "missing value in column `{}` at data row {row}",
                    &headers[c]
                )));
            }
            labels.push(raw.to_string());
        }
        if let Some(c) = e_col {
            e.push(numeric(&record, c, row)?);
        }
    }

    let n = y.len();
    let x = DMatrix::from_fn(n, x_cols.len(), |i, p| x_rows[i][p]);
    let subgroups = config
        .subgroups
        .iter()
        .zip(&s_labels)
        .map(|(name, labels)| match config.levels.get(name) {
            Some(levels) => SubgroupVariable::with_levels(name.clone(), levels.clone(), labels),
            None => Ok(SubgroupVariable::from_labels(name.clone(), labels)),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = AnalysisDataset::new(y, z, x, config.covariates.clone(), subgroups)?;
    ds.outcome_name = config.outcome.clone();
    ds.treatment_name = config.treatment.clone();
    if e_col.is_some() {
        ds = ds.with_external_propensity(e)?;
    }
    Ok(ds)
}
