use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{dot, linear_predictor, log1pexp, sigmoid};
use crate::design::{DesignColumn, DesignMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlsOptions {
    /// Convergence when every |Σ_i (z_i − e_i) x_ij| falls below this.
    pub score_tol: f64,
    pub max_iter: usize,
    /// |coefficient| above this is reported as separation.
    pub separation_cap: f64,
    /// Smallest admissible eigenvalue ratio of the column-normalized Gram
    /// matrix.
    pub rank_tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            score_tol: 1e-10,
            max_iter: 100,
            separation_cap: 30.0,
            rank_tol: 1e-12,
        }
    }
}

/// Maximum-likelihood logistic propensity model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticFit {
    pub columns: Vec<DesignColumn>,
    pub coefficients: Vec<f64>,
    #[serde(skip)]
    pub propensities: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_score_residual: f64,
    pub deviance: f64,
    /// Deviance after each accepted iteration, starting from the initial
    /// point.
    pub deviance_trace: Vec<f64>,
    /// Units whose fitted propensity had to be clamped away from 0 or 1.
    pub clamped: usize,
    pub options: IrlsOptions,
}

impl LogisticFit {
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::Convergence {
                stage: "logistic IRLS".into(),
                detail: format!(
                    "max score residual {:.3e} after {} iterations",
                    self.max_score_residual, self.iterations
                ),
            })
        }
    }
}

/// Fitted propensities with the number of values clamped to
/// `[ε, 1 − ε]`, ε = machine epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct Propensities {
    pub values: Vec<f64>,
    pub clamped: usize,
}

/// Inverse-logit of a linear predictor, clamped away from 0 and 1.
pub fn clamp_propensities(eta: &[f64]) -> Propensities {
    let lo = f64::EPSILON;
    let hi = 1.0 - f64::EPSILON;
    let mut clamped = 0;
    let values = eta
        .iter()
        .map(|&t| {
            let e = sigmoid(t);
            if e < lo {
                clamped += 1;
                lo
            } else if e > hi {
                clamped += 1;
                hi
            } else {
                e
            }
        })
        .collect();
    Propensities { values, clamped }
}

pub fn predict_propensity(fit: &LogisticFit, dm: &DesignMatrix) -> Result<Propensities> {
    if !dm.same_columns(&fit.columns) {
        return Err(Error::Dimension(format!(
            "design has columns {:?}, fit expects {:?}",
            dm.column_names(),
            fit.columns.iter().map(|c| &c.name).collect::<Vec<_>>()
        )));
    }
    Ok(clamp_propensities(&linear_predictor(&dm.matrix, &fit.coefficients)))
}

/// Bernoulli log-likelihood Σ z η − log(1 + e^η).
pub fn log_likelihood(x: &DMatrix<f64>, z: &[bool], beta: &[f64]) -> f64 {
    linear_predictor(x, beta)
        .iter()
        .zip(z)
        .map(|(&eta, &t)| if t { eta } else { 0.0 } - log1pexp(eta))
        .sum()
}

pub fn binomial_deviance(x: &DMatrix<f64>, z: &[bool], beta: &[f64]) -> f64 {
    -2.0 * log_likelihood(x, z, beta)
}

/// Score vector Σ_i (z_i − e_i) x_i, the gradient of the log-likelihood.
pub fn score_vector(x: &DMatrix<f64>, z: &[bool], beta: &[f64]) -> Vec<f64> {
    let resid: Vec<f64> = linear_predictor(x, beta)
        .iter()
        .zip(z)
        .map(|(&eta, &t)| t as u8 as f64 - sigmoid(eta))
        .collect();
    column_dots(x, &resid)
}

fn column_dots(x: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    (0..x.ncols())
        .map(|j| dot(&x.as_slice()[j * n..(j + 1) * n], v))
        .collect()
}

/// Symmetric `Xᵀ diag(w) X`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64], cols: &[usize]) -> DMatrix<f64> {
    let n = x.nrows();
    let mut scaled = DMatrix::<f64>::zeros(n, cols.len());
    for (a, &j) in cols.iter().enumerate() {
        let src = &x.as_slice()[j * n..(j + 1) * n];
        for (dst, (v, wi)) in scaled.column_mut(a).iter_mut().zip(src.iter().zip(w)) {
            *dst = v * wi.sqrt();
        }
    }
    scaled.transpose() * &scaled
}

/// Rejects designs whose column-normalized Gram matrix is numerically
/// singular.
pub(crate) fn check_rank(dm: &DesignMatrix, rank_tol: f64) -> Result<()> {
    let k = dm.ncols();
    let ones = vec![1.0; dm.nrows()];
    let all: Vec<usize> = (0..k).collect();
    let mut g = weighted_gram(&dm.matrix, &ones, &all);
    for j in 0..k {
        if g[(j, j)] <= 0.0 {
            return Err(Error::Rank {
                column: dm.columns[j].name.clone(),
                ratio: 0.0,
            });
        }
    }
    let d: Vec<f64> = (0..k).map(|j| g[(j, j)].sqrt()).collect();
    for a in 0..k {
        for b in 0..k {
            g[(a, b)] /= d[a] * d[b];
        }
    }
    let eig = SymmetricEigen::new(g);
    let (imin, min) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty design");
    let max = eig.eigenvalues.max();
    let ratio = min / max;
    if ratio < rank_tol {
        let v = eig.eigenvectors.column(imin);
        let worst = v.iamax();
        return Err(Error::Rank {
            column: dm.columns[worst].name.clone(),
            ratio,
        });
    }
    Ok(())
}

/// Newton–Raphson (IRLS) maximum likelihood with step-halving on any
/// deviance increase.
pub fn fit_logistic_irls(dm: &DesignMatrix, z: &[bool], opts: &IrlsOptions) -> Result<LogisticFit> {
    let n = dm.nrows();
    let k = dm.ncols();
    if z.len() != n {
        return Err(Error::Dimension(format!("{} treatments for {n} design rows", z.len())));
    }
    if opts.max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    let n1 = z.iter().filter(|&&t| t).count();
    if n1 == 0 || n1 == n {
        return Err(Error::Separation {
            column: "(Intercept)".into(),
            value: f64::INFINITY,
            cap: opts.separation_cap,
            iterations: 0,
        });
    }
    check_rank(dm, opts.rank_tol)?;

    let x = &dm.matrix;
    let all: Vec<usize> = (0..k).collect();
    let mut beta = vec![0.0; k];
    if let Some(j) = dm
        .columns
        .iter()
        .position(|c| c.kind == crate::design::ColumnKind::Intercept)
    {
        let pbar = n1 as f64 / n as f64;
        beta[j] = (pbar / (1.0 - pbar)).ln();
    }
    let mut dev = binomial_deviance(x, z, &beta);
    let mut trace = vec![dev];
    let mut converged = false;
    let mut iterations = 0;
    let mut max_score = f64::INFINITY;

    while iterations < opts.max_iter {
        let eta = linear_predictor(x, &beta);
        let e: Vec<f64> = eta.iter().map(|&t| sigmoid(t)).collect();
        let resid: Vec<f64> = e.iter().zip(z).map(|(&p, &t)| t as u8 as f64 - p).collect();
        let score = column_dots(x, &resid);
        max_score = score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max_score <= opts.score_tol {
            converged = true;
            break;
        }
        let w: Vec<f64> = e.iter().map(|&p| p * (1.0 - p)).collect();
        let h = weighted_gram(x, &w, &all);
        let step = match h.cholesky() {
            Some(ch) => ch.solve(&DVector::from_vec(score)),
            None => {
                return Err(separation_or_rank(dm, &beta, opts, iterations));
            }
        };
        let step_norm = step.amax();
        iterations += 1;

        // Step-halving; the slack admits changes at the rounding floor of the
        // deviance sum.
        let slack = 1e-11 * dev.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        let mut candidate = beta.clone();
        for _ in 0..40 {
            for j in 0..k {
                candidate[j] = beta[j] + t * step[j];
            }
            let cand_dev = binomial_deviance(x, z, &candidate);
            if cand_dev.is_finite() && cand_dev <= dev + slack {
                dev = cand_dev;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent direction left: the iterate sits on the floating
            // point floor of the likelihood.
            converged = step_norm <= 1e-8 * (1.0 + beta.iter().fold(0.0f64, |m, b| m.max(b.abs())));
            break;
        }
        beta.copy_from_slice(&candidate);
        trace.push(dev);

        if let Some((j, &b)) = beta
            .iter()
            .enumerate()
            .find(|(_, b)| b.abs() > opts.separation_cap)
        {
            return Err(Error::Separation {
                column: dm.columns[j].name.clone(),
                value: b,
                cap: opts.separation_cap,
                iterations,
            });
        }
        if t * step_norm <= 1e-14 * (1.0 + beta.iter().fold(0.0f64, |m, b| m.max(b.abs()))) {
            let s = score_vector(x, z, &beta);
            max_score = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            converged = true;
            break;
        }
    }
    if !converged && iterations >= opts.max_iter {
        let s = score_vector(x, z, &beta);
        max_score = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        converged = max_score <= opts.score_tol;
    }

    let props = clamp_propensities(&linear_predictor(x, &beta));
    Ok(LogisticFit {
        columns: dm.columns.clone(),
        coefficients: beta,
        propensities: props.values,
        converged,
        iterations,
        max_score_residual: max_score,
        deviance: dev,
        deviance_trace: trace,
        clamped: props.clamped,
        options: *opts,
    })
}

fn separation_or_rank(dm: &DesignMatrix, beta: &[f64], opts: &IrlsOptions, iterations: usize) -> Error {
    let (j, b) = beta
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap_or((0, 0.0));
    if b.abs() > opts.separation_cap / 3.0 {
        Error::Separation {
            column: dm.columns[j].name.clone(),
            value: b,
            cap: opts.separation_cap,
            iterations,
        }
    } else {
        Error::Rank {
            column: dm.columns[j].name.clone(),
            ratio: 0.0,
        }
    }
}

/// Maximum-likelihood refit on all main effects plus the selected
/// interaction columns of `full`.
pub fn post_lasso_refit(
    full: &DesignMatrix,
    z: &[bool],
    selected: &[usize],
    opts: &IrlsOptions,
) -> Result<(DesignMatrix, LogisticFit)> {
    let reduced = full.reduce_to(selected)?;
    let fit = fit_logistic_irls(&reduced, z, opts)?;
    Ok((reduced, fit))
}
