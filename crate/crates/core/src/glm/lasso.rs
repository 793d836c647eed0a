use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic_irls, IrlsOptions};
use super::{dot, linear_predictor, log1pexp, sigmoid};
use crate::design::{ColumnKind, DesignColumn, DesignMatrix};
use crate::error::{Error, Result};

/// Rule for picking λ from the cross-validation curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaRule {
    /// λ minimizing the mean held-out deviance.
    #[default]
    #[serde(rename = "min")]
    Min,
    /// Largest λ within one standard error of the minimum.
    #[serde(rename = "1se")]
    OneSe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub folds: usize,
    pub seed: u64,
    /// Scale each penalized column's penalty by its standard deviation.
    pub standardize: bool,
    pub rule: LambdaRule,
    /// Convergence on the largest coefficient change, in linear-predictor
    /// units (coefficient times the column's root mean square).
    pub cd_tol: f64,
    pub max_outer: usize,
    pub max_sweeps: usize,
    /// Stop the path early once the fractional deviance change between
    /// consecutive λ falls below this, or the explained deviance fraction
    /// exceeds `max_dev_ratio`. Zero disables early stopping.
    pub min_dev_change: f64,
    pub max_dev_ratio: f64,
    pub irls: IrlsOptions,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            n_lambda: 100,
            lambda_ratio: 1e-4,
            folds: 10,
            seed: 0,
            standardize: true,
            rule: LambdaRule::Min,
            cd_tol: 1e-8,
            max_outer: 200,
            max_sweeps: 100_000,
            min_dev_change: 1e-5,
            max_dev_ratio: 0.999,
            irls: IrlsOptions::default(),
        }
    }
}

/// Solutions of the penalized problem
/// `(1/n) Σ [log(1 + e^η_i) − z_i η_i] + λ Σ_j ω_j |β_j|` along a λ grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSolution {
    pub lambdas: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    /// ω_j: penalty factor times (with standardization) the column's
    /// standard deviation.
    pub penalty_weights: Vec<f64>,
    /// Outer (quadratic approximation) iterations per λ.
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoPath {
    pub columns: Vec<DesignColumn>,
    pub lambdas: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    pub penalty_weights: Vec<f64>,
    pub cv_mean: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub folds: usize,
    pub fold_seed: u64,
    pub fold_attempts: usize,
    pub rule: LambdaRule,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    /// Design column indices of the interactions kept at the chosen λ.
    pub selected: Vec<usize>,
    /// The same selection as `(covariate p, indicator r)` pairs.
    pub selected_pairs: Vec<(usize, usize)>,
    pub options: LassoOptions,
}

impl LassoPath {
    pub fn chosen_coefficients(&self) -> &[f64] {
        &self.coefficients[self.chosen_index]
    }

    /// Interaction columns with nonzero coefficients at grid point `k`.
    pub fn support_at(&self, k: usize) -> Vec<usize> {
        support(&self.columns, &self.coefficients[k])
    }
}

fn support(columns: &[DesignColumn], beta: &[f64]) -> Vec<usize> {
    columns
        .iter()
        .enumerate()
        .filter(|(j, c)| c.penalty_factor > 0.0 && beta[*j] != 0.0)
        .map(|(j, _)| j)
        .collect()
}

fn column(x: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = x.nrows();
    &x.as_slice()[j * n..(j + 1) * n]
}

fn population_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn penalty_weights(x: &DMatrix<f64>, factors: &[f64], standardize: bool) -> Vec<f64> {
    factors
        .iter()
        .enumerate()
        .map(|(j, &pf)| {
            if pf == 0.0 {
                0.0
            } else if standardize {
                let sd = population_sd(column(x, j));
                if sd > 0.0 {
                    pf * sd
                } else {
                    pf
                }
            } else {
                pf
            }
        })
        .collect()
}

/// Log-spaced descending grid from `lambda_max` to `lambda_max * ratio`.
pub fn lambda_grid(lambda_max: f64, n_lambda: usize, ratio: f64) -> Vec<f64> {
    if n_lambda == 1 {
        return vec![lambda_max];
    }
    (0..n_lambda)
        .map(|k| lambda_max * ratio.powf(k as f64 / (n_lambda - 1) as f64))
        .collect()
}

/// Largest KKT violation of `beta` for the penalized problem at `lambda`:
/// zero coefficients need |g_j| ≤ λ ω_j, nonzero ones g_j = λ ω_j sign(β_j),
/// with g the mean score (1/n) Σ (z_i − e_i) x_ij.
pub fn kkt_max_violation(
    x: &DMatrix<f64>,
    z: &[bool],
    beta: &[f64],
    lambda: f64,
    weights: &[f64],
) -> f64 {
    let n = x.nrows() as f64;
    let resid: Vec<f64> = linear_predictor(x, beta)
        .iter()
        .zip(z)
        .map(|(&eta, &t)| t as u8 as f64 - sigmoid(eta))
        .collect();
    (0..x.ncols())
        .map(|j| {
            let g = dot(column(x, j), &resid) / n;
            let bound = lambda * weights[j];
            if beta[j] == 0.0 {
                (g.abs() - bound).max(0.0)
            } else {
                (g - bound * beta[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

struct Solver<'a> {
    x: &'a DMatrix<f64>,
    z: Vec<f64>,
    weights: Vec<f64>,
    rms: Vec<f64>,
    opts: &'a LassoOptions,
}

impl<'a> Solver<'a> {
    fn new(x: &'a DMatrix<f64>, z: &[bool], weights: Vec<f64>, opts: &'a LassoOptions) -> Self {
        let n = x.nrows() as f64;
        let rms = (0..x.ncols())
            .map(|j| (dot(column(x, j), column(x, j)) / n).sqrt())
            .collect();
        Solver {
            x,
            z: z.iter().map(|&t| t as u8 as f64).collect(),
            weights,
            rms,
            opts,
        }
    }

    fn objective(&self, eta: &[f64], beta: &[f64], lambda: f64) -> f64 {
        let n = eta.len() as f64;
        let loss: f64 = eta
            .iter()
            .zip(&self.z)
            .map(|(&e, &t)| log1pexp(e) - t * e)
            .sum::<f64>()
            / n;
        let pen: f64 = beta
            .iter()
            .zip(&self.weights)
            .map(|(b, w)| w * b.abs())
            .sum();
        loss + lambda * pen
    }

    /// Proximal Newton: repeated quadratic approximations, each solved by
    /// covariance-update coordinate descent over a growing active set.
    fn solve(&self, lambda: f64, beta: &mut [f64]) -> Result<usize> {
        let x = self.x;
        let n = x.nrows();
        let k = x.ncols();
        let nf = n as f64;
        let tol = self.opts.cd_tol;
        let mut eta = linear_predictor(x, beta);
        let mut obj = self.objective(&eta, beta, lambda);

        for outer in 1..=self.opts.max_outer {
            let p: Vec<f64> = eta.iter().map(|&t| sigmoid(t)).collect();
            let sqrt_w: Vec<f64> = p.iter().map(|&q| (q * (1.0 - q)).max(1e-5).sqrt()).collect();
            // gradient of the log-likelihood part at the current β
            let resid = DVector::from_iterator(n, p.iter().zip(&self.z).map(|(q, t)| t - q));
            let grad0: Vec<f64> = (0..k).map(|j| dot(column(x, j), resid.as_slice()) / nf).collect();
            let beta_old = beta.to_vec();
            let mut active: Vec<usize> = (0..k)
                .filter(|&j| {
                    self.weights[j] == 0.0
                        || beta[j] != 0.0
                        || grad0[j].abs() > lambda * self.weights[j]
                })
                .collect();
            loop {
                let m = active.len();
                let mut xa = DMatrix::<f64>::zeros(n, m);
                for (a, &j) in active.iter().enumerate() {
                    for ((dst, v), sw) in xa.column_mut(a).iter_mut().zip(column(x, j)).zip(&sqrt_w) {
                        *dst = v * sw;
                    }
                }
                let gram = (xa.transpose() * &xa) / nf;
                let delta = DVector::from_iterator(m, active.iter().map(|&j| beta[j] - beta_old[j]));
                let moved = &gram * &delta;
                let mut grad: Vec<f64> = active.iter().enumerate().map(|(a, &j)| grad0[j] - moved[a]).collect();
                self.quadratic_cd(&gram, &active, &mut grad, beta, lambda)?;

                // KKT check for the inactive coordinates of the quadratic model
                let delta = DVector::from_iterator(m, active.iter().map(|&j| beta[j] - beta_old[j]));
                let v: Vec<f64> = (&xa * &delta).iter().zip(&sqrt_w).map(|(a, b)| a * b).collect();
                let violators: Vec<usize> = (0..k)
                    .filter(|j| self.weights[*j] > 0.0 && !active.contains(j))
                    .filter(|&j| {
                        let g = grad0[j] - dot(column(x, j), &v) / nf;
                        g.abs() > lambda * self.weights[j]
                    })
                    .collect();
                if violators.is_empty() {
                    break;
                }
                active.extend(violators);
                active.sort_unstable();
            }

            // Backtrack on the penalized objective.
            let direction: Vec<f64> = beta.iter().zip(&beta_old).map(|(a, b)| a - b).collect();
            let mut t = 1.0;
            let mut new_eta;
            let mut new_obj;
            loop {
                for j in 0..k {
                    beta[j] = beta_old[j] + t * direction[j];
                }
                new_eta = linear_predictor(x, beta);
                new_obj = self.objective(&new_eta, beta, lambda);
                if new_obj <= obj + 1e-13 * obj.abs().max(1.0) || t < 1e-6 {
                    break;
                }
                t *= 0.5;
            }
            eta = new_eta;
            obj = new_obj;

            let change = (0..k)
                .map(|j| (t * direction[j]).abs() * self.rms[j])
                .fold(0.0, f64::max);
            if change < tol {
                return Ok(outer);
            }
        }
        Err(Error::Convergence {
            stage: "LASSO coordinate descent".into(),
            detail: format!(
                "no convergence at lambda = {lambda:.6e} within {} outer iterations",
                self.opts.max_outer
            ),
        })
    }

    /// Coordinate descent on `½ΔᵀGΔ − gᵀΔ + λ Σ ω_j |β_j|` over the
    /// `active` coordinates. `grad` enters as g − GΔ for the current Δ and
    /// is kept current as coordinates move.
    fn quadratic_cd(
        &self,
        gram: &DMatrix<f64>,
        active: &[usize],
        grad: &mut [f64],
        beta: &mut [f64],
        lambda: f64,
    ) -> Result<()> {
        let m = active.len();
        let inner_tol = 0.1 * self.opts.cd_tol;
        for _ in 0..self.opts.max_sweeps {
            let mut max_change = 0.0f64;
            for a in 0..m {
                let j = active[a];
                let gjj = gram[(a, a)];
                if gjj <= 1e-14 {
                    continue;
                }
                let u = grad[a] + gjj * beta[j];
                let thr = lambda * self.weights[j];
                let new = if u > thr {
                    (u - thr) / gjj
                } else if u < -thr {
                    (u + thr) / gjj
                } else {
                    0.0
                };
                let delta = new - beta[j];
                if delta != 0.0 {
                    beta[j] = new;
                    for (b, g) in grad.iter_mut().enumerate() {
                        *g -= gram[(b, a)] * delta;
                    }
                    max_change = max_change.max(delta.abs() * self.rms[j]);
                }
            }
            if max_change < inner_tol {
                return Ok(());
            }
        }
        Err(Error::Convergence {
            stage: "LASSO coordinate descent".into(),
            detail: format!("inner sweeps exhausted at lambda = {lambda:.6e}"),
        })
    }
}

/// Early stopping never shortens a path below this many points.
const MIN_PATH_POINTS: usize = 5;

/// Warm-started solution path. With `lambdas = None` the grid starts at the
/// smallest λ that zeroes every penalized coefficient, computed from the
/// unpenalized (main-effects) maximum-likelihood fit.
pub fn solve_path(
    x: &DMatrix<f64>,
    z: &[bool],
    penalty_factors: &[f64],
    lambdas: Option<&[f64]>,
    opts: &LassoOptions,
) -> Result<PathSolution> {
    let k = x.ncols();
    if penalty_factors.len() != k || z.len() != x.nrows() {
        return Err(Error::Dimension("penalty factors or treatment do not match design".into()));
    }
    if !penalty_factors.iter().any(|&f| f > 0.0) {
        return Err(Error::Config("design has no penalized columns".into()));
    }
    let weights = penalty_weights(x, penalty_factors, opts.standardize);

    // Unpenalized block at its maximum-likelihood solution.
    let free: Vec<usize> = (0..k).filter(|&j| weights[j] == 0.0).collect();
    let mut beta = vec![0.0; k];
    let n = x.nrows() as f64;
    if !free.is_empty() {
        let sub = DesignMatrix {
            matrix: x.select_columns(&free),
            columns: free
                .iter()
                .map(|&j| DesignColumn {
                    name: format!("column {j}"),
                    kind: if j == 0 {
                        ColumnKind::Intercept
                    } else {
                        ColumnKind::CovariateMain { p: j }
                    },
                    penalty_factor: 0.0,
                })
                .collect(),
        };
        let fit = fit_logistic_irls(&sub, z, &opts.irls)?;
        for (a, &j) in free.iter().enumerate() {
            beta[j] = fit.coefficients[a];
        }
    }
    let grid: Vec<f64> = match lambdas {
        Some(l) => l.to_vec(),
        None => {
            let resid: Vec<f64> = linear_predictor(x, &beta)
                .iter()
                .zip(z)
                .map(|(&eta, &t)| t as u8 as f64 - sigmoid(eta))
                .collect();
            let lambda_max = (0..k)
                .filter(|&j| weights[j] > 0.0)
                .map(|j| (dot(column(x, j), &resid) / n).abs() / weights[j])
                .fold(0.0, f64::max);
            // nudge so rounding cannot activate a column at the first point
            lambda_grid(lambda_max * (1.0 + 1e-9), opts.n_lambda, opts.lambda_ratio)
        }
    };

    let solver = Solver::new(x, z, weights.clone(), opts);
    let mut coefficients = Vec::with_capacity(grid.len());
    let mut iterations = Vec::with_capacity(grid.len());
    let z_bar = z.iter().filter(|&&t| t).count() as f64 / n;
    let null_dev = -2.0 * n * (z_bar * z_bar.ln() + (1.0 - z_bar) * (1.0 - z_bar).ln());
    let mut prev_dev = f64::NAN;
    for &lambda in &grid {
        iterations.push(solver.solve(lambda, &mut beta)?);
        coefficients.push(beta.clone());
        if opts.min_dev_change > 0.0 {
            let dev = heldout_deviance(x, z, &beta) * n;
            let saturated = 1.0 - dev / null_dev > opts.max_dev_ratio;
            let flat = (prev_dev - dev) / dev < opts.min_dev_change;
            if coefficients.len() >= MIN_PATH_POINTS && (saturated || flat) {
                break;
            }
            prev_dev = dev;
        }
    }
    let computed = coefficients.len();
    Ok(PathSolution {
        lambdas: grid[..computed].to_vec(),
        coefficients,
        penalty_weights: weights,
        iterations,
    })
}

/// Fold labels stratified by treatment: treated and control units are
/// shuffled separately and dealt round-robin.
pub fn stratified_folds(z: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut treated: Vec<usize> = (0..z.len()).filter(|&i| z[i]).collect();
    let mut control: Vec<usize> = (0..z.len()).filter(|&i| !z[i]).collect();
    treated.shuffle(&mut rng);
    control.shuffle(&mut rng);
    let mut label = vec![0; z.len()];
    for (pos, &i) in treated.iter().chain(&control).enumerate() {
        label[i] = pos % folds;
    }
    label
}

fn folds_valid(z: &[bool], label: &[usize], folds: usize) -> bool {
    (0..folds).all(|f| {
        let mut counts = [[0usize; 2]; 2]; // [in-fold?][treated?]
        for (i, &l) in label.iter().enumerate() {
            counts[(l == f) as usize][z[i] as usize] += 1;
        }
        counts.iter().all(|c| c[0] > 0 && c[1] > 0)
    })
}

fn heldout_deviance(x: &DMatrix<f64>, z: &[bool], beta: &[f64]) -> f64 {
    let n = x.nrows() as f64;
    linear_predictor(x, beta)
        .iter()
        .zip(z)
        .map(|(&eta, &t)| 2.0 * (log1pexp(eta) - if t { eta } else { 0.0 }))
        .sum::<f64>()
        / n
}

/// L1-penalized logistic regression path over the design's penalized
/// columns with K-fold cross-validated λ.
pub fn fit_lasso_logistic(dm: &DesignMatrix, z: &[bool], opts: &LassoOptions) -> Result<LassoPath> {
    if opts.folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let factors = dm.penalty_factors();
    let full = solve_path(&dm.matrix, z, &factors, None, opts)?;

    let mut attempt = 0;
    let (label, fold_seed) = loop {
        let seed = opts.seed.wrapping_add(attempt as u64);
        let label = stratified_folds(z, opts.folds, seed);
        attempt += 1;
        if folds_valid(z, &label, opts.folds) {
            break (label, seed);
        }
        if attempt >= 5 {
            return Err(Error::Data(format!(
                "could not form {} folds with both treatment groups in every fold after 5 attempts",
                opts.folds
            )));
        }
    };

    let fold_curves: Vec<Vec<f64>> = (0..opts.folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..z.len()).filter(|&i| label[i] != f).collect();
            let test: Vec<usize> = (0..z.len()).filter(|&i| label[i] == f).collect();
            let x_train = dm.matrix.select_rows(&train);
            let z_train: Vec<bool> = train.iter().map(|&i| z[i]).collect();
            let x_test = dm.matrix.select_rows(&test);
            let z_test: Vec<bool> = test.iter().map(|&i| z[i]).collect();
            let path = solve_path(&x_train, &z_train, &factors, Some(&full.lambdas), opts)?;
            Ok(path
                .coefficients
                .iter()
                .map(|b| heldout_deviance(&x_test, &z_test, b))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let sizes: Vec<f64> = (0..opts.folds)
        .map(|f| label.iter().filter(|&&l| l == f).count() as f64)
        .collect();
    let total: f64 = sizes.iter().sum();
    // paths that stopped early limit the curve to their common length
    let nl = fold_curves
        .iter()
        .map(|c| c.len())
        .fold(full.lambdas.len(), usize::min);
    let mut full = full;
    full.lambdas.truncate(nl);
    full.coefficients.truncate(nl);
    full.iterations.truncate(nl);
    let kf = opts.folds as f64;
    let mut cv_mean = vec![0.0; nl];
    let mut cv_se = vec![0.0; nl];
    for l in 0..nl {
        let mean = (0..opts.folds)
            .map(|f| sizes[f] * fold_curves[f][l])
            .sum::<f64>()
            / total;
        let var = (0..opts.folds)
            .map(|f| sizes[f] * (fold_curves[f][l] - mean).powi(2))
            .sum::<f64>()
            / total;
        cv_mean[l] = mean;
        cv_se[l] = (var / (kf - 1.0)).sqrt();
    }
    let min_index = (0..nl)
        .min_by(|&a, &b| cv_mean[a].total_cmp(&cv_mean[b]))
        .expect("non-empty grid");
    let chosen_index = match opts.rule {
        LambdaRule::Min => min_index,
        LambdaRule::OneSe => {
            let bound = cv_mean[min_index] + cv_se[min_index];
            (0..=min_index).find(|&l| cv_mean[l] <= bound).unwrap_or(min_index)
        }
    };
    let selected = support(&dm.columns, &full.coefficients[chosen_index]);
    let selected_pairs = selected
        .iter()
        .filter_map(|&j| match dm.columns[j].kind {
            ColumnKind::Interaction { p, r } => Some((p, r)),
            _ => None,
        })
        .collect();
    Ok(LassoPath {
        columns: dm.columns.clone(),
        chosen_lambda: full.lambdas[chosen_index],
        lambdas: full.lambdas,
        coefficients: full.coefficients,
        penalty_weights: full.penalty_weights,
        cv_mean,
        cv_se,
        folds: opts.folds,
        fold_seed,
        fold_attempts: attempt,
        rule: opts.rule,
        chosen_index,
        selected,
        selected_pairs,
        options: *opts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_log_spaced() {
        let g = lambda_grid(2.0, 5, 1e-4);
        assert_eq!(g.len(), 5);
        assert!((g[0] - 2.0).abs() < 1e-15);
        assert!((g[4] - 2e-4).abs() < 1e-15);
        assert!((g[1] / g[0] - g[2] / g[1]).abs() < 1e-12);
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let z: Vec<bool> = (0..53).map(|i| i % 3 == 0).collect();
        let a = stratified_folds(&z, 5, 11);
        let b = stratified_folds(&z, 5, 11);
        assert_eq!(a, b);
        assert!(folds_valid(&z, &a, 5));
        for f in 0..5 {
            let treated = (0..53).filter(|&i| z[i] && a[i] == f).count();
            assert!((3..=4).contains(&treated));
        }
    }

    #[test]
    fn too_few_treated_for_folds_fails_after_retries() {
        let z: Vec<bool> = (0..30).map(|i| i < 3).collect();
        let label = stratified_folds(&z, 5, 0);
        assert!(!folds_valid(&z, &label, 5));
    }
}
