//! Propensity score models: maximum-likelihood logistic regression by IRLS,
//! L1-penalized logistic regression by coordinate descent with
//! cross-validated penalty selection, and the post-LASSO refit.

mod lasso;
mod logistic;

pub use lasso::{
    fit_lasso_logistic, kkt_max_violation, lambda_grid, solve_path, stratified_folds,
    LambdaRule, LassoOptions, LassoPath, PathSolution,
};
pub use logistic::{
    binomial_deviance, clamp_propensities, fit_logistic_irls, log_likelihood, post_lasso_refit, predict_propensity,
    score_vector, IrlsOptions, LogisticFit, Propensities,
};

/// Numerically stable inverse logit.
#[inline]
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
#[inline]
pub(crate) fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Linear predictor `X β`, skipping zero coefficients.
pub fn linear_predictor(x: &nalgebra::DMatrix<f64>, beta: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let mut eta = vec![0.0; n];
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            axpy(b, &x.as_slice()[j * n..(j + 1) * n], &mut eta);
        }
    }
    eta
}
