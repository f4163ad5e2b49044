//! Expected-performance analysis of mean prototypes built from T samples:
//! feature statistics (lambda, alpha), the lower bound on expected cosine
//! similarity, a fitted first-order accuracy curve in the pseudo-label
//! budget, and a Monte Carlo verifier for the bound.

use ndarray::{Array1, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::NormalizedView;
use crate::streams::{stream_rng, TAG_MC};
use crate::MIN_VECTOR_NORM;

/// Statistics driving the bound and the accuracy curve.
///
/// `lambda` is the summed per-dimension feature variance, `alpha` the summed
/// squared per-dimension mean, `eta` the fitted scale between the bound and
/// observed accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub lambda: f64,
    pub alpha: f64,
    pub eta: f64,
    pub dim: usize,
}

impl TheoryParams {
    pub fn new(lambda: f64, alpha: f64, dim: usize) -> Result<Self> {
        if !(lambda.is_finite() && alpha.is_finite() && lambda >= 0.0 && alpha >= 0.0) {
            return Err(Error::Invalid(format!(
                "lambda and alpha must be non-negative, got ({lambda}, {alpha})"
            )));
        }
        Ok(TheoryParams {
            lambda,
            alpha,
            eta: 1.0,
            dim,
        })
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }
}

/// Per-dimension sample statistics of one class: unbiased variances summed
/// into `lambda`, squared means summed into `alpha`.
pub fn estimate_params(class_rows: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    let n = class_rows.nrows();
    if n < 2 {
        return Err(Error::Capacity(format!(
            "parameter estimation needs at least 2 rows, got {n}"
        )));
    }
    let means = class_rows.mean_axis(Axis(0)).expect("n >= 2");
    let mut lambda = 0.0;
    for d in 0..class_rows.ncols() {
        let col = class_rows.column(d);
        let var = col
            .iter()
            .map(|&v| (v - means[d]) * (v - means[d]))
            .sum::<f64>()
            / (n as f64 - 1.0);
        lambda += var;
    }
    let alpha = means.dot(&means);
    Ok((lambda, alpha))
}

/// Dataset-level statistics: the unweighted mean of per-class estimates over
/// every class with at least 2 rows.
pub fn dataset_params(view: &NormalizedView) -> Result<TheoryParams> {
    let mut lambda_sum = 0.0;
    let mut alpha_sum = 0.0;
    let mut classes = 0usize;
    for c in 0..view.num_classes() {
        if view.class_rows(c).len() < 2 {
            continue;
        }
        let (l, a) = estimate_params(view.class_matrix(c).view())?;
        lambda_sum += l;
        alpha_sum += a;
        classes += 1;
    }
    if classes == 0 {
        return Err(Error::Capacity(
            "no class holds the 2 rows parameter estimation needs".into(),
        ));
    }
    TheoryParams::new(
        lambda_sum / classes as f64,
        alpha_sum / classes as f64,
        view.dim(),
    )
}

/// Lower bound on the expected cosine similarity between a T-sample mean
/// prototype and its class: `alpha / sqrt(lambda / T + alpha)`.
pub fn lower_bound(params: &TheoryParams, t: usize) -> Result<f64> {
    if t < 1 {
        return Err(Error::Invalid("bound needs T >= 1".into()));
    }
    if params.alpha <= 0.0 {
        return Err(Error::UndefinedBound(
            "alpha = 0: features have zero mean, the bound degenerates".into(),
        ));
    }
    Ok(params.alpha / (params.lambda / t as f64 + params.alpha).sqrt())
}

/// Least-squares fit of the scale between bound values and observed
/// accuracies: minimizes sum of (acc - eta * bound(T))^2.
pub fn fit_eta(points: &[(usize, f64)], params: &TheoryParams) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Capacity("eta fit needs at least one point".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(t, acc) in points {
        if acc.is_nan() || acc <= 0.0 || acc > 1.0 {
            return Err(Error::Invalid(format!(
                "anchor accuracy must lie in (0, 1], got {acc}"
            )));
        }
        let b = lower_bound(params, t)?;
        num += acc * b;
        den += b * b;
    }
    Ok(num / den)
}

/// First-order accuracy estimate per pseudo-label budget Z:
/// `eta * alpha / sqrt(lambda / (K + Z) + alpha)`.
pub fn accuracy_curve(params: &TheoryParams, k: usize, z_values: &[usize]) -> Vec<(usize, f64)> {
    z_values
        .iter()
        .map(|&z| {
            let t = (k + z).max(1) as f64;
            let value = params.eta * params.alpha / (params.lambda / t + params.alpha).sqrt();
            (z, value)
        })
        .collect()
}

/// Monte Carlo estimate of the expected cosine between a T-sample mean
/// prototype and the class: per trial, T rows are drawn without replacement,
/// averaged into a prototype, and scored against every class row. Returns
/// the trial mean and its standard error.
pub fn mc_expected_cosine(
    class_rows: ArrayView2<'_, f64>,
    t: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials < 100 {
        return Err(Error::Invalid(format!(
            "Monte Carlo needs at least 100 trials, got {trials}"
        )));
    }
    if t < 1 {
        return Err(Error::Invalid("prototype needs T >= 1 samples".into()));
    }
    let n = class_rows.nrows();
    if t > n {
        return Err(Error::Capacity(format!(
            "T = {t} exceeds the {n} rows in the class"
        )));
    }
    let dim = class_rows.ncols();
    let mut values = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = stream_rng(seed, trial as u64, TAG_MC);
        let picks = index::sample(&mut rng, n, t);
        let mut proto = Array1::<f64>::zeros(dim);
        for pick in picks.iter() {
            proto += &class_rows.row(pick);
        }
        proto /= t as f64;
        let norm = proto.dot(&proto).sqrt();
        if norm < MIN_VECTOR_NORM {
            return Err(Error::Degenerate(format!(
                "trial {trial}: sampled prototype has norm {norm:.3e}"
            )));
        }
        let mut mean_cos = 0.0;
        for row in class_rows.rows() {
            let rn = row.dot(&row).sqrt();
            mean_cos += (proto.dot(&row) / (norm * rn)).clamp(-1.0, 1.0);
        }
        values.push(mean_cos / n as f64);
    }
    let mean = values.iter().sum::<f64>() / trials as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials as f64 - 1.0);
    Ok((mean, (var / trials as f64).sqrt()))
}
