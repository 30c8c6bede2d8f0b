//! Diagonal Gaussians and closed-form distribution distances used by the
//! validation harness.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// N(mean, diag(variance)). Covariances are diagonal throughout the engine,
/// which keeps the 2-Wasserstein distance in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: variance.len(),
                context: "gaussian mean/variance",
            });
        }
        if variance.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("variances must be nonnegative"));
        }
        Ok(DiagonalGaussian { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_dims(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
            context: "gaussian pair",
        });
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// ||mu1 - mu2||^2 plus the squared Bures term, which for commuting
/// (diagonal) covariances reduces to sum_i (sqrt(v1_i) - sqrt(v2_i))^2.
pub fn gaussian_w2_squared(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    check_dims(p, q)?;
    let mean_term: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let bures: f64 = p
        .variance
        .iter()
        .zip(&q.variance)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok(mean_term + bures)
}

/// Squared moment-profile distance: ||mu1 - mu2||^2 + ||Sigma1 - Sigma2||_F^2
/// with diagonal covariances, i.e. sum_i (v1_i - v2_i)^2 for the second term.
pub fn profile_delta_squared(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    check_dims(p, q)?;
    let mean_term: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let cov_term: f64 = p
        .variance
        .iter()
        .zip(&q.variance)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(mean_term + cov_term)
}

/// Constants of the two-sided bound `c_minus^2 * delta^2 <= W2^2 <= c_plus^2 * delta^2`
/// for covariance spectra inside `[lambda_min, lambda_max]`.
pub fn bi_lipschitz_constants(lambda_min: f64, lambda_max: f64) -> (f64, f64) {
    let c_minus = 1.0_f64.min(1.0 / (2.0 * lambda_max.sqrt()));
    let c_plus = 1.0_f64.max(1.0 / (2.0 * lambda_min.sqrt()));
    (c_minus, c_plus)
}

/// Jensen-Shannon distance (square root of the divergence, base-2 logs)
/// between two discrete distributions on the same support. Range [0, 1].
pub fn js_distance_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
            context: "discrete distributions",
        });
    }
    if p.iter().chain(q.iter()).any(|v| *v < 0.0) {
        return Err(Error::invalid("probability entries must be nonnegative"));
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if (sp - 1.0).abs() > 1e-9 || (sq - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("probability vectors must sum to 1"));
    }
    let mut div = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            div += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            div += 0.5 * b * (b / m).log2();
        }
    }
    // tiny negative values can appear from cancellation
    Ok(div.max(0.0).sqrt())
}
