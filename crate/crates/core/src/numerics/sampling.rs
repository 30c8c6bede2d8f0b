//! Seeded samplers: Laplace, Gaussian, uniform boxes, Bernoulli masks.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use rand::Rng;

/// i.i.d. Laplace(0, scale) draws via the difference of two exponentials.
pub fn sample_laplace(scale: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if scale <= 0.0 || scale.is_nan() {
        return Err(Error::invalid(format!(
            "laplace scale must be positive, got {scale}"
        )));
    }
    Ok((0..n).map(|_| laplace_draw(scale, rng)).collect())
}

/// Single Laplace(0, scale) draw. Exp(1/b) - Exp(1/b) is Laplace(0, b).
pub fn laplace_draw(scale: f64, rng: &mut impl Rng) -> f64 {
    let e1 = -(1.0 - rng.gen::<f64>()).ln();
    let e2 = -(1.0 - rng.gen::<f64>()).ln();
    scale * (e1 - e2)
}

/// Laplace CDF with location 0.
pub fn laplace_cdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / scale).exp()
    } else {
        1.0 - 0.5 * (-x / scale).exp()
    }
}

/// Standard normal via Box-Muller; consumes exactly two uniforms per pair.
pub struct NormalSource {
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new() -> Self {
        NormalSource { spare: None }
    }

    pub fn draw(&mut self, rng: &mut impl Rng) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 in (0,1] to keep ln finite.
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

impl Default for NormalSource {
    fn default() -> Self {
        Self::new()
    }
}

/// `n` points uniform in the axis-aligned box `[lower, upper]`.
pub fn sample_uniform_box(
    lower: &[f64],
    upper: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Matrix> {
    if lower.len() != upper.len() {
        return Err(Error::DimensionMismatch {
            expected: lower.len(),
            got: upper.len(),
            context: "box bounds",
        });
    }
    let dim = lower.len();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        for d in 0..dim {
            let u: f64 = rng.gen();
            data.push(lower[d] + u * (upper[d] - lower[d]));
        }
    }
    Matrix::from_vec(n, dim, data)
}

/// Bernoulli(p) inclusion mask of the given length.
pub fn bernoulli_mask(len: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() < p).collect()
}
