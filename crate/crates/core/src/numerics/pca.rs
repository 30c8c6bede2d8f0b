//! Principal component analysis with a canonical sign convention.
//!
//! Two parties that fit this PCA on identical inputs must end up with
//! bit-identical projectors, so everything here is deterministic: cyclic
//! Jacobi sweeps for the covariance eigendecomposition when the input width
//! is small, and seeded power iteration with deflation for wide inputs.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{derive_global, Purpose};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Widths above this use power iteration instead of a full eigensolve.
const JACOBI_MAX_DIM: usize = 512;

/// Linear map `x -> P (x - center)` from input_dim to output_dim, with
/// orthonormal rows ordered by explained variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub input_dim: usize,
    pub output_dim: usize,
    /// output_dim x input_dim, rows orthonormal.
    pub projection: Matrix,
    pub center: Vec<f64>,
    pub seed: u64,
    /// Variance captured by each retained component, descending.
    pub component_variances: Vec<f64>,
    /// Total variance of the fitted data (trace of the covariance).
    pub total_variance: f64,
}

impl PcaProjector {
    pub fn project_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
                context: "pca input",
            });
        }
        let mut out = vec![0.0; self.output_dim];
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.projection.row(i);
            *o = row
                .iter()
                .zip(x.iter().zip(&self.center))
                .map(|(p, (v, c))| p * (v - c))
                .sum();
        }
        Ok(out)
    }

    pub fn project(&self, points: &Matrix) -> Result<Matrix> {
        let mut rows = Vec::with_capacity(points.rows());
        for r in points.iter_rows() {
            rows.push(self.project_point(r)?);
        }
        Matrix::from_rows(&rows)
    }

    /// Fraction of total variance captured by component `i`.
    pub fn explained_variance_ratio(&self, i: usize) -> f64 {
        if self.total_variance <= 0.0 {
            0.0
        } else {
            self.component_variances[i] / self.total_variance
        }
    }
}

/// Fit a PCA to the rows of `points`, keeping `output_dim` components.
///
/// The sign of each component is canonicalized by making its
/// largest-magnitude coordinate positive (ties resolved to the lowest
/// index), so independently fitted projectors agree exactly.
pub fn fit_shared_pca(points: &Matrix, output_dim: usize, seed: u64) -> Result<PcaProjector> {
    let input_dim = points.cols();
    if output_dim == 0 || output_dim > input_dim {
        return Err(Error::invalid(format!(
            "output_dim {output_dim} out of range for input_dim {input_dim}"
        )));
    }
    if points.rows() < output_dim.max(2) {
        return Err(Error::invalid(format!(
            "need at least {} points, got {}",
            output_dim.max(2),
            points.rows()
        )));
    }
    let center = points.col_means();
    let cov = points.covariance()?;
    let total_variance: f64 = (0..input_dim).map(|i| cov.get(i, i)).sum();
    if total_variance < 1e-12 {
        return Err(Error::RankDeficientReference);
    }

    let (mut components, variances) = if input_dim <= JACOBI_MAX_DIM {
        top_components_jacobi(&cov, output_dim)
    } else {
        top_components_power(&cov, output_dim, seed)
    };

    for comp in components.iter_mut() {
        canonicalize_sign(comp);
    }

    let projection = Matrix::from_rows(&components)?;
    Ok(PcaProjector {
        input_dim,
        output_dim,
        projection,
        center,
        seed,
        component_variances: variances,
        total_variance,
    })
}

fn canonicalize_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Full symmetric eigendecomposition via cyclic Jacobi rotations, returning
/// the top `k` eigenvectors and eigenvalues (descending).
fn top_components_jacobi(cov: &Matrix, k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = cov.cols();
    let mut a: Vec<f64> = cov.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        s
    };

    for _sweep in 0..64 {
        if off(&a) < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());

    let mut comps = Vec::with_capacity(k);
    let mut vals = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        comps.push((0..n).map(|i| v[i * n + idx]).collect());
        vals.push(a[idx * n + idx]);
    }
    (comps, vals)
}

/// Top `k` eigenpairs via power iteration with Hotelling deflation. Start
/// vectors come from a seeded stream so the result is deterministic.
fn top_components_power(cov: &Matrix, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = cov.cols();
    let mut work: Vec<f64> = cov.data().to_vec();
    let mut rng = derive_global(seed, Purpose::PowerIteration);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut vals = Vec::with_capacity(k);

    for _ in 0..k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _iter in 0..2000 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                let row = &work[i * n..(i + 1) * n];
                w[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            // re-orthogonalize against found components for stability
            for c in &comps {
                let dot: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(c).for_each(|(wi, ci)| *wi -= dot * ci);
            }
            let norm = normalize(&mut w);
            let diff: f64 = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            v = w;
            lambda = norm;
            if diff < 1e-13 {
                break;
            }
        }
        // deflate
        for i in 0..n {
            for j in 0..n {
                work[i * n + j] -= lambda * v[i] * v[j];
            }
        }
        comps.push(v);
        vals.push(lambda);
    }
    (comps, vals)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_uniform_box;
    use crate::rng::derive;

    #[test]
    fn rank_one_line_recovers_direction() {
        // 200 points on t * (1,1,1)
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let t = i as f64 / 199.0;
                vec![t, t, t]
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let p = fit_shared_pca(&m, 1, 0).unwrap();
        let expected = 1.0 / 3.0_f64.sqrt();
        for &v in p.projection.row(0) {
            assert!((v - expected).abs() < 1e-8, "component entry {v}");
        }
        assert!((p.explained_variance_ratio(0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn identical_inputs_give_bit_identical_projectors() {
        let mut rng = derive(9, 0, 0, Purpose::ReferencePoints);
        let m = sample_uniform_box(&[0.0; 5], &[1.0; 5], 200, &mut rng).unwrap();
        let a = fit_shared_pca(&m, 3, 77).unwrap();
        let b = fit_shared_pca(&m, 3, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_identical_points_are_rank_deficient() {
        let m = Matrix::from_rows(&vec![vec![0.5, 0.5, 0.5]; 50]).unwrap();
        let err = fit_shared_pca(&m, 2, 0).unwrap_err();
        assert!(err.to_string().contains("rank-deficient"));
    }

    #[test]
    fn rows_are_orthonormal() {
        let mut rng = derive(21, 0, 0, Purpose::ReferencePoints);
        let m = sample_uniform_box(&[-2.0; 6], &[3.0; 6], 300, &mut rng).unwrap();
        let p = fit_shared_pca(&m, 4, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = p
                    .projection
                    .row(i)
                    .iter()
                    .zip(p.projection.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8, "rows {i},{j}: {dot}");
            }
        }
    }

    /// Analytic eigenvalues of a symmetric 3x3 matrix via the trigonometric
    /// solution of the characteristic cubic. Independent of the Jacobi path.
    fn symmetric_3x3_eigenvalues(m: &Matrix) -> [f64; 3] {
        let (a, b, c) = (m.get(0, 0), m.get(1, 1), m.get(2, 2));
        let (d, e, f) = (m.get(0, 1), m.get(1, 2), m.get(0, 2));
        let p1 = d * d + e * e + f * f;
        let q = (a + b + c) / 3.0;
        let p2 = (a - q).powi(2) + (b - q).powi(2) + (c - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        // B = (A - qI) / p
        let bm = [
            (a - q) / p,
            d / p,
            f / p,
            d / p,
            (b - q) / p,
            e / p,
            f / p,
            e / p,
            (c - q) / p,
        ];
        let det_b = bm[0] * (bm[4] * bm[8] - bm[5] * bm[7])
            - bm[1] * (bm[3] * bm[8] - bm[5] * bm[6])
            + bm[2] * (bm[3] * bm[7] - bm[4] * bm[6]);
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        [e1, e2, e3]
    }

    #[test]
    fn reconstruction_error_equals_smallest_eigenvalue() {
        let mut rng = derive(33, 0, 0, Purpose::ReferencePoints);
        let m = sample_uniform_box(&[0.0; 3], &[1.0; 3], 200, &mut rng).unwrap();
        let p = fit_shared_pca(&m, 2, 0).unwrap();

        // reconstruction error with the same (n-1) normalization as the
        // sample covariance
        let mut err = 0.0;
        for row in m.iter_rows() {
            let z = p.project_point(row).unwrap();
            for (j, (x, c)) in row.iter().zip(&p.center).enumerate() {
                let recon: f64 = (0..2).map(|i| p.projection.get(i, j) * z[i]).sum();
                let resid = (x - c) - recon;
                err += resid * resid;
            }
        }
        err /= (m.rows() - 1) as f64;

        let cov = m.covariance().unwrap();
        let eig = symmetric_3x3_eigenvalues(&cov);
        let lambda_min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            (err - lambda_min).abs() < 1e-10,
            "reconstruction {err} vs lambda_min {lambda_min}"
        );
    }

    #[test]
    fn power_iteration_agrees_with_jacobi() {
        let mut rng = derive(55, 0, 0, Purpose::ReferencePoints);
        // anisotropic box so eigenvalues are well separated
        let lower: Vec<f64> = (0..8).map(|i| -(1.0 + i as f64)).collect();
        let upper: Vec<f64> = (0..8).map(|i| 1.0 + i as f64).collect();
        let m = sample_uniform_box(&lower, &upper, 400, &mut rng).unwrap();
        let cov = m.covariance().unwrap();
        let (jc, jv) = top_components_jacobi(&cov, 3);
        let (pc, pv) = top_components_power(&cov, 3, 123);
        for i in 0..3 {
            assert!(
                (jv[i] - pv[i]).abs() / jv[i] < 1e-6,
                "eigenvalue {i}: {} vs {}",
                jv[i],
                pv[i]
            );
            let dot: f64 = jc[i].iter().zip(&pc[i]).map(|(a, b)| a * b).sum();
            assert!(dot.abs() > 1.0 - 1e-6, "component {i} alignment {dot}");
        }
    }
}
