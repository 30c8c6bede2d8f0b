//! Standalone harnesses for the engine's measurable guarantees: the
//! two-sided fidelity bound between moment-profile distance and the true
//! Gaussian 2-Wasserstein distance, the conditional-variance bound of the
//! stochastic extractor, and an executable sanity suite over the mapping
//! invariants.

use crate::datagen::ClientDataset;
use crate::dpe::{DpeConfig, GlobalBounds, ProfileExtractor};
use crate::error::{Error, Result};
use crate::mapping::{
    apply_threshold, assign_test_model, combine_with_size, fedavg, without_threshold, ClientId,
    Strategy,
};
use crate::model::{Arch, ModelParams};
use crate::numerics::{
    bi_lipschitz_constants, distance, gaussian_w2_squared, profile_delta_squared,
    sample_uniform_box, DiagonalGaussian, DistanceKind,
};
use crate::rng::{derive, derive_global, Purpose};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Outcome of one fidelity sweep over random diagonal-Gaussian pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    pub pairs_tested: usize,
    pub max_gap: f64,
    pub min_gap: f64,
    pub mean_gap: f64,
    pub std_gap: f64,
    /// Violations of the exact two-sided bound; must be 0 for diagonal
    /// Gaussian inputs.
    pub bound_violations: usize,
    pub c_minus: f64,
    pub c_plus: f64,
    pub seed: u64,
}

/// Sample diagonal-Gaussian pairs with variances in [lambda_min,
/// lambda_max], compare the moment-profile distance against the true W2
/// distance, and check c_minus * delta <= W2 <= c_plus * delta on every
/// pair. The gap |delta - W2| is reported alongside.
pub fn fidelity_sweep(
    num_pairs: usize,
    dim: usize,
    eigen_range: (f64, f64),
    seed: u64,
) -> Result<FidelityReport> {
    let (lambda_min, lambda_max) = eigen_range;
    if !(lambda_min > 0.0 && lambda_max >= lambda_min) {
        return Err(Error::invalid("eigen_range must satisfy 0 < min <= max"));
    }
    let (c_minus, c_plus) = bi_lipschitz_constants(lambda_min, lambda_max);
    let mut rng = derive_global(seed, Purpose::Trial);

    let mut gaps = Vec::with_capacity(num_pairs);
    let mut violations = 0usize;
    for _ in 0..num_pairs {
        let draw = |rng: &mut rand_chacha::ChaCha12Rng| -> DiagonalGaussian {
            let mean: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let variance: Vec<f64> = (0..dim)
                .map(|_| lambda_min + rng.gen::<f64>() * (lambda_max - lambda_min))
                .collect();
            DiagonalGaussian::new(mean, variance).expect("valid gaussian")
        };
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let delta = profile_delta_squared(&p, &q)?.sqrt();
        let w2 = gaussian_w2_squared(&p, &q)?.sqrt();
        // slack for floating-point rounding only; the inequality is exact
        let slack = 1e-12 * (1.0 + delta);
        if w2 < c_minus * delta - slack || w2 > c_plus * delta + slack {
            violations += 1;
        }
        gaps.push((delta - w2).abs());
    }

    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
    Ok(FidelityReport {
        pairs_tested: num_pairs,
        max_gap: gaps.iter().cloned().fold(0.0, f64::max),
        min_gap: gaps.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_gap: mean,
        std_gap: var.sqrt(),
        bound_violations: violations,
        c_minus,
        c_plus,
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StochasticityReport {
    pub trials: usize,
    pub coordinates: usize,
    /// rho^2 = tau^2 / (M gamma v) + 2 b_max^2 computed from the config.
    pub rho_squared: f64,
    pub max_empirical_variance: f64,
    /// Standard error of the largest per-coordinate variance estimate.
    pub max_variance_se: f64,
    /// Mean of the per-coordinate empirical variances.
    pub mean_empirical_variance: f64,
    /// Coordinates whose empirical variance exceeds rho^2 + 3 SE.
    pub exceeding_coordinates: usize,
    pub passed: bool,
}

/// Repeat profile extraction on frozen data and compare the per-coordinate
/// conditional variance with the configured bound rho^2, inflated by three
/// standard errors of a variance estimate.
pub fn stochasticity_check(
    data: &ClientDataset,
    cfg: &DpeConfig,
    trials: usize,
    seed: u64,
) -> Result<StochasticityReport> {
    if trials < 100 {
        return Err(Error::invalid("stochasticity check needs >= 100 trials"));
    }
    // identity encoder: profiles are computed straight on the features
    let arch = Arch::SoftmaxReg {
        input_dim: data.features.cols(),
        num_classes: 1 + data.labels.iter().copied().max().unwrap_or(0),
    };
    let encoder = ModelParams::zeros(arch);
    let (lo, hi) = crate::dpe::client_bounds(&data.features)?;
    let bounds = GlobalBounds::new(lo, hi)?;
    let extractor = ProfileExtractor::new(encoder, bounds, cfg.clone(), arch.num_classes())?;

    let v = data.features.rows();
    let tau_sq = extractor
        .ranges
        .mean_range
        .iter()
        .map(|e| (e / 2.0) * (e / 2.0))
        .fold(0.0, f64::max);
    let b_max = if cfg.no_dp {
        0.0
    } else {
        crate::dpe::laplace_scale(extractor.ranges.max_range(), v, cfg.epsilon)
    };
    let rho_squared = tau_sq / (cfg.masks as f64 * cfg.mask_prob * v as f64) + 2.0 * b_max * b_max;

    // collect the full released vector per trial (marginal + present blocks)
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = derive(seed, trial as u64, 0, Purpose::Trial);
        let profile = extractor.extract(data, true, &mut rng)?;
        let mut vec = profile.marginal_vector();
        for class in 0..profile.num_classes() {
            if profile.class_present[class] {
                vec.extend_from_slice(&profile.class_mean[class]);
                vec.extend_from_slice(&profile.class_var[class]);
            }
        }
        samples.push(vec);
    }

    let coords = samples[0].len();
    let n = trials as f64;
    let mut max_var: f64 = 0.0;
    let mut var_sum = 0.0;
    let mut exceeding = 0usize;
    for c in 0..coords {
        let mean: f64 = samples.iter().map(|s| s[c]).sum::<f64>() / n;
        let var: f64 = samples.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        max_var = max_var.max(var);
        var_sum += var;
        // standard error of a sample variance, Gaussian approximation
        let se = var * (2.0 / (n - 1.0)).sqrt();
        if var > rho_squared + 3.0 * se {
            exceeding += 1;
        }
    }

    Ok(StochasticityReport {
        trials,
        coordinates: coords,
        rho_squared,
        max_empirical_variance: max_var,
        max_variance_se: max_var * (2.0 / (n - 1.0)).sqrt(),
        mean_empirical_variance: var_sum / coords as f64,
        exceeding_coordinates: exceeding,
        passed: exceeding == 0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanityCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub failing_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanityReport {
    pub checks: Vec<SanityCheck>,
    pub passed: bool,
}

/// Is an association normalized over its support?
pub fn check_normalized(weights: &BTreeMap<ClientId, f64>) -> bool {
    (weights.values().sum::<f64>() - 1.0).abs() < 1e-9
}

fn random_weights(n: usize, rng: &mut impl Rng) -> BTreeMap<ClientId, f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-6).collect();
    let total: f64 = raw.iter().sum();
    raw.iter()
        .enumerate()
        .map(|(i, w)| (i as ClientId, w / total))
        .collect()
}

/// Executable release gate over randomized instances of the mapping
/// invariants. Every property is enumerated by name; any failure carries
/// the seed that produced it.
pub fn sanity_suite(seed: u64) -> SanityReport {
    let mut checks = Vec::new();

    // normalization across all three strategy branches
    {
        let mut rng = derive_global(seed, Purpose::Trial);
        let mut pass = true;
        let mut detail = String::from("weights sum to 1 in all strategy branches");
        let mut failing = None;
        for case in 0..200u64 {
            let n = rng.gen_range(2..12);
            let raw = random_weights(n, &mut rng);
            let tau = rng.gen::<f64>() * 0.5;
            let out = apply_threshold(&raw, tau, 0, 0).expect("valid tau");
            if !check_normalized(&out.weights) {
                pass = false;
                detail = format!("strategy {:?} unnormalized", out.strategy);
                failing = Some(seed.wrapping_add(case));
                break;
            }
        }
        checks.push(SanityCheck {
            name: "normalization".into(),
            passed: pass,
            detail,
            failing_seed: failing,
        });
    }

    // uniform weights with equal sizes reproduce fedavg
    {
        let mut rng = derive_global(seed.wrapping_add(1), Purpose::Trial);
        let mut pass = true;
        let mut detail = String::from("uniform aggregation equals size-weighted average");
        let mut failing = None;
        for case in 0..50u64 {
            let n = rng.gen_range(2..8);
            let dim = 6;
            let arch = Arch::SoftmaxReg {
                input_dim: dim / 2 - 1,
                num_classes: 2,
            };
            let models: Vec<(ModelParams, usize)> = (0..n)
                .map(|_| {
                    let theta: Vec<f64> = (0..arch.param_count())
                        .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                        .collect();
                    (ModelParams { arch, theta }, 50)
                })
                .collect();
            let map: BTreeMap<ClientId, ModelParams> = models
                .iter()
                .enumerate()
                .map(|(i, (m, _))| (i as ClientId, m.clone()))
                .collect();
            let raw: BTreeMap<ClientId, f64> =
                (0..n).map(|i| (i as ClientId, 1.0 / n as f64)).collect();
            let sizes: BTreeMap<ClientId, usize> =
                (0..n).map(|i| (i as ClientId, 50)).collect();
            let combined =
                combine_with_size(&without_threshold(&raw, 0, 0), &sizes).expect("sizes");
            let a = crate::mapping::aggregate(&combined, &map).expect("aggregate");
            let b = fedavg(&models).expect("fedavg");
            if a.theta
                .iter()
                .zip(&b.theta)
                .any(|(x, y)| (x - y).abs() > 1e-12)
            {
                pass = false;
                detail = "uniform aggregate deviates from fedavg".into();
                failing = Some(seed.wrapping_add(case));
                break;
            }
        }
        checks.push(SanityCheck {
            name: "fedavg_recovery".into(),
            passed: pass,
            detail,
            failing_seed: failing,
        });
    }

    // exactly one strategy per thresholded association
    {
        let mut rng = derive_global(seed.wrapping_add(2), Purpose::Trial);
        let mut pass = true;
        let mut detail = String::from("strategy partition consistent with support");
        let mut failing = None;
        for case in 0..200u64 {
            let n = rng.gen_range(2..16);
            let raw = random_weights(n, &mut rng);
            let tau = rng.gen::<f64>() * 0.9;
            let out = apply_threshold(&raw, tau, 0, 0).expect("valid tau");
            let support = out.support().len();
            let expected = if raw.values().all(|w| *w < tau) {
                Strategy::GlobalFallback
            } else if support > 1 {
                Strategy::Clustered
            } else {
                Strategy::Personalized
            };
            if out.strategy != expected {
                pass = false;
                detail = format!("support {support} classified as {:?}", out.strategy);
                failing = Some(seed.wrapping_add(case));
                break;
            }
        }
        checks.push(SanityCheck {
            name: "strategy_partition".into(),
            passed: pass,
            detail,
            failing_seed: failing,
        });
    }

    // nearest-neighbor assignment equals a brute-force argmin
    {
        let mut rng = derive_global(seed.wrapping_add(3), Purpose::Trial);
        let mut pass = true;
        let mut detail = String::from("assignment matches brute-force argmin");
        let mut failing = None;
        for case in 0..100u64 {
            let n = rng.gen_range(1..10);
            let l = 4;
            let arch = Arch::SoftmaxReg {
                input_dim: 2,
                num_classes: 2,
            };
            let finals: BTreeMap<ClientId, (crate::dpe::DistributionProfile, ModelParams)> = (0
                ..n)
                .map(|i| {
                    let profile = crate::dpe::DistributionProfile {
                        marginal_mean: (0..l).map(|_| rng.gen::<f64>()).collect(),
                        marginal_var: (0..l).map(|_| rng.gen::<f64>()).collect(),
                        class_mean: vec![],
                        class_var: vec![],
                        class_present: vec![],
                        epsilon_used: f64::INFINITY,
                        sample_count: 10,
                        round: 0,
                        client_id: i as u64,
                    };
                    (i as ClientId, (profile, ModelParams::zeros(arch)))
                })
                .collect();
            let test: Vec<f64> = (0..2 * l).map(|_| rng.gen::<f64>()).collect();
            let (got, _) =
                assign_test_model(&test, &finals, DistanceKind::Euclidean).expect("nonempty");
            // independent scan
            let mut best_id = 0;
            let mut best_d = f64::INFINITY;
            for (id, (p, _)) in &finals {
                let d = distance(&test, &p.marginal_vector(), DistanceKind::Euclidean)
                    .expect("same dims");
                if d < best_d {
                    best_d = d;
                    best_id = *id;
                }
            }
            if got != best_id {
                pass = false;
                detail = format!("assignment {got} vs brute force {best_id}");
                failing = Some(seed.wrapping_add(case));
                break;
            }
        }
        checks.push(SanityCheck {
            name: "nearest_neighbor_oracle".into(),
            passed: pass,
            detail,
            failing_seed: failing,
        });
    }

    // raising tau never grows the support
    {
        let mut rng = derive_global(seed.wrapping_add(4), Purpose::Trial);
        let mut pass = true;
        let mut detail = String::from("support size is monotone non-increasing in tau");
        let mut failing = None;
        for case in 0..100u64 {
            let n = rng.gen_range(2..16);
            let raw = random_weights(n, &mut rng);
            let mut last = usize::MAX;
            for step in 0..10 {
                let tau = step as f64 * 0.05;
                let out = apply_threshold(&raw, tau, 0, 0).expect("valid tau");
                let support = if out.strategy == Strategy::GlobalFallback {
                    0
                } else {
                    out.support().len()
                };
                if support > last {
                    pass = false;
                    detail = format!("support grew from {last} to {support} at tau {tau}");
                    failing = Some(seed.wrapping_add(case));
                    break;
                }
                last = support;
            }
            if !pass {
                break;
            }
        }
        checks.push(SanityCheck {
            name: "threshold_monotonicity".into(),
            passed: pass,
            detail,
            failing_seed: failing,
        });
    }

    let passed = checks.iter().all(|c| c.passed);
    SanityReport { checks, passed }
}

/// Frozen dataset for the stochasticity harness: axis-aligned uniform box
/// with gently decaying widths, so the shared projector stays close to the
/// coordinate axes and the per-coordinate proxy variance stays near 1.
pub fn stochasticity_fixture(v: usize, dim: usize, seed: u64) -> Result<ClientDataset> {
    let widths: Vec<f64> = (0..dim).map(|j| 0.7_f64.powi(j as i32)).collect();
    let lower: Vec<f64> = widths.iter().map(|w| -w).collect();
    let mut rng = derive_global(seed, Purpose::Data);
    let features = sample_uniform_box(&lower, &widths, v, &mut rng)?;
    Ok(ClientDataset {
        features,
        labels: (0..v).map(|i| i % 2).collect(),
        distribution_tag: "fixture".into(),
        round: 0,
        client_id: 0,
    })
}
