//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured value (visible under --nocapture).
//!
//! Run with `cargo test --test acceptance`.

use feroma_cli::config::ExperimentConfig;
use feroma_cli::run_experiment;
use feroma_core::datagen::{build_recipe_set, generate_test_clients, DriftSchedule};
use feroma_core::dpe::{laplace_scale, DpeConfig};
use feroma_core::federation::{cost_summary, run_inference, run_training, AggregationKind};
use feroma_core::mapping::{
    aggregate, combine_with_size, fedavg, without_threshold, ClientId, Strategy,
};
use feroma_core::model::{batch_gradient, Arch, ModelParams};
use feroma_core::numerics::{sample_laplace, Matrix};
use feroma_core::rng::{derive, Purpose};
use feroma_core::validation::{fidelity_sweep, stochasticity_check, stochasticity_fixture};
use rand::Rng;
use std::collections::BTreeMap;
use std::time::Instant;

fn config_from(text: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_text(text, &overrides).expect("valid acceptance config")
}

const DESK_DRIFT: &str = r#"
[experiment]
seeds = 42,43,44,45,46
[federation]
rounds = 20
warmup_rounds = 5
aggregation = feroma
[training]
learning_rate = 0.05
hidden_width = 32
[data]
clients = 8
samples_per_client = 375
feature_dim = 16
num_classes = 4
noniid_type = px
drift_every = 2
recipe_mode = two_group
two_group_angle_a = 0
two_group_angle_b = 180
two_group_scripted = false
circle_separation = 6.0
identity_separation = 0.5
test_clients = 20
"#;

const DESK_ASSIGNMENT: &str = r#"
[experiment]
seeds = 42,43,44,45,46
[federation]
rounds = 12
warmup_rounds = 5
aggregation = feroma
[training]
learning_rate = 0.05
hidden_width = 32
[data]
clients = 4
samples_per_client = 375
feature_dim = 16
num_classes = 4
noniid_type = px
noniid_level = high
drift_every = 12
test_clients = 20
unseen_fraction = 0.0
"#;

#[test]
fn criterion_01_fidelity_bound() {
    let started = Instant::now();
    let report = fidelity_sweep(10_000, 10, (0.5, 2.0), 42).unwrap();
    let elapsed = started.elapsed();

    assert_eq!(
        report.bound_violations, 0,
        "two-sided bound must hold on every pair"
    );
    assert!((report.c_minus - 1.0 / (2.0 * 2.0_f64.sqrt())).abs() < 1e-15);
    assert!((report.c_plus - 1.0).abs() < 1e-15);
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 1 fidelity_bound: PASS (10^4 pairs, 0 violations, {:?})",
        elapsed
    );
}

#[test]
fn criterion_02_dp_calibration() {
    let started = Instant::now();
    let b = laplace_scale(10.0, 300, 10.0);
    assert!((b - 1.0 / 300.0).abs() < 1e-15, "b = Range/(v eps)");

    let mut rng = derive(42, 0, 0, Purpose::Noise);
    let draws = sample_laplace(b, 1_000_000, &mut rng).unwrap();
    let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
    let var: f64 =
        draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / draws.len() as f64;
    let elapsed = started.elapsed();

    assert!(
        (2.11e-5..=2.33e-5).contains(&var),
        "empirical noise variance {var:.3e} outside [2.11, 2.33]e-5"
    );
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 2 dp_calibration: PASS (variance {:.3e}, {:?})",
        var, elapsed
    );
}

#[test]
fn criterion_03_stochasticity_bound() {
    let started = Instant::now();
    let data = stochasticity_fixture(300, 10, 42).unwrap();
    let cfg = DpeConfig::default();
    assert_eq!(cfg.masks, 3);
    assert!((cfg.mask_prob - 0.5).abs() < 1e-15);
    let report = stochasticity_check(&data, &cfg, 1000, 42).unwrap();
    let elapsed = started.elapsed();

    assert_eq!(
        report.exceeding_coordinates, 0,
        "every coordinate within rho^2 + 3 SE; max variance {:.3e} vs rho^2 {:.3e}",
        report.max_empirical_variance, report.rho_squared
    );
    assert!(
        report.rho_squared <= 2.6e-3,
        "rho^2 {:.3e} should sit at the 2.2e-3 scale",
        report.rho_squared
    );
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 3 stochasticity_bound: PASS (rho^2 {:.3e}, max var {:.3e}, {:?})",
        report.rho_squared, report.max_empirical_variance, elapsed
    );
}

#[test]
fn criterion_04_fedavg_equivalence() {
    let arch = Arch::Mlp {
        input_dim: 5,
        hidden_dim: 7,
        num_classes: 3,
    };
    let mut rng = derive(4, 0, 0, Purpose::Trial);
    let mut worst = 0.0_f64;
    for _set in 0..100 {
        let n = rng.gen_range(2..9);
        let models: Vec<(ModelParams, usize)> = (0..n)
            .map(|_| {
                let theta: Vec<f64> = (0..arch.param_count())
                    .map(|_| rng.gen::<f64>() * 4.0 - 2.0)
                    .collect();
                (ModelParams { arch, theta }, 120)
            })
            .collect();

        // engine route: uniform association, size-combined, aggregated
        let map: BTreeMap<ClientId, ModelParams> = models
            .iter()
            .enumerate()
            .map(|(i, (m, _))| (i as ClientId, m.clone()))
            .collect();
        let raw: BTreeMap<ClientId, f64> =
            (0..n).map(|i| (i as ClientId, 1.0 / n as f64)).collect();
        let sizes: BTreeMap<ClientId, usize> = (0..n).map(|i| (i as ClientId, 120)).collect();
        let combined = combine_with_size(&without_threshold(&raw, 0, 0), &sizes).unwrap();
        let engine = aggregate(&combined, &map).unwrap();
        let baseline = fedavg(&models).unwrap();

        // independent weighted-sum loop, written from the definition
        let total: f64 = models.iter().map(|(_, s)| *s as f64).sum();
        let mut oracle = vec![0.0; arch.param_count()];
        for (m, s) in &models {
            let p = *s as f64 / total;
            for (acc, t) in oracle.iter_mut().zip(&m.theta) {
                *acc += p * t;
            }
        }
        for (i, expected) in oracle.iter().enumerate() {
            worst = worst
                .max((engine.theta[i] - expected).abs())
                .max((baseline.theta[i] - expected).abs());
        }
    }
    assert!(worst <= 1e-12, "max coordinate deviation {worst:.3e}");
    println!(
        "ACCEPTANCE 4 fedavg_equivalence: PASS (100 model sets, max deviation {:.3e})",
        worst
    );
}

#[test]
fn criterion_05_strategy_recovery() {
    let cfg = config_from(
        DESK_DRIFT,
        &[
            "federation.threshold_enabled=true",
            "data.drift_every=20",
            "data.two_group_scripted=true",
            "data.identity_separation=6.0",
        ],
    );
    let fed = &cfg.federation;
    let mut conforming = 0usize;
    let mut total = 0usize;
    for &seed in &cfg.seeds {
        let (_, metrics) = run_training(fed, seed).unwrap();
        for assoc in metrics
            .associations
            .iter()
            .filter(|a| a.round >= fed.warmup_rounds)
        {
            total += 1;
            let group: Vec<ClientId> = if assoc.client_id < 4 {
                (0..4).collect()
            } else {
                (4..8).collect()
            };
            if assoc.strategy == Strategy::Clustered && assoc.support() == group {
                conforming += 1;
            }
        }
    }
    let rate = conforming as f64 / total as f64;
    assert!(
        rate >= 0.90,
        "in-group clustered rate {rate:.3} over {total} (client, round) pairs"
    );
    println!(
        "ACCEPTANCE 5 strategy_recovery: PASS ({}/{} pairs in-group clustered = {:.1}%)",
        conforming,
        total,
        100.0 * rate
    );
}

#[test]
fn criterion_06_test_time_assignment() {
    // seen tags: matched to a same-tag model at least 95% of the time
    let cfg = config_from(DESK_ASSIGNMENT, &[]);
    let fed = &cfg.federation;
    let mut matched = 0usize;
    let mut trials = 0usize;
    for &seed in &cfg.seeds {
        let (trained, _) = run_training(fed, seed).unwrap();
        let schedule = DriftSchedule {
            seed,
            ..fed.schedule.clone()
        };
        let recipes = build_recipe_set(&schedule).unwrap();
        let tests = generate_test_clients(&schedule, &recipes, cfg.test_clients, 0.0).unwrap();
        for record in run_inference(&trained, &tests, fed).unwrap() {
            trials += 1;
            if record.matched_tag.as_deref() == Some(record.test_tag.as_str()) {
                matched += 1;
            }
        }
    }
    assert_eq!(trials, 100);
    let rate = matched as f64 / trials as f64;
    assert!(rate >= 0.95, "same-tag match rate {rate:.3}");

    // fully unseen test distributions: completes, accuracy above chance
    let (trained, _) = run_training(fed, 42).unwrap();
    let schedule = DriftSchedule {
        seed: 42,
        ..fed.schedule.clone()
    };
    let recipes = build_recipe_set(&schedule).unwrap();
    let unseen = generate_test_clients(&schedule, &recipes, cfg.test_clients, 1.0).unwrap();
    let records = run_inference(&trained, &unseen, fed).unwrap();
    let mean_acc: f64 =
        records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64;
    let chance = 1.0 / fed.schedule.num_classes as f64;
    assert!(
        mean_acc > chance,
        "unseen accuracy {mean_acc:.3} vs chance {chance:.3}"
    );
    println!(
        "ACCEPTANCE 6 test_time_assignment: PASS (same-tag {}/{}, unseen accuracy {:.3} > {:.2})",
        matched, trials, mean_acc, chance
    );
}

#[test]
fn criterion_07_desk_scale_drift_margin() {
    let started = Instant::now();
    let run = |aggregation: AggregationKind| -> f64 {
        let cfg = config_from(DESK_DRIFT, &[]);
        let mut fed = cfg.federation.clone();
        fed.aggregation = aggregation;
        let mut accs = Vec::new();
        for &seed in &cfg.seeds {
            let (trained, _) = run_training(&fed, seed).unwrap();
            let schedule = DriftSchedule {
                seed,
                ..fed.schedule.clone()
            };
            let recipes = build_recipe_set(&schedule).unwrap();
            let tests =
                generate_test_clients(&schedule, &recipes, cfg.test_clients, 0.0).unwrap();
            let records = run_inference(&trained, &tests, &fed).unwrap();
            accs.push(records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64);
        }
        accs.iter().sum::<f64>() / accs.len() as f64
    };

    let feroma = run(AggregationKind::Feroma);
    let baseline = run(AggregationKind::FedAvg);
    let elapsed = started.elapsed();
    let margin_pp = 100.0 * (feroma - baseline);
    assert!(
        margin_pp >= 10.0,
        "margin {margin_pp:.1} pp (feroma {feroma:.3} vs fedavg {baseline:.3})"
    );
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 7 desk_scale_drift: PASS (feroma {:.3} vs fedavg {:.3}, margin {:.1} pp, {:?})",
        feroma, baseline, margin_pp, elapsed
    );
}

#[test]
fn criterion_08_gradient_check() {
    let archs = [
        Arch::SoftmaxReg {
            input_dim: 6,
            num_classes: 4,
        },
        Arch::Mlp {
            input_dim: 5,
            hidden_dim: 8,
            num_classes: 3,
        },
    ];
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for (a, arch) in archs.iter().enumerate() {
        for draw in 0..50u64 {
            let mut rng = derive(800 + a as u64, draw, 0, Purpose::Init);
            let params = ModelParams::init(*arch, &mut rng);
            let x: Vec<f64> = (0..arch.input_dim())
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect();
            let y = rng.gen_range(0..arch.num_classes());
            let features = Matrix::from_rows(&[x]).unwrap();
            let labels = vec![y];
            let (_, grad) = batch_gradient(&params, &features, &labels, &[0]);
            #[allow(clippy::needless_range_loop)]
            for i in 0..params.param_count() {
                let mut plus = params.clone();
                plus.theta[i] += h;
                let mut minus = params.clone();
                minus.theta[i] -= h;
                let (lp, _) = batch_gradient(&plus, &features, &labels, &[0]);
                let (lm, _) = batch_gradient(&minus, &features, &labels, &[0]);
                let fd = (lp - lm) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs());
                let err = if denom > 1e-6 {
                    (grad[i] - fd).abs() / denom
                } else {
                    (grad[i] - fd).abs()
                };
                assert!(
                    err < 1e-4,
                    "{arch:?} coordinate {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
                worst = worst.max(err);
            }
        }
    }
    println!(
        "ACCEPTANCE 8 gradient_check: PASS (100 draws, both architectures, worst rel err {:.2e})",
        worst
    );
}

#[test]
fn criterion_09_compactness_report() {
    // reference parameter counts
    let report = cost_summary(62006, 220);
    assert!(
        (0.345..0.355).contains(&report.overhead_percent),
        "overhead {:.4}% must round to +0.35%",
        report.overhead_percent
    );
    assert!(!report.flagged);

    // the shipped default configuration stays within the target
    let cfg = ExperimentConfig::default();
    let d = 2 * cfg.federation.dpe.pca_dim * (1 + cfg.federation.schedule.num_classes);
    let theta = cfg.federation.arch().param_count();
    let default_report = cost_summary(theta, d);
    assert!(
        default_report.dimension_ratio <= 1e-2,
        "default d/|theta| = {:.4e}",
        default_report.dimension_ratio
    );
    println!(
        "ACCEPTANCE 9 compactness: PASS (reference +{:.2}%, default d/|theta| {:.2e})",
        report.overhead_percent, default_report.dimension_ratio
    );
}

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    let base = config_from(
        DESK_ASSIGNMENT,
        &["experiment.seeds=42,43", "federation.rounds=8"],
    );

    let mut cfg_a = base.clone();
    cfg_a.output_dir = dir_a.clone();
    let mut cfg_b = base;
    cfg_b.output_dir = dir_b.clone();
    run_experiment(&cfg_a).unwrap();
    run_experiment(&cfg_b).unwrap();

    for seed in [42u64, 43] {
        for file in ["metrics.csv", "inference.csv", "profiles.csv"] {
            let a = std::fs::read(dir_a.join(format!("seed_{seed}")).join(file)).unwrap();
            let b = std::fs::read(dir_b.join(format!("seed_{seed}")).join(file)).unwrap();
            assert_eq!(a, b, "{file} differs for seed {seed}");
        }
    }
    println!("ACCEPTANCE 10 determinism: PASS (byte-identical metrics across executions)");
}
