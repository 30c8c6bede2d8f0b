//! Subcommand drivers: run, validate, gen-data.

use crate::config::ExperimentConfig;
use crate::output;
use feroma_core::datagen::{build_recipe_set, generate_round, generate_test_clients, DriftSchedule};
use feroma_core::dpe::DpeConfig;
use feroma_core::federation::{cost_report, run_inference, run_training};
use feroma_core::validation::{
    fidelity_sweep, sanity_suite, stochasticity_check, stochasticity_fixture,
};
use feroma_core::Error;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_RUNTIME,
    }
}

/// Execute training and inference for every seed, writing metrics,
/// checkpoints, association matrices, and the aggregated summary.
pub fn cmd_run(config_path: &Path, overrides: &[String]) -> i32 {
    let cfg = match ExperimentConfig::load(config_path, overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    match run_experiment(&cfg) {
        Ok(summary_path) => {
            println!("run complete: {}", summary_path.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            exit_code_for(&e)
        }
    }
}

/// The full experiment behind `cmd_run`; exposed for integration tests.
pub fn run_experiment(cfg: &ExperimentConfig) -> feroma_core::Result<PathBuf> {
    let started = std::time::Instant::now();
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.snapshot.conf"), cfg.snapshot())?;

    let mut final_train = Vec::with_capacity(cfg.seeds.len());
    let mut inference_acc = Vec::with_capacity(cfg.seeds.len());
    let mut last_cost = None;

    for &seed in &cfg.seeds {
        let (trained, metrics) = run_training(&cfg.federation, seed)?;
        let schedule = DriftSchedule {
            seed,
            ..cfg.federation.schedule.clone()
        };
        let recipes = build_recipe_set(&schedule)?;
        let tests =
            generate_test_clients(&schedule, &recipes, cfg.test_clients, cfg.unseen_fraction)?;
        let inference = run_inference(&trained, &tests, &cfg.federation)?;
        let cost = cost_report(&trained);

        let seed_dir = cfg.output_dir.join(format!("seed_{seed}"));
        output::write_seed_outputs(&seed_dir, &metrics, &inference, &trained, &cost)?;

        final_train.push(metrics.final_train_accuracy);
        let mean_inf = if inference.is_empty() {
            0.0
        } else {
            inference.iter().map(|r| r.accuracy).sum::<f64>() / inference.len() as f64
        };
        inference_acc.push(mean_inf);
        last_cost = Some(cost);
    }

    let summary = output::summary_json(
        &cfg.seeds,
        &final_train,
        &inference_acc,
        &last_cost.expect("at least one seed"),
        started.elapsed().as_secs_f64(),
    );
    let summary_path = cfg.output_dir.join("summary.json");
    fs::write(&summary_path, summary)?;
    Ok(summary_path)
}

/// Fidelity sweep, stochasticity check, and the sanity suite; JSON report
/// plus one line per check on stdout. Nonzero exit on any violation.
pub fn cmd_validate(pairs: usize, trials: usize, seed: u64, output: &Path) -> i32 {
    match run_validation(pairs, trials, seed, output) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("validation failed to run: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn run_validation(
    pairs: usize,
    trials: usize,
    seed: u64,
    output: &Path,
) -> feroma_core::Result<bool> {
    let fidelity = fidelity_sweep(pairs, 10, (0.5, 2.0), seed)?;
    let fidelity_ok = fidelity.bound_violations == 0;
    println!(
        "fidelity_sweep: {} ({} pairs, {} violations, mean gap {:.4})",
        if fidelity_ok { "pass" } else { "FAIL" },
        fidelity.pairs_tested,
        fidelity.bound_violations,
        fidelity.mean_gap
    );

    let data = stochasticity_fixture(300, 10, seed)?;
    let stochasticity = stochasticity_check(&data, &DpeConfig::default(), trials, seed)?;
    println!(
        "stochasticity_check: {} (rho^2 {:.3e}, max variance {:.3e})",
        if stochasticity.passed { "pass" } else { "FAIL" },
        stochasticity.rho_squared,
        stochasticity.max_empirical_variance
    );

    let sanity = sanity_suite(seed);
    for check in &sanity.checks {
        println!(
            "sanity.{}: {}",
            check.name,
            if check.passed { "pass" } else { "FAIL" }
        );
    }

    let all_ok = fidelity_ok && stochasticity.passed && sanity.passed;
    let report = serde_json::json!({
        "schema_version": 1,
        "fidelity": serde_json::to_value(&fidelity).expect("serializable"),
        "stochasticity": serde_json::to_value(&stochasticity).expect("serializable"),
        "sanity": serde_json::to_value(&sanity).expect("serializable"),
        "passed": all_ok,
    });
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(output, serde_json::to_string_pretty(&report).expect("serializable"))?;
    Ok(all_ok)
}

/// Materialize the generator's output: one flat numeric file per
/// (round, client) plus a tag manifest.
pub fn cmd_gen_data(config_path: &Path, overrides: &[String]) -> i32 {
    let cfg = match ExperimentConfig::load(config_path, overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    match run_gen_data(&cfg) {
        Ok(n) => {
            println!("wrote {n} dataset files to {}", cfg.output_dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("gen-data failed: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn run_gen_data(cfg: &ExperimentConfig) -> feroma_core::Result<usize> {
    let seed = cfg.seeds[0];
    let schedule = DriftSchedule {
        seed,
        ..cfg.federation.schedule.clone()
    };
    let recipes = build_recipe_set(&schedule)?;
    fs::create_dir_all(&cfg.output_dir)?;

    let mut manifest = String::from("client,window,tag\n");
    let mut written = 0usize;
    for client in 0..schedule.clients {
        for round in 0..schedule.total_rounds {
            let data = generate_round(&schedule, &recipes, round, client)?;
            let mut out = String::from("label");
            for j in 0..data.features.cols() {
                let _ = write!(out, ",f{j}");
            }
            out.push('\n');
            for (row, label) in data.features.iter_rows().zip(&data.labels) {
                let _ = write!(out, "{label}");
                for v in row {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
            fs::write(
                cfg.output_dir
                    .join(format!("data_r{round:03}_c{client:03}.csv")),
                out,
            )?;
            written += 1;
            if round % schedule.drift_every == 0 {
                let _ = writeln!(
                    manifest,
                    "{client},{},{}",
                    schedule.window(round),
                    data.distribution_tag
                );
            }
        }
    }
    fs::write(cfg.output_dir.join("manifest.csv"), manifest)?;
    Ok(written)
}
