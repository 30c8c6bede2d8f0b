//! Run-directory writers. All floats are formatted with Rust's shortest
//! round-trip representation, so reruns with the same config and seed
//! produce byte-identical files.

use feroma_core::federation::{CostReport, InferenceRecord, RunMetrics, TrainedFederation};
use feroma_core::mapping::AssociationWeights;
use feroma_core::Result;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// metrics.csv: one row per (round, client).
pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("round,client,accuracy,loss,strategy\n");
    for row in &metrics.per_round {
        let strategy = row
            .strategy
            .map_or(String::new(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.round, row.client_id, row.accuracy, row.loss, strategy
        );
    }
    out
}

/// inference.csv: one row per test client.
pub fn inference_csv(records: &[InferenceRecord]) -> String {
    let mut out = String::from("test_id,matched_id,accuracy,loss,test_tag,matched_tag\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.test_id,
            r.matched_id.map_or(String::new(), |id| id.to_string()),
            r.accuracy,
            r.loss,
            r.test_tag,
            r.matched_tag.clone().unwrap_or_default()
        );
    }
    out
}

/// One association matrix per round: rows are current clients, columns the
/// previous-round participants.
pub fn association_csv(associations: &[&AssociationWeights]) -> String {
    let mut cols: BTreeSet<u64> = BTreeSet::new();
    for a in associations {
        cols.extend(a.weights.keys());
    }
    let mut out = String::from("client");
    for c in &cols {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for a in associations {
        let _ = write!(out, "{}", a.client_id);
        for c in &cols {
            let w = a.weights.get(c).copied().unwrap_or(0.0);
            let _ = write!(out, ",{w}");
        }
        out.push('\n');
    }
    out
}

/// profiles.csv: flat numeric records of the final-round profiles.
pub fn profiles_csv(trained: &TrainedFederation) -> String {
    let mut out =
        String::from("# client_id,round,epsilon,v,marginal[2l],class[2lU],present[U]\n");
    for profile in trained.final_record.profiles.values() {
        out.push_str(&profile.to_record());
        out.push('\n');
    }
    out
}

/// Everything one seed produced.
pub fn write_seed_outputs(
    dir: &Path,
    metrics: &RunMetrics,
    inference: &[InferenceRecord],
    trained: &TrainedFederation,
    cost: &CostReport,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(metrics))?;
    fs::write(dir.join("inference.csv"), inference_csv(inference))?;
    fs::write(dir.join("profiles.csv"), profiles_csv(trained))?;
    fs::write(
        dir.join("cost_report.json"),
        serde_json::to_string_pretty(cost).expect("serializable report"),
    )?;

    let assoc_dir = dir.join("associations");
    fs::create_dir_all(&assoc_dir)?;
    let rounds: BTreeSet<u64> = metrics.associations.iter().map(|a| a.round).collect();
    for round in rounds {
        let rows: Vec<&AssociationWeights> = metrics
            .associations
            .iter()
            .filter(|a| a.round == round)
            .collect();
        fs::write(
            assoc_dir.join(format!("round_{round:03}.csv")),
            association_csv(&rows),
        )?;
    }

    let model_dir = dir.join("models");
    fs::create_dir_all(&model_dir)?;
    for (id, model) in &trained.final_record.models {
        fs::write(model_dir.join(format!("client_{id:03}.bin")), model.to_bytes())?;
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// summary.json aggregating all seeds of a run.
pub fn summary_json(
    seeds: &[u64],
    final_train: &[f64],
    inference_acc: &[f64],
    cost: &CostReport,
    runtime_seconds: f64,
) -> String {
    let (train_mean, train_std) = mean_std(final_train);
    let (inf_mean, inf_std) = mean_std(inference_acc);
    let per_seed_train: serde_json::Map<String, serde_json::Value> = seeds
        .iter()
        .zip(final_train)
        .map(|(s, a)| (s.to_string(), serde_json::json!(a)))
        .collect();
    let per_seed_inf: serde_json::Map<String, serde_json::Value> = seeds
        .iter()
        .zip(inference_acc)
        .map(|(s, a)| (s.to_string(), serde_json::json!(a)))
        .collect();
    let value = serde_json::json!({
        "schema_version": 1,
        "seeds": seeds,
        "final_train_accuracy": {
            "mean": train_mean,
            "std": train_std,
            "per_seed": per_seed_train,
        },
        "inference_accuracy": {
            "mean": inf_mean,
            "std": inf_std,
            "per_seed": per_seed_inf,
        },
        "cost": serde_json::to_value(cost).expect("serializable report"),
        "runtime_seconds": runtime_seconds,
    });
    serde_json::to_string_pretty(&value).expect("serializable summary")
}
