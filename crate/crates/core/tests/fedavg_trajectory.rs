//! The orchestrated FedAvg baseline must reproduce a direct, independently
//! written weighted-averaging loop, parameter for parameter.

use feroma_core::datagen::{
    build_recipe_set, generate_round, DriftSchedule, NonIidLevel, NonIidType, RecipeMode,
};
use feroma_core::federation::{run_training, AggregationKind, ArchKind, FederationConfig};
use feroma_core::model::{evaluate, local_update, ModelParams, TrainConfig};
use feroma_core::numerics::{DistanceKind, Matrix};
use feroma_core::rng::{derive, derive_global, Purpose};
use rand::seq::SliceRandom;

fn config() -> FederationConfig {
    FederationConfig {
        rounds: 6,
        warmup_rounds: 2,
        participation_rate: 1.0,
        aggregation: AggregationKind::FedAvg,
        threshold_enabled: false,
        threshold_tau: None,
        train_distance: DistanceKind::Cosine,
        test_distance: DistanceKind::Euclidean,
        standardize_distances: false,
        eval_fraction: 0.2,
        label_budget: 20,
        arch_kind: ArchKind::Mlp,
        hidden_width: 8,
        train: TrainConfig {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 16,
            local_epochs: 1,
        },
        dpe: Default::default(),
        schedule: DriftSchedule {
            total_rounds: 6,
            drift_every: 2,
            noniid_type: NonIidType::Px,
            noniid_level: NonIidLevel::Low,
            clients: 3,
            samples_per_client: 50,
            seed: 0,
            feature_dim: 10,
            num_classes: 3,
            recipe_mode: RecipeMode::Standard,
            circle_separation: 6.0,
            identity_separation: 6.0,
            color_shift: 4.0,
        },
        churn: vec![],
    }
}

/// Direct Eq.-style loop: broadcast one global model, train each client,
/// and average with data-size weights computed by naive summation.
fn reference_fedavg_run(cfg: &FederationConfig, seed: u64) -> Vec<ModelParams> {
    let schedule = DriftSchedule {
        seed,
        ..cfg.schedule.clone()
    };
    let recipes = build_recipe_set(&schedule).unwrap();
    let mut init_rng = derive_global(seed, Purpose::Init);
    let mut global = ModelParams::init(cfg.arch(), &mut init_rng);
    let mut finals = Vec::new();

    for round in 0..cfg.rounds {
        let mut locals: Vec<(ModelParams, usize)> = Vec::new();
        for client in 0..schedule.clients {
            let data = generate_round(&schedule, &recipes, round, client).unwrap();
            // the same split rule the engine uses
            let n = data.features.rows();
            let eval_count = (n as f64 * cfg.eval_fraction).floor() as usize;
            let mut indices: Vec<usize> = (0..n).collect();
            let mut split_rng = derive(seed, client, round, Purpose::EvalSplit);
            indices.shuffle(&mut split_rng);
            let train_idx = &indices[eval_count..];
            let rows: Vec<Vec<f64>> = train_idx
                .iter()
                .map(|&i| data.features.row(i).to_vec())
                .collect();
            let train = feroma_core::datagen::ClientDataset {
                features: Matrix::from_rows(&rows).unwrap(),
                labels: train_idx.iter().map(|&i| data.labels[i]).collect(),
                distribution_tag: data.distribution_tag.clone(),
                round,
                client_id: client,
            };
            let mut rng = derive(seed, client, round, Purpose::Shuffle);
            let updated = local_update(&global, &train, &cfg.train, &mut rng).unwrap();
            locals.push((updated, train.features.rows()));
        }
        // plain summation form of the weighted average
        let total: f64 = locals.iter().map(|(_, s)| *s as f64).sum();
        let mut theta = vec![0.0; global.param_count()];
        for (m, s) in &locals {
            let p = *s as f64 / total;
            for (acc, t) in theta.iter_mut().zip(&m.theta) {
                *acc += p * t;
            }
        }
        global = ModelParams {
            arch: global.arch,
            theta,
        };
        if round == cfg.rounds - 1 {
            finals = locals.into_iter().map(|(m, _)| m).collect();
        }
    }
    finals
}

#[test]
fn fedavg_mode_reproduces_reference_trajectory() {
    let cfg = config();
    let (trained, _) = run_training(&cfg, 42).unwrap();
    let reference = reference_fedavg_run(&cfg, 42);

    assert_eq!(trained.final_record.models.len(), reference.len());
    for (id, model) in &trained.final_record.models {
        let oracle = &reference[*id as usize];
        let max_diff = model
            .theta
            .iter()
            .zip(&oracle.theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-9, "client {id}: max diff {max_diff}");
    }
}

#[test]
fn fedavg_trajectory_trains_above_chance() {
    let cfg = config();
    let (trained, metrics) = run_training(&cfg, 43).unwrap();
    assert!(metrics.final_train_accuracy > 1.0 / 3.0);
    // the shared global evaluates identically for every client dataset
    let schedule = DriftSchedule {
        seed: 43,
        ..cfg.schedule.clone()
    };
    let recipes = build_recipe_set(&schedule).unwrap();
    let data = generate_round(&schedule, &recipes, cfg.rounds - 1, 0).unwrap();
    let eval = evaluate(&trained.global_model, &data).unwrap();
    assert!(eval.accuracy > 1.0 / 3.0);
}
