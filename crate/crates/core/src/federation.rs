//! Round orchestration: client pool churn, participant selection, warm-up,
//! profile exchange, aggregation dispatch, local training, and test-time
//! assignment.
//!
//! Warm-up rounds run plain FedAvg with one shared global model and no
//! profile exchange. At the warm-up boundary that global model is frozen
//! as the profile encoder, latent bounds are collected once, and the
//! shared projector is built; from then on every participant ships a
//! sanitized profile and receives a model aggregated from the previous
//! round under its association weights. The server keeps only the latest
//! round record between rounds.

use crate::datagen::{build_recipe_set, generate_round, ClientDataset, DriftSchedule, NonIidType};
use crate::dpe::{client_bounds, DistributionProfile, DpeConfig, GlobalBounds, ProfileExtractor};
use crate::error::{Error, Result};
use crate::mapping::{
    aggregate, apply_threshold, assign_test_model, associate_with_labels, combine_with_size,
    fedavg, softmax_weights, without_threshold, AssociationWeights, ClientId, Strategy,
};
use crate::model::{evaluate, extract_latents, local_update, Arch, ModelParams, TrainConfig};
use crate::numerics::{DistanceKind, Matrix};
use crate::rng::{derive, derive_global, Purpose};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    Feroma,
    FedAvg,
}

impl std::str::FromStr for AggregationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feroma" => Ok(AggregationKind::Feroma),
            "fedavg" => Ok(AggregationKind::FedAvg),
            other => Err(Error::invalid(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    SoftmaxReg,
}

impl std::str::FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchKind::Mlp),
            "softmax_reg" => Ok(ArchKind::SoftmaxReg),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChurnKind {
    Join,
    Leave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub round: u64,
    pub client_id: ClientId,
    pub kind: ChurnKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: u64,
    pub warmup_rounds: u64,
    pub participation_rate: f64,
    pub aggregation: AggregationKind,
    pub threshold_enabled: bool,
    /// None uses the mean of a normalized weight vector, 1/|A_{t-1}|.
    pub threshold_tau: Option<f64>,
    pub train_distance: DistanceKind,
    pub test_distance: DistanceKind,
    pub standardize_distances: bool,
    /// Share of each client's round data reserved for evaluation.
    pub eval_fraction: f64,
    /// Labeled samples per class for test-time association under P(Y|X).
    pub label_budget: usize,
    pub arch_kind: ArchKind,
    pub hidden_width: usize,
    pub train: TrainConfig,
    pub dpe: DpeConfig,
    pub schedule: DriftSchedule,
    pub churn: Vec<ChurnEvent>,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be positive"));
        }
        if self.warmup_rounds >= self.rounds {
            return Err(Error::invalid("warmup_rounds must be below rounds"));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::invalid("participation_rate must be in (0, 1]"));
        }
        if let Some(tau) = self.threshold_tau {
            if !(0.0..1.0).contains(&tau) {
                return Err(Error::invalid("threshold_tau must be in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::invalid("eval_fraction must be in [0, 1)"));
        }
        if self.arch_kind == ArchKind::Mlp && self.hidden_width == 0 {
            return Err(Error::invalid("hidden_width must be positive for mlp"));
        }
        self.train.validate()?;
        self.dpe.validate()?;
        self.schedule.validate()?;
        if self.aggregation == AggregationKind::Feroma
            && self.dpe.pca_dim > self.arch().latent_dim()
        {
            return Err(Error::invalid(format!(
                "dpe.pca_dim {} exceeds the model's latent width {}",
                self.dpe.pca_dim,
                self.arch().latent_dim()
            )));
        }
        if self.schedule.total_rounds < self.rounds {
            return Err(Error::invalid(
                "schedule.total_rounds must cover the configured rounds",
            ));
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        match self.arch_kind {
            ArchKind::Mlp => Arch::Mlp {
                input_dim: self.schedule.feature_dim,
                hidden_dim: self.hidden_width,
                num_classes: self.schedule.num_classes,
            },
            ArchKind::SoftmaxReg => Arch::SoftmaxReg {
                input_dim: self.schedule.feature_dim,
                num_classes: self.schedule.num_classes,
            },
        }
    }
}

/// Per-round snapshot; the server's only memory between rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub participants: BTreeSet<ClientId>,
    pub models: BTreeMap<ClientId, ModelParams>,
    pub profiles: BTreeMap<ClientId, DistributionProfile>,
    pub sizes: BTreeMap<ClientId, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundClientMetric {
    pub round: u64,
    pub client_id: ClientId,
    pub accuracy: f64,
    pub loss: f64,
    pub strategy: Option<Strategy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub test_id: u64,
    pub matched_id: Option<ClientId>,
    pub matched_tag: Option<String>,
    pub test_tag: String,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_round: Vec<RoundClientMetric>,
    pub associations: Vec<AssociationWeights>,
    pub final_train_accuracy: f64,
    pub wall_clock_ms: u128,
}

/// Everything the server retains after training.
#[derive(Debug, Clone)]
pub struct TrainedFederation {
    pub final_record: RoundRecord,
    pub extractor: Option<ProfileExtractor>,
    pub global_model: ModelParams,
    pub final_tags: BTreeMap<ClientId, String>,
    pub seed: u64,
}

/// Apply scripted join/leave events for this round.
pub fn update_client_pool(
    pool: &BTreeSet<ClientId>,
    round: u64,
    churn: &[ChurnEvent],
) -> Result<BTreeSet<ClientId>> {
    let mut next = pool.clone();
    for event in churn.iter().filter(|e| e.round == round) {
        match event.kind {
            ChurnKind::Join => {
                next.insert(event.client_id);
            }
            ChurnKind::Leave => {
                next.remove(&event.client_id);
            }
        }
    }
    if next.is_empty() {
        return Err(Error::EmptyPool(round));
    }
    Ok(next)
}

/// ceil(rate * |pool|) participants, drawn without replacement.
fn select_participants(
    pool: &BTreeSet<ClientId>,
    rate: f64,
    seed: u64,
    round: u64,
) -> Vec<ClientId> {
    let count = ((rate * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
    if count == pool.len() {
        return pool.iter().copied().collect();
    }
    let mut ids: Vec<ClientId> = pool.iter().copied().collect();
    let mut rng = derive(seed, u64::MAX, round, Purpose::Select);
    ids.shuffle(&mut rng);
    let mut chosen: Vec<ClientId> = ids.into_iter().take(count).collect();
    chosen.sort_unstable();
    chosen
}

/// Deterministic train/eval split of one round dataset.
fn split_train_eval(
    data: &ClientDataset,
    eval_fraction: f64,
    seed: u64,
) -> (ClientDataset, ClientDataset) {
    let n = data.features.rows();
    let eval_count = (n as f64 * eval_fraction).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = derive(seed, data.client_id, data.round, Purpose::EvalSplit);
    indices.shuffle(&mut rng);
    let (eval_idx, train_idx) = indices.split_at(eval_count);

    let subset = |idx: &[usize]| -> ClientDataset {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data.features.row(i).to_vec()).collect();
        ClientDataset {
            features: Matrix::from_rows(&rows).expect("subset of a valid matrix"),
            labels: idx.iter().map(|&i| data.labels[i]).collect(),
            distribution_tag: data.distribution_tag.clone(),
            round: data.round,
            client_id: data.client_id,
        }
    };
    (subset(train_idx), subset(eval_idx))
}

struct ClientRound {
    id: ClientId,
    train: ClientDataset,
    eval: ClientDataset,
    tag: String,
}

/// Algorithm driver for one run at one seed. Deterministic: identical
/// config and seed reproduce identical records and metrics.
pub fn run_training(cfg: &FederationConfig, seed: u64) -> Result<(TrainedFederation, RunMetrics)> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let schedule = DriftSchedule {
        seed,
        ..cfg.schedule.clone()
    };
    let recipes = build_recipe_set(&schedule)?;
    let arch = cfg.arch();

    let mut init_rng = derive_global(seed, Purpose::Init);
    let initial_global = ModelParams::init(arch, &mut init_rng);

    let mut pool: BTreeSet<ClientId> = (0..schedule.clients).collect();
    let mut previous: Option<RoundRecord> = None;
    let mut extractor: Option<ProfileExtractor> = None;
    let mut metrics = RunMetrics::default();
    let mut final_tags: BTreeMap<ClientId, String> = BTreeMap::new();

    for round in 0..cfg.rounds {
        pool = update_client_pool(&pool, round, &cfg.churn)?;
        let participants = select_participants(&pool, cfg.participation_rate, seed, round);
        if participants.is_empty() {
            return Err(Error::EmptyPool(round));
        }

        // client-side data generation, order-independent by participant id
        let rounds_data: Vec<ClientRound> = participants
            .par_iter()
            .map(|&id| -> Result<ClientRound> {
                let data = generate_round(&schedule, &recipes, round, id)?;
                let tag = data.distribution_tag.clone();
                let (train, eval) = split_train_eval(&data, cfg.eval_fraction, seed);
                Ok(ClientRound {
                    id,
                    train,
                    eval,
                    tag,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let feroma_active =
            cfg.aggregation == AggregationKind::Feroma && round >= cfg.warmup_rounds;

        // the shared FedAvg model of the previous round, used by warm-up,
        // the baseline, and the boundary round
        let shared_global = match &previous {
            None => initial_global.clone(),
            Some(prev) => {
                let list: Vec<(ModelParams, usize)> = prev
                    .participants
                    .iter()
                    .map(|id| (prev.models[id].clone(), prev.sizes[id]))
                    .collect();
                fedavg(&list)?
            }
        };

        // freeze the encoder and build the extractor at the boundary
        if feroma_active && extractor.is_none() {
            let bounds_per_client: Vec<(Vec<f64>, Vec<f64>)> = rounds_data
                .par_iter()
                .map(|cr| -> Result<(Vec<f64>, Vec<f64>)> {
                    let latents = extract_latents(&shared_global, &cr.train.features)?;
                    client_bounds(&latents)
                })
                .collect::<Result<Vec<_>>>()?;
            let bounds = GlobalBounds::aggregate(&bounds_per_client)?;
            extractor = Some(ProfileExtractor::new(
                shared_global.clone(),
                bounds,
                cfg.dpe.clone(),
                schedule.num_classes,
            )?);
        }

        // profile extraction (labels available during training)
        let profiles: BTreeMap<ClientId, DistributionProfile> = if feroma_active {
            let ext = extractor.as_ref().unwrap();
            rounds_data
                .par_iter()
                .map(|cr| -> Result<(ClientId, DistributionProfile)> {
                    let mut rng = derive(seed, cr.id, round, Purpose::Mask);
                    Ok((cr.id, ext.extract(&cr.train, true, &mut rng)?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?
        } else {
            BTreeMap::new()
        };

        // server-side mapping and model dispatch
        let mut assignments: BTreeMap<ClientId, ModelParams> = BTreeMap::new();
        let mut round_associations: Vec<AssociationWeights> = Vec::new();
        if feroma_active {
            let prev = previous.as_ref();
            let has_prev_profiles = prev.is_some_and(|p| !p.profiles.is_empty());
            match (prev, has_prev_profiles) {
                (Some(prev), true) => {
                    let prev_profiles: Vec<(ClientId, &DistributionProfile)> = prev
                        .participants
                        .iter()
                        .map(|id| (*id, &prev.profiles[id]))
                        .collect();
                    for cr in &rounds_data {
                        let raw = softmax_weights(
                            &profiles[&cr.id],
                            &prev_profiles,
                            cfg.train_distance,
                            cfg.standardize_distances,
                        )?;
                        let weighted = if cfg.threshold_enabled {
                            let tau = cfg
                                .threshold_tau
                                .unwrap_or(1.0 / prev.participants.len() as f64);
                            apply_threshold(&raw, tau, cr.id, round)?
                        } else {
                            without_threshold(&raw, cr.id, round)
                        };
                        let final_weights = combine_with_size(&weighted, &prev.sizes)?;
                        assignments.insert(cr.id, aggregate(&final_weights, &prev.models)?);
                        round_associations.push(AssociationWeights {
                            weights: final_weights.weights,
                            ..weighted
                        });
                    }
                }
                (Some(prev), false) => {
                    // first dynamic round: no previous profiles exist, so
                    // associations start uniform and the dispatch equals the
                    // FedAvg global of the previous round
                    let ids: Vec<ClientId> = prev.participants.iter().copied().collect();
                    for cr in &rounds_data {
                        let aw = AssociationWeights::uniform_fallback(cr.id, round, &ids, None);
                        let final_weights = combine_with_size(&aw, &prev.sizes)?;
                        assignments.insert(cr.id, aggregate(&final_weights, &prev.models)?);
                        round_associations.push(AssociationWeights {
                            weights: final_weights.weights,
                            ..aw
                        });
                    }
                }
                (None, _) => {
                    for cr in &rounds_data {
                        assignments.insert(cr.id, shared_global.clone());
                        round_associations.push(AssociationWeights {
                            client_id: cr.id,
                            round,
                            weights: BTreeMap::new(),
                            strategy: Strategy::GlobalFallback,
                            threshold_used: None,
                        });
                    }
                }
            }
        } else {
            for cr in &rounds_data {
                assignments.insert(cr.id, shared_global.clone());
            }
        }

        // client-side local training and evaluation
        let updated: Vec<(ClientId, ModelParams, f64, f64)> = rounds_data
            .par_iter()
            .map(|cr| -> Result<(ClientId, ModelParams, f64, f64)> {
                let mut rng = derive(seed, cr.id, round, Purpose::Shuffle);
                let trained = local_update(&assignments[&cr.id], &cr.train, &cfg.train, &mut rng)?;
                let eval = evaluate(&trained, &cr.eval)?;
                Ok((cr.id, trained, eval.accuracy, eval.mean_loss))
            })
            .collect::<Result<Vec<_>>>()?;

        let strategy_of: BTreeMap<ClientId, Strategy> = round_associations
            .iter()
            .map(|a| (a.client_id, a.strategy))
            .collect();
        for (id, _, accuracy, loss) in &updated {
            metrics.per_round.push(RoundClientMetric {
                round,
                client_id: *id,
                accuracy: *accuracy,
                loss: *loss,
                strategy: strategy_of.get(id).copied(),
            });
        }
        metrics.associations.extend(round_associations);

        if round == cfg.rounds - 1 {
            final_tags = rounds_data.iter().map(|cr| (cr.id, cr.tag.clone())).collect();
        }

        previous = Some(RoundRecord {
            round,
            participants: participants.iter().copied().collect(),
            models: updated
                .iter()
                .map(|(id, m, _, _)| (*id, m.clone()))
                .collect(),
            profiles,
            sizes: rounds_data
                .iter()
                .map(|cr| (cr.id, cr.train.features.rows()))
                .collect(),
        });
    }

    let final_record = previous.expect("at least one round ran");
    let final_list: Vec<(ModelParams, usize)> = final_record
        .participants
        .iter()
        .map(|id| (final_record.models[id].clone(), final_record.sizes[id]))
        .collect();
    let global_model = fedavg(&final_list)?;

    let finals: Vec<f64> = metrics
        .per_round
        .iter()
        .filter(|m| m.round == cfg.rounds - 1)
        .map(|m| m.accuracy)
        .collect();
    metrics.final_train_accuracy = finals.iter().sum::<f64>() / finals.len() as f64;
    metrics.wall_clock_ms = started.elapsed().as_millis();

    Ok((
        TrainedFederation {
            final_record,
            extractor,
            global_model,
            final_tags,
            seed,
        },
        metrics,
    ))
}

/// Labeled subset for P(Y|X) association: up to `budget` samples per class.
fn labeled_subset(data: &ClientDataset, budget: usize, seed: u64) -> ClientDataset {
    let n = data.features.rows();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = derive(seed, data.client_id, data.round, Purpose::LabelBudget);
    indices.shuffle(&mut rng);
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut keep: Vec<usize> = Vec::new();
    for i in indices {
        let count = taken.entry(data.labels[i]).or_insert(0);
        if *count < budget {
            *count += 1;
            keep.push(i);
        }
    }
    keep.sort_unstable();
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| data.features.row(i).to_vec()).collect();
    ClientDataset {
        features: Matrix::from_rows(&rows).expect("subset of a valid matrix"),
        labels: keep.iter().map(|&i| data.labels[i]).collect(),
        distribution_tag: data.distribution_tag.clone(),
        round: data.round,
        client_id: data.client_id,
    }
}

/// Inference phase: each test client receives a final-round model and is
/// scored on its own data. No model is updated. FedAvg baselines hand out
/// the single global model; the profile route matches label-free marginal
/// subvectors; P(Y|X) runs associate with a small labeled set instead.
pub fn run_inference(
    trained: &TrainedFederation,
    test_clients: &[ClientDataset],
    cfg: &FederationConfig,
) -> Result<Vec<InferenceRecord>> {
    if trained.final_record.participants.is_empty() {
        return Err(Error::EmptyInput("final round record"));
    }
    let use_profiles =
        cfg.aggregation == AggregationKind::Feroma && trained.extractor.is_some();
    let label_route = use_profiles && cfg.schedule.noniid_type == NonIidType::Pygx;

    let finals_with_profiles: BTreeMap<ClientId, (DistributionProfile, ModelParams)> = trained
        .final_record
        .participants
        .iter()
        .filter_map(|id| {
            trained
                .final_record
                .profiles
                .get(id)
                .map(|p| (*id, (p.clone(), trained.final_record.models[id].clone())))
        })
        .collect();
    let final_models: BTreeMap<ClientId, ModelParams> = trained
        .final_record
        .participants
        .iter()
        .map(|id| (*id, trained.final_record.models[id].clone()))
        .collect();

    let mut records = Vec::with_capacity(test_clients.len());
    for test in test_clients {
        let (matched_id, model) = if !use_profiles {
            (None, &trained.global_model)
        } else if label_route {
            let subset = labeled_subset(test, cfg.label_budget, trained.seed);
            let (id, model) = associate_with_labels(&subset, &final_models)?;
            (Some(id), model)
        } else {
            let ext = trained.extractor.as_ref().unwrap();
            let mut rng = derive(trained.seed, test.client_id, test.round, Purpose::Mask);
            let profile = ext.extract(test, false, &mut rng)?;
            let (id, model) = assign_test_model(
                &profile.marginal_vector(),
                &finals_with_profiles,
                cfg.test_distance,
            )?;
            (Some(id), model)
        };
        let eval = evaluate(model, test)?;
        records.push(InferenceRecord {
            test_id: test.client_id,
            matched_id,
            matched_tag: matched_id.and_then(|id| trained.final_tags.get(&id).cloned()),
            test_tag: test.distribution_tag.clone(),
            accuracy: eval.accuracy,
            loss: eval.mean_loss,
        });
    }
    Ok(records)
}

/// Per-round per-client upload accounting. The simulated wire carries
/// 4-byte floats; headers and framing are not counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub model_params: usize,
    pub profile_dim: usize,
    pub model_upload_bytes: usize,
    pub profile_upload_bytes: usize,
    pub model_only_kb: f64,
    pub with_profile_kb: f64,
    pub overhead_percent: f64,
    pub dimension_ratio: f64,
    /// Set when d/|theta| exceeds the compactness target of 1e-2.
    pub flagged: bool,
}

const WIRE_FLOAT_BYTES: usize = 4;

pub fn cost_summary(model_params: usize, profile_dim: usize) -> CostReport {
    let model_upload_bytes = model_params * WIRE_FLOAT_BYTES;
    let profile_upload_bytes = profile_dim * WIRE_FLOAT_BYTES;
    let ratio = if model_params == 0 {
        0.0
    } else {
        profile_dim as f64 / model_params as f64
    };
    CostReport {
        model_params,
        profile_dim,
        model_upload_bytes,
        profile_upload_bytes,
        model_only_kb: model_upload_bytes as f64 / 1000.0,
        with_profile_kb: (model_upload_bytes + profile_upload_bytes) as f64 / 1000.0,
        overhead_percent: 100.0 * ratio,
        dimension_ratio: ratio,
        flagged: ratio > 1e-2,
    }
}

/// Cost report of a finished run, measured on the actual artifacts.
pub fn cost_report(trained: &TrainedFederation) -> CostReport {
    let model_params = trained.global_model.param_count();
    let profile_dim = trained
        .final_record
        .profiles
        .values()
        .next()
        .map_or(0, |p| p.dim());
    cost_summary(model_params, profile_dim)
}
