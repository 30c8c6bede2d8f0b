//! Flat, line-oriented experiment configuration: `[section]` headers and
//! `key = value` lines. Unknown sections or keys are rejected, every key
//! has a documented default, and a parsed config can be written back as a
//! snapshot that re-parses to an equivalent config.

use feroma_core::datagen::{DriftSchedule, NonIidLevel, NonIidType, RecipeMode};
use feroma_core::dpe::DpeConfig;
use feroma_core::federation::{
    AggregationKind, ArchKind, ChurnEvent, ChurnKind, FederationConfig,
};
use feroma_core::model::TrainConfig;
use feroma_core::numerics::DistanceKind;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type ConfigResult<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> ConfigResult<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub federation: FederationConfig,
    pub test_clients: usize,
    pub unseen_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/out"),
            seeds: vec![42, 43, 44, 45, 46],
            federation: FederationConfig {
                rounds: 20,
                warmup_rounds: 5,
                participation_rate: 1.0,
                aggregation: AggregationKind::Feroma,
                threshold_enabled: false,
                threshold_tau: None,
                train_distance: DistanceKind::Cosine,
                test_distance: DistanceKind::Euclidean,
                standardize_distances: false,
                eval_fraction: 0.2,
                label_budget: 20,
                arch_kind: ArchKind::Mlp,
                hidden_width: 32,
                train: TrainConfig {
                    learning_rate: 0.005,
                    momentum: 0.9,
                    batch_size: 64,
                    local_epochs: 2,
                },
                dpe: DpeConfig {
                    pca_dim: 10,
                    reference_points: 200,
                    masks: 3,
                    mask_prob: 0.5,
                    epsilon: 10.0,
                    no_dp: false,
                    pca_seed: 7,
                },
                schedule: DriftSchedule {
                    total_rounds: 20,
                    drift_every: 2,
                    noniid_type: NonIidType::Px,
                    noniid_level: NonIidLevel::Low,
                    clients: 20,
                    samples_per_client: 375,
                    seed: 0,
                    feature_dim: 784,
                    num_classes: 10,
                    recipe_mode: RecipeMode::Standard,
                    circle_separation: 6.0,
                    identity_separation: 6.0,
                    color_shift: 4.0,
                },
                churn: vec![],
            },
            test_clients: 20,
            unseen_fraction: 0.0,
        }
    }
}

/// Raw `(section, key) -> value` pairs. Consuming readers remove entries;
/// anything left at the end is an unknown key.
struct RawConfig {
    entries: BTreeMap<(String, String), String>,
}

const SECTIONS: &[&str] = &[
    "experiment",
    "federation",
    "training",
    "dpe",
    "data",
    "churn",
];

impl RawConfig {
    fn parse(text: &str) -> ConfigResult<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !SECTIONS.contains(&name) {
                    return err(format!("line {}: unknown section [{name}]", lineno + 1));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected `key = value`", lineno + 1));
            };
            if section.is_empty() {
                return err(format!("line {}: key outside any section", lineno + 1));
            }
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries
                .insert((section.clone(), key.clone()), value)
                .is_some()
            {
                return err(format!("line {}: duplicate key {section}.{key}", lineno + 1));
            }
        }
        Ok(RawConfig { entries })
    }

    fn apply_override(&mut self, spec: &str) -> ConfigResult<()> {
        let Some((path, value)) = spec.split_once('=') else {
            return err(format!("override `{spec}` must be section.key=value"));
        };
        let Some((section, key)) = path.trim().split_once('.') else {
            return err(format!("override `{spec}` must be section.key=value"));
        };
        if !SECTIONS.contains(&section) {
            return err(format!("override names unknown section [{section}]"));
        }
        self.entries.insert(
            (section.to_string(), key.to_string()),
            value.trim().to_string(),
        );
        Ok(())
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.entries
            .remove(&(section.to_string(), key.to_string()))
    }

    fn finish(self) -> ConfigResult<()> {
        if let Some(((section, key), _)) = self.entries.into_iter().next() {
            return err(format!("unknown key `{key}` in section [{section}]"));
        }
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> ConfigResult<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| ConfigError(format!("{section}.{key} = `{value}`: {e}")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> ConfigResult<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => err(format!("{section}.{key} = `{other}`: expected true or false")),
    }
}

macro_rules! take_into {
    ($raw:ident, $section:literal, $key:literal, $slot:expr) => {
        if let Some(v) = $raw.take($section, $key) {
            $slot = parse_value($section, $key, &v)?;
        }
    };
}

macro_rules! take_bool {
    ($raw:ident, $section:literal, $key:literal, $slot:expr) => {
        if let Some(v) = $raw.take($section, $key) {
            $slot = parse_bool($section, $key, &v)?;
        }
    };
}

fn parse_churn_events(value: &str) -> ConfigResult<Vec<ChurnEvent>> {
    let mut events = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (kind, rest) = part
            .split_once(':')
            .ok_or_else(|| ConfigError(format!("churn event `{part}`: expected kind:client@round")))?;
        let kind = match kind {
            "join" => ChurnKind::Join,
            "leave" => ChurnKind::Leave,
            other => return err(format!("churn event kind `{other}`")),
        };
        let (client, round) = rest
            .split_once('@')
            .ok_or_else(|| ConfigError(format!("churn event `{part}`: expected kind:client@round")))?;
        events.push(ChurnEvent {
            round: parse_value("churn", "events", round)?,
            client_id: parse_value("churn", "events", client)?,
            kind,
        });
    }
    Ok(events)
}

fn churn_events_string(events: &[ChurnEvent]) -> String {
    events
        .iter()
        .map(|e| {
            let kind = match e.kind {
                ChurnKind::Join => "join",
                ChurnKind::Leave => "leave",
            };
            format!("{kind}:{}@{}", e.client_id, e.round)
        })
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn from_text(text: &str, overrides: &[String]) -> ConfigResult<Self> {
        let mut raw = RawConfig::parse(text)?;
        for spec in overrides {
            raw.apply_override(spec)?;
        }
        let mut cfg = ExperimentConfig::default();

        if let Some(v) = raw.take("experiment", "output_dir") {
            cfg.output_dir = PathBuf::from(v);
        }
        if let Some(v) = raw.take("experiment", "seeds") {
            let seeds: Result<Vec<u64>, _> = v
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| p.parse::<u64>())
                .collect();
            cfg.seeds = seeds.map_err(|e| ConfigError(format!("experiment.seeds: {e}")))?;
            if cfg.seeds.is_empty() {
                return err("experiment.seeds must list at least one seed");
            }
        }

        let fed = &mut cfg.federation;
        take_into!(raw, "federation", "rounds", fed.rounds);
        take_into!(raw, "federation", "warmup_rounds", fed.warmup_rounds);
        take_into!(raw, "federation", "participation_rate", fed.participation_rate);
        take_into!(raw, "federation", "aggregation", fed.aggregation);
        take_bool!(raw, "federation", "threshold_enabled", fed.threshold_enabled);
        if let Some(v) = raw.take("federation", "threshold_tau") {
            fed.threshold_tau = if v == "auto" {
                None
            } else {
                Some(parse_value("federation", "threshold_tau", &v)?)
            };
        }
        take_into!(raw, "federation", "train_distance", fed.train_distance);
        take_into!(raw, "federation", "test_distance", fed.test_distance);
        take_bool!(
            raw,
            "federation",
            "standardize_distances",
            fed.standardize_distances
        );

        take_into!(raw, "training", "learning_rate", fed.train.learning_rate);
        take_into!(raw, "training", "momentum", fed.train.momentum);
        take_into!(raw, "training", "batch_size", fed.train.batch_size);
        take_into!(raw, "training", "local_epochs", fed.train.local_epochs);
        take_into!(raw, "training", "architecture", fed.arch_kind);
        take_into!(raw, "training", "hidden_width", fed.hidden_width);

        take_into!(raw, "dpe", "pca_dim", fed.dpe.pca_dim);
        take_into!(raw, "dpe", "reference_points", fed.dpe.reference_points);
        take_into!(raw, "dpe", "masks", fed.dpe.masks);
        take_into!(raw, "dpe", "mask_prob", fed.dpe.mask_prob);
        take_into!(raw, "dpe", "epsilon", fed.dpe.epsilon);
        take_bool!(raw, "dpe", "no_dp", fed.dpe.no_dp);
        take_into!(raw, "dpe", "pca_seed", fed.dpe.pca_seed);

        let sched = &mut fed.schedule;
        take_into!(raw, "data", "clients", sched.clients);
        take_into!(raw, "data", "samples_per_client", sched.samples_per_client);
        take_into!(raw, "data", "feature_dim", sched.feature_dim);
        take_into!(raw, "data", "num_classes", sched.num_classes);
        take_into!(raw, "data", "noniid_type", sched.noniid_type);
        take_into!(raw, "data", "noniid_level", sched.noniid_level);
        take_into!(raw, "data", "drift_every", sched.drift_every);
        take_into!(raw, "data", "circle_separation", sched.circle_separation);
        take_into!(raw, "data", "identity_separation", sched.identity_separation);
        take_into!(raw, "data", "color_shift", sched.color_shift);

        let mut recipe_mode = "standard".to_string();
        let mut angle_a = 0.0f64;
        let mut angle_b = 180.0f64;
        let mut scripted = false;
        if let RecipeMode::TwoGroupRotation {
            angle_a_deg,
            angle_b_deg,
            scripted: s,
        } = sched.recipe_mode
        {
            recipe_mode = "two_group".into();
            angle_a = angle_a_deg;
            angle_b = angle_b_deg;
            scripted = s;
        }
        if let Some(v) = raw.take("data", "recipe_mode") {
            recipe_mode = v;
        }
        if let Some(v) = raw.take("data", "two_group_angle_a") {
            angle_a = parse_value("data", "two_group_angle_a", &v)?;
        }
        if let Some(v) = raw.take("data", "two_group_angle_b") {
            angle_b = parse_value("data", "two_group_angle_b", &v)?;
        }
        if let Some(v) = raw.take("data", "two_group_scripted") {
            scripted = parse_bool("data", "two_group_scripted", &v)?;
        }
        sched.recipe_mode = match recipe_mode.as_str() {
            "standard" => RecipeMode::Standard,
            "two_group" => RecipeMode::TwoGroupRotation {
                angle_a_deg: angle_a,
                angle_b_deg: angle_b,
                scripted,
            },
            other => return err(format!("data.recipe_mode = `{other}`")),
        };

        take_into!(raw, "data", "test_clients", cfg.test_clients);
        take_into!(raw, "data", "unseen_fraction", cfg.unseen_fraction);
        take_into!(raw, "data", "label_budget", fed.label_budget);
        take_into!(raw, "data", "eval_fraction", fed.eval_fraction);

        if let Some(v) = raw.take("churn", "events") {
            fed.churn = parse_churn_events(&v)?;
        }

        raw.finish()?;

        fed.schedule.total_rounds = fed.rounds;
        cfg.federation
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if !(0.0..=1.0).contains(&cfg.unseen_fraction) {
            return err("data.unseen_fraction must be in [0, 1]");
        }
        if cfg.test_clients == 0 {
            return err("data.test_clients must be at least 1");
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, overrides)
    }

    /// Canonical snapshot listing every key with its current value.
    pub fn snapshot(&self) -> String {
        let fed = &self.federation;
        let sched = &fed.schedule;
        let (recipe_mode, angle_a, angle_b, scripted) = match sched.recipe_mode {
            RecipeMode::Standard => ("standard", 0.0, 180.0, false),
            RecipeMode::TwoGroupRotation {
                angle_a_deg,
                angle_b_deg,
                scripted,
            } => ("two_group", angle_a_deg, angle_b_deg, scripted),
        };
        let noniid_type = match sched.noniid_type {
            NonIidType::Px => "px",
            NonIidType::Py => "py",
            NonIidType::Pygx => "pygx",
            NonIidType::Pxgy => "pxgy",
        };
        let noniid_level = match sched.noniid_level {
            NonIidLevel::Low => "low",
            NonIidLevel::Medium => "medium",
            NonIidLevel::High => "high",
        };
        let aggregation = match fed.aggregation {
            AggregationKind::Feroma => "feroma",
            AggregationKind::FedAvg => "fedavg",
        };
        let arch = match fed.arch_kind {
            ArchKind::Mlp => "mlp",
            ArchKind::SoftmaxReg => "softmax_reg",
        };
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");

        let mut out = String::new();
        let _ = writeln!(out, "[experiment]");
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(out, "seeds = {seeds}");
        let _ = writeln!(out);
        let _ = writeln!(out, "[federation]");
        let _ = writeln!(out, "rounds = {}", fed.rounds);
        let _ = writeln!(out, "warmup_rounds = {}", fed.warmup_rounds);
        let _ = writeln!(out, "participation_rate = {}", fed.participation_rate);
        let _ = writeln!(out, "aggregation = {aggregation}");
        let _ = writeln!(out, "threshold_enabled = {}", fed.threshold_enabled);
        let _ = writeln!(
            out,
            "threshold_tau = {}",
            fed.threshold_tau
                .map_or_else(|| "auto".to_string(), |t| t.to_string())
        );
        let _ = writeln!(out, "train_distance = {}", fed.train_distance);
        let _ = writeln!(out, "test_distance = {}", fed.test_distance);
        let _ = writeln!(out, "standardize_distances = {}", fed.standardize_distances);
        let _ = writeln!(out);
        let _ = writeln!(out, "[training]");
        let _ = writeln!(out, "learning_rate = {}", fed.train.learning_rate);
        let _ = writeln!(out, "momentum = {}", fed.train.momentum);
        let _ = writeln!(out, "batch_size = {}", fed.train.batch_size);
        let _ = writeln!(out, "local_epochs = {}", fed.train.local_epochs);
        let _ = writeln!(out, "architecture = {arch}");
        let _ = writeln!(out, "hidden_width = {}", fed.hidden_width);
        let _ = writeln!(out);
        let _ = writeln!(out, "[dpe]");
        let _ = writeln!(out, "pca_dim = {}", fed.dpe.pca_dim);
        let _ = writeln!(out, "reference_points = {}", fed.dpe.reference_points);
        let _ = writeln!(out, "masks = {}", fed.dpe.masks);
        let _ = writeln!(out, "mask_prob = {}", fed.dpe.mask_prob);
        let _ = writeln!(out, "epsilon = {}", fed.dpe.epsilon);
        let _ = writeln!(out, "no_dp = {}", fed.dpe.no_dp);
        let _ = writeln!(out, "pca_seed = {}", fed.dpe.pca_seed);
        let _ = writeln!(out);
        let _ = writeln!(out, "[data]");
        let _ = writeln!(out, "clients = {}", sched.clients);
        let _ = writeln!(out, "samples_per_client = {}", sched.samples_per_client);
        let _ = writeln!(out, "feature_dim = {}", sched.feature_dim);
        let _ = writeln!(out, "num_classes = {}", sched.num_classes);
        let _ = writeln!(out, "noniid_type = {noniid_type}");
        let _ = writeln!(out, "noniid_level = {noniid_level}");
        let _ = writeln!(out, "drift_every = {}", sched.drift_every);
        let _ = writeln!(out, "recipe_mode = {recipe_mode}");
        let _ = writeln!(out, "two_group_angle_a = {angle_a}");
        let _ = writeln!(out, "two_group_angle_b = {angle_b}");
        let _ = writeln!(out, "two_group_scripted = {scripted}");
        let _ = writeln!(out, "circle_separation = {}", sched.circle_separation);
        let _ = writeln!(out, "identity_separation = {}", sched.identity_separation);
        let _ = writeln!(out, "color_shift = {}", sched.color_shift);
        let _ = writeln!(out, "test_clients = {}", self.test_clients);
        let _ = writeln!(out, "unseen_fraction = {}", self.unseen_fraction);
        let _ = writeln!(out, "label_budget = {}", fed.label_budget);
        let _ = writeln!(out, "eval_fraction = {}", fed.eval_fraction);
        let _ = writeln!(out);
        let _ = writeln!(out, "[churn]");
        let _ = writeln!(out, "events = {}", churn_events_string(&fed.churn));
        out
    }
}
