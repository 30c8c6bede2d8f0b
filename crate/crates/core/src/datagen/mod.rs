//! Per-client, per-round dataset synthesis realizing four non-IID shift
//! types at three severity levels, with a configurable drift schedule.
//!
//! The base data is a `U`-class mixture of unit-variance Gaussian blobs.
//! Each class mean has two parts: a point on a circle in the fixed
//! coordinate pair (0, 1) — the plane all rotation transforms act on — and
//! a class-identity offset along one of the coordinates 2..2+U. Feature
//! skew rotates the circle plane and adds a constant "color" shift along
//! one of the last three coordinates; the other shift types subsample,
//! relabel, or transform per class.

mod idx;

pub use idx::load_idx;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, NormalSource};
use crate::rng::{derive, derive_global, Purpose};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonIidType {
    /// Feature distribution skew: P(X) varies.
    Px,
    /// Label distribution skew: P(Y) varies.
    Py,
    /// Concept shift with identical features, different labels: P(Y|X).
    Pygx,
    /// Concept shift with identical labels, different features: P(X|Y).
    Pxgy,
}

impl std::str::FromStr for NonIidType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "px" => Ok(NonIidType::Px),
            "py" => Ok(NonIidType::Py),
            "pygx" => Ok(NonIidType::Pygx),
            "pxgy" => Ok(NonIidType::Pxgy),
            other => Err(Error::invalid(format!("unknown non-IID type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonIidLevel {
    Low,
    Medium,
    High,
}

impl std::str::FromStr for NonIidLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(NonIidLevel::Low),
            "medium" => Ok(NonIidLevel::Medium),
            "high" => Ok(NonIidLevel::High),
            other => Err(Error::invalid(format!("unknown non-IID level `{other}`"))),
        }
    }
}

/// How recipes are assigned to (client, window) slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RecipeMode {
    /// Draw from the level's full recipe set, independently per window.
    Standard,
    /// Rotation-only recipe set {angle_a, angle_b}. With `scripted`, the
    /// first half of the clients always gets angle_a and the second half
    /// angle_b; otherwise each (client, window) draws one of the two.
    TwoGroupRotation {
        angle_a_deg: f64,
        angle_b_deg: f64,
        scripted: bool,
    },
}

/// A client's feature matrix, labels, and the tag of the distribution that
/// generated it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Stable identifier of the generating distribution; identical recipe
    /// inputs produce identical tags.
    pub distribution_tag: String,
    pub round: u64,
    pub client_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub total_rounds: u64,
    /// Rounds between redraws; 1, 2 and 4 reproduce the reference drift
    /// frequencies (20/20, 10/20, 5/20 drifts in 20 rounds).
    pub drift_every: u64,
    pub noniid_type: NonIidType,
    pub noniid_level: NonIidLevel,
    pub clients: u64,
    pub samples_per_client: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub recipe_mode: RecipeMode,
    /// Separation of the class means on the rotation-plane circle.
    pub circle_separation: f64,
    /// Separation along the per-class identity coordinates.
    pub identity_separation: f64,
    /// Magnitude of the additive "color" shift vectors.
    pub color_shift: f64,
}

impl DriftSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 {
            return Err(Error::invalid("total_rounds must be positive"));
        }
        if self.drift_every == 0 {
            return Err(Error::invalid("drift_every must be positive"));
        }
        if self.clients == 0 {
            return Err(Error::invalid("clients must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        // circle plane (2) + identity coordinates (U) + color coordinates (3)
        if self.feature_dim < self.num_classes + 5 {
            return Err(Error::invalid(format!(
                "feature_dim must be at least num_classes + 5 = {}, got {}",
                self.num_classes + 5,
                self.feature_dim
            )));
        }
        if self.samples_per_client == 0 {
            return Err(Error::invalid("samples_per_client must be positive"));
        }
        Ok(())
    }

    pub fn window(&self, round: u64) -> u64 {
        round / self.drift_every
    }
}

/// Rotation angles available to feature-skew recipes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationDeg(pub f64);

/// Additive shift channel standing in for a color transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Color {
    Original,
    Red,
    Green,
    Blue,
}

impl Color {
    fn name(self) -> &'static str {
        match self {
            Color::Original => "orig",
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    /// Coordinate the shift acts on, counted from the feature tail.
    fn lane(self) -> Option<usize> {
        match self {
            Color::Original => None,
            Color::Red => Some(1),
            Color::Green => Some(2),
            Color::Blue => Some(3),
        }
    }
}

/// Parameters of one generating distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShiftRecipe {
    Px {
        rotation: RotationDeg,
        color: Color,
    },
    Py {
        bank_index: usize,
        bank: Vec<usize>,
    },
    Pygx {
        pool: Vec<usize>,
        /// permutation[i] is the new label of pool[i]; a bijection on the pool.
        permutation: Vec<usize>,
    },
    Pxgy {
        bank_index: usize,
        /// (class, rotation, color) for each transformed class.
        transforms: Vec<(usize, RotationDeg, Color)>,
    },
}

impl ShiftRecipe {
    /// Stable identifier; equal recipes have equal tags.
    pub fn tag(&self) -> String {
        match self {
            ShiftRecipe::Px { rotation, color } => {
                format!("px:rot={}:color={}", rotation.0, color.name())
            }
            ShiftRecipe::Py { bank_index, bank } => {
                let cls: Vec<String> = bank.iter().map(|c| c.to_string()).collect();
                format!("py:bank={}:[{}]", bank_index, cls.join(","))
            }
            ShiftRecipe::Pygx { pool, permutation } => {
                let m: Vec<String> = pool
                    .iter()
                    .zip(permutation)
                    .map(|(a, b)| format!("{a}>{b}"))
                    .collect();
                format!("pygx:{}", m.join(","))
            }
            ShiftRecipe::Pxgy {
                bank_index,
                transforms,
            } => {
                let t: Vec<String> = transforms
                    .iter()
                    .map(|(c, r, col)| format!("{c}:{}:{}", r.0, col.name()))
                    .collect();
                format!("pxgy:bank={}:[{}]", bank_index, t.join(","))
            }
        }
    }
}

/// The full set of recipes a level makes available.
#[derive(Debug, Clone)]
pub struct RecipeSet {
    recipes: Vec<ShiftRecipe>,
}

impl RecipeSet {
    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }

    pub fn get(&self, i: usize) -> &ShiftRecipe {
        &self.recipes[i]
    }
}

fn rotation_set(level: NonIidLevel) -> Vec<f64> {
    match level {
        NonIidLevel::Low | NonIidLevel::High => vec![0.0, 90.0, 180.0, 270.0],
        NonIidLevel::Medium => vec![0.0, 180.0],
    }
}

fn color_set(level: NonIidLevel) -> Vec<Color> {
    match level {
        NonIidLevel::Low => vec![Color::Original],
        NonIidLevel::Medium | NonIidLevel::High => vec![Color::Red, Color::Blue, Color::Green],
    }
}

fn bank_count(level: NonIidLevel) -> usize {
    match level {
        NonIidLevel::Low => 4,
        NonIidLevel::Medium => 6,
        NonIidLevel::High => 8,
    }
}

fn pool_size(level: NonIidLevel) -> usize {
    match level {
        NonIidLevel::Low => 3,
        NonIidLevel::Medium => 4,
        NonIidLevel::High => 5,
    }
}

/// Classes a label-skew bank holds: 2 for up to tens of classes, U/5 for
/// wider label spaces.
fn bank_size(num_classes: usize) -> usize {
    (num_classes / 5).max(2)
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Build the deterministic recipe set for a schedule. Recipes depend only
/// on (seed, type, level, class count), never on the client or round.
pub fn build_recipe_set(schedule: &DriftSchedule) -> Result<RecipeSet> {
    schedule.validate()?;
    let u = schedule.num_classes;
    let level = schedule.noniid_level;
    let mut rng = derive_global(schedule.seed, Purpose::RecipeSetup);

    if let RecipeMode::TwoGroupRotation {
        angle_a_deg,
        angle_b_deg,
        ..
    } = schedule.recipe_mode
    {
        return Ok(RecipeSet {
            recipes: vec![
                ShiftRecipe::Px {
                    rotation: RotationDeg(angle_a_deg),
                    color: Color::Original,
                },
                ShiftRecipe::Px {
                    rotation: RotationDeg(angle_b_deg),
                    color: Color::Original,
                },
            ],
        });
    }

    let recipes = match schedule.noniid_type {
        NonIidType::Px => {
            let mut out = Vec::new();
            for rot in rotation_set(level) {
                for color in color_set(level) {
                    out.push(ShiftRecipe::Px {
                        rotation: RotationDeg(rot),
                        color,
                    });
                }
            }
            out
        }
        NonIidType::Py => {
            let size = bank_size(u);
            let wanted = bank_count(level);
            let available = binomial(u, size);
            let n = wanted.min(available);
            let mut banks: Vec<Vec<usize>> = Vec::new();
            let mut all: Vec<usize> = (0..u).collect();
            let mut guard = 0;
            while banks.len() < n {
                all.shuffle(&mut rng);
                let mut bank: Vec<usize> = all[..size].to_vec();
                bank.sort_unstable();
                if !banks.contains(&bank) {
                    banks.push(bank);
                }
                guard += 1;
                if guard > 10_000 {
                    break;
                }
            }
            banks
                .into_iter()
                .enumerate()
                .map(|(bank_index, bank)| ShiftRecipe::Py { bank_index, bank })
                .collect()
        }
        NonIidType::Pygx => {
            let size = pool_size(level).min(u);
            let mut all: Vec<usize> = (0..u).collect();
            all.shuffle(&mut rng);
            let mut pool: Vec<usize> = all[..size].to_vec();
            pool.sort_unstable();
            // one recipe per distinct permutation of the shared pool; the
            // number of distinct recipes grows with the pool size
            let mut perms = Vec::new();
            permutations(&pool, &mut vec![], &mut perms);
            perms
                .into_iter()
                .map(|permutation| ShiftRecipe::Pygx {
                    pool: pool.clone(),
                    permutation,
                })
                .collect()
        }
        NonIidType::Pxgy => {
            let n = bank_count(level);
            let affected = ((4 * u) / 5).max(1);
            let rotations = [0.0, 90.0, 180.0, 270.0];
            let colors = [Color::Red, Color::Green, Color::Blue];
            let mut out = Vec::new();
            for bank_index in 0..n {
                let transforms: Vec<(usize, RotationDeg, Color)> = (0..affected)
                    .map(|class| {
                        let rot = rotations[rng.gen_range(0..rotations.len())];
                        let color = colors[rng.gen_range(0..colors.len())];
                        (class, RotationDeg(rot), color)
                    })
                    .collect();
                out.push(ShiftRecipe::Pxgy {
                    bank_index,
                    transforms,
                });
            }
            out
        }
    };
    Ok(RecipeSet { recipes })
}

fn permutations(pool: &[usize], prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() == pool.len() {
        out.push(prefix.clone());
        return;
    }
    for &c in pool {
        if !prefix.contains(&c) {
            prefix.push(c);
            permutations(pool, prefix, out);
            prefix.pop();
        }
    }
}

/// Recipe assigned to `(client, window)`.
pub fn recipe_for(
    schedule: &DriftSchedule,
    recipes: &RecipeSet,
    client_id: u64,
    window: u64,
) -> ShiftRecipe {
    match schedule.recipe_mode {
        RecipeMode::TwoGroupRotation { scripted: true, .. } => {
            let group = if client_id < schedule.clients / 2 { 0 } else { 1 };
            recipes.get(group).clone()
        }
        _ => {
            let mut rng = derive(schedule.seed, client_id, window, Purpose::RecipeDraw);
            recipes.get(rng.gen_range(0..recipes.len())).clone()
        }
    }
}

/// Per-class detuning of the circle angles. Keeps the constellation
/// asymmetric under the quarter-turn rotation set: a rotated class lands
/// close to (confusable with) another class but never exactly on it, so
/// rotated marginals stay distinguishable by their moments.
const ANGLE_DETUNE: f64 = 0.1;

/// Class mean in feature space: a circle point in the rotation plane plus
/// an identity offset on coordinate 2 + class.
fn class_mean(schedule: &DriftSchedule, class: usize) -> Vec<f64> {
    let z = schedule.feature_dim;
    let u = schedule.num_classes;
    let mut mean = vec![0.0; z];
    let theta =
        2.0 * std::f64::consts::PI * class as f64 / u as f64 + 0.3 + ANGLE_DETUNE * class as f64;
    mean[0] = schedule.circle_separation * theta.cos();
    mean[1] = schedule.circle_separation * theta.sin();
    mean[2 + class] = schedule.identity_separation;
    mean
}

/// In-place rotation of the (0, 1) coordinate pair.
fn rotate_plane(row: &mut [f64], angle_deg: f64) {
    let a = angle_deg.to_radians();
    let (s, c) = a.sin_cos();
    let (x, y) = (row[0], row[1]);
    row[0] = c * x - s * y;
    row[1] = s * x + c * y;
}

fn apply_color(row: &mut [f64], color: Color, magnitude: f64) {
    if let Some(lane) = color.lane() {
        let idx = row.len() - lane;
        row[idx] += magnitude;
    }
}

/// Draw base samples: balanced class labels, unit-variance blobs.
fn base_samples(
    schedule: &DriftSchedule,
    classes: &[usize],
    n: usize,
    rng: &mut impl Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut normal = NormalSource::new();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = classes[i % classes.len()];
        let mut row = class_mean(schedule, class);
        for v in row.iter_mut() {
            *v += normal.draw(rng);
        }
        rows.push(row);
        labels.push(class);
    }
    (rows, labels)
}

/// Apply a recipe to freshly drawn base data.
fn apply_recipe(
    schedule: &DriftSchedule,
    recipe: &ShiftRecipe,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let u = schedule.num_classes;
    let all_classes: Vec<usize> = (0..u).collect();
    match recipe {
        ShiftRecipe::Px { rotation, color } => {
            let (mut rows, labels) = base_samples(schedule, &all_classes, n, rng);
            for row in rows.iter_mut() {
                rotate_plane(row, rotation.0);
                apply_color(row, *color, schedule.color_shift);
            }
            Ok((rows, labels))
        }
        ShiftRecipe::Py { bank, .. } => {
            if schedule.samples_per_client < u {
                return Err(Error::BankUnpopulated(format!(
                    "samples_per_client {} < num_classes {}",
                    schedule.samples_per_client, u
                )));
            }
            Ok(base_samples(schedule, bank, n, rng))
        }
        ShiftRecipe::Pygx { pool, permutation } => {
            let (rows, mut labels) = base_samples(schedule, &all_classes, n, rng);
            for label in labels.iter_mut() {
                if let Some(pos) = pool.iter().position(|c| c == label) {
                    *label = permutation[pos];
                }
            }
            Ok((rows, labels))
        }
        ShiftRecipe::Pxgy { transforms, .. } => {
            let (mut rows, labels) = base_samples(schedule, &all_classes, n, rng);
            for (row, label) in rows.iter_mut().zip(&labels) {
                if let Some((_, rot, color)) = transforms.iter().find(|(c, _, _)| c == label) {
                    rotate_plane(row, rot.0);
                    apply_color(row, *color, schedule.color_shift);
                }
            }
            Ok((rows, labels))
        }
    }
}

/// Apply a recipe's operations to an existing pool (for example an IDX
/// import): feature skew and per-class feature skew transform the rows,
/// label skew keeps only the bank's classes, and label permutation remaps
/// through the pool permutation. Rows are untouched otherwise.
pub fn apply_recipe_to_pool(
    recipe: &ShiftRecipe,
    pool: &ClientDataset,
    color_shift: f64,
) -> Result<ClientDataset> {
    let mut rows: Vec<Vec<f64>> = pool.features.iter_rows().map(|r| r.to_vec()).collect();
    let mut labels = pool.labels.clone();
    match recipe {
        ShiftRecipe::Px { rotation, color } => {
            for row in rows.iter_mut() {
                rotate_plane(row, rotation.0);
                apply_color(row, *color, color_shift);
            }
        }
        ShiftRecipe::Py { bank, .. } => {
            let keep: Vec<usize> = (0..labels.len())
                .filter(|&i| bank.contains(&labels[i]))
                .collect();
            if keep.is_empty() {
                return Err(Error::BankUnpopulated(
                    "pool holds no samples of the bank's classes".into(),
                ));
            }
            rows = keep.iter().map(|&i| rows[i].clone()).collect();
            labels = keep.iter().map(|&i| labels[i]).collect();
        }
        ShiftRecipe::Pygx { pool: perm_pool, permutation } => {
            for label in labels.iter_mut() {
                if let Some(pos) = perm_pool.iter().position(|c| c == label) {
                    *label = permutation[pos];
                }
            }
        }
        ShiftRecipe::Pxgy { transforms, .. } => {
            for (row, label) in rows.iter_mut().zip(&labels) {
                if let Some((_, rot, color)) = transforms.iter().find(|(c, _, _)| c == label) {
                    rotate_plane(row, rot.0);
                    apply_color(row, *color, color_shift);
                }
            }
        }
    }
    Ok(ClientDataset {
        features: Matrix::from_rows(&rows)?,
        labels,
        distribution_tag: format!("{}+{}", pool.distribution_tag, recipe.tag()),
        round: pool.round,
        client_id: pool.client_id,
    })
}

/// Dataset for `(client, round)` under the schedule's drift windows.
/// Repeated calls with the same inputs are bit-identical.
pub fn generate_round(
    schedule: &DriftSchedule,
    recipes: &RecipeSet,
    round: u64,
    client_id: u64,
) -> Result<ClientDataset> {
    if round >= schedule.total_rounds {
        return Err(Error::invalid(format!(
            "round {round} outside schedule of {} rounds",
            schedule.total_rounds
        )));
    }
    let window = schedule.window(round);
    let recipe = recipe_for(schedule, recipes, client_id, window);
    let mut rng = derive(schedule.seed, client_id, round, Purpose::Data);
    let (rows, labels) = apply_recipe(schedule, &recipe, schedule.samples_per_client, &mut rng)?;
    Ok(ClientDataset {
        features: Matrix::from_rows(&rows)?,
        labels,
        distribution_tag: recipe.tag(),
        round,
        client_id,
    })
}

/// Test clients: `floor(count * unseen_fraction)` of them draw a recipe
/// whose tag never appeared in training; the rest reuse a final-window
/// recipe of a training client.
pub fn generate_test_clients(
    schedule: &DriftSchedule,
    recipes: &RecipeSet,
    count: usize,
    unseen_fraction: f64,
) -> Result<Vec<ClientDataset>> {
    if count == 0 {
        return Err(Error::invalid("test client count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&unseen_fraction) {
        return Err(Error::invalid("unseen_fraction must be in [0, 1]"));
    }

    // every tag used in any training window, and the final-window recipes
    let mut all_training_tags = Vec::new();
    let mut final_recipes = Vec::new();
    let last_window = schedule.window(schedule.total_rounds - 1);
    for client in 0..schedule.clients {
        for window in 0..=last_window {
            let recipe = recipe_for(schedule, recipes, client, window);
            let tag = recipe.tag();
            if !all_training_tags.contains(&tag) {
                all_training_tags.push(tag);
            }
            if window == last_window {
                final_recipes.push(recipe);
            }
        }
    }

    let unseen_count = (count as f64 * unseen_fraction).floor() as usize;
    let mut out = Vec::with_capacity(count);
    for test_id in 0..count {
        let unseen = test_id < unseen_count;
        let mut rng = derive(schedule.seed, test_id as u64, 0, Purpose::TestData);
        let recipe = if unseen {
            let mut found = None;
            for _ in 0..10_000 {
                let candidate = recipes.get(rng.gen_range(0..recipes.len())).clone();
                if !all_training_tags.contains(&candidate.tag()) {
                    found = Some(candidate);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::invalid(
                    "no unseen recipes available: training covered the whole recipe space",
                )
            })?
        } else {
            final_recipes[rng.gen_range(0..final_recipes.len())].clone()
        };
        let (rows, labels) =
            apply_recipe(schedule, &recipe, schedule.samples_per_client, &mut rng)?;
        out.push(ClientDataset {
            features: Matrix::from_rows(&rows)?,
            labels,
            distribution_tag: recipe.tag(),
            round: schedule.total_rounds,
            client_id: test_id as u64,
        });
    }
    Ok(out)
}
