//! Deterministic, purpose-tagged random streams.
//!
//! Every sampling site in the engine draws from a counter-based generator
//! derived from `(experiment_seed, client_id, round, purpose)`. Streams for
//! different sites are independent, and the same tuple always yields the
//! same stream, so per-client work can run on any number of workers in any
//! order without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a derived stream is used for. Each variant gets its own lane so
/// adding draws at one site never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Model weight initialization.
    Init,
    /// Per-round training data synthesis.
    Data,
    /// Test-client data synthesis.
    TestData,
    /// One-time construction of recipe sets (banks, pools, permutations).
    RecipeSetup,
    /// Per-window recipe assignment.
    RecipeDraw,
    /// Mini-batch shuffling during local training.
    Shuffle,
    /// Train/eval split of a round dataset.
    EvalSplit,
    /// Monte-Carlo subsampling masks.
    Mask,
    /// Laplace sanitization noise.
    Noise,
    /// Synthetic reference points for the shared projector.
    ReferencePoints,
    /// Power-iteration start vectors.
    PowerIteration,
    /// Participant selection.
    Select,
    /// Labeled-subset selection at test time.
    LabelBudget,
    /// Validation-harness trials.
    Trial,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Data => 2,
            Purpose::TestData => 3,
            Purpose::RecipeSetup => 4,
            Purpose::RecipeDraw => 5,
            Purpose::Shuffle => 6,
            Purpose::EvalSplit => 7,
            Purpose::Mask => 8,
            Purpose::Noise => 9,
            Purpose::ReferencePoints => 10,
            Purpose::PowerIteration => 11,
            Purpose::Select => 12,
            Purpose::LabelBudget => 13,
            Purpose::Trial => 14,
        }
    }
}

/// SplitMix64 step; mixes the seed words into key material.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, client, round, purpose)`.
pub fn derive(seed: u64, client: u64, round: u64, purpose: Purpose) -> ChaCha12Rng {
    let mut state = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(client.rotate_left(17))
        .wrapping_add(round.rotate_left(31))
        .wrapping_add(purpose.tag());
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Stream not tied to a particular client or round.
pub fn derive_global(seed: u64, purpose: Purpose) -> ChaCha12Rng {
    derive(seed, u64::MAX, u64::MAX, purpose)
}
