//! Dense vector/matrix primitives, PCA, distances, seeded samplers, and the
//! closed-form distribution-distance oracles used by validation.
//!
//! Everything in this module is a pure function of its inputs (including
//! explicit RNG state), so callers can run from any number of workers.

mod distance;
mod gaussian;
mod matrix;
mod pca;
mod sampling;

pub use distance::{distance, DistanceKind};
pub use gaussian::{
    bi_lipschitz_constants, gaussian_w2_squared, js_distance_discrete, profile_delta_squared,
    DiagonalGaussian,
};
pub use matrix::Matrix;
pub use pca::{fit_shared_pca, PcaProjector};
pub use sampling::{
    bernoulli_mask, laplace_cdf, laplace_draw, sample_laplace, sample_uniform_box, NormalSource,
};
