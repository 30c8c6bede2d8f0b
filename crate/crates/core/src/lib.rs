//! Federated-learning simulation engine with differentially-private
//! distribution-profile extraction, profile-similarity-driven aggregation,
//! and label-free test-time model assignment, plus a non-IID drift data
//! generator, a FedAvg baseline, and validation harnesses for the
//! fidelity, privacy, and variance guarantees.

pub mod datagen;
pub mod dpe;
pub mod error;
pub mod federation;
pub mod mapping;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod validation;

pub use error::{Error, Result};
