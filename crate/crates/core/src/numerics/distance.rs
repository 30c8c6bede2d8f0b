//! Pairwise vector distances used by the profile mapping.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistanceKind::Euclidean => write!(f, "euclidean"),
            DistanceKind::Cosine => write!(f, "cosine"),
        }
    }
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceKind::Euclidean),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::invalid(format!("unknown distance kind `{other}`"))),
        }
    }
}

pub fn distance(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
            context: "distance operands",
        });
    }
    match kind {
        DistanceKind::Euclidean => Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()),
        DistanceKind::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::UndefinedCosine);
            }
            let d = 1.0 - dot / (na.sqrt() * nb.sqrt());
            Ok(d.clamp(0.0, 2.0))
        }
    }
}
