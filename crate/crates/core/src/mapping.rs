//! Profile-distance mapping: softmax association weights, thresholding
//! with renormalization, size-combined weighted aggregation, the FedAvg
//! baseline, and test-time model assignment.

use crate::datagen::ClientDataset;
use crate::dpe::DistributionProfile;
use crate::error::{Error, Result};
use crate::model::{evaluate, ModelParams};
use crate::numerics::{distance, DistanceKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type ClientId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Multiple weights survived: aggregate models of similar distributions.
    Clustered,
    /// Exactly one survivor: inherit the single most similar model.
    Personalized,
    /// No sufficiently similar profile: uniform average of all models.
    GlobalFallback,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Clustered => write!(f, "clustered"),
            Strategy::Personalized => write!(f, "personalized"),
            Strategy::GlobalFallback => write!(f, "global_fallback"),
        }
    }
}

/// Normalized association of one client to the previous round's
/// participants, with the strategy its support implies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssociationWeights {
    pub client_id: ClientId,
    pub round: u64,
    pub weights: BTreeMap<ClientId, f64>,
    pub strategy: Strategy,
    pub threshold_used: Option<f64>,
}

impl AssociationWeights {
    /// Support: participants with nonzero weight.
    pub fn support(&self) -> Vec<ClientId> {
        self.weights
            .iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn sum(&self) -> f64 {
        self.weights.values().sum()
    }

    /// Uniform weights over the given participants, marked as fallback.
    pub fn uniform_fallback(
        client_id: ClientId,
        round: u64,
        participants: &[ClientId],
        threshold_used: Option<f64>,
    ) -> Self {
        let w = 1.0 / participants.len() as f64;
        AssociationWeights {
            client_id,
            round,
            weights: participants.iter().map(|id| (*id, w)).collect(),
            strategy: Strategy::GlobalFallback,
            threshold_used,
        }
    }
}

fn strategy_for_support(support: usize) -> Strategy {
    if support > 1 {
        Strategy::Clustered
    } else {
        Strategy::Personalized
    }
}

/// Distance between two full profiles: the marginal block concatenated
/// with the class blocks present on both sides. Euclidean distances are
/// rescaled by sqrt(total blocks / active blocks) so that pairs with few
/// shared classes stay comparable to fully overlapping pairs; cosine is
/// scale-free and needs no correction.
pub fn profile_distance(
    a: &DistributionProfile,
    b: &DistributionProfile,
    kind: DistanceKind,
) -> Result<f64> {
    if a.latent_dim() != b.latent_dim() || a.num_classes() != b.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
            context: "profile pair",
        });
    }
    let mut va = a.marginal_vector();
    let mut vb = b.marginal_vector();
    let total_blocks = 1 + a.num_classes();
    let mut active_blocks = 1;
    for class in 0..a.num_classes() {
        if a.class_present[class] && b.class_present[class] {
            va.extend_from_slice(&a.class_mean[class]);
            va.extend_from_slice(&a.class_var[class]);
            vb.extend_from_slice(&b.class_mean[class]);
            vb.extend_from_slice(&b.class_var[class]);
            active_blocks += 1;
        }
    }
    let d = distance(&va, &vb, kind)?;
    Ok(match kind {
        DistanceKind::Euclidean => d * (total_blocks as f64 / active_blocks as f64).sqrt(),
        DistanceKind::Cosine => d,
    })
}

/// Raw softmax weights over negated distances (shift-invariant by
/// construction). With `standardize`, distances are z-scored first.
pub fn softmax_weights(
    current: &DistributionProfile,
    previous: &[(ClientId, &DistributionProfile)],
    kind: DistanceKind,
    standardize: bool,
) -> Result<BTreeMap<ClientId, f64>> {
    if previous.is_empty() {
        return Err(Error::EmptyInput("previous-round profiles"));
    }
    let mut dists = Vec::with_capacity(previous.len());
    for (id, p) in previous {
        dists.push((*id, profile_distance(current, p, kind)?));
    }
    if standardize && dists.len() > 1 {
        let mean = dists.iter().map(|(_, d)| d).sum::<f64>() / dists.len() as f64;
        let var = dists
            .iter()
            .map(|(_, d)| (d - mean) * (d - mean))
            .sum::<f64>()
            / dists.len() as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            dists.iter_mut().for_each(|(_, d)| *d = (*d - mean) / sd);
        }
    }
    let min = dists.iter().map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
    let mut weights: BTreeMap<ClientId, f64> = dists
        .iter()
        .map(|(id, d)| (*id, (-(d - min)).exp()))
        .collect();
    let total: f64 = weights.values().sum();
    weights.values_mut().for_each(|w| *w /= total);
    Ok(weights)
}

/// Zero weights below tau and renormalize the survivors. With no survivor
/// the association falls back to a uniform average over all participants.
pub fn apply_threshold(
    raw: &BTreeMap<ClientId, f64>,
    tau: f64,
    client_id: ClientId,
    round: u64,
) -> Result<AssociationWeights> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold tau {tau} outside [0, 1)")));
    }
    let survivors: Vec<(ClientId, f64)> = raw
        .iter()
        .filter(|(_, w)| **w >= tau)
        .map(|(id, w)| (*id, *w))
        .collect();
    if survivors.is_empty() {
        let participants: Vec<ClientId> = raw.keys().copied().collect();
        return Ok(AssociationWeights::uniform_fallback(
            client_id,
            round,
            &participants,
            Some(tau),
        ));
    }
    let total: f64 = survivors.iter().map(|(_, w)| w).sum();
    let mut weights: BTreeMap<ClientId, f64> = raw.keys().map(|id| (*id, 0.0)).collect();
    for (id, w) in &survivors {
        weights.insert(*id, w / total);
    }
    Ok(AssociationWeights {
        client_id,
        round,
        weights,
        strategy: strategy_for_support(survivors.len()),
        threshold_used: Some(tau),
    })
}

/// Wrap raw weights without thresholding.
pub fn without_threshold(
    raw: &BTreeMap<ClientId, f64>,
    client_id: ClientId,
    round: u64,
) -> AssociationWeights {
    let support = raw.values().filter(|w| **w > 0.0).count();
    AssociationWeights {
        client_id,
        round,
        weights: raw.clone(),
        strategy: strategy_for_support(support),
        threshold_used: None,
    }
}

/// Fold data-size weighting into the association: final_j is proportional
/// to w_j * s_j, renormalized.
pub fn combine_with_size(
    weights: &AssociationWeights,
    sizes: &BTreeMap<ClientId, usize>,
) -> Result<AssociationWeights> {
    let mut combined = weights.clone();
    let mut total = 0.0;
    for (id, w) in combined.weights.iter_mut() {
        if *w > 0.0 {
            let s = *sizes.get(id).ok_or(Error::MissingSize(*id))? as f64;
            *w *= s;
            total += *w;
        }
    }
    if total <= 0.0 {
        return Err(Error::invalid("size-combined weights sum to zero"));
    }
    combined.weights.values_mut().for_each(|w| *w /= total);
    Ok(combined)
}

/// Convex combination of the previous-round models under the final weights.
pub fn aggregate(
    weights: &AssociationWeights,
    models: &BTreeMap<ClientId, ModelParams>,
) -> Result<ModelParams> {
    let mut iter = weights.weights.iter().filter(|(_, w)| **w > 0.0);
    let (first_id, _) = iter.next().ok_or(Error::EmptyInput("aggregation weights"))?;
    let first = models
        .get(first_id)
        .ok_or(Error::MissingSize(*first_id))?;
    let arch = first.arch;
    let mut theta = vec![0.0; first.param_count()];
    for (id, w) in weights.weights.iter().filter(|(_, w)| **w > 0.0) {
        let m = models.get(id).ok_or(Error::MissingSize(*id))?;
        if m.arch != arch {
            return Err(Error::ArchMismatch);
        }
        for (acc, t) in theta.iter_mut().zip(&m.theta) {
            *acc += w * t;
        }
    }
    Ok(ModelParams { arch, theta })
}

/// Data-size-weighted global average: theta = sum_k p_k theta_k with
/// p_k = s_k / sum_j s_j.
pub fn fedavg(models: &[(ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = models.first().ok_or(Error::EmptyInput("fedavg models"))?;
    let arch = first.arch;
    let total: usize = models.iter().map(|(_, s)| s).sum();
    if total == 0 {
        return Err(Error::invalid("fedavg sizes must be positive"));
    }
    let mut theta = vec![0.0; first.param_count()];
    for (m, s) in models {
        if m.arch != arch {
            return Err(Error::ArchMismatch);
        }
        let p = *s as f64 / total as f64;
        for (acc, t) in theta.iter_mut().zip(&m.theta) {
            *acc += p * t;
        }
    }
    Ok(ModelParams { arch, theta })
}

/// Nearest-neighbor assignment over the stored marginal subvectors; ties
/// break to the lowest participant id. No gradient steps are taken.
pub fn assign_test_model<'a>(
    test_marginal: &[f64],
    finals: &'a BTreeMap<ClientId, (DistributionProfile, ModelParams)>,
    kind: DistanceKind,
) -> Result<(ClientId, &'a ModelParams)> {
    if finals.is_empty() {
        return Err(Error::EmptyInput("final-round profiles"));
    }
    let mut best: Option<(ClientId, f64)> = None;
    for (id, (profile, _)) in finals {
        let d = distance(test_marginal, &profile.marginal_vector(), kind)?;
        // BTreeMap iterates in ascending id order, so strict improvement
        // keeps the lowest id on ties
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((*id, d)),
        }
    }
    let (id, _) = best.unwrap();
    Ok((id, &finals[&id].1))
}

/// Pick the final-round model with the best accuracy on a small labeled
/// set; the route for concept shifts where label-free matching cannot
/// work. Ties break to the lowest id.
pub fn associate_with_labels<'a>(
    labeled: &ClientDataset,
    finals: &'a BTreeMap<ClientId, ModelParams>,
) -> Result<(ClientId, &'a ModelParams)> {
    if finals.is_empty() {
        return Err(Error::EmptyInput("final-round models"));
    }
    let mut best: Option<(ClientId, f64)> = None;
    for (id, model) in finals {
        let acc = evaluate(model, labeled)?.accuracy;
        match best {
            Some((_, ba)) if acc <= ba => {}
            _ => best = Some((*id, acc)),
        }
    }
    let (id, _) = best.unwrap();
    Ok((id, &finals[&id]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::numerics::Matrix;

    fn profile(id: u64, marginal_mean: Vec<f64>) -> DistributionProfile {
        let l = marginal_mean.len();
        DistributionProfile {
            marginal_mean,
            marginal_var: vec![1.0; l],
            class_mean: vec![],
            class_var: vec![],
            class_present: vec![],
            epsilon_used: f64::INFINITY,
            sample_count: 10,
            round: 0,
            client_id: id,
        }
    }

    fn raw_weights(pairs: &[(u64, f64)]) -> BTreeMap<ClientId, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn equidistant_profiles_give_uniform_weights() {
        let current = profile(0, vec![0.0, 0.0]);
        let p1 = profile(1, vec![1.0, 0.0]);
        let p2 = profile(2, vec![0.0, 1.0]);
        let p3 = profile(3, vec![-1.0, 0.0]);
        let prev: Vec<(u64, &DistributionProfile)> = vec![(1, &p1), (2, &p2), (3, &p3)];
        let w = softmax_weights(&current, &prev, DistanceKind::Euclidean, false).unwrap();
        for v in w.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn twenty_equidistant_clients_weigh_five_percent() {
        let current = profile(0, vec![0.0, 0.0]);
        let prevs: Vec<DistributionProfile> = (0..20)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / 20.0;
                profile(i, vec![angle.cos(), angle.sin()])
            })
            .collect();
        let refs: Vec<(u64, &DistributionProfile)> =
            prevs.iter().enumerate().map(|(i, p)| (i as u64, p)).collect();
        let w = softmax_weights(&current, &refs, DistanceKind::Euclidean, false).unwrap();
        for v in w.values() {
            assert!((v - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn two_distances_zero_and_ln2_give_two_thirds_one_third() {
        // hand evaluation: exp(0) = 1, exp(-ln 2) = 0.5, normalized (2/3, 1/3)
        let current = profile(0, vec![0.0]);
        let q1 = profile(1, vec![0.0]);
        let q2 = profile(2, vec![(2.0_f64).ln()]);
        let prev: Vec<(u64, &DistributionProfile)> = vec![(1, &q1), (2, &q2)];
        let w = softmax_weights(&current, &prev, DistanceKind::Euclidean, false).unwrap();
        assert!((w[&1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[&2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_renormalizes_survivors() {
        let raw = raw_weights(&[(1, 0.5), (2, 0.3), (3, 0.2)]);
        let out = apply_threshold(&raw, 0.25, 0, 1).unwrap();
        assert!((out.weights[&1] - 0.625).abs() < 1e-12);
        assert!((out.weights[&2] - 0.375).abs() < 1e-12);
        assert_eq!(out.weights[&3], 0.0);
        assert_eq!(out.strategy, Strategy::Clustered);
    }

    #[test]
    fn single_survivor_is_personalized() {
        let raw = raw_weights(&[(1, 0.9), (2, 0.05), (3, 0.05)]);
        let out = apply_threshold(&raw, 0.25, 0, 1).unwrap();
        assert_eq!(out.weights[&1], 1.0);
        assert_eq!(out.strategy, Strategy::Personalized);
    }

    #[test]
    fn no_survivor_falls_back_to_uniform() {
        let raw: BTreeMap<u64, f64> = (0..20).map(|i| (i, 0.05)).collect();
        let out = apply_threshold(&raw, 0.06, 0, 1).unwrap();
        assert_eq!(out.strategy, Strategy::GlobalFallback);
        for w in out.weights.values() {
            assert!((w - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_tau_errors() {
        let raw = raw_weights(&[(1, 1.0)]);
        assert!(apply_threshold(&raw, -0.1, 0, 0).is_err());
        assert!(apply_threshold(&raw, 1.0, 0, 0).is_err());
    }

    #[test]
    fn combine_with_equal_sizes_is_identity() {
        let raw = raw_weights(&[(1, 0.25), (2, 0.75)]);
        let aw = without_threshold(&raw, 0, 1);
        let sizes: BTreeMap<u64, usize> = [(1, 100), (2, 100)].into_iter().collect();
        let out = combine_with_size(&aw, &sizes).unwrap();
        assert!((out.weights[&1] - 0.25).abs() < 1e-12);
        assert!((out.weights[&2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn combine_with_sizes_products_and_renormalizes() {
        let raw = raw_weights(&[(1, 0.5), (2, 0.5)]);
        let aw = without_threshold(&raw, 0, 1);
        let sizes: BTreeMap<u64, usize> = [(1, 100), (2, 300)].into_iter().collect();
        let out = combine_with_size(&aw, &sizes).unwrap();
        assert!((out.weights[&1] - 0.25).abs() < 1e-12);
        assert!((out.weights[&2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn combine_single_nonzero_weight_ignores_sizes() {
        let raw = raw_weights(&[(1, 1.0), (2, 0.0)]);
        let aw = without_threshold(&raw, 0, 1);
        let sizes: BTreeMap<u64, usize> = [(1, 7), (2, 9000)].into_iter().collect();
        let out = combine_with_size(&aw, &sizes).unwrap();
        assert_eq!(out.weights[&1], 1.0);
        assert_eq!(out.weights[&2], 0.0);
    }

    #[test]
    fn combine_missing_size_errors() {
        let raw = raw_weights(&[(1, 1.0)]);
        let aw = without_threshold(&raw, 0, 1);
        let sizes: BTreeMap<u64, usize> = BTreeMap::new();
        assert!(matches!(
            combine_with_size(&aw, &sizes),
            Err(Error::MissingSize(1))
        ));
    }

    fn model(theta: Vec<f64>) -> ModelParams {
        ModelParams {
            arch: Arch::SoftmaxReg {
                input_dim: 1,
                num_classes: 2,
            },
            theta: {
                let mut t = theta;
                t.resize(4, 0.0);
                t
            },
        }
    }

    #[test]
    fn aggregate_weight_one_copies_the_model() {
        let models: BTreeMap<u64, ModelParams> =
            [(1, model(vec![1.0, 3.0])), (2, model(vec![9.0, 9.0]))]
                .into_iter()
                .collect();
        let aw = without_threshold(&raw_weights(&[(1, 1.0), (2, 0.0)]), 0, 1);
        let out = aggregate(&aw, &models).unwrap();
        assert_eq!(out.theta, models[&1].theta);
    }

    #[test]
    fn aggregate_midpoint() {
        let models: BTreeMap<u64, ModelParams> =
            [(1, model(vec![1.0, 3.0])), (2, model(vec![3.0, 5.0]))]
                .into_iter()
                .collect();
        let aw = without_threshold(&raw_weights(&[(1, 0.5), (2, 0.5)]), 0, 1);
        let out = aggregate(&aw, &models).unwrap();
        assert_eq!(&out.theta[..2], &[2.0, 4.0]);
    }

    #[test]
    fn fedavg_single_model_is_itself() {
        let m = model(vec![4.0, 2.0]);
        let out = fedavg(&[(m.clone(), 100)]).unwrap();
        assert_eq!(out.theta, m.theta);
    }

    #[test]
    fn fedavg_equal_sizes_is_mean() {
        let out = fedavg(&[(model(vec![0.0, 0.0]), 10), (model(vec![2.0, 4.0]), 10)]).unwrap();
        assert_eq!(&out.theta[..2], &[1.0, 2.0]);
    }

    #[test]
    fn fedavg_weighted_mean() {
        let out = fedavg(&[(model(vec![4.0, 0.0]), 1), (model(vec![0.0, 4.0]), 3)]).unwrap();
        assert!((out.theta[0] - 1.0).abs() < 1e-12);
        assert!((out.theta[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fedavg_empty_errors() {
        assert!(fedavg(&[]).is_err());
    }

    #[test]
    fn uniform_aggregate_equals_fedavg() {
        let models: Vec<(ModelParams, usize)> = (0..5)
            .map(|i| (model(vec![i as f64, 2.0 * i as f64]), 50))
            .collect();
        let map: BTreeMap<u64, ModelParams> = models
            .iter()
            .enumerate()
            .map(|(i, (m, _))| (i as u64, m.clone()))
            .collect();
        let raw: BTreeMap<u64, f64> = (0..5).map(|i| (i, 0.2)).collect();
        let aw = without_threshold(&raw, 0, 1);
        let sizes: BTreeMap<u64, usize> = (0..5).map(|i| (i, 50)).collect();
        let combined = combine_with_size(&aw, &sizes).unwrap();
        let a = aggregate(&combined, &map).unwrap();
        let b = fedavg(&models).unwrap();
        for (x, y) in a.theta.iter().zip(&b.theta) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_picks_nearest_and_breaks_ties_low() {
        let finals: BTreeMap<u64, (DistributionProfile, ModelParams)> = [
            (3, (profile(3, vec![1.0, 0.0]), model(vec![3.0]))),
            (5, (profile(5, vec![2.0, 0.0]), model(vec![5.0]))),
            (7, (profile(7, vec![1.0, 0.0]), model(vec![7.0]))),
        ]
        .into_iter()
        .collect();
        let test = profile(0, vec![1.0, 0.0]).marginal_vector();
        let (id, m) = assign_test_model(&test, &finals, DistanceKind::Euclidean).unwrap();
        // ids 3 and 7 tie at distance zero; the lower id wins
        assert_eq!(id, 3);
        assert_eq!(m.theta[0], 3.0);
    }

    #[test]
    fn label_association_prefers_accurate_model() {
        let features = Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let labeled = ClientDataset {
            features,
            labels: vec![1, 0],
            distribution_tag: "t".into(),
            round: 0,
            client_id: 0,
        };
        // model A: w = [[ -1 ], [ 1 ]] predicts class 1 for x > 0
        let good = ModelParams {
            arch: Arch::SoftmaxReg {
                input_dim: 1,
                num_classes: 2,
            },
            theta: vec![-1.0, 1.0, 0.0, 0.0],
        };
        let bad = ModelParams {
            arch: Arch::SoftmaxReg {
                input_dim: 1,
                num_classes: 2,
            },
            theta: vec![1.0, -1.0, 0.0, 0.0],
        };
        let finals: BTreeMap<u64, ModelParams> =
            [(1, bad), (2, good)].into_iter().collect();
        let (id, _) = associate_with_labels(&labeled, &finals).unwrap();
        assert_eq!(id, 2);

        let single: BTreeMap<u64, ModelParams> =
            [(9, finals[&2].clone())].into_iter().collect();
        let (id, _) = associate_with_labels(&labeled, &single).unwrap();
        assert_eq!(id, 9);
    }

    #[test]
    fn shift_invariance_of_softmax() {
        // adding a constant to every distance must leave weights unchanged
        let current = profile(0, vec![0.0, 0.0]);
        let p1 = profile(1, vec![0.5, 0.0]);
        let p2 = profile(2, vec![0.0, 1.5]);
        let prev: Vec<(u64, &DistributionProfile)> = vec![(1, &p1), (2, &p2)];
        let w1 = softmax_weights(&current, &prev, DistanceKind::Euclidean, false).unwrap();
        // shifting all profiles by the same translation changes both
        // distances equally under Euclidean
        let q0 = profile(0, vec![10.0, 0.0]);
        let q1 = profile(1, vec![10.5, 0.0]);
        let q2 = profile(2, vec![10.0, 1.5]);
        let prev2: Vec<(u64, &DistributionProfile)> = vec![(1, &q1), (2, &q2)];
        let w2 = softmax_weights(&q0, &prev2, DistanceKind::Euclidean, false).unwrap();
        for id in [1u64, 2] {
            assert!((w1[&id] - w2[&id]).abs() < 1e-12);
        }
    }

    #[test]
    fn class_masked_distance_ignores_one_sided_blocks() {
        let mut a = profile(0, vec![0.0, 0.0]);
        let mut b = profile(1, vec![0.0, 0.0]);
        a.class_mean = vec![vec![1.0, 1.0], vec![9.0, 9.0]];
        a.class_var = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        a.class_present = vec![true, true];
        b.class_mean = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        b.class_var = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        b.class_present = vec![true, false];
        // class 1 present only on one side: its big disagreement must not count
        let d = profile_distance(&a, &b, DistanceKind::Euclidean).unwrap();
        assert!(d < 1e-12, "distance {d}");
    }
}
