//! Property tests over randomized instances of the engine's invariants.

use feroma_core::datagen::{
    build_recipe_set, generate_round, DriftSchedule, NonIidLevel, NonIidType, RecipeMode,
};
use feroma_core::mapping::{apply_threshold, without_threshold, ClientId, Strategy as AggStrategy};
use feroma_core::model::{Arch, ModelParams};
use feroma_core::numerics::{
    bi_lipschitz_constants, gaussian_w2_squared, profile_delta_squared, DiagonalGaussian,
};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn gaussian_strategy(dim: usize) -> impl Strategy<Value = DiagonalGaussian> {
    (
        prop::collection::vec(-3.0..3.0f64, dim),
        prop::collection::vec(0.5..2.0f64, dim),
    )
        .prop_map(|(mean, var)| DiagonalGaussian::new(mean, var).unwrap())
}

fn weight_strategy() -> impl Strategy<Value = BTreeMap<ClientId, f64>> {
    prop::collection::vec(0.01..1.0f64, 2..12).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        raw.iter()
            .enumerate()
            .map(|(i, w)| (i as ClientId, w / total))
            .collect()
    })
}

proptest! {
    #[test]
    fn w2_is_a_squared_metric(
        p in gaussian_strategy(6),
        q in gaussian_strategy(6),
        r in gaussian_strategy(6),
    ) {
        let pq = gaussian_w2_squared(&p, &q).unwrap();
        let qp = gaussian_w2_squared(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() < 1e-12, "symmetry");
        prop_assert!(gaussian_w2_squared(&p, &p).unwrap() == 0.0, "identity");
        let (dpq, dqr, dpr) = (
            pq.sqrt(),
            gaussian_w2_squared(&q, &r).unwrap().sqrt(),
            gaussian_w2_squared(&p, &r).unwrap().sqrt(),
        );
        prop_assert!(dpr <= dpq + dqr + 1e-9, "triangle: {dpr} > {dpq} + {dqr}");
    }

    #[test]
    fn bi_lipschitz_bound_holds_exactly(
        p in gaussian_strategy(10),
        q in gaussian_strategy(10),
    ) {
        let (c_minus, c_plus) = bi_lipschitz_constants(0.5, 2.0);
        let delta = profile_delta_squared(&p, &q).unwrap().sqrt();
        let w2 = gaussian_w2_squared(&p, &q).unwrap().sqrt();
        let slack = 1e-12 * (1.0 + delta);
        prop_assert!(w2 >= c_minus * delta - slack);
        prop_assert!(w2 <= c_plus * delta + slack);
    }

    #[test]
    fn thresholded_weights_stay_normalized(raw in weight_strategy(), tau in 0.0..0.9f64) {
        let out = apply_threshold(&raw, tau, 0, 0).unwrap();
        prop_assert!((out.sum() - 1.0).abs() < 1e-9);
        // strategy partition: exactly one branch
        let support = out.support().len();
        match out.strategy {
            AggStrategy::Clustered => prop_assert!(support > 1),
            AggStrategy::Personalized => prop_assert!(support == 1),
            AggStrategy::GlobalFallback => prop_assert!(raw.values().all(|w| *w < tau)),
        }
    }

    #[test]
    fn raising_tau_never_grows_support(raw in weight_strategy()) {
        let mut last = usize::MAX;
        for step in 0..12 {
            let tau = step as f64 * 0.06;
            let out = apply_threshold(&raw, tau.min(0.99), 0, 0).unwrap();
            let support = if out.strategy == AggStrategy::GlobalFallback {
                0
            } else {
                out.support().len()
            };
            prop_assert!(support <= last);
            last = support;
        }
        // tau = 0 keeps everything
        let all = without_threshold(&raw, 0, 0);
        prop_assert_eq!(all.support().len(), raw.len());
    }

    #[test]
    fn model_checkpoint_round_trips(theta in prop::collection::vec(-10.0..10.0f64, 27)) {
        let arch = Arch::Mlp { input_dim: 3, hidden_dim: 4, num_classes: 2 };
        prop_assert_eq!(arch.param_count(), 26);
        let params = ModelParams { arch, theta: theta[..26].to_vec() };
        let restored = ModelParams::from_bytes(&params.to_bytes()).unwrap();
        prop_assert_eq!(restored, params);
    }

    #[test]
    fn convex_combinations_stay_valid(
        a in prop::collection::vec(-5.0..5.0f64, 26),
        b in prop::collection::vec(-5.0..5.0f64, 26),
        w in 0.0..1.0f64,
    ) {
        let arch = Arch::Mlp { input_dim: 3, hidden_dim: 4, num_classes: 2 };
        let pa = ModelParams { arch, theta: a };
        let pb = ModelParams { arch, theta: b };
        let theta: Vec<f64> = pa
            .theta
            .iter()
            .zip(&pb.theta)
            .map(|(x, y)| w * x + (1.0 - w) * y)
            .collect();
        let combo = ModelParams { arch, theta };
        prop_assert!(combo.is_finite());
        prop_assert_eq!(combo.param_count(), arch.param_count());
    }
}

#[test]
fn drift_boundary_tags_follow_windows() {
    for drift_every in [1u64, 2, 4] {
        let schedule = DriftSchedule {
            total_rounds: 12,
            drift_every,
            noniid_type: NonIidType::Px,
            noniid_level: NonIidLevel::High,
            clients: 3,
            samples_per_client: 24,
            seed: 11,
            feature_dim: 12,
            num_classes: 4,
            recipe_mode: RecipeMode::Standard,
            circle_separation: 6.0,
            identity_separation: 6.0,
            color_shift: 4.0,
        };
        let recipes = build_recipe_set(&schedule).unwrap();
        for client in 0..3 {
            for t in 0..11 {
                let a = generate_round(&schedule, &recipes, t, client).unwrap();
                let b = generate_round(&schedule, &recipes, t + 1, client).unwrap();
                if schedule.window(t) == schedule.window(t + 1) {
                    assert_eq!(a.distribution_tag, b.distribution_tag);
                }
            }
        }
    }
}
