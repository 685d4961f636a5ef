mod common;

use ays_core::agents::dqn::dqn_targets;
use ays_core::agents::{act_epsilon_greedy, DqnBatch, PrioritizedReplay, Transition, UniformReplay};
use ays_core::dynamics::PolicyAction;
use ays_core::neural::{HeadKind, MlpSpec, MlpWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn transition(i: usize) -> Transition {
    Transition {
        obs: vec![i as f64],
        action: PolicyAction::from_index(i % 4).unwrap(),
        reward: i as f64,
        next_obs: vec![i as f64 + 0.5],
        done: i.is_multiple_of(7),
    }
}

fn net(spec: MlpSpec, rng: &mut ChaCha8Rng) -> MlpWeights {
    MlpWeights::init(spec, rng)
}

fn small(head: HeadKind) -> MlpSpec {
    MlpSpec {
        hidden_dim: 8,
        ..MlpSpec::new(3, head)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn greedy_action_survives_positive_scaling(seed in any::<u64>(), k in 1e-3..1e3f64, dueling in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = net(small(if dueling { HeadKind::Dueling } else { HeadKind::Plain }), &mut rng);
        let mut scaled = q.clone();
        let layout = q.layout();
        for layer in std::iter::once(layout.head).chain(layout.value) {
            for p in &mut scaled.params_mut()[layer.w..layer.b + layer.rows] {
                *p *= k;
            }
        }
        for _ in 0..20 {
            let obs: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = act_epsilon_greedy(&q, &obs, 0.0, &mut rng).unwrap();
            let b = act_epsilon_greedy(&scaled, &obs, 0.0, &mut rng).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn replay_keeps_the_latest_capacity_items(capacity in 1..32usize, inserts in 0..100usize) {
        let mut replay = UniformReplay::new(capacity, 1);
        for i in 0..inserts {
            replay.push(transition(i));
            prop_assert!(replay.len() <= capacity);
        }
        prop_assert_eq!(replay.len(), inserts.min(capacity));
        let kept: Vec<f64> = replay.iter_chronological().map(|t| t.obs[0]).collect();
        let expected: Vec<f64> = (inserts.saturating_sub(capacity)..inserts).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn importance_weights_are_at_most_one(len in 1..64usize, seed in any::<u64>(), beta in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per = PrioritizedReplay::new(len, 1, 0.6);
        for i in 0..len {
            let slot = per.push(transition(i));
            per.set_priority(slot, 10f64.powf(rng.random_range(-2.0..1.0)));
        }
        let rarest = (0..len).min_by(|&a, &b| per.probability(a).total_cmp(&per.probability(b))).unwrap();
        let sample = per.sample(512, beta, &mut rng);
        for (&i, &w) in sample.indices.iter().zip(&sample.weights) {
            prop_assert!(w <= 1.0 + 1e-12);
            if per.probability(i) == per.probability(rarest) {
                prop_assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn double_targets_never_exceed_plain_targets(seed in any::<u64>(), gamma in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = net(small(HeadKind::Plain), &mut rng);
        let target = net(small(HeadKind::Plain), &mut rng);
        let mut batch = DqnBatch::new(3);
        for _ in 0..32 {
            let obs: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let next: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            batch.push(&obs, PolicyAction::Noop, rng.random_range(-1.0..1.0), &next, rng.random_bool(0.2));
        }
        let plain = dqn_targets(&batch, &online, &target, gamma, false);
        let double = dqn_targets(&batch, &online, &target, gamma, true);
        for (d, p) in double.iter().zip(&plain) {
            prop_assert!(d <= p);
        }
    }
}

#[test]
fn prioritized_frequencies_within_four_sigma() {
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let priorities = common::random_priorities(&mut rng);
        let sigma = common::per_max_sigma(&priorities, 0.6, 100_000, &mut rng);
        assert!(sigma <= 4.0, "seed {seed}: {sigma} sigma for {priorities:?}");
    }
}
