use ays_core::agents::{argmax, DqnAgent, DqnConfig, LinearSchedule, Transition};
use ays_core::dynamics::PolicyAction;
use ays_core::neural::{AdamConfig, HeadKind, MlpSpec};

const STATES: usize = 4;
const GOAL: usize = STATES - 1;
const GAMMA: f64 = 0.9;
const EPISODE_CAP: usize = 30;

/// Deterministic chain: action 1 moves right, action 3 stays, the rest move
/// left. Entering the last state pays 1 and ends the episode.
fn transition(s: usize, a: usize) -> (usize, f64, bool) {
    let next = match a {
        1 => s + 1,
        3 => s,
        _ => s.saturating_sub(1),
    };
    let done = next == GOAL;
    (next, if done { 1.0 } else { 0.0 }, done)
}

fn one_hot(s: usize) -> Vec<f64> {
    let mut v = vec![0.0; STATES];
    v[s] = 1.0;
    v
}

fn value_iteration() -> [[f64; 4]; STATES] {
    let mut q = [[0.0; 4]; STATES];
    for _ in 0..500 {
        let v: Vec<f64> = q
            .iter()
            .map(|row| row.iter().cloned().fold(f64::MIN, f64::max))
            .collect();
        for (s, row) in q.iter_mut().enumerate().take(GOAL) {
            for (a, value) in row.iter_mut().enumerate() {
                let (n, r, done) = transition(s, a);
                *value = r + if done { 0.0 } else { GAMMA * v[n] };
            }
        }
    }
    q
}

fn config() -> DqnConfig {
    DqnConfig {
        gamma: GAMMA,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        batch_size: 32,
        capacity: 5000,
        target_sync: 100,
        warmup: 200,
        epsilon: LinearSchedule::new(1.0, 0.05, 5000),
        ..DqnConfig::dqn()
    }
}

#[test]
fn optimal_q_prefers_moving_right() {
    let q = value_iteration();
    for row in q.iter().take(GOAL) {
        assert_eq!(argmax(row), 1);
    }
    assert!((q[0][1] - GAMMA * GAMMA).abs() < 1e-12);
}

#[test]
fn dqn_learns_the_chain_within_ten_thousand_steps() {
    let optimal = value_iteration();
    let spec = MlpSpec {
        input_dim: STATES,
        hidden_dim: 16,
        output_dim: MlpSpec::ACTIONS,
        head: HeadKind::Plain,
    };
    for seed in 0..3 {
        let mut agent = DqnAgent::with_spec(config(), spec, seed).unwrap();
        let (mut s, mut t) = (0, 0);
        for _ in 0..10_000 {
            let a = agent.act(&one_hot(s)).unwrap();
            let (n, r, done) = transition(s, a.index());
            agent
                .observe(Transition {
                    obs: one_hot(s),
                    action: a,
                    reward: r,
                    next_obs: one_hot(n),
                    done,
                })
                .unwrap();
            t += 1;
            if done || t >= EPISODE_CAP {
                (s, t) = (0, 0);
            } else {
                s = n;
            }
        }
        for (state, row) in optimal.iter().enumerate().take(GOAL) {
            let q = agent.online().forward_vec(&one_hot(state)).unwrap();
            assert_eq!(argmax(&q), argmax(row), "seed {seed} state {state}: {q:?}");
            assert!((q[1] - row[1]).abs() < 0.1, "seed {seed} state {state}: {q:?}");
        }
        assert_eq!(
            PolicyAction::from_index(argmax(&optimal[0])).unwrap(),
            PolicyAction::EnergyTransition
        );
    }
}
