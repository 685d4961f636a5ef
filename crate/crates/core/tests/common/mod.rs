#![allow(dead_code)]

use ays_core::neural::{HeadKind, MlpSpec, MlpWeights};
use rand::Rng;

pub const HEADS: [HeadKind; 3] = [HeadKind::Plain, HeadKind::Dueling, HeadKind::ActorCritic];
pub const FD_STEP: f64 = 1e-5;

/// A small random network with a random input and upstream gradient.
pub struct GradientCase {
    pub net: MlpWeights,
    pub input: Vec<f64>,
    pub upstream: Vec<f64>,
}

impl GradientCase {
    pub fn random<R: Rng>(head: HeadKind, rng: &mut R) -> Self {
        let spec = MlpSpec {
            input_dim: if rng.random_bool(0.5) { 3 } else { 6 },
            hidden_dim: rng.random_range(3..=12),
            output_dim: MlpSpec::ACTIONS,
            head,
        };
        let params = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let net = MlpWeights::from_params(spec, params).unwrap();
        let input = (0..spec.input_dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let upstream = (0..spec.output_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { net, input, upstream }
    }

    fn objective(&self, net: &MlpWeights) -> f64 {
        let out = net.forward_vec(&self.input).unwrap();
        out.iter().zip(&self.upstream).map(|(o, u)| o * u).sum()
    }

    /// Largest relative error between backprop and central differences over
    /// every parameter.
    pub fn max_relative_error(&self) -> f64 {
        let analytic = self.net.backward(&self.input, &self.upstream).unwrap();
        let mut probe = self.net.clone();
        let mut worst = 0.0f64;
        for (k, g) in analytic.iter().enumerate() {
            let orig = probe.params()[k];
            probe.params_mut()[k] = orig + FD_STEP;
            let up = self.objective(&probe);
            probe.params_mut()[k] = orig - FD_STEP;
            let down = self.objective(&probe);
            probe.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }
}

pub fn max_error_over<R: Rng>(head: HeadKind, nets: usize, rng: &mut R) -> f64 {
    (0..nets)
        .map(|_| GradientCase::random(head, rng).max_relative_error())
        .fold(0.0, f64::max)
}

/// Largest deviation of PER sampling counts from `N p_i` in units of the
/// binomial standard deviation, over `draws` draws.
pub fn per_max_sigma<R: Rng>(priorities: &[f64], alpha: f64, draws: usize, rng: &mut R) -> f64 {
    use ays_core::agents::{PrioritizedReplay, Transition};
    use ays_core::dynamics::PolicyAction;
    let mut per = PrioritizedReplay::new(priorities.len(), 1, alpha);
    for (i, &p) in priorities.iter().enumerate() {
        let slot = per.push(Transition {
            obs: vec![i as f64],
            action: PolicyAction::Noop,
            reward: 0.0,
            next_obs: vec![0.0],
            done: false,
        });
        per.set_priority(slot, p);
    }
    let mut counts = vec![0usize; priorities.len()];
    let mut left = draws;
    while left > 0 {
        let batch = left.min(1000);
        for i in per.sample(batch, 0.4, rng).indices {
            counts[i] += 1;
        }
        left -= batch;
    }
    let total: f64 = priorities.iter().map(|p| p.powf(alpha)).sum();
    let n = draws as f64;
    priorities
        .iter()
        .zip(&counts)
        .map(|(p, &c)| {
            let q = p.powf(alpha) / total;
            let sd = (n * q * (1.0 - q)).sqrt();
            if sd == 0.0 {
                if c as f64 == n * q {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (c as f64 - n * q).abs() / sd
            }
        })
        .fold(0.0, f64::max)
}

/// Random priority vector of length `1..=64`, spanning three decades.
pub fn random_priorities<R: Rng>(rng: &mut R) -> Vec<f64> {
    let len = rng.random_range(1..=64);
    (0..len).map(|_| 10f64.powf(rng.random_range(-2.0..1.0))).collect()
}
