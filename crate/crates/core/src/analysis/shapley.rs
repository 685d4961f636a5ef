use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::csv_header;
use crate::agents::{argmax, UniformReplay};
use crate::error::{Error, Result};
use crate::neural::{MlpWeights, Tape};

/// Largest feature count handled by exact enumeration.
pub const MAX_FEATURES: usize = 12;

const PARTIAL: [&str; 3] = ["a", "y", "s"];
const MARKOV: [&str; 6] = ["a", "y", "s", "da", "dy", "ds"];

/// Names of the observation components for an input width of 3 or 6.
pub fn feature_names(dim: usize) -> Vec<String> {
    match dim {
        3 => PARTIAL.iter().map(|s| s.to_string()).collect(),
        6 => MARKOV.iter().map(|s| s.to_string()).collect(),
        _ => (0..dim).map(|i| format!("x{i}")).collect(),
    }
}

/// Exact Shapley values of `f` at `x` under the interventional value
/// function `v(C) = mean over baselines b of f(x on C, b elsewhere)`.
/// `f` maps row-major rows of width `x.len()` to one value per row.
/// Returns `(phi, v(empty), v(all))`.
pub fn shapley_values<F>(mut f: F, x: &[f64], baselines: &[f64]) -> Result<(Vec<f64>, f64, f64)>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let d = x.len();
    if d == 0 {
        return Err(Error::Usage("cannot attribute a function of no features".into()));
    }
    if d > MAX_FEATURES {
        return Err(Error::Usage(format!(
            "exact Shapley enumeration supports at most {MAX_FEATURES} features, got {d}"
        )));
    }
    if baselines.is_empty() || !baselines.len().is_multiple_of(d) {
        return Err(Error::Usage(format!(
            "baseline of {} values is not a non-empty set of width-{d} rows",
            baselines.len()
        )));
    }
    let n = baselines.len() / d;
    let masks = 1usize << d;
    let mut v = vec![0.0; masks];
    let mut rows = baselines.to_vec();
    for (mask, slot) in v.iter_mut().enumerate() {
        for (r, b) in rows.chunks_exact_mut(d).zip(baselines.chunks_exact(d)) {
            for i in 0..d {
                r[i] = if mask >> i & 1 == 1 { x[i] } else { b[i] };
            }
        }
        let out = f(&rows);
        debug_assert_eq!(out.len(), n);
        *slot = out.iter().sum::<f64>() / n as f64;
    }
    // weight(|C|) = |C|! (d - |C| - 1)! / d!
    let mut fact = vec![1.0f64; d + 1];
    for k in 1..=d {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..d).map(|k| fact[k] * fact[d - k - 1] / fact[d]).collect();
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in (0..masks).filter(|m| m & bit == 0) {
            *p += weight[mask.count_ones() as usize] * (v[mask | bit] - v[mask]);
        }
    }
    Ok((phi, v[0], v[masks - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapleyRow {
    pub state: usize,
    pub action: usize,
    pub value: f64,
    pub base: f64,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapleyReport {
    pub features: Vec<String>,
    pub baseline_size: usize,
    pub rows: Vec<ShapleyRow>,
}

impl ShapleyReport {
    /// Mean |phi| over rows and the given features.
    pub fn mean_abs(&self, features: &[usize]) -> f64 {
        let total: f64 = self
            .rows
            .iter()
            .flat_map(|r| features.iter().map(|&i| r.phi[i].abs()))
            .sum();
        total / (self.rows.len() * features.len()) as f64
    }

    /// `state,action,feature,phi` rows under a `#` comment block.
    pub fn to_csv(&self, config_digest: &str) -> String {
        let mut out = csv_header(&[
            ("product", "shapley".to_string()),
            (
                "axes",
                "phi = contribution of the feature to Q(state, greedy action)".to_string(),
            ),
            ("features", self.features.join(" ")),
            ("baseline_size", self.baseline_size.to_string()),
            ("config_digest", config_digest.to_string()),
        ]);
        out.push_str("state,action,feature,phi\n");
        for r in &self.rows {
            for (name, p) in self.features.iter().zip(&r.phi) {
                let _ = writeln!(out, "{},{},{},{}", r.state, r.action, name, p);
            }
        }
        out
    }
}

/// Attributes, for each row of `states`, the output of the greedy action at
/// that state (Q for value heads, the logit for actor-critic heads).
pub fn explain_q(net: &MlpWeights, states: &[f64], baselines: &[f64]) -> Result<ShapleyReport> {
    let d = net.spec().input_dim;
    if states.is_empty() || !states.len().is_multiple_of(d) {
        return Err(Error::Usage(format!("states do not form width-{d} rows")));
    }
    let n = baselines.len() / d.max(1);
    let o = net.spec().output_dim;
    let mut tape = Tape::new(net.spec(), n.max(1));
    let mut rows = Vec::new();
    for (k, x) in states.chunks_exact(d).enumerate() {
        let action = argmax(&net.forward_vec(x)?[..o]);
        let (phi, base, value) = shapley_values(
            |batch| {
                net.forward_batch(batch, &mut tape);
                (0..n).map(|b| tape.output(b)[action]).collect()
            },
            x,
            baselines,
        )?;
        rows.push(ShapleyRow {
            state: k,
            action,
            value,
            base,
            phi,
        });
    }
    Ok(ShapleyReport {
        features: feature_names(d),
        baseline_size: n,
        rows,
    })
}

/// Up to `n` distinct stored observations, drawn without replacement.
pub fn replay_baseline(replay: &UniformReplay, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rows = Vec::with_capacity(replay.len() * replay.dim());
    for t in replay.iter_chronological() {
        rows.extend_from_slice(t.obs);
    }
    sample_rows(&rows, replay.dim(), n, seed)
}

/// Up to `n` distinct rows of the row-major `rows`, drawn without replacement.
pub fn sample_rows(rows: &[f64], dim: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    let len = rows.len() / dim.max(1);
    if len == 0 {
        return Err(Error::Usage("no states to sample from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n.min(len) * dim);
    for i in rand::seq::index::sample(&mut rng, len, n.min(len)) {
        out.extend_from_slice(&rows[i * dim..(i + 1) * dim]);
    }
    Ok(out)
}
