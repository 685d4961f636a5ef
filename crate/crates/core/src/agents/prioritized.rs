//! Proportional prioritized replay over a sum tree.
//!
//! Slot `i` is drawn with probability `p_i^alpha / sum_j p_j^alpha`. Importance
//! weights `(N * P(i))^-beta` are divided by the largest weight any stored item
//! could receive, which belongs to the least probable item.

use rand::Rng;

use super::replay::{Transition, TransitionRef, UniformReplay};

/// Binary tree over `capacity` leaves holding sums and minima of its subtrees.
#[derive(Debug, Clone, PartialEq)]
pub struct SumTree {
    leaves: usize,
    sum: Vec<f64>,
    min: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self {
            leaves,
            sum: vec![0.0; 2 * leaves],
            min: vec![f64::INFINITY; 2 * leaves],
        }
    }

    pub fn set(&mut self, slot: usize, value: f64) {
        let mut i = slot + self.leaves;
        self.sum[i] = value;
        self.min[i] = value;
        while i > 1 {
            i /= 2;
            self.sum[i] = self.sum[2 * i] + self.sum[2 * i + 1];
            self.min[i] = self.min[2 * i].min(self.min[2 * i + 1]);
        }
    }

    pub fn get(&self, slot: usize) -> f64 {
        self.sum[slot + self.leaves]
    }

    pub fn total(&self) -> f64 {
        self.sum[1]
    }

    pub fn min(&self) -> f64 {
        self.min[1]
    }

    /// Leaf whose cumulative range contains `mass`, for `mass` in `[0, total)`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = 2 * i;
            if mass < self.sum[left] {
                i = left;
            } else {
                mass -= self.sum[left];
                i = left + 1;
            }
        }
        i - self.leaves
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrioritySample {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizedReplay {
    storage: UniformReplay,
    tree: SumTree,
    alpha: f64,
    max_priority: f64,
}

/// Floor added to |TD error| so no item becomes unreachable.
pub const PRIORITY_FLOOR: f64 = 1e-6;

impl PrioritizedReplay {
    pub fn new(capacity: usize, dim: usize, alpha: f64) -> Self {
        Self {
            storage: UniformReplay::new(capacity, dim),
            tree: SumTree::new(capacity),
            alpha,
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.storage.capacity()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn storage(&self) -> &UniformReplay {
        &self.storage
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Stores `t` at the largest priority seen so far.
    pub fn push(&mut self, t: Transition) -> usize {
        let slot = self.storage.push(t);
        self.tree.set(slot, self.max_priority.powf(self.alpha));
        slot
    }

    pub fn get(&self, slot: usize) -> TransitionRef<'_> {
        self.storage.get(slot)
    }

    /// Raw priority of a slot (before the `alpha` exponent).
    pub fn priority(&self, slot: usize) -> f64 {
        self.tree.get(slot).powf(1.0 / self.alpha)
    }

    pub fn probability(&self, slot: usize) -> f64 {
        self.tree.get(slot) / self.tree.total()
    }

    pub fn set_priority(&mut self, slot: usize, priority: f64) {
        assert!(slot < self.len(), "slot {slot} out of range");
        let p = priority.max(PRIORITY_FLOOR);
        self.max_priority = self.max_priority.max(p);
        self.tree.set(slot, p.powf(self.alpha));
    }

    /// Sets priorities to `|td| + floor`.
    pub fn update_from_td(&mut self, indices: &[usize], td_errors: &[f64]) {
        assert_eq!(indices.len(), td_errors.len());
        for (&i, td) in indices.iter().zip(td_errors) {
            self.set_priority(i, td.abs() + PRIORITY_FLOOR);
        }
    }

    /// Independent proportional draws with importance weights for exponent `beta`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, beta: f64, rng: &mut R) -> PrioritySample {
        assert!(!self.is_empty(), "sampling from an empty buffer");
        let total = self.tree.total();
        let n = self.len() as f64;
        let w_max = (n * self.tree.min() / total).powf(-beta);
        let mut indices = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mass = rng.random::<f64>() * total;
            let mut slot = self.tree.find(mass);
            // Rounding in the cumulative sums can land on an empty leaf.
            while slot >= self.len() || self.tree.get(slot) == 0.0 {
                slot = if slot >= self.len() { self.len() - 1 } else { slot - 1 };
            }
            let p = self.tree.get(slot) / total;
            indices.push(slot);
            weights.push((n * p).powf(-beta) / w_max);
        }
        PrioritySample { indices, weights }
    }

    pub(crate) fn restore(storage: UniformReplay, alpha: f64, max_priority: f64, leaf_values: &[f64]) -> Self {
        let mut tree = SumTree::new(storage.capacity());
        for (slot, v) in leaf_values.iter().enumerate() {
            tree.set(slot, *v);
        }
        Self {
            storage,
            tree,
            alpha,
            max_priority,
        }
    }

    pub(crate) fn leaf_values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.tree.get(i)).collect()
    }
}
