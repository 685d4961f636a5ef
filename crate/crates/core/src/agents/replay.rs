//! Fixed-capacity ring buffer of transitions with FIFO eviction.

use rand::Rng;

use crate::dynamics::PolicyAction;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: PolicyAction,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Borrowed view into a stored transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRef<'a> {
    pub obs: &'a [f64],
    pub action: PolicyAction,
    pub reward: f64,
    pub next_obs: &'a [f64],
    pub done: bool,
}

impl TransitionRef<'_> {
    pub fn to_owned(&self) -> Transition {
        Transition {
            obs: self.obs.to_vec(),
            action: self.action,
            reward: self.reward,
            next_obs: self.next_obs.to_vec(),
            done: self.done,
        }
    }
}

/// Transitions stored column-wise; slot `i` holds the `i`-th insert modulo capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformReplay {
    capacity: usize,
    dim: usize,
    len: usize,
    cursor: usize,
    obs: Vec<f64>,
    next_obs: Vec<f64>,
    actions: Vec<PolicyAction>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
}

impl UniformReplay {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            dim,
            len: 0,
            cursor: 0,
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Position of the next write.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Stores `t`, evicting the oldest item when full. Returns the slot written.
    pub fn push(&mut self, t: Transition) -> usize {
        assert_eq!(t.obs.len(), self.dim, "observation width");
        assert_eq!(t.next_obs.len(), self.dim, "next observation width");
        let slot = self.cursor;
        if self.len < self.capacity {
            self.obs.extend_from_slice(&t.obs);
            self.next_obs.extend_from_slice(&t.next_obs);
            self.actions.push(t.action);
            self.rewards.push(t.reward);
            self.dones.push(t.done);
            self.len += 1;
        } else {
            let r = slot * self.dim..(slot + 1) * self.dim;
            self.obs[r.clone()].copy_from_slice(&t.obs);
            self.next_obs[r].copy_from_slice(&t.next_obs);
            self.actions[slot] = t.action;
            self.rewards[slot] = t.reward;
            self.dones[slot] = t.done;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        slot
    }

    pub fn get(&self, slot: usize) -> TransitionRef<'_> {
        assert!(slot < self.len, "slot {slot} out of range");
        let r = slot * self.dim..(slot + 1) * self.dim;
        TransitionRef {
            obs: &self.obs[r.clone()],
            action: self.actions[slot],
            reward: self.rewards[slot],
            next_obs: &self.next_obs[r],
            done: self.dones[slot],
        }
    }

    /// Slots in insertion order, oldest first.
    pub fn iter_chronological(&self) -> impl Iterator<Item = TransitionRef<'_>> {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        (0..self.len).map(move |k| self.get((start + k) % self.capacity))
    }

    /// Uniform sample of `batch` slots with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.is_empty(), "sampling from an empty buffer");
        (0..batch).map(|_| rng.random_range(0..self.len)).collect()
    }

    /// Rebuilds a buffer from a saved cursor and chronological contents.
    pub(crate) fn restore(capacity: usize, dim: usize, cursor: usize, slots: Vec<Transition>) -> Self {
        let mut buf = Self::new(capacity, dim);
        for t in slots {
            buf.push(t);
        }
        buf.cursor = cursor % capacity;
        buf
    }

    /// Every slot in slot order.
    pub(crate) fn slots(&self) -> impl Iterator<Item = TransitionRef<'_>> {
        (0..self.len).map(move |i| self.get(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(i: usize) -> Transition {
        Transition {
            obs: vec![i as f64; 3],
            action: PolicyAction::Noop,
            reward: i as f64,
            next_obs: vec![i as f64 + 1.0; 3],
            done: false,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = UniformReplay::new(5, 3);
        for i in 0..8 {
            buf.push(t(i));
        }
        assert_eq!(buf.len(), 5);
        let rewards: Vec<f64> = buf.iter_chronological().map(|x| x.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut buf = UniformReplay::new(4, 3);
        for i in 0..4 {
            buf.push(t(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        let n = 40_000;
        for i in buf.sample_indices(n, &mut rng) {
            counts[i] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn restore_reproduces_slots() {
        let mut buf = UniformReplay::new(4, 3);
        for i in 0..6 {
            buf.push(t(i));
        }
        let slots: Vec<Transition> = buf.slots().map(|x| x.to_owned()).collect();
        let back = UniformReplay::restore(4, 3, buf.cursor(), slots);
        assert_eq!(back, buf);
    }
}
