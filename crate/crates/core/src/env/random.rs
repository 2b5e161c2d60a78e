//! The data-collection policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ActionKind, Agent};
use crate::error::Result;

/// Uniform random actions, optionally held for bursts of geometric length.
///
/// Each slot has its own generator seeded from the slot's episode seed so a
/// batch of episodes is reproducible one by one.
pub struct RandomAgent {
    kinds: Vec<ActionKind>,
    mean_burst: f64,
    seeds: Vec<u64>,
    slots: Vec<(ChaCha8Rng, Vec<f32>, usize)>,
}

impl RandomAgent {
    /// `mean_burst = 1` draws a fresh action every step.
    pub fn new(kinds: Vec<ActionKind>, mean_burst: f64) -> Self {
        Self {
            kinds,
            mean_burst: mean_burst.max(1.0),
            seeds: Vec::new(),
            slots: Vec::new(),
        }
    }

    /// Sets the per-slot seeds used at the next reset.
    pub fn with_seeds(mut self, seeds: &[u64]) -> Self {
        self.seeds = seeds.to_vec();
        self
    }

    pub fn set_seeds(&mut self, seeds: &[u64]) {
        self.seeds = seeds.to_vec();
    }

    /// One uniform draw per dimension.
    pub fn draw(kinds: &[ActionKind], rng: &mut impl Rng) -> Vec<f32> {
        kinds
            .iter()
            .map(|k| match k {
                ActionKind::Symmetric => rng.random_range(-1.0f32..=1.0),
                ActionKind::Unit => rng.random_range(0.0f32..=1.0),
                ActionKind::Thirds => rng.random_range(-1i32..=1) as f32,
            })
            .collect()
    }

    fn burst_len(&self, rng: &mut ChaCha8Rng) -> usize {
        if self.mean_burst <= 1.0 {
            return 1;
        }
        // geometric on {1, 2, ...} with mean `mean_burst`
        let p = 1.0 / self.mean_burst;
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        1 + (u.ln() / (1.0 - p).ln()).floor() as usize
    }
}

impl<O> Agent<O> for RandomAgent {
    fn reset(&mut self, obs: &[O]) -> Result<()> {
        self.slots = (0..obs.len())
            .map(|i| {
                let seed = self.seeds.get(i).copied().unwrap_or(i as u64);
                (ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a0e7), Vec::new(), 0)
            })
            .collect();
        Ok(())
    }

    fn act(&mut self, live: &[usize], _obs: &[&O]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(live.len());
        for &i in live {
            let mut slot = std::mem::replace(&mut self.slots[i], (ChaCha8Rng::seed_from_u64(0), Vec::new(), 0));
            if slot.2 == 0 {
                slot.1 = Self::draw(&self.kinds, &mut slot.0);
                slot.2 = self.burst_len(&mut slot.0);
            }
            slot.2 -= 1;
            out.push(slot.1.clone());
            self.slots[i] = slot;
        }
        Ok(out)
    }
}
