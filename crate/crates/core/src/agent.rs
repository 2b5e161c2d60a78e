//! The full agent in a pixel environment: encode the frame with V, act on
//! `[z, h]` with C, then advance M with the action taken.

use crate::controller::{squash_continuous, Controller, FeatureSet};
use crate::env::{ActionKind, Agent, Frame, Transition};
use crate::error::{Error, Result};
use crate::mdnrnn::{mdn_nll, MdnRnn, MixtureParams};
use crate::tensor::Real;
use crate::vae::Vae;

/// Surprise of the observed next latent under M's prediction.
pub fn curiosity_bonus<T: Real>(mix: &MixtureParams<T>, z_next: &[T]) -> Result<f64> {
    mdn_nll(mix, z_next)
}

#[derive(Clone, Debug)]
struct Slot<T> {
    z: Vec<T>,
    h: Vec<T>,
    c: Vec<T>,
    t: usize,
    bonus: f64,
}

pub struct WorldModelAgent<'a, T> {
    vae: &'a Vae<T>,
    rnn: &'a MdnRnn<T>,
    controller: &'a Controller<T>,
    kinds: Vec<ActionKind>,
    /// Weight of the intrinsic reward; zero disables it.
    curiosity: f64,
    slots: Vec<Slot<T>>,
}

impl<'a, T: Real> WorldModelAgent<'a, T> {
    pub fn new(vae: &'a Vae<T>, rnn: &'a MdnRnn<T>, controller: &'a Controller<T>, kinds: Vec<ActionKind>) -> Result<Self> {
        let arch = &controller.arch;
        if vae.nz() != rnn.arch.nz || arch.nz != vae.nz() {
            return Err(Error::shape("latent size", vae.nz(), (rnn.arch.nz, arch.nz)));
        }
        if arch.features != FeatureSet::Z && arch.rnn_hidden != rnn.arch.hidden {
            return Err(Error::shape("controller hidden size", rnn.arch.hidden, arch.rnn_hidden));
        }
        if kinds.len() != arch.action_dim || kinds.len() != rnn.arch.action_dim {
            return Err(Error::shape("action size", kinds.len(), (arch.action_dim, rnn.arch.action_dim)));
        }
        Ok(Self {
            vae,
            rnn,
            controller,
            kinds,
            curiosity: 0.0,
            slots: Vec::new(),
        })
    }

    pub fn with_curiosity(mut self, weight: f64) -> Self {
        self.curiosity = weight;
        self
    }

    fn needs_rnn(&self) -> bool {
        self.controller.arch.features != FeatureSet::Z || self.curiosity != 0.0
    }

    fn encode(&self, frames: &[&Frame]) -> Vec<Vec<T>> {
        self.vae.encode_batch(frames).into_iter().map(|s| s.mu).collect()
    }
}

impl<T: Real> Agent<Frame> for WorldModelAgent<'_, T> {
    fn reset(&mut self, obs: &[Frame]) -> Result<()> {
        let hid = self.rnn.arch.hidden;
        let refs: Vec<&Frame> = obs.iter().collect();
        self.slots = self
            .encode(&refs)
            .into_iter()
            .map(|z| Slot {
                z,
                h: vec![T::zero(); hid],
                c: vec![T::zero(); hid],
                t: 0,
                bonus: 0.0,
            })
            .collect();
        Ok(())
    }

    fn act(&mut self, live: &[usize], _obs: &[&Frame]) -> Result<Vec<Vec<f32>>> {
        let mut feats = Vec::with_capacity(live.len() * self.controller.arch.feature_dim());
        for &i in live {
            let s = &self.slots[i];
            self.controller.features(&s.z, &s.h, &s.c, &mut feats);
        }
        let raw = self.controller.act_batch(&feats, live.len())?;
        raw.chunks_exact(self.kinds.len())
            .map(|r| squash_continuous(r, &self.kinds))
            .collect()
    }

    fn observe(&mut self, live: &[usize], taken: &[Vec<f32>], next: &[&Transition<Frame>]) -> Result<()> {
        let frames: Vec<&Frame> = next.iter().map(|t| &t.obs).collect();
        let z_next = self.encode(&frames);
        if self.needs_rnn() {
            let (n, hid) = (live.len(), self.rnn.arch.hidden);
            let mut x = Vec::with_capacity(n * self.rnn.arch.input_dim());
            let mut h = Vec::with_capacity(n * hid);
            let mut c = Vec::with_capacity(n * hid);
            for (&i, a) in live.iter().zip(taken) {
                let s = &self.slots[i];
                let a: Vec<T> = a.iter().map(|&v| T::lit(f64::from(v))).collect();
                self.rnn.input_row(&s.z, &a, s.t == 0, &mut x)?;
                h.extend_from_slice(&s.h);
                c.extend_from_slice(&s.c);
            }
            let out = self.rnn.step_batch(&x, &h, &c, n)?;
            let p = self.rnn.arch.head_dim();
            for (r, &i) in live.iter().enumerate() {
                let bonus = if self.curiosity != 0.0 {
                    let mix = self.rnn.mixture(&out.heads[r * p..(r + 1) * p])?;
                    self.curiosity * curiosity_bonus(&mix, &z_next[r])?
                } else {
                    0.0
                };
                let s = &mut self.slots[i];
                s.h.copy_from_slice(&out.h[r * hid..(r + 1) * hid]);
                s.c.copy_from_slice(&out.c[r * hid..(r + 1) * hid]);
                s.bonus = bonus;
            }
        }
        for (&i, z) in live.iter().zip(z_next) {
            let s = &mut self.slots[i];
            s.z = z;
            s.t += 1;
        }
        Ok(())
    }

    fn intrinsic(&self, slot: usize) -> f64 {
        self.slots.get(slot).map_or(0.0, |s| s.bonus)
    }
}
