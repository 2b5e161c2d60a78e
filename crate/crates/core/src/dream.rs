//! The learned environment: M steps latents forward and decides when the
//! episode ends. It implements [`BatchEnv`], so the same driver and agents
//! run inside it as in the real environments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmaes::Fitness;
use crate::controller::{squash_continuous, Controller, ControllerArch};
use crate::env::{ActionKind, Agent, BatchEnv, Driver, EnvId, EpisodeOutcome, Frame, Transition};
use crate::error::{Error, Result};
use crate::mdnrnn::{predict_done, sample_next_latent, MdnRnn};
use crate::tensor::Real;
use crate::vae::{sample_latent, Vae};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DreamReward {
    /// +1 for every step, the terminal one included.
    Survival,
    /// Always zero; for watching the dream.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreamConfig {
    pub temperature: f64,
    pub max_steps: usize,
    pub reward: DreamReward,
}

impl Default for DreamConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_steps: 2100,
            reward: DreamReward::Survival,
        }
    }
}

impl DreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be positive"));
        }
        Ok(())
    }
}

/// Encoded first frames of real episodes; dreams start from one of them.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialPool {
    pub nz: usize,
    /// `[n, nz]`
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl InitialPool {
    pub fn new(nz: usize, mu: Vec<f32>, sigma: Vec<f32>) -> Result<Self> {
        if nz == 0 || mu.is_empty() || mu.len() % nz != 0 || sigma.len() != mu.len() {
            return Err(Error::invalid("initial pool must hold at least one [mu, sigma] row"));
        }
        Ok(Self { nz, mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len() / self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[f32], &[f32]) {
        let r = i * self.nz..(i + 1) * self.nz;
        (&self.mu[r.clone()], &self.sigma[r])
    }
}

/// What the agent sees in the dream: the latent and M's state before it is
/// consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct DreamObs<T> {
    pub z: Vec<T>,
    pub h: Vec<T>,
    pub c: Vec<T>,
}

#[derive(Clone, Debug)]
struct Slot<T> {
    rng: ChaCha8Rng,
    obs: DreamObs<T>,
    t: usize,
    done: bool,
    p_done: Option<f64>,
}

/// Samples `z0` for an episode seed: a pool row chosen uniformly, then
/// `z ~ N(μ, σ)`. Returns the generator positioned after those draws.
pub fn dream_reset<T: Real>(pool: &InitialPool, seed: u64) -> Result<(Vec<T>, ChaCha8Rng)> {
    if pool.is_empty() {
        return Err(Error::invalid("initial pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = rng.random_range(0..pool.len());
    let (mu, sigma) = pool.row(i);
    let mu: Vec<T> = mu.iter().map(|&v| T::lit(f64::from(v))).collect();
    let sigma: Vec<T> = sigma.iter().map(|&v| T::lit(f64::from(v))).collect();
    let z = sample_latent(&mu, &sigma, &mut rng);
    Ok((z, rng))
}

/// M as an environment over a batch of independent dream episodes.
pub struct DreamEnv<'a, T> {
    model: &'a MdnRnn<T>,
    pool: &'a InitialPool,
    pub config: DreamConfig,
    kinds: Vec<ActionKind>,
    slots: Vec<Slot<T>>,
}

impl<'a, T: Real> DreamEnv<'a, T> {
    pub fn new(model: &'a MdnRnn<T>, pool: &'a InitialPool, config: DreamConfig, kinds: Vec<ActionKind>) -> Result<Self> {
        config.validate()?;
        if pool.nz != model.arch.nz {
            return Err(Error::shape("initial pool nz", model.arch.nz, pool.nz));
        }
        if kinds.len() != model.arch.action_dim {
            return Err(Error::shape("dream actions", model.arch.action_dim, kinds.len()));
        }
        if pool.is_empty() {
            return Err(Error::invalid("initial pool is empty"));
        }
        Ok(Self {
            model,
            pool,
            config,
            kinds,
            slots: Vec::new(),
        })
    }

    /// The environment whose dynamics M imitates.
    pub fn for_env(model: &'a MdnRnn<T>, pool: &'a InitialPool, config: DreamConfig, env: EnvId) -> Result<Self> {
        Self::new(model, pool, config, env.spec().actions)
    }

    pub fn set_temperature(&mut self, tau: f64) -> Result<()> {
        let cfg = DreamConfig {
            temperature: tau,
            ..self.config.clone()
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn steps(&self, slot: usize) -> usize {
        self.slots.get(slot).map_or(0, |s| s.t)
    }

    /// M's done probability at the slot's last step; `None` before the first
    /// step or without a done head.
    pub fn p_done(&self, slot: usize) -> Option<f64> {
        self.slots.get(slot).and_then(|s| s.p_done)
    }
}

impl<T: Real> BatchEnv for DreamEnv<'_, T> {
    type Obs = DreamObs<T>;

    fn action_kinds(&self) -> &[ActionKind] {
        &self.kinds
    }

    fn reset(&mut self, seeds: &[u64]) -> Result<Vec<DreamObs<T>>> {
        let hid = self.model.arch.hidden;
        self.slots = seeds
            .iter()
            .map(|&s| {
                let (z, rng) = dream_reset(self.pool, s)?;
                Ok(Slot {
                    rng,
                    obs: DreamObs {
                        z,
                        h: vec![T::zero(); hid],
                        c: vec![T::zero(); hid],
                    },
                    t: 0,
                    done: false,
                    p_done: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(self.slots.iter().map(|s| s.obs.clone()).collect())
    }

    fn step(&mut self, live: &[usize], actions: &[Vec<f32>]) -> Result<Vec<Transition<DreamObs<T>>>> {
        if live.len() != actions.len() {
            return Err(Error::shape("dream step", live.len(), actions.len()));
        }
        let arch = &self.model.arch;
        let (n, hid) = (live.len(), arch.hidden);
        let mut x = Vec::with_capacity(n * arch.input_dim());
        let mut h = Vec::with_capacity(n * hid);
        let mut c = Vec::with_capacity(n * hid);
        for (&i, a) in live.iter().zip(actions) {
            let slot = self.slots.get(i).ok_or_else(|| Error::State(format!("no slot {i}")))?;
            if slot.done {
                return Err(Error::State("episode finished".into()));
            }
            if let Some(d) = a.iter().zip(&self.kinds).position(|(&v, k)| !k.contains(v)) {
                return Err(Error::invalid(format!("action {d} = {} outside {:?}", a[d], self.kinds[d])));
            }
            let a: Vec<T> = a.iter().map(|&v| T::lit(f64::from(v))).collect();
            self.model.input_row(&slot.obs.z, &a, slot.t == 0, &mut x)?;
            h.extend_from_slice(&slot.obs.h);
            c.extend_from_slice(&slot.obs.c);
        }
        let out = self.model.step_batch(&x, &h, &c, n)?;
        let p = arch.head_dim();
        let tau = self.config.temperature;
        let mut result = Vec::with_capacity(n);
        for (r, &i) in live.iter().enumerate() {
            let mix = self.model.mixture(&out.heads[r * p..(r + 1) * p])?;
            let slot = &mut self.slots[i];
            let z = sample_next_latent(&mix, tau, &mut slot.rng)?;
            slot.t += 1;
            slot.p_done = mix.done_probability();
            let predicted = arch.done_head && predict_done(&mix)?;
            slot.done = predicted || slot.t >= self.config.max_steps;
            slot.obs = DreamObs {
                z,
                h: out.h[r * hid..(r + 1) * hid].to_vec(),
                c: out.c[r * hid..(r + 1) * hid].to_vec(),
            };
            let reward = match self.config.reward {
                DreamReward::Survival => 1.0,
                DreamReward::None => 0.0,
            };
            result.push(Transition {
                obs: slot.obs.clone(),
                reward,
                done: slot.done,
            });
        }
        Ok(result)
    }
}

/// Decodes a latent for display.
pub fn dream_render<T: Real>(vae: &Vae<T>, z: &[T]) -> Result<Frame> {
    Frame::from_unit(&vae.decode(z)?)
}

/// A controller acting on dream observations.
pub struct DreamControllerAgent<'a, T> {
    pub controller: &'a Controller<T>,
    kinds: Vec<ActionKind>,
}

impl<'a, T: Real> DreamControllerAgent<'a, T> {
    pub fn new(controller: &'a Controller<T>, kinds: Vec<ActionKind>) -> Result<Self> {
        if kinds.len() != controller.arch.action_dim {
            return Err(Error::shape("controller actions", kinds.len(), controller.arch.action_dim));
        }
        Ok(Self { controller, kinds })
    }
}

impl<T: Real> Agent<DreamObs<T>> for DreamControllerAgent<'_, T> {
    fn reset(&mut self, _obs: &[DreamObs<T>]) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, live: &[usize], obs: &[&DreamObs<T>]) -> Result<Vec<Vec<f32>>> {
        let mut feats = Vec::with_capacity(live.len() * self.controller.arch.feature_dim());
        for o in obs {
            self.controller.features(&o.z, &o.h, &o.c, &mut feats);
        }
        let raw = self.controller.act_batch(&feats, obs.len())?;
        raw.chunks_exact(self.kinds.len())
            .map(|r| squash_continuous(r, &self.kinds))
            .collect()
    }
}

/// Several controllers side by side: slot `i` belongs to controller
/// `i / per_controller`.
pub struct PopulationAgent<T> {
    controllers: Vec<Controller<T>>,
    per_controller: usize,
    kinds: Vec<ActionKind>,
}

impl<T: Real> PopulationAgent<T> {
    pub fn new(controllers: Vec<Controller<T>>, per_controller: usize, kinds: Vec<ActionKind>) -> Result<Self> {
        if per_controller == 0 {
            return Err(Error::invalid("at least one slot per controller"));
        }
        if let Some(c) = controllers.iter().find(|c| c.arch.action_dim != kinds.len()) {
            return Err(Error::shape("controller actions", kinds.len(), c.arch.action_dim));
        }
        Ok(Self {
            controllers,
            per_controller,
            kinds,
        })
    }
}

impl<T: Real> Agent<DreamObs<T>> for PopulationAgent<T> {
    fn reset(&mut self, obs: &[DreamObs<T>]) -> Result<()> {
        if obs.len() != self.controllers.len() * self.per_controller {
            return Err(Error::shape("population slots", self.controllers.len() * self.per_controller, obs.len()));
        }
        Ok(())
    }

    fn act(&mut self, live: &[usize], obs: &[&DreamObs<T>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(live.len());
        let mut start = 0;
        while start < live.len() {
            let owner = live[start] / self.per_controller;
            let end = start + live[start..].iter().take_while(|&&i| i / self.per_controller == owner).count();
            let ctrl = &self.controllers[owner];
            let mut feats = Vec::with_capacity((end - start) * ctrl.arch.feature_dim());
            for o in &obs[start..end] {
                ctrl.features(&o.z, &o.h, &o.c, &mut feats);
            }
            let raw = ctrl.act_batch(&feats, end - start)?;
            for r in raw.chunks_exact(self.kinds.len()) {
                out.push(squash_continuous(r, &self.kinds)?);
            }
            start = end;
        }
        Ok(out)
    }
}

/// Candidate controllers evaluated in the dream, all episodes in one
/// lockstep batch so M's step is a single large product per time step.
pub struct DreamFitness<'a, T> {
    pub arch: ControllerArch,
    pub model: &'a MdnRnn<T>,
    pub pool: &'a InitialPool,
    pub config: DreamConfig,
    pub kinds: Vec<ActionKind>,
}

impl<T: Real> DreamFitness<'_, T> {
    /// `out[candidate][seed]`.
    pub fn population_returns(&self, candidates: &[Vec<f64>], seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        let controllers = candidates
            .iter()
            .map(|c| {
                let p: Vec<T> = c.iter().map(|&v| T::lit(v)).collect();
                Controller::unpack(self.arch.clone(), &p)
            })
            .collect::<Result<Vec<_>>>()?;
        let slot_seeds: Vec<u64> = candidates.iter().flat_map(|_| seeds.iter().copied()).collect();
        let env = DreamEnv::new(self.model, self.pool, self.config.clone(), self.kinds.clone())?;
        let agent = PopulationAgent::new(controllers, seeds.len(), self.kinds.clone())?;
        let mut driver = Driver::new(env, agent);
        driver.reset(&slot_seeds)?;
        let outcomes = driver.run_quiet()?;
        Ok(outcomes
            .chunks(seeds.len())
            .map(|c| c.iter().map(|o| o.total_reward).collect())
            .collect())
    }
}

impl<T: Real> Fitness for DreamFitness<'_, T> {
    fn returns(&self, candidates: &[Vec<f64>], seeds: &[u64], pool: Option<&rayon::ThreadPool>) -> Vec<Result<Vec<f64>>> {
        let chunk = match pool {
            Some(p) => candidates.len().div_ceil(p.current_num_threads().max(1)).max(1),
            None => candidates.len().max(1),
        };
        let run = |part: &[Vec<f64>]| -> Vec<Result<Vec<f64>>> {
            match self.population_returns(part, seeds) {
                Ok(r) => r.into_iter().map(Ok).collect(),
                Err(e) => {
                    // fall back to one candidate at a time to isolate the failure
                    log::warn!("population rollout failed ({e}); retrying candidates singly");
                    part.iter()
                        .map(|c| self.population_returns(std::slice::from_ref(c), seeds).map(|mut r| r.remove(0)))
                        .collect()
                }
            }
        };
        let parts: Vec<&[Vec<f64>]> = candidates.chunks(chunk).collect();
        let nested: Vec<Vec<Result<Vec<f64>>>> = match pool {
            Some(p) => p.install(|| parts.par_iter().map(|part| run(part)).collect()),
            None => parts.iter().map(|part| run(part)).collect(),
        };
        nested.into_iter().flatten().collect()
    }
}

/// Returns of `controller` in one dream episode per seed, run in lockstep.
pub fn dream_rollouts<T: Real>(
    controller: &Controller<T>,
    model: &MdnRnn<T>,
    pool: &InitialPool,
    config: &DreamConfig,
    kinds: &[ActionKind],
    seeds: &[u64],
) -> Result<Vec<EpisodeOutcome>> {
    let env = DreamEnv::new(model, pool, config.clone(), kinds.to_vec())?;
    let agent = DreamControllerAgent::new(controller, kinds.to_vec())?;
    let mut driver = Driver::new(env, agent);
    driver.reset(seeds)?;
    driver.run_quiet()
}

/// Cumulative reward of a single dream episode.
pub fn dream_rollout<T: Real>(
    controller: &Controller<T>,
    model: &MdnRnn<T>,
    pool: &InitialPool,
    config: &DreamConfig,
    kinds: &[ActionKind],
    seed: u64,
) -> Result<f64> {
    Ok(dream_rollouts(controller, model, pool, config, kinds, &[seed])?[0].total_reward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdnrnn::MdnRnnArch;

    fn tiny() -> (MdnRnn<f64>, InitialPool) {
        let arch = MdnRnnArch {
            nz: 3,
            action_dim: 1,
            start_flag: true,
            hidden: 8,
            mixtures: 2,
            done_head: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MdnRnn::new(arch, &mut rng).unwrap();
        let pool = InitialPool::new(3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0], vec![0.5; 6]).unwrap();
        (m, pool)
    }

    #[test]
    fn reset_is_seeded() {
        let (_, pool) = tiny();
        let (a, _) = dream_reset::<f64>(&pool, 4).unwrap();
        let (b, _) = dream_reset::<f64>(&pool, 4).unwrap();
        assert_eq!(a, b);
        let single = InitialPool::new(2, vec![0.25, -0.5], vec![0.0, 0.0]).unwrap();
        for s in 0..10 {
            assert_eq!(dream_reset::<f64>(&single, s).unwrap().0, vec![0.25, -0.5]);
        }
    }

    #[test]
    fn empty_pool_and_bad_temperature_rejected() {
        assert!(InitialPool::new(2, vec![], vec![]).is_err());
        let (m, pool) = tiny();
        let cfg = DreamConfig {
            temperature: 0.0,
            ..DreamConfig::default()
        };
        assert!(DreamEnv::new(&m, &pool, cfg, vec![ActionKind::Thirds]).is_err());
    }

    #[test]
    fn max_steps_caps_episodes() {
        let (mut m, pool) = tiny();
        // a strongly negative done bias: M never ends the episode itself
        let last = m.params.layout().len() - 1;
        let b = m.params.layer_mut(last);
        let n = b.len();
        b[n - 1] = -50.0;
        for cap in [1usize, 7, 30] {
            let cfg = DreamConfig {
                max_steps: cap,
                ..DreamConfig::default()
            };
            let ctrl = Controller::zeros(ControllerArch {
                nz: 3,
                rnn_hidden: 8,
                features: crate::controller::FeatureSet::Zh,
                action_dim: 1,
                bias: true,
                hidden_layer: None,
            });
            let r = dream_rollout(&ctrl, &m, &pool, &cfg, &[ActionKind::Thirds], 2).unwrap();
            assert_eq!(r, cap as f64);
        }
    }

    #[test]
    fn stepping_after_done_rejected() {
        let (m, pool) = tiny();
        let cfg = DreamConfig {
            max_steps: 1,
            ..DreamConfig::default()
        };
        let mut env = DreamEnv::new(&m, &pool, cfg, vec![ActionKind::Thirds]).unwrap();
        env.reset(&[1]).unwrap();
        assert!(env.step(&[0], &[vec![0.0]]).unwrap()[0].done);
        assert!(env.step(&[0], &[vec![0.0]]).is_err());
    }

    #[test]
    fn same_seed_and_actions_same_trajectory() {
        let (m, pool) = tiny();
        let run = || {
            let mut env = DreamEnv::new(&m, &pool, DreamConfig::default(), vec![ActionKind::Thirds]).unwrap();
            let mut zs = vec![env.reset(&[9]).unwrap()[0].z.clone()];
            for i in 0..20 {
                let t = env.step(&[0], &[vec![(i % 3) as f32 - 1.0]]).unwrap().remove(0);
                zs.push(t.obs.z);
                if t.done {
                    break;
                }
            }
            zs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_slots_match_single_runs() {
        let (m, pool) = tiny();
        let ctrl = Controller::unpack(
            ControllerArch {
                nz: 3,
                rnn_hidden: 8,
                features: crate::controller::FeatureSet::Zh,
                action_dim: 1,
                bias: true,
                hidden_layer: None,
            },
            &(0..12).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>(),
        )
        .unwrap();
        let kinds = [ActionKind::Thirds];
        let cfg = DreamConfig {
            max_steps: 200,
            ..DreamConfig::default()
        };
        let batch = dream_rollouts(&ctrl, &m, &pool, &cfg, &kinds, &[1, 2, 3]).unwrap();
        for (i, s) in [1u64, 2, 3].iter().enumerate() {
            assert_eq!(dream_rollouts(&ctrl, &m, &pool, &cfg, &kinds, &[*s]).unwrap()[0], batch[i]);
        }
    }

    #[test]
    fn population_batch_matches_single_controllers() {
        let (m, pool) = tiny();
        let arch = ControllerArch {
            nz: 3,
            rnn_hidden: 8,
            features: crate::controller::FeatureSet::Zhc,
            action_dim: 1,
            bias: false,
            hidden_layer: None,
        };
        let cands: Vec<Vec<f64>> = (0..3)
            .map(|k| (0..arch.param_count()).map(|i| ((i * 7 + k * 13) as f64).sin()).collect())
            .collect();
        let cfg = DreamConfig {
            max_steps: 150,
            ..DreamConfig::default()
        };
        let fit = DreamFitness {
            arch: arch.clone(),
            model: &m,
            pool: &pool,
            config: cfg.clone(),
            kinds: vec![ActionKind::Thirds],
        };
        let seeds = [4u64, 5];
        let all = fit.population_returns(&cands, &seeds).unwrap();
        for (k, c) in cands.iter().enumerate() {
            let ctrl = Controller::unpack(arch.clone(), c).unwrap();
            let single: Vec<f64> = dream_rollouts(&ctrl, &m, &pool, &cfg, &[ActionKind::Thirds], &seeds)
                .unwrap()
                .iter()
                .map(|o| o.total_reward)
                .collect();
            assert_eq!(all[k], single);
        }
        let pool2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let par: Vec<Vec<f64>> = fit.returns(&cands, &seeds, Some(&pool2)).into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(par, all);
    }
}
