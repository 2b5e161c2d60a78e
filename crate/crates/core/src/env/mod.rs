//! Environments, the shared rollout driver and the on-disk dataset format.
//!
//! Every rollout in the crate (data collection, real and dream fitness,
//! evaluation, the dream server) goes through [`Driver`], which steps a
//! [`BatchEnv`] of independent slots in lockstep against an [`Agent`].

pub mod dataset;
pub mod dodge;
pub mod frame;
pub mod random;
pub mod track;

use serde::{Deserialize, Serialize};

use crate::controller::discretize_thirds;
use crate::error::{Error, Result};

pub use dataset::{collect_rollouts, load_dataset, CollectSummary, DatasetManifest, EpisodeRecord};
pub use dodge::DodgeToy;
pub use frame::{Frame, ResizeFilter, FRAME_CHANNELS, FRAME_LEN, FRAME_SIDE};
pub use random::RandomAgent;
pub use track::TrackToy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    /// Continuous in `[-1, 1]`.
    Symmetric,
    /// Continuous in `[0, 1]`.
    Unit,
    /// One of −1, 0, +1 (left, stay, right).
    Thirds,
}

impl ActionKind {
    /// Raw controller output to environment action.
    pub fn squash(self, raw: f64) -> f32 {
        let t = raw.tanh();
        match self {
            ActionKind::Symmetric => t as f32,
            ActionKind::Unit => ((t + 1.0) / 2.0) as f32,
            ActionKind::Thirds => discretize_thirds(t).value(),
        }
    }

    pub fn contains(self, a: f32) -> bool {
        match self {
            ActionKind::Symmetric => (-1.0..=1.0).contains(&a),
            ActionKind::Unit => (0.0..=1.0).contains(&a),
            ActionKind::Thirds => a == -1.0 || a == 0.0 || a == 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    DodgeToy,
    TrackToy,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::DodgeToy => "dodge-toy",
            EnvId::TrackToy => "track-toy",
        }
    }

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvId::DodgeToy => dodge::spec(),
            EnvId::TrackToy => track::spec(),
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvId::DodgeToy => Box::new(DodgeToy::new()),
            EnvId::TrackToy => Box::new(TrackToy::new()),
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dodge-toy" => Ok(EnvId::DodgeToy),
            "track-toy" => Ok(EnvId::TrackToy),
            other => Err(Error::invalid(format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub actions: Vec<ActionKind>,
    pub max_steps: usize,
    pub reward: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<O> {
    pub obs: O,
    pub reward: f64,
    pub done: bool,
}

/// A single pixel environment.
pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Frame;
    /// Errors if the episode has finished or the action is malformed.
    fn step(&mut self, action: &[f32]) -> Result<Transition<Frame>>;
}

pub(crate) fn check_action(spec: &EnvSpec, action: &[f32]) -> Result<()> {
    if action.len() != spec.actions.len() {
        return Err(Error::shape("action", spec.actions.len(), action.len()));
    }
    if let Some(i) = action.iter().zip(&spec.actions).position(|(&a, k)| !k.contains(a)) {
        return Err(Error::invalid(format!("action {} = {} outside {:?}", i, action[i], spec.actions[i])));
    }
    Ok(())
}

/// Independent episodes stepped in lockstep. Slot `i` of every call refers to
/// the same episode.
pub trait BatchEnv {
    type Obs;

    fn action_kinds(&self) -> &[ActionKind];
    /// Starts one episode per seed; the slot count becomes `seeds.len()`.
    fn reset(&mut self, seeds: &[u64]) -> Result<Vec<Self::Obs>>;
    /// Steps the slots listed in `live` with the matching `actions`.
    fn step(&mut self, live: &[usize], actions: &[Vec<f32>]) -> Result<Vec<Transition<Self::Obs>>>;
}

/// Chooses actions for a batch of slots.
pub trait Agent<O> {
    /// Called after every reset with the first observations.
    fn reset(&mut self, obs: &[O]) -> Result<()>;
    /// Environment-ready actions for the listed slots.
    fn act(&mut self, live: &[usize], obs: &[&O]) -> Result<Vec<Vec<f32>>>;
    /// Reports what was actually executed (it may differ from `act` when the
    /// caller overrides) and the resulting transitions.
    fn observe(&mut self, _live: &[usize], _taken: &[Vec<f32>], _next: &[&Transition<O>]) -> Result<()> {
        Ok(())
    }
    /// Intrinsic reward the agent assigns to the slot's latest transition.
    fn intrinsic(&self, _slot: usize) -> f64 {
        0.0
    }
}

/// Real environments side by side.
pub struct EnvPool {
    envs: Vec<Box<dyn Environment>>,
    id: EnvId,
    kinds: Vec<ActionKind>,
}

impl EnvPool {
    pub fn new(id: EnvId) -> Self {
        Self {
            envs: Vec::new(),
            id,
            kinds: id.spec().actions,
        }
    }
}

impl BatchEnv for EnvPool {
    type Obs = Frame;

    fn action_kinds(&self) -> &[ActionKind] {
        &self.kinds
    }

    fn reset(&mut self, seeds: &[u64]) -> Result<Vec<Frame>> {
        while self.envs.len() < seeds.len() {
            self.envs.push(self.id.make());
        }
        self.envs.truncate(seeds.len());
        Ok(self.envs.iter_mut().zip(seeds).map(|(e, &s)| e.reset(s)).collect())
    }

    fn step(&mut self, live: &[usize], actions: &[Vec<f32>]) -> Result<Vec<Transition<Frame>>> {
        live.iter()
            .zip(actions)
            .map(|(&i, a)| self.envs.get_mut(i).ok_or_else(|| Error::State(format!("no slot {i}")))?.step(a))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub total_reward: f64,
    pub steps: usize,
    /// Sum of the agent's intrinsic rewards; zero for most agents.
    pub intrinsic: f64,
}

/// What happened to one slot during [`Driver::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct SlotStep {
    pub slot: usize,
    pub agent_action: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f64,
    pub intrinsic: f64,
    pub done: bool,
}

/// The rollout loop: observe, act, step, accumulate, until every slot is done.
pub struct Driver<E: BatchEnv, A> {
    pub env: E,
    pub agent: A,
    obs: Vec<E::Obs>,
    live: Vec<bool>,
    returns: Vec<f64>,
    intrinsic: Vec<f64>,
    steps: Vec<usize>,
    /// Hard cap on steps per episode, on top of the environment's own.
    pub step_limit: Option<usize>,
}

impl<E: BatchEnv, A: Agent<E::Obs>> Driver<E, A> {
    pub fn new(env: E, agent: A) -> Self {
        Self {
            env,
            agent,
            obs: Vec::new(),
            live: Vec::new(),
            returns: Vec::new(),
            intrinsic: Vec::new(),
            steps: Vec::new(),
            step_limit: None,
        }
    }

    pub fn reset(&mut self, seeds: &[u64]) -> Result<&[E::Obs]> {
        if seeds.is_empty() {
            return Err(Error::invalid("at least one episode seed required"));
        }
        self.obs = self.env.reset(seeds)?;
        self.agent.reset(&self.obs)?;
        self.live = vec![true; seeds.len()];
        self.returns = vec![0.0; seeds.len()];
        self.intrinsic = vec![0.0; seeds.len()];
        self.steps = vec![0; seeds.len()];
        Ok(&self.obs)
    }

    pub fn observations(&self) -> &[E::Obs] {
        &self.obs
    }

    pub fn is_live(&self, slot: usize) -> bool {
        self.live.get(slot).copied().unwrap_or(false)
    }

    pub fn all_done(&self) -> bool {
        !self.live.iter().any(|&l| l)
    }

    pub fn outcomes(&self) -> Vec<EpisodeOutcome> {
        (0..self.returns.len())
            .map(|i| EpisodeOutcome {
                total_reward: self.returns[i],
                steps: self.steps[i],
                intrinsic: self.intrinsic[i],
            })
            .collect()
    }

    /// One step of every live slot. `overrides[slot]`, when present and
    /// `Some`, replaces the agent's action for that slot.
    pub fn step(&mut self, overrides: Option<&[Option<Vec<f32>>]>) -> Result<Vec<SlotStep>> {
        let live: Vec<usize> = (0..self.live.len()).filter(|&i| self.live[i]).collect();
        if live.is_empty() {
            return Err(Error::State("episode finished".into()));
        }
        let obs: Vec<&E::Obs> = live.iter().map(|&i| &self.obs[i]).collect();
        let suggested = self.agent.act(&live, &obs)?;
        let taken: Vec<Vec<f32>> = live
            .iter()
            .zip(&suggested)
            .map(|(&i, a)| match overrides.and_then(|o| o.get(i)).and_then(Option::as_ref) {
                Some(o) => o.clone(),
                None => a.clone(),
            })
            .collect();
        let mut next = self.env.step(&live, &taken)?;
        if let Some(limit) = self.step_limit {
            for (t, &i) in next.iter_mut().zip(&live) {
                if self.steps[i] + 1 >= limit {
                    t.done = true;
                }
            }
        }
        let refs: Vec<&Transition<E::Obs>> = next.iter().collect();
        self.agent.observe(&live, &taken, &refs)?;
        let mut report = Vec::with_capacity(live.len());
        for ((&i, t), (agent_action, action)) in live.iter().zip(next).zip(suggested.into_iter().zip(taken)) {
            let intrinsic = self.agent.intrinsic(i);
            self.returns[i] += t.reward;
            self.intrinsic[i] += intrinsic;
            self.steps[i] += 1;
            if t.done {
                self.live[i] = false;
            }
            report.push(SlotStep {
                slot: i,
                agent_action,
                action,
                reward: t.reward,
                intrinsic,
                done: t.done,
            });
            self.obs[i] = t.obs;
        }
        Ok(report)
    }

    /// Runs until every slot is done. `on_step` sees each slot's observation
    /// before the step together with the step itself.
    pub fn run_to_end(&mut self, mut on_step: impl FnMut(&E::Obs, &SlotStep)) -> Result<Vec<EpisodeOutcome>>
    where
        E::Obs: Clone,
    {
        while !self.all_done() {
            let before: Vec<(usize, E::Obs)> = (0..self.live.len())
                .filter(|&i| self.live[i])
                .map(|i| (i, self.obs[i].clone()))
                .collect();
            let steps = self.step(None)?;
            for (s, (_, o)) in steps.iter().zip(&before) {
                on_step(o, s);
            }
        }
        Ok(self.outcomes())
    }

    /// Runs until every slot is done without observing intermediate steps.
    pub fn run_quiet(&mut self) -> Result<Vec<EpisodeOutcome>> {
        while !self.all_done() {
            self.step(None)?;
        }
        Ok(self.outcomes())
    }
}

/// Convenience: one batch of episodes from `seeds`, returning outcomes.
pub fn run_episodes<E: BatchEnv, A: Agent<E::Obs>>(env: E, agent: A, seeds: &[u64]) -> Result<Vec<EpisodeOutcome>> {
    let mut d = Driver::new(env, agent);
    d.reset(seeds)?;
    d.run_quiet()
}
