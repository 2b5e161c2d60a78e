//! DodgeToy: stay alive while three shooters drop projectiles from the top.
//!
//! The agent is a bar on the bottom rows moving left/right by 3 px per step.
//! Each idle shooter fires with probability 0.01 per step; a projectile falls
//! 2 px per step with a lateral drift of −1, 0 or +1 px per step chosen at
//! spawn, reflecting off the side walls. Reward is +1 per step; the episode
//! ends on the first collision or after 2100 steps. All randomness comes from
//! the episode seed and is drawn independently of the actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frame::{Frame, Rgb, FRAME_SIDE};
use super::{check_action, ActionKind, EnvId, EnvSpec, Environment, Transition};
use crate::error::{Error, Result};

pub const MAX_STEPS: usize = 2100;
pub const SHOOTER_X: [i32; 3] = [12, 32, 52];
pub const FIRE_PROB: f64 = 0.01;
pub const AGENT_WIDTH: i32 = 8;
pub const AGENT_HEIGHT: i32 = 4;
pub const AGENT_Y: i32 = 56;
pub const AGENT_SPEED: i32 = 3;
pub const SHOT_SIZE: i32 = 8;
pub const SHOT_SPEED: i32 = 2;
const SHOT_START_Y: i32 = 5;

const BACKGROUND: Rgb = [12, 12, 36];
const SHOOTER: Rgb = [170, 60, 210];
const SHOT: Rgb = [255, 140, 20];
const AGENT: Rgb = [70, 220, 100];
const FLOOR: Rgb = [60, 60, 90];

pub fn spec() -> EnvSpec {
    EnvSpec {
        id: EnvId::DodgeToy,
        actions: vec![ActionKind::Thirds],
        max_steps: MAX_STEPS,
        reward: "+1 per step alive; done on collision or at 2100 steps".into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projectile {
    pub x: i32,
    pub y: i32,
    pub vx: i32,
    pub shooter: usize,
}

#[derive(Clone, Debug)]
pub struct DodgeToy {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    pub agent_x: i32,
    pub projectiles: Vec<Projectile>,
    pub t: usize,
    pub done: bool,
}

impl Default for DodgeToy {
    fn default() -> Self {
        Self::new()
    }
}

impl DodgeToy {
    pub fn new() -> Self {
        Self {
            spec: spec(),
            rng: ChaCha8Rng::seed_from_u64(0),
            agent_x: 0,
            projectiles: Vec::new(),
            t: 0,
            done: true,
        }
    }

    fn collides(&self, p: &Projectile) -> bool {
        p.x < self.agent_x + AGENT_WIDTH
            && self.agent_x < p.x + SHOT_SIZE
            && p.y < AGENT_Y + AGENT_HEIGHT
            && AGENT_Y < p.y + SHOT_SIZE
    }

    pub fn render(&self) -> Frame {
        let mut f = Frame::filled(BACKGROUND);
        for &sx in &SHOOTER_X {
            f.fill_rect(sx - 3, 0, 6, 4, SHOOTER);
        }
        f.fill_rect(0, AGENT_Y + AGENT_HEIGHT, FRAME_SIDE as i32, 2, FLOOR);
        for p in &self.projectiles {
            f.fill_rect(p.x, p.y, SHOT_SIZE, SHOT_SIZE, SHOT);
        }
        f.fill_rect(self.agent_x, AGENT_Y, AGENT_WIDTH, AGENT_HEIGHT, AGENT);
        f
    }

    fn spawn(&mut self) {
        for (s, &sx) in SHOOTER_X.iter().enumerate() {
            let fire: f64 = self.rng.random();
            let drift = self.rng.random_range(-1..=1);
            let idle = !self.projectiles.iter().any(|p| p.shooter == s);
            if idle && fire < FIRE_PROB {
                self.projectiles.push(Projectile {
                    x: sx - SHOT_SIZE / 2,
                    y: SHOT_START_Y,
                    vx: drift,
                    shooter: s,
                });
            }
        }
    }
}

impl Environment for DodgeToy {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Frame {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.agent_x = self.rng.random_range(0..=FRAME_SIDE as i32 - AGENT_WIDTH);
        self.projectiles.clear();
        self.t = 0;
        self.done = false;
        self.render()
    }

    fn step(&mut self, action: &[f32]) -> Result<Transition<Frame>> {
        if self.done {
            return Err(Error::State("episode finished".into()));
        }
        check_action(&self.spec, action)?;
        let max_x = FRAME_SIDE as i32 - AGENT_WIDTH;
        self.agent_x = (self.agent_x + action[0] as i32 * AGENT_SPEED).clamp(0, max_x);
        let max_shot_x = FRAME_SIDE as i32 - SHOT_SIZE;
        for p in &mut self.projectiles {
            p.y += SHOT_SPEED;
            p.x += p.vx;
            if p.x < 0 || p.x > max_shot_x {
                p.vx = -p.vx;
                p.x = p.x.clamp(0, max_shot_x);
            }
        }
        let hit = self.projectiles.iter().any(|p| self.collides(p));
        self.projectiles.retain(|p| p.y < FRAME_SIDE as i32);
        self.spawn();
        self.t += 1;
        self.done = hit || self.t >= MAX_STEPS;
        Ok(Transition {
            obs: self.render(),
            reward: 1.0,
            done: self.done,
        })
    }
}
