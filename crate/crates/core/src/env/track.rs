//! TrackToy: drive around a procedurally generated closed track.
//!
//! The track is a closed Catmull-Rom spline through 12 control points at
//! seeded radii, resampled into 100 tiles of equal arc length. The car is a
//! kinematic bicycle with actions `[steer ∈ [-1, 1], gas ∈ [0, 1], brake ∈ [0, 1]]`.
//! Reward is `+1000/100` for each newly visited tile and `−0.1` per step.
//! The view is 64×64, centred behind the car and rotated so it faces up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frame::{Frame, Rgb, FRAME_SIDE};
use super::{check_action, ActionKind, EnvId, EnvSpec, Environment, Transition};
use crate::error::{Error, Result};

pub const TILES: usize = 100;
pub const MAX_STEPS: usize = 1000;
pub const TRACK_HALF_WIDTH: f64 = 6.0;
const CONTROL_POINTS: usize = 12;
const RADIUS: f64 = 80.0;
const VISIT_RADIUS: f64 = 7.0;
const OFF_WORLD: f64 = 150.0;
const WHEELBASE: f64 = 3.0;
const MAX_STEER: f64 = 0.5;
const MAX_SPEED: f64 = 2.5;
const ACCEL: f64 = 0.08;
const BRAKE: f64 = 0.2;
const DRAG: f64 = 0.01;
/// World units per pixel.
const VIEW_SCALE: f64 = 0.6;
const CAR_PX: (i32, i32) = (32, 46);

const GRASS: Rgb = [60, 150, 60];
const ROAD: Rgb = [105, 105, 105];
const VISITED: Rgb = [115, 115, 135];
const CAR: Rgb = [220, 30, 30];
const HUD: Rgb = [240, 240, 240];

pub fn spec() -> EnvSpec {
    EnvSpec {
        id: EnvId::TrackToy,
        actions: vec![ActionKind::Symmetric, ActionKind::Unit, ActionKind::Unit],
        max_steps: MAX_STEPS,
        reward: "+10 per new tile (1000/100), -0.1 per step".into(),
    }
}

/// Tile centres of the track generated from `seed`, in driving order.
pub fn generate_track(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6163_6b00);
    let ctrl: Vec<(f64, f64)> = (0..CONTROL_POINTS)
        .map(|i| {
            let jitter: f64 = rng.random_range(-0.25..0.25);
            let a = (i as f64 + jitter) / CONTROL_POINTS as f64 * std::f64::consts::TAU;
            let r = RADIUS * rng.random_range(0.55..1.0);
            (r * a.cos(), r * a.sin())
        })
        .collect();
    // dense Catmull-Rom samples, then equal arc-length resampling
    let per_seg = 40;
    let mut dense = Vec::with_capacity(CONTROL_POINTS * per_seg + 1);
    for i in 0..CONTROL_POINTS {
        let p = |k: usize| ctrl[(i + k + CONTROL_POINTS - 1) % CONTROL_POINTS];
        let (p0, p1, p2, p3) = (p(0), p(1), p(2), p(3));
        for s in 0..per_seg {
            let t = s as f64 / per_seg as f64;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            dense.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    dense.push(dense[0]);
    let mut cum = vec![0.0];
    for w in dense.windows(2) {
        let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let mut tiles = Vec::with_capacity(TILES);
    let mut j = 0;
    for i in 0..TILES {
        let target = total * i as f64 / TILES as f64;
        while cum[j + 1] < target {
            j += 1;
        }
        let u = (target - cum[j]) / (cum[j + 1] - cum[j]).max(1e-12);
        let (a, b) = (dense[j], dense[j + 1]);
        tiles.push((a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1)));
    }
    tiles
}

#[derive(Clone, Debug)]
pub struct TrackToy {
    spec: EnvSpec,
    pub tiles: Vec<(f64, f64)>,
    pub visited: Vec<bool>,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub t: usize,
    pub done: bool,
}

impl Default for TrackToy {
    fn default() -> Self {
        Self::new()
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + u * dx, a.1 + u * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

impl TrackToy {
    pub fn new() -> Self {
        Self {
            spec: spec(),
            tiles: Vec::new(),
            visited: Vec::new(),
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 0.0,
            t: 0,
            done: true,
        }
    }

    pub fn visited_count(&self) -> usize {
        self.visited.iter().filter(|&&v| v).count()
    }

    /// Nearest segment `i` (from tile `i` to tile `i+1`) and its distance.
    fn nearest_segment(&self, p: (f64, f64)) -> (usize, f64) {
        let n = self.tiles.len();
        (0..n)
            .map(|i| (i, segment_distance(p, self.tiles[i], self.tiles[(i + 1) % n])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, f64::INFINITY))
    }

    pub fn render(&self) -> Frame {
        let mut f = Frame::filled(GRASS);
        let (s, c) = self.heading.sin_cos();
        // bounding box of the view in world space, to prune segments
        let reach = FRAME_SIDE as f64 * VIEW_SCALE * 1.5 + TRACK_HALF_WIDTH;
        let n = self.tiles.len();
        let near: Vec<usize> = (0..n)
            .filter(|&i| {
                let (tx, ty) = self.tiles[i];
                (tx - self.x).abs() < reach && (ty - self.y).abs() < reach
            })
            .collect();
        for py in 0..FRAME_SIDE as i32 - 3 {
            for px in 0..FRAME_SIDE as i32 {
                // screen right is +lateral, screen up is +forward
                let fwd = (CAR_PX.1 - py) as f64 * VIEW_SCALE;
                let lat = (px - CAR_PX.0) as f64 * VIEW_SCALE;
                let wx = self.x + fwd * c + lat * s;
                let wy = self.y + fwd * s - lat * c;
                let mut best = (usize::MAX, f64::INFINITY);
                for &i in &near {
                    let d = segment_distance((wx, wy), self.tiles[i], self.tiles[(i + 1) % n]);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                if best.1 <= TRACK_HALF_WIDTH {
                    let col = if self.visited[best.0] { VISITED } else { ROAD };
                    f.set(px, py, col);
                }
            }
        }
        f.fill_rect(CAR_PX.0 - 1, CAR_PX.1 - 3, 3, 6, CAR);
        let bar = ((self.speed / MAX_SPEED) * FRAME_SIDE as f64).round() as i32;
        f.fill_rect(0, FRAME_SIDE as i32 - 3, FRAME_SIDE as i32, 3, [0, 0, 0]);
        f.fill_rect(0, FRAME_SIDE as i32 - 2, bar, 2, HUD);
        f
    }
}

impl Environment for TrackToy {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Frame {
        self.tiles = generate_track(seed);
        let (a, b) = (self.tiles[0], self.tiles[1]);
        // tiles already under the car at the start earn nothing
        self.visited = self
            .tiles
            .iter()
            .map(|&(tx, ty)| ((tx - a.0).powi(2) + (ty - a.1).powi(2)).sqrt() < VISIT_RADIUS)
            .collect();
        self.x = a.0;
        self.y = a.1;
        self.heading = (b.1 - a.1).atan2(b.0 - a.0);
        self.speed = 0.0;
        self.t = 0;
        self.done = false;
        self.render()
    }

    fn step(&mut self, action: &[f32]) -> Result<Transition<Frame>> {
        if self.done {
            return Err(Error::State("episode finished".into()));
        }
        check_action(&self.spec, action)?;
        let (steer, gas, brake) = (f64::from(action[0]), f64::from(action[1]), f64::from(action[2]));
        self.speed = (self.speed + ACCEL * gas - BRAKE * brake - DRAG * self.speed).clamp(0.0, MAX_SPEED);
        self.heading += self.speed / WHEELBASE * (steer * MAX_STEER).tan();
        self.x += self.speed * self.heading.cos();
        self.y += self.speed * self.heading.sin();
        self.t += 1;

        let mut reward = -0.1;
        let n = self.tiles.len();
        for i in 0..n {
            let (tx, ty) = self.tiles[i];
            if !self.visited[i] && ((self.x - tx).powi(2) + (self.y - ty).powi(2)).sqrt() < VISIT_RADIUS {
                self.visited[i] = true;
                reward += 1000.0 / n as f64;
            }
        }
        let off_world = self.x.abs() > OFF_WORLD || self.y.abs() > OFF_WORLD;
        self.done = self.visited.iter().all(|&v| v) || off_world || self.t >= MAX_STEPS;
        Ok(Transition {
            obs: self.render(),
            reward,
            done: self.done,
        })
    }
}

impl TrackToy {
    /// Distance from the car to the track centre line.
    pub fn off_track_distance(&self) -> f64 {
        self.nearest_segment((self.x, self.y)).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn track_is_pure_function_of_seed() {
        assert_eq!(generate_track(3), generate_track(3));
        assert_ne!(generate_track(3), generate_track(4));
        assert_eq!(generate_track(3).len(), TILES);
    }

    #[test]
    fn stand_still_costs_a_tenth_per_step() {
        let mut env = TrackToy::new();
        env.reset(1);
        let mut total = 0.0;
        for _ in 0..25 {
            total += env.step(&[0.0, 0.0, 0.0]).unwrap().reward;
        }
        assert!((total + 2.5).abs() < 1e-9);
    }

    #[test]
    fn car_starts_on_track_facing_along_it() {
        let mut env = TrackToy::new();
        let f = env.reset(2);
        assert!(env.off_track_distance() < 1e-9);
        // pixel straight ahead of the car is road
        let ahead = f.pixel(32, 30);
        assert!(ahead == ROAD || ahead == VISITED, "{ahead:?}");
    }

    #[test]
    fn driving_collects_tiles_once() {
        let mut env = TrackToy::new();
        env.reset(5);
        let mut total = 0.0;
        for _ in 0..60 {
            let t = env.step(&[0.0, 1.0, 0.0]).unwrap();
            total += t.reward;
            if t.done {
                break;
            }
        }
        let mut fresh = TrackToy::new();
        fresh.reset(5);
        let credited = env.visited_count() - fresh.visited_count();
        assert!(credited > 0);
        assert!((total - (credited as f64 * 10.0 - 0.1 * env.t as f64)).abs() < 1e-9);
    }
}
