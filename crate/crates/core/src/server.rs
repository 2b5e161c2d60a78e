//! Dream sessions driven by JSON messages. The wire format is described in
//! `protocol.md`; transports live in the CLI and hand every request line to
//! [`Session::handle`] together with the time it arrived.

use std::collections::VecDeque;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::controller::Controller;
use crate::dream::{dream_render, DreamConfig, DreamControllerAgent, DreamEnv, DreamObs, InitialPool};
use crate::env::{ActionKind, Driver};
use crate::error::{Error, Result};
use crate::mdnrnn::MdnRnn;
use crate::pipeline::load_run;
use crate::tensor::Real;
use crate::vae::Vae;

pub const STEPS_PER_SECOND: usize = 30;
const WINDOW: Duration = Duration::from_secs(1);

/// Everything a session needs, shared by all sessions.
pub struct ServerModels<T> {
    pub vae: Vae<T>,
    pub rnn: MdnRnn<T>,
    /// A zero controller stands in when the run has none.
    pub controller: Controller<T>,
    pub has_controller: bool,
    pub pool: InitialPool,
    pub kinds: Vec<ActionKind>,
    pub dream: DreamConfig,
}

impl<T: Real> ServerModels<T> {
    /// The trained models of a run directory.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let run = load_run::<T>(cfg)?;
        let has_controller = run.controller.is_some();
        Ok(Self {
            controller: run.controller.unwrap_or_else(|| Controller::zeros(cfg.controller_arch())),
            has_controller,
            vae: run.vae,
            rnn: run.rnn,
            pool: run.pool,
            kinds: cfg.env.spec().actions,
            dream: cfg.dream_config(cfg.controller.temperature),
        })
    }
}

/// Requests. Every request may carry an `id`, echoed in the response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    Reset {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        temperature: Option<f64>,
    },
    Step {
        #[serde(default)]
        action: Option<Vec<f32>>,
        #[serde(default)]
        source: Option<Source>,
    },
    Set {
        #[serde(default)]
        temperature: Option<f64>,
        #[serde(default)]
        autopilot: Option<bool>,
        #[serde(default)]
        render: Option<bool>,
    },
    Decode {
        z: Vec<f64>,
    },
    Info,
}

/// Who picks a step's action. Without it, a supplied action wins and the
/// autopilot fills in otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Agent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    RateLimited,
    NoEpisode,
    EpisodeDone,
    NoController,
    UnknownSession,
    Internal,
}

/// Sliding one-second window over accepted steps.
#[derive(Clone, Debug, Default)]
pub struct RateLimiter {
    accepted: VecDeque<Duration>,
    limit: usize,
}

impl RateLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            accepted: VecDeque::new(),
            limit,
        }
    }

    /// Records a step at `now`, or returns how long to wait.
    pub fn admit(&mut self, now: Duration) -> std::result::Result<(), Duration> {
        while self.accepted.front().is_some_and(|&t| now >= t + WINDOW) {
            self.accepted.pop_front();
        }
        if self.accepted.len() >= self.limit {
            let oldest = self.accepted[0];
            return Err(oldest + WINDOW - now);
        }
        self.accepted.push_back(now);
        Ok(())
    }
}

/// One client's dream.
pub struct Session<'a, T: Real> {
    id: u64,
    models: &'a ServerModels<T>,
    driver: Option<Driver<DreamEnv<'a, T>, DreamControllerAgent<'a, T>>>,
    temperature: f64,
    autopilot: bool,
    render: bool,
    resets: u64,
    episode_seed: u64,
    limiter: RateLimiter,
}

fn png_base64(png: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(png)
}

fn floats<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(models: &'a ServerModels<T>, id: u64) -> Self {
        Self {
            id,
            models,
            driver: None,
            temperature: models.dream.temperature,
            autopilot: models.has_controller,
            render: true,
            resets: 0,
            episode_seed: 0,
            limiter: RateLimiter::new(STEPS_PER_SECOND),
        }
    }

    /// Answers one request line received at `now` (time since the session
    /// opened). Always returns exactly one JSON line.
    pub fn handle(&mut self, line: &str, now: Duration) -> String {
        let raw: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return error_line(None, ErrorCode::BadRequest, &format!("not JSON: {e}"), None),
        };
        let mut obj = match raw {
            Value::Object(o) => o,
            _ => return error_line(None, ErrorCode::BadRequest, "request must be an object", None),
        };
        let id = obj.remove("id");
        match obj.remove("session") {
            None => {}
            Some(v) if v.as_u64() == Some(self.id) => {}
            Some(v) => return error_line(id, ErrorCode::UnknownSession, &format!("unknown session {v}"), None),
        }
        let req: Request = match serde_json::from_value(Value::Object(obj)) {
            Ok(r) => r,
            Err(e) => return error_line(id, ErrorCode::BadRequest, &e.to_string(), None),
        };
        match self.dispatch(req, now) {
            Ok(mut body) => {
                body.insert("session".into(), self.id.into());
                if let Some(id) = id {
                    body.insert("id".into(), id);
                }
                Value::Object(body).to_string()
            }
            Err((code, msg, retry)) => error_line(id, code, &msg, retry),
        }
    }

    fn dispatch(&mut self, req: Request, now: Duration) -> std::result::Result<Map<String, Value>, (ErrorCode, String, Option<Duration>)> {
        let internal = |e: Error| (ErrorCode::Internal, e.to_string(), None);
        match req {
            Request::Reset { seed, temperature } => {
                if let Some(tau) = temperature {
                    if !(tau.is_finite() && tau > 0.0) {
                        return Err((ErrorCode::BadRequest, "temperature must be positive".into(), None));
                    }
                    self.temperature = tau;
                }
                let seed = seed.unwrap_or(self.resets);
                self.resets += 1;
                self.reset(seed).map_err(internal)
            }
            Request::Step { action, source } => {
                if self.driver.as_ref().is_none() {
                    return Err((ErrorCode::NoEpisode, "no episode; send reset first".into(), None));
                }
                if self.driver.as_ref().is_some_and(|d| d.all_done()) {
                    return Err((ErrorCode::EpisodeDone, "episode finished".into(), None));
                }
                let action = match source {
                    Some(Source::Agent) if !self.models.has_controller => {
                        return Err((ErrorCode::NoController, "this run has no trained controller".into(), None));
                    }
                    Some(Source::Agent) => None,
                    Some(Source::Human) if action.is_none() => {
                        return Err((ErrorCode::BadRequest, "a human step needs an action".into(), None));
                    }
                    _ if action.is_none() && !self.autopilot => {
                        return Err((ErrorCode::BadRequest, "step needs an action while autopilot is off".into(), None));
                    }
                    _ => action,
                };
                if let Some(a) = &action {
                    if a.len() != self.models.kinds.len() || a.iter().zip(&self.models.kinds).any(|(&v, k)| !k.contains(v)) {
                        return Err((ErrorCode::BadRequest, format!("action must be {:?}", self.models.kinds), None));
                    }
                }
                if let Err(wait) = self.limiter.admit(now) {
                    return Err((
                        ErrorCode::RateLimited,
                        format!("at most {STEPS_PER_SECOND} steps per second"),
                        Some(wait),
                    ));
                }
                self.step(action).map_err(internal)
            }
            Request::Set {
                temperature,
                autopilot,
                render,
            } => {
                if let Some(tau) = temperature {
                    if !(tau.is_finite() && tau > 0.0) {
                        return Err((ErrorCode::BadRequest, "temperature must be positive".into(), None));
                    }
                    self.temperature = tau;
                    if let Some(d) = self.driver.as_mut() {
                        d.env.set_temperature(tau).map_err(internal)?;
                    }
                }
                if let Some(a) = autopilot {
                    if a && !self.models.has_controller {
                        return Err((ErrorCode::NoController, "this run has no trained controller".into(), None));
                    }
                    self.autopilot = a;
                }
                if let Some(r) = render {
                    self.render = r;
                }
                Ok(self.settings())
            }
            Request::Decode { z } => {
                if z.len() != self.models.vae.nz() || z.iter().any(|v| !v.is_finite()) {
                    return Err((ErrorCode::BadRequest, format!("z must hold {} finite numbers", self.models.vae.nz()), None));
                }
                let z: Vec<T> = z.into_iter().map(T::lit).collect();
                let frame = dream_render(&self.models.vae, &z).map_err(internal)?;
                let mut m = Map::new();
                m.insert("frame".into(), png_base64(&frame.to_png()).into());
                Ok(m)
            }
            Request::Info => {
                let mut m = self.settings();
                m.insert("nz".into(), self.models.vae.nz().into());
                m.insert("actions".into(), json!(self.models.kinds));
                m.insert("max_steps".into(), self.models.dream.max_steps.into());
                m.insert("has_controller".into(), self.models.has_controller.into());
                m.insert("steps_per_second".into(), STEPS_PER_SECOND.into());
                Ok(m)
            }
        }
    }

    fn settings(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("ok".into(), true.into());
        m.insert("temperature".into(), self.temperature.into());
        m.insert("autopilot".into(), self.autopilot.into());
        m.insert("render".into(), self.render.into());
        m
    }

    fn reset(&mut self, seed: u64) -> Result<Map<String, Value>> {
        let m = self.models;
        let config = DreamConfig {
            temperature: self.temperature,
            ..m.dream.clone()
        };
        let env = DreamEnv::new(&m.rnn, &m.pool, config, m.kinds.clone())?;
        let agent = DreamControllerAgent::new(&m.controller, m.kinds.clone())?;
        let mut driver = Driver::new(env, agent);
        driver.reset(&[seed])?;
        self.episode_seed = seed;
        let obs = driver.observations()[0].clone();
        self.driver = Some(driver);
        let mut out = self.observation(&obs, 0)?;
        out.insert("reward".into(), 0.0.into());
        out.insert("done".into(), false.into());
        out.insert("p_done".into(), Value::Null);
        Ok(out)
    }

    fn step(&mut self, action: Option<Vec<f32>>) -> Result<Map<String, Value>> {
        let driver = self.driver.as_mut().ok_or_else(|| Error::State("no episode".into()))?;
        // an explicit action wins over the autopilot
        let overrides = [action];
        let step = driver.step(Some(&overrides))?.remove(0);
        let t = driver.env.steps(0);
        let p_done = driver.env.p_done(0);
        let obs = driver.observations()[0].clone();
        let mut out = self.observation(&obs, t)?;
        out.insert("reward".into(), step.reward.into());
        out.insert("done".into(), step.done.into());
        out.insert("action".into(), json!(step.action));
        out.insert("agent_action".into(), json!(step.agent_action));
        out.insert("p_done".into(), p_done.map_or(Value::Null, Value::from));
        Ok(out)
    }

    fn observation(&self, obs: &DreamObs<T>, t: usize) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        m.insert("seed".into(), self.episode_seed.into());
        m.insert("temperature".into(), self.temperature.into());
        m.insert("t".into(), t.into());
        m.insert("z".into(), json!(floats(&obs.z)));
        if self.render {
            let frame = dream_render(&self.models.vae, &obs.z)?;
            m.insert("frame".into(), png_base64(&frame.to_png()).into());
        }
        Ok(m)
    }
}

fn error_line(id: Option<Value>, code: ErrorCode, message: &str, retry: Option<Duration>) -> String {
    let mut m = Map::new();
    m.insert("error".into(), message.into());
    m.insert("code".into(), json!(code));
    if let Some(r) = retry {
        m.insert("retry_after_ms".into(), (r.as_millis() as u64).into());
    }
    if let Some(id) = id {
        m.insert("id".into(), id);
    }
    Value::Object(m).to_string()
}

/// One exchange of a recorded session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// Milliseconds since the session opened.
    pub at_ms: u64,
    pub request: String,
    pub response: String,
}

/// Feeds every recorded request to a fresh session and returns the new
/// responses in order.
pub fn replay<T: Real>(models: &ServerModels<T>, session: u64, transcript: &[TranscriptEntry]) -> Vec<String> {
    let mut s = Session::new(models, session);
    transcript
        .iter()
        .map(|e| s.handle(&e.request, Duration::from_millis(e.at_ms)))
        .collect()
}

/// Entries whose replayed response differs from the recording.
pub fn replay_mismatches<T: Real>(models: &ServerModels<T>, session: u64, transcript: &[TranscriptEntry]) -> Vec<usize> {
    replay(models, session, transcript)
        .iter()
        .zip(transcript)
        .enumerate()
        .filter(|(_, (r, e))| **r != e.response)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{ControllerArch, FeatureSet};
    use crate::mdnrnn::MdnRnnArch;
    use crate::vae::VaeArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn models() -> ServerModels<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = MdnRnnArch {
            nz: 4,
            action_dim: 1,
            start_flag: true,
            hidden: 8,
            mixtures: 2,
            done_head: true,
        };
        let mut rnn = MdnRnn::new(arch, &mut rng).unwrap();
        let head_b = rnn.params.index_of("head.b").unwrap();
        *rnn.params.layer_mut(head_b).last_mut().unwrap() = -3.0;
        let vae = Vae::new(
            VaeArch {
                nz: 4,
                enc_channels: [4, 4, 8, 8],
            },
            &mut rng,
        );
        let carch = ControllerArch {
            nz: 4,
            rnn_hidden: 8,
            features: FeatureSet::Zhc,
            action_dim: 1,
            bias: false,
            hidden_layer: None,
        };
        let params: Vec<f32> = (0..carch.param_count()).map(|i| ((i * 7 % 11) as f32 - 5.0) / 10.0).collect();
        ServerModels {
            vae,
            rnn,
            controller: Controller::unpack(carch, &params).unwrap(),
            has_controller: true,
            pool: InitialPool::new(4, vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.5, -0.5, 0.2], vec![0.5; 8]).unwrap(),
            kinds: vec![ActionKind::Thirds],
            dream: DreamConfig {
                max_steps: 50,
                ..DreamConfig::default()
            },
        }
    }

    fn value(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn reset_step_and_ids() {
        let m = models();
        let mut s = Session::new(&m, 0);
        let r = value(&s.handle(r#"{"cmd":"step","id":1}"#, Duration::ZERO));
        assert_eq!(r["code"], "no_episode");
        assert_eq!(r["id"], 1);
        let r = value(&s.handle(r#"{"cmd":"reset","seed":9,"id":"a"}"#, Duration::ZERO));
        assert_eq!((r["t"].as_u64(), r["done"].as_bool(), r["id"].as_str()), (Some(0), Some(false), Some("a")));
        assert_eq!(r["session"], 0);
        assert!(r["frame"].as_str().unwrap().len() > 100);
        let r = value(&s.handle(r#"{"cmd":"step","action":[1]}"#, Duration::from_millis(40)));
        assert_eq!(r["t"], 1);
        assert_eq!(r["action"], json!([1.0]));
        assert!(r["p_done"].as_f64().is_some());
        assert_eq!(r["agent_action"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn autopilot_uses_the_controller() {
        let m = models();
        let mut s = Session::new(&m, 0);
        s.handle(r#"{"cmd":"reset","seed":2}"#, Duration::ZERO);
        let r = value(&s.handle(r#"{"cmd":"step"}"#, Duration::ZERO));
        assert_eq!(r["action"], r["agent_action"]);
        s.handle(r#"{"cmd":"set","autopilot":false}"#, Duration::ZERO);
        let r = value(&s.handle(r#"{"cmd":"step"}"#, Duration::ZERO));
        assert_eq!(r["code"], "bad_request");
    }

    #[test]
    fn bad_requests_are_reported() {
        let m = models();
        let mut s = Session::new(&m, 0);
        for (line, code) in [
            ("nope", "bad_request"),
            ("[1]", "bad_request"),
            (r#"{"cmd":"fly"}"#, "bad_request"),
            (r#"{"cmd":"decode","z":[1]}"#, "bad_request"),
            (r#"{"cmd":"set","temperature":0}"#, "bad_request"),
        ] {
            assert_eq!(value(&s.handle(line, Duration::ZERO))["code"], code, "{line}");
        }
        s.handle(r#"{"cmd":"reset"}"#, Duration::ZERO);
        let r = value(&s.handle(r#"{"cmd":"step","action":[0.5]}"#, Duration::ZERO));
        assert_eq!(r["code"], "bad_request");
        let r = value(&s.handle(r#"{"cmd":"decode","z":[0,0,0,0]}"#, Duration::ZERO));
        assert!(r["frame"].is_string());
    }

    #[test]
    fn rate_limit_is_thirty_per_second() {
        let m = models();
        let mut s = Session::new(&m, 0);
        s.handle(r#"{"cmd":"set","render":false,"temperature":0.01}"#, Duration::ZERO);
        s.handle(r#"{"cmd":"reset","seed":1}"#, Duration::ZERO);
        let mut ok = 0;
        let mut limited = 0;
        for i in 0..40u64 {
            let r = value(&s.handle(r#"{"cmd":"step","action":[0]}"#, Duration::from_millis(i * 10)));
            match r["error"].as_str() {
                None => ok += 1,
                _ if r["code"] == "rate_limited" => {
                    limited += 1;
                    assert!(r["retry_after_ms"].as_u64().unwrap() > 0);
                }
                _ if r["code"] == "episode_done" => break,
                _ => panic!("{r}"),
            }
        }
        assert_eq!((ok, limited), (30, 10));
        let mut l = RateLimiter::new(2);
        assert!(l.admit(Duration::from_millis(0)).is_ok());
        assert!(l.admit(Duration::from_millis(10)).is_ok());
        assert_eq!(l.admit(Duration::from_millis(500)), Err(Duration::from_millis(500)));
        assert!(l.admit(Duration::from_millis(1000)).is_ok());
    }

    #[test]
    fn steps_count_up_and_done_is_final() {
        let m = models();
        let mut s = Session::new(&m, 0);
        s.handle(r#"{"cmd":"set","render":false}"#, Duration::ZERO);
        s.handle(r#"{"cmd":"reset","seed":4}"#, Duration::ZERO);
        let mut last = 0;
        for i in 0..60u64 {
            let r = value(&s.handle(r#"{"cmd":"step"}"#, Duration::from_millis(i * 100)));
            if r.get("error").is_some() {
                assert_eq!(r["error"], "episode finished");
                break;
            }
            let t = r["t"].as_u64().unwrap();
            assert_eq!(t, last + 1);
            last = t;
        }
        assert_eq!(last, 50);
    }

    #[test]
    fn reset_contract() {
        let m = models();
        let mut s = Session::new(&m, 3);
        let a = value(&s.handle(r#"{"cmd":"reset","temperature":1.15,"seed":7}"#, Duration::ZERO));
        assert_eq!(a["temperature"], 1.15);
        let b = value(&s.handle(r#"{"cmd":"reset","seed":7}"#, Duration::ZERO));
        assert_eq!(a["frame"], b["frame"]);
        let e = value(&s.handle(r#"{"cmd":"reset","temperature":-1}"#, Duration::ZERO));
        assert_eq!(e["error"], "temperature must be positive");
        let e = value(&s.handle(r#"{"cmd":"step","session":4}"#, Duration::ZERO));
        assert_eq!(e["code"], "unknown_session");
        let ok = value(&s.handle(r#"{"cmd":"step","session":3}"#, Duration::ZERO));
        assert_eq!(ok["t"], 1);
    }

    #[test]
    fn human_action_wins_and_source_agent_ignores_it() {
        let m = models();
        let mut s = Session::new(&m, 0);
        s.handle(r#"{"cmd":"reset","seed":5}"#, Duration::ZERO);
        let mut saw_override = false;
        for i in 0..20u64 {
            let a = if i % 2 == 0 { "-1" } else { "1" };
            let r = value(&s.handle(&format!(r#"{{"cmd":"step","action":[{a}]}}"#), Duration::from_millis(i * 50)));
            assert_eq!(r["action"][0].as_f64(), Some(a.parse::<f64>().unwrap()));
            saw_override |= r["action"] != r["agent_action"];
        }
        assert!(saw_override);
        let r = value(&s.handle(r#"{"cmd":"step","action":[1],"source":"agent"}"#, Duration::from_secs(2)));
        assert_eq!(r["action"], r["agent_action"]);
    }

    #[test]
    fn temperature_applies_mid_episode() {
        let m = models();
        let run = |tau: Option<f64>| {
            let mut s = Session::new(&m, 0);
            s.handle(r#"{"cmd":"set","render":false}"#, Duration::ZERO);
            s.handle(r#"{"cmd":"reset","seed":11}"#, Duration::ZERO);
            let mut zs = Vec::new();
            for i in 0..6u64 {
                if i == 3 {
                    if let Some(t) = tau {
                        s.handle(&format!(r#"{{"cmd":"set","temperature":{t}}}"#), Duration::ZERO);
                    }
                }
                zs.push(value(&s.handle(r#"{"cmd":"step","action":[0]}"#, Duration::from_millis(i * 50)))["z"].clone());
            }
            zs
        };
        let (a, b) = (run(None), run(Some(1.3)));
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3..], b[3..]);
    }

    #[test]
    fn interleaved_sessions_are_isolated() {
        let m = models();
        let script: Vec<String> = std::iter::once(r#"{"cmd":"reset","seed":21}"#.to_string())
            .chain((0..15).map(|i| format!(r#"{{"cmd":"step","action":[{}]}}"#, i % 3 - 1)))
            .collect();
        let mut alone = Session::new(&m, 0);
        let solo: Vec<String> = script.iter().enumerate().map(|(i, l)| alone.handle(l, Duration::from_millis(i as u64 * 40))).collect();
        let mut a = Session::new(&m, 0);
        let mut b = Session::new(&m, 1);
        b.handle(r#"{"cmd":"reset","seed":99,"temperature":2.0}"#, Duration::ZERO);
        let mut mixed = Vec::new();
        for (i, l) in script.iter().enumerate() {
            b.handle(r#"{"cmd":"step","action":[1]}"#, Duration::from_millis(i as u64 * 40));
            mixed.push(a.handle(l, Duration::from_millis(i as u64 * 40)));
        }
        assert_eq!(solo, mixed);
    }
}
