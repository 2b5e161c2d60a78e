//! Run configuration: presets plus `key = value` overrides.
//!
//! A config file is one `key = value` per line; `#` starts a comment. The
//! `preset` key, wherever it appears, is applied before any other key.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::controller::{ControllerArch, FeatureSet};
use crate::dream::{DreamConfig, DreamReward};
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::mdnrnn::{MdnRnnArch, RnnTrainConfig};
use crate::tensor::Precision;
use crate::vae::{VaeArch, VaeTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperCarracing,
    PaperDoom,
    DeskTrack,
    DeskDodge,
    /// Half-width VAE and smaller M for quick runs.
    Mini,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-carracing" => Ok(Preset::PaperCarracing),
            "paper-doom" => Ok(Preset::PaperDoom),
            "desk-track" => Ok(Preset::DeskTrack),
            "desk-dodge" => Ok(Preset::DeskDodge),
            "mini" => Ok(Preset::Mini),
            other => Err(Error::invalid(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Real,
    Dream,
    /// Evaluation only: the data-collection policy.
    Random,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Mode::Real),
            "dream" => Ok(Mode::Dream),
            "random" => Ok(Mode::Random),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub episodes: usize,
    /// Episodes stepped side by side.
    pub batch: usize,
    /// Mean length of the random policy's action bursts.
    pub burst: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeStage {
    pub nz: usize,
    pub channels: [usize; 4],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_tolerance: f64,
    /// Episodes loaded into memory at a time while training.
    pub chunk_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnStage {
    pub hidden: usize,
    pub mixtures: usize,
    pub done_head: bool,
    pub start_flag: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub done_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerStage {
    pub features: FeatureSet,
    pub bias: bool,
    pub hidden_layer: Option<usize>,
    pub mode: Mode,
    pub temperature: f64,
    pub max_steps: usize,
    pub lambda: Option<usize>,
    pub sigma0: f64,
    pub generations: usize,
    pub rollouts: usize,
    pub eval_every: usize,
    pub eval_rollouts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateStage {
    pub episodes: usize,
    pub mode: Mode,
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateStage {
    pub iterations: usize,
    /// Real rollouts collected per iteration after the first.
    pub episodes: usize,
    pub retrain_vae: bool,
    /// Weight of the surprise bonus during collection; 0 disables it.
    pub curiosity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub env: EnvId,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub workers: usize,
    pub collect: CollectConfig,
    pub vae: VaeStage,
    pub rnn: RnnStage,
    pub controller: ControllerStage,
    pub evaluate: EvaluateStage,
    pub iterate: IterateStage,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let carracing = matches!(preset, Preset::PaperCarracing | Preset::DeskTrack);
        // With a thousand rollouts the published batch sizes give M too few
        // updates to learn the rare done signal, and V misses small sprites.
        let desk = !matches!(preset, Preset::PaperCarracing | Preset::PaperDoom);
        let episodes = match preset {
            Preset::PaperCarracing | Preset::PaperDoom => 10_000,
            Preset::DeskTrack | Preset::DeskDodge | Preset::Mini => 1_000,
        };
        let (nz, channels, hidden) = match preset {
            Preset::PaperCarracing | Preset::DeskTrack => (32, VaeArch::standard(32).enc_channels, 256),
            Preset::PaperDoom | Preset::DeskDodge => (64, VaeArch::standard(64).enc_channels, 512),
            Preset::Mini => (16, VaeArch::mini(16).enc_channels, 256),
        };
        Self {
            preset,
            env: if carracing { EnvId::TrackToy } else { EnvId::DodgeToy },
            run_dir: PathBuf::from("runs/default"),
            seed: 0,
            precision: Precision::F32,
            workers: 1,
            collect: CollectConfig {
                episodes,
                batch: 16,
                burst: 10.0,
            },
            vae: VaeStage {
                nz,
                channels,
                epochs: 1,
                batch_size: 32,
                learning_rate: if desk { 1e-3 } else { 1e-4 },
                kl_tolerance: 0.5,
                chunk_episodes: 100,
            },
            rnn: RnnStage {
                hidden,
                mixtures: 5,
                done_head: !carracing,
                start_flag: !carracing,
                epochs: 20,
                batch_size: if desk { 16 } else { 100 },
                seq_len: if desk { 100 } else { 500 },
                learning_rate: 1e-3,
                done_weight: 1.0,
            },
            controller: ControllerStage {
                features: if carracing { FeatureSet::Zh } else { FeatureSet::Zhc },
                bias: carracing,
                hidden_layer: None,
                mode: if carracing { Mode::Real } else { Mode::Dream },
                temperature: if carracing { 1.0 } else { 1.15 },
                max_steps: 2100,
                lambda: Some(64),
                sigma0: 0.1,
                generations: 200,
                rollouts: 16,
                eval_every: 25,
                eval_rollouts: if matches!(preset, Preset::PaperCarracing | Preset::PaperDoom) { 1024 } else { 100 },
            },
            evaluate: EvaluateStage {
                episodes: 100,
                mode: Mode::Real,
                bins: 20,
            },
            iterate: IterateStage {
                iterations: 1,
                episodes: episodes / 2,
                retrain_vae: false,
                curiosity: 0.0,
            },
        }
    }

    /// Applies `key = value` text. Returns the first error with its line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        if let Some((n, _, v)) = pairs.iter().find(|(_, k, _)| k == "preset") {
            let p: Preset = v.parse().map_err(|e| Error::invalid(format!("line {n}: {e}")))?;
            let keep_dir = self.run_dir.clone();
            *self = Self::preset(p);
            self.run_dir = keep_dir;
        }
        for (n, k, v) in pairs.iter().filter(|(_, k, _)| k != "preset") {
            self.set(k, v).map_err(|e| Error::invalid(format!("line {n}: {e}")))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::preset(Preset::DeskDodge);
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
        }
        let v = value;
        match key {
            "preset" => {
                let dir = self.run_dir.clone();
                *self = Self::preset(p(key, v)?);
                self.run_dir = dir;
            }
            "env" => self.env = v.parse()?,
            "run_dir" => self.run_dir = PathBuf::from(v),
            "seed" => self.seed = p(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => return Err(Error::invalid(format!("bad precision {v:?}"))),
                }
            }
            "workers" => self.workers = p(key, v)?,
            "collect.episodes" => self.collect.episodes = p(key, v)?,
            "collect.batch" => self.collect.batch = p(key, v)?,
            "collect.burst" => self.collect.burst = p(key, v)?,
            "vae.nz" => self.vae.nz = p(key, v)?,
            "vae.channels" => {
                self.vae.channels = match v {
                    "standard" => VaeArch::standard(0).enc_channels,
                    "mini" => VaeArch::mini(0).enc_channels,
                    _ => {
                        let c: Vec<usize> = v.split(',').map(|x| p(key, x.trim())).collect::<Result<_>>()?;
                        c.try_into().map_err(|_| Error::invalid("vae.channels needs four values"))?
                    }
                }
            }
            "vae.epochs" => self.vae.epochs = p(key, v)?,
            "vae.batch_size" => self.vae.batch_size = p(key, v)?,
            "vae.learning_rate" => self.vae.learning_rate = p(key, v)?,
            "vae.kl_tolerance" => self.vae.kl_tolerance = p(key, v)?,
            "vae.chunk_episodes" => self.vae.chunk_episodes = p(key, v)?,
            "rnn.hidden" => self.rnn.hidden = p(key, v)?,
            "rnn.mixtures" => self.rnn.mixtures = p(key, v)?,
            "rnn.done_head" => self.rnn.done_head = p(key, v)?,
            "rnn.start_flag" => self.rnn.start_flag = p(key, v)?,
            "rnn.epochs" => self.rnn.epochs = p(key, v)?,
            "rnn.batch_size" => self.rnn.batch_size = p(key, v)?,
            "rnn.seq_len" => self.rnn.seq_len = p(key, v)?,
            "rnn.learning_rate" => self.rnn.learning_rate = p(key, v)?,
            "rnn.done_weight" => self.rnn.done_weight = p(key, v)?,
            "controller.features" => {
                self.controller.features = match v {
                    "z" => FeatureSet::Z,
                    "zh" => FeatureSet::Zh,
                    "zhc" => FeatureSet::Zhc,
                    _ => return Err(Error::invalid(format!("bad feature set {v:?}"))),
                }
            }
            "controller.bias" => self.controller.bias = p(key, v)?,
            "controller.hidden_layer" => {
                self.controller.hidden_layer = match v {
                    "none" | "0" => None,
                    _ => Some(p(key, v)?),
                }
            }
            "controller.mode" => self.controller.mode = v.parse()?,
            "controller.temperature" | "temperature" => self.controller.temperature = p(key, v)?,
            "controller.max_steps" => self.controller.max_steps = p(key, v)?,
            "controller.lambda" => {
                self.controller.lambda = match v {
                    "default" => None,
                    _ => Some(p(key, v)?),
                }
            }
            "controller.sigma0" => self.controller.sigma0 = p(key, v)?,
            "controller.generations" => self.controller.generations = p(key, v)?,
            "controller.rollouts" => self.controller.rollouts = p(key, v)?,
            "controller.eval_every" => self.controller.eval_every = p(key, v)?,
            "controller.eval_rollouts" => self.controller.eval_rollouts = p(key, v)?,
            "evaluate.episodes" => self.evaluate.episodes = p(key, v)?,
            "evaluate.mode" => self.evaluate.mode = v.parse()?,
            "evaluate.bins" => self.evaluate.bins = p(key, v)?,
            "iterate.iterations" => self.iterate.iterations = p(key, v)?,
            "iterate.episodes" => self.iterate.episodes = p(key, v)?,
            "iterate.retrain_vae" => self.iterate.retrain_vae = p(key, v)?,
            "iterate.curiosity" => self.iterate.curiosity = p(key, v)?,
            other => return Err(Error::invalid(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// The V-only ablation: C sees `z` alone through a 40-unit tanh layer.
    pub fn v_only(&mut self) {
        self.controller.features = FeatureSet::Z;
        self.controller.hidden_layer = Some(40);
        self.controller.bias = true;
    }

    pub fn validate(&self) -> Result<()> {
        if self.vae.nz == 0 || self.rnn.hidden == 0 {
            return Err(Error::invalid("model sizes must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if self.controller.features != FeatureSet::Z && self.controller.hidden_layer.is_some() {
            return Err(Error::invalid("the hidden-layer controller takes z only"));
        }
        self.rnn_arch().validate()?;
        self.dream_config(self.controller.temperature).validate()
    }

    pub fn vae_arch(&self) -> VaeArch {
        VaeArch {
            nz: self.vae.nz,
            enc_channels: self.vae.channels,
        }
    }

    pub fn rnn_arch(&self) -> MdnRnnArch {
        MdnRnnArch {
            nz: self.vae.nz,
            action_dim: self.env.spec().actions.len(),
            start_flag: self.rnn.start_flag,
            hidden: self.rnn.hidden,
            mixtures: self.rnn.mixtures,
            done_head: self.rnn.done_head,
        }
    }

    pub fn controller_arch(&self) -> ControllerArch {
        ControllerArch {
            nz: self.vae.nz,
            rnn_hidden: self.rnn.hidden,
            features: self.controller.features,
            action_dim: self.env.spec().actions.len(),
            bias: self.controller.bias,
            hidden_layer: self.controller.hidden_layer,
        }
    }

    pub fn vae_train(&self) -> VaeTrainConfig {
        VaeTrainConfig {
            epochs: self.vae.epochs,
            batch_size: self.vae.batch_size,
            adam: AdamConfig::with_learning_rate(self.vae.learning_rate),
            kl_tolerance: self.vae.kl_tolerance,
        }
    }

    pub fn rnn_train(&self) -> RnnTrainConfig {
        RnnTrainConfig {
            epochs: self.rnn.epochs,
            batch_size: self.rnn.batch_size,
            seq_len: self.rnn.seq_len,
            adam: AdamConfig::with_learning_rate(self.rnn.learning_rate),
            done_weight: self.rnn.done_weight,
        }
    }

    pub fn dream_config(&self, temperature: f64) -> DreamConfig {
        DreamConfig {
            temperature,
            max_steps: self.controller.max_steps,
            reward: DreamReward::Survival,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_presets_match_architecture_counts() {
        let c = RunConfig::preset(Preset::PaperCarracing);
        assert_eq!(c.vae_arch().param_count(), 4_348_547);
        assert_eq!(c.rnn_arch().param_count(), 422_368);
        assert_eq!(c.controller_arch().param_count(), 867);
        let d = RunConfig::preset(Preset::PaperDoom);
        assert_eq!(d.vae_arch().param_count(), 4_446_915);
        assert_eq!(d.rnn_arch().param_count(), 1_678_785);
        assert_eq!(d.controller_arch().param_count(), 1_088);
        let mut v = RunConfig::preset(Preset::PaperCarracing);
        v.v_only();
        assert_eq!(v.controller_arch().param_count(), 1_443);
    }

    #[test]
    fn text_overrides_apply_after_preset() {
        let mut c = RunConfig::preset(Preset::DeskTrack);
        c.apply_text("# comment\nvae.epochs = 3\npreset = mini\ncontroller.lambda = default  # trailing\n")
            .unwrap();
        assert_eq!(c.preset, Preset::Mini);
        assert_eq!(c.vae.epochs, 3);
        assert_eq!(c.controller.lambda, None);
    }

    #[test]
    fn bad_lines_report_line_numbers() {
        let mut c = RunConfig::preset(Preset::Mini);
        let e = c.apply_text("seed = 1\nnot a pair\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(c.apply_text("vae.nz = many").is_err());
        assert!(c.apply_text("nonsense = 1").is_err());
    }
}
