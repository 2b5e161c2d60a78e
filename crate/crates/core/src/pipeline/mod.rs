//! The training pipeline over a run directory:
//!
//! ```text
//! run_dir/
//!   config.json            effective configuration
//!   run.json               summary of every stage that has run
//!   data/iter_000/         rollout datasets, one per iteration
//!   vae/ encoded/ rnn/ controller/
//!   logs/*.jsonl           per-batch or per-generation training logs
//!   eval/report_<mode>.json
//! ```
//!
//! Every artifact records hashes of what it was built from, and a stage
//! refuses inputs whose recorded hashes no longer match.

pub mod encoded;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::WorldModelAgent;
use crate::checkpoint::{self, CheckpointManifest, CheckpointMeta, ModelType};
use crate::cmaes::{evolve, EvolveConfig, PerCandidate};
use crate::config::{Mode, RunConfig};
use crate::controller::{Controller, FeatureSet};
use crate::dream::{dream_rollouts, DreamFitness, InitialPool};
use crate::env::dataset::DatasetReader;
use crate::env::{collect_rollouts, run_episodes, CollectSummary, EnvPool, Frame, RandomAgent};
use crate::error::{Error, Result};
use crate::mdnrnn::{epoch_mean_nll, train_mdnrnn, LatentEpisode, MdnRnn};
use crate::seeds::{derive_seed, stream};
use crate::tensor::{Precision, Real};
use crate::vae::{shuffle, Vae, VaeTrainer};

pub use encoded::{initial_pool, load_encoded, EncodedEpisode, EncodedManifest};
pub use report::{EvalReport, Histogram};

const DATASET_HASH: &str = "content.sha256";
const ENCODE_BATCH: usize = 64;
const EVAL_BATCH: usize = 64;

/// Locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn dataset(&self, iteration: usize) -> PathBuf {
        self.data().join(format!("iter_{iteration:03}"))
    }

    pub fn vae(&self) -> PathBuf {
        self.root.join("vae")
    }

    pub fn encoded(&self) -> PathBuf {
        self.root.join("encoded")
    }

    pub fn rnn(&self) -> PathBuf {
        self.root.join("rnn")
    }

    pub fn controller(&self) -> PathBuf {
        self.root.join("controller")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn eval_report(&self, mode: Mode) -> PathBuf {
        self.root.join("eval").join(format!("report_{}.json", mode_name(mode)))
    }

    /// Dataset directories in iteration order.
    pub fn datasets(&self) -> Result<Vec<PathBuf>> {
        let data = self.data();
        if !data.exists() {
            return Ok(Vec::new());
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(&data)
            .map_err(|e| Error::io(&data, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(crate::env::dataset::MANIFEST).exists())
            .collect();
        dirs.sort();
        Ok(dirs)
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Real => "real",
        Mode::Dream => "dream",
        Mode::Random => "random",
    }
}

/// One JSON value per line, flushed as written.
pub struct JsonlWriter {
    path: PathBuf,
    w: BufWriter<fs::File>,
}

impl JsonlWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, w: BufWriter::new(f) })
    }

    pub fn write<S: Serialize>(&mut self, value: &S) -> Result<()> {
        let line = serde_json::to_string(value)?;
        writeln!(self.w, "{line}")
            .and_then(|_| self.w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Stage summaries keyed by stage name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn load(paths: &RunPaths) -> Result<Self> {
        let path = paths.root.join("run.json");
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

fn record_stage<S: Serialize>(cfg: &RunConfig, stage: &str, summary: &S) -> Result<()> {
    let paths = RunPaths::new(&cfg.run_dir);
    fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let cpath = paths.root.join("config.json");
    fs::write(&cpath, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cpath, e))?;
    let mut run = RunManifest::load(&paths)?;
    run.stages.insert(stage.into(), serde_json::to_value(summary)?);
    let rpath = paths.root.join("run.json");
    fs::write(&rpath, serde_json::to_string_pretty(&run)?).map_err(|e| Error::io(&rpath, e))
}

/// SHA-256 over a dataset's manifest and episode files, cached next to them.
pub fn dataset_hash(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let cache = dir.join(DATASET_HASH);
    if let Ok(h) = fs::read_to_string(&cache) {
        return Ok(h.trim().to_string());
    }
    let reader = DatasetReader::open(dir)?;
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for name in std::iter::once(crate::env::dataset::MANIFEST).chain(reader.manifest.files.iter().map(String::as_str)) {
        let path = dir.join(name);
        buf.clear();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(&path, e))?;
        hasher.update((buf.len() as u64).to_le_bytes());
        hasher.update(&buf);
    }
    let h = hex::encode(hasher.finalize());
    fs::write(&cache, &h).map_err(|e| Error::io(&cache, e))?;
    Ok(h)
}

macro_rules! dispatch {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectReport {
    pub dir: PathBuf,
    pub policy: String,
    #[serde(flatten)]
    pub summary: CollectSummary,
    pub sha256: String,
}

fn collect_seed(cfg: &RunConfig, iteration: usize, i: usize) -> u64 {
    derive_seed(cfg.seed, stream::COLLECT, ((iteration as u64) << 32) | i as u64)
}

/// Random-policy rollouts into `data/iter_000`.
pub fn collect(cfg: &RunConfig) -> Result<CollectReport> {
    collect_random(cfg).map_err(|e| e.in_stage("collect"))
}

fn collect_random(cfg: &RunConfig) -> Result<CollectReport> {
    cfg.validate()?;
    let dir = RunPaths::new(&cfg.run_dir).dataset(0);
    let kinds = cfg.env.spec().actions;
    let burst = cfg.collect.burst;
    let created = serde_json::json!({"policy": "random", "burst": burst, "seed": cfg.seed});
    log::info!("collecting {} {} rollouts into {}", cfg.collect.episodes, cfg.env.name(), dir.display());
    let summary = collect_rollouts(
        cfg.env,
        cfg.collect.episodes,
        |i| collect_seed(cfg, 0, i),
        cfg.collect.batch,
        &dir,
        created,
        |seeds| Ok(RandomAgent::new(kinds.clone(), burst).with_seeds(seeds)),
    )?;
    let report = CollectReport {
        sha256: dataset_hash(&dir)?,
        dir,
        policy: "random".into(),
        summary,
    };
    record_stage(cfg, "collect", &report)?;
    Ok(report)
}

/// Rollouts of the current agent into `data/iter_NNN`.
fn collect_with_agent<T: Real>(cfg: &RunConfig, iteration: usize, episodes: usize) -> Result<CollectReport> {
    let paths = RunPaths::new(&cfg.run_dir);
    let dir = paths.dataset(iteration);
    let (vm, vae) = checkpoint::load_vae::<T>(paths.vae())?;
    let (rm, rnn) = load_rnn_or_blank::<T>(cfg)?;
    let (cm, controller) = checkpoint::load_controller::<T>(paths.controller())?;
    check_inputs(&cm, &vm, rm.as_ref())?;
    let kinds = cfg.env.spec().actions;
    let curiosity = cfg.iterate.curiosity;
    let created = serde_json::json!({
        "policy": "controller",
        "controller": cm.blob_sha256,
        "curiosity": curiosity,
        "iteration": iteration,
    });
    let summary = collect_rollouts(
        cfg.env,
        episodes,
        |i| collect_seed(cfg, iteration, i),
        cfg.collect.batch,
        &dir,
        created,
        |_| Ok(WorldModelAgent::new(&vae, &rnn, &controller, kinds.clone())?.with_curiosity(curiosity)),
    )?;
    Ok(CollectReport {
        sha256: dataset_hash(&dir)?,
        dir,
        policy: "controller".into(),
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeReport {
    pub frames: usize,
    pub batches: usize,
    /// Mean reconstruction loss over the first quarter of batches.
    pub first_quartile_reconstruction: f64,
    /// Mean reconstruction loss over the last quarter of batches.
    pub last_quartile_reconstruction: f64,
    pub final_loss: f64,
    pub param_count: usize,
    pub sha256: String,
}

pub fn train_vae(cfg: &RunConfig) -> Result<VaeReport> {
    dispatch!(cfg, train_vae_impl(cfg, 0)).map_err(|e| e.in_stage("train-vae"))
}

fn quartile_means(values: &[f64]) -> (f64, f64) {
    let q = (values.len() / 4).max(1).min(values.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    (mean(&values[..q]), mean(&values[values.len() - q..]))
}

fn train_vae_impl<T: Real>(cfg: &RunConfig, iteration: usize) -> Result<VaeReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.run_dir);
    let readers = paths.datasets()?.iter().map(DatasetReader::open).collect::<Result<Vec<_>>>()?;
    if readers.iter().all(DatasetReader::is_empty) {
        return Err(Error::invalid(format!("no rollouts under {}", paths.data().display())));
    }
    let hashes = paths.datasets()?.iter().map(dataset_hash).collect::<Result<Vec<_>>>()?;
    let train = cfg.vae_train();
    if train.batch_size == 0 || cfg.vae.chunk_episodes == 0 {
        return Err(Error::invalid("VAE batch size and chunk size must be positive"));
    }
    let init_seed = derive_seed(cfg.seed, stream::INIT, iteration as u64);
    let mut vae = Vae::<T>::new(cfg.vae_arch(), &mut ChaCha8Rng::seed_from_u64(init_seed));
    let mut trainer = VaeTrainer::new(&vae, &train);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::VAE, iteration as u64));
    let mut log = JsonlWriter::create(paths.logs().join("vae.jsonl"))?;
    let mut index: Vec<(usize, usize)> = readers
        .iter()
        .enumerate()
        .flat_map(|(r, d)| (0..d.len()).map(move |i| (r, i)))
        .collect();
    let mut recon = Vec::new();
    let mut frames_seen = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..train.epochs {
        shuffle(&mut index, &mut rng);
        let mut pending: Vec<Frame> = Vec::new();
        let mut batch = 0;
        let chunks: Vec<&[(usize, usize)]> = index.chunks(cfg.vae.chunk_episodes).collect();
        for (ci, chunk) in chunks.iter().enumerate() {
            for &(r, i) in *chunk {
                pending.extend(readers[r].read(i)?.frames);
            }
            shuffle(&mut pending, &mut rng);
            let last = ci + 1 == chunks.len();
            while pending.len() >= train.batch_size || (last && !pending.is_empty()) {
                let take = pending.len().min(train.batch_size);
                let frames: Vec<Frame> = pending.drain(pending.len() - take..).collect();
                let refs: Vec<&Frame> = frames.iter().collect();
                let entry = crate::vae::VaeBatchLog {
                    epoch,
                    batch,
                    ..trainer.train_batch(&mut vae, &refs, &mut rng)?
                };
                if !entry.loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "VAE loss",
                        index: batch,
                    });
                }
                log.write(&entry)?;
                if batch % 200 == 0 {
                    log::info!("vae epoch {epoch} batch {batch}: loss {:.2} rec {:.2} kl {:.2}", entry.loss, entry.reconstruction, entry.kl);
                }
                recon.push(entry.reconstruction);
                final_loss = entry.loss;
                frames_seen += take;
                batch += 1;
            }
        }
    }
    let (first, last) = quartile_means(&recon);
    let mut inputs = serde_json::Map::new();
    inputs.insert("datasets".into(), serde_json::to_value(&hashes)?);
    let meta = CheckpointMeta {
        model_type: ModelType::Vae,
        arch: serde_json::to_value(&vae.arch)?,
        hyperparameters: serde_json::to_value(&train)?,
        seed: init_seed,
        inputs,
    };
    let m = checkpoint::save_checkpoint(paths.vae(), meta, &vae.params)?;
    let report = VaeReport {
        frames: frames_seen,
        batches: recon.len(),
        first_quartile_reconstruction: first,
        last_quartile_reconstruction: last,
        final_loss,
        param_count: m.param_count,
        sha256: m.blob_sha256,
    };
    record_stage(cfg, "train-vae", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeReport {
    pub episodes: usize,
    pub steps: usize,
    pub vae_sha256: String,
}

/// Encodes every dataset with the current VAE into `encoded/`.
pub fn encode(cfg: &RunConfig) -> Result<EncodeReport> {
    dispatch!(cfg, encode_impl(cfg)).map_err(|e| e.in_stage("encode"))
}

fn encode_impl<T: Real>(cfg: &RunConfig) -> Result<EncodeReport> {
    let paths = RunPaths::new(&cfg.run_dir);
    let (vm, vae) = checkpoint::load_vae::<T>(paths.vae())?;
    let dirs = paths.datasets()?;
    let hashes = dirs.iter().map(dataset_hash).collect::<Result<Vec<_>>>()?;
    let trained_on: Vec<String> = serde_json::from_value(vm.inputs.get("datasets").cloned().unwrap_or_default()).unwrap_or_default();
    if let Some(h) = trained_on.iter().find(|h| !hashes.contains(h)) {
        log::warn!("VAE was trained on dataset {h} which is no longer present");
    }
    let nz = vae.nz();
    let action_dim = cfg.env.spec().actions.len();
    let mut w = encoded::EncodedWriter::create(paths.encoded(), cfg.env, nz, action_dim, &vm.blob_sha256, hashes)?;
    for dir in &dirs {
        let reader = DatasetReader::open(dir)?;
        if reader.manifest.env != cfg.env {
            return Err(Error::invalid(format!("{} holds {} rollouts, run is {}", dir.display(), reader.manifest.env.name(), cfg.env.name())));
        }
        for i in 0..reader.len() {
            let rec = reader.read(i)?;
            let mut mu = Vec::with_capacity(rec.len() * nz);
            let mut sigma = Vec::with_capacity(rec.len() * nz);
            for frames in rec.frames.chunks(ENCODE_BATCH) {
                let refs: Vec<&Frame> = frames.iter().collect();
                for s in vae.encode_batch(&refs) {
                    mu.extend(s.mu.iter().map(|v| v.as_f64() as f32));
                    sigma.extend(s.sigma.iter().map(|v| v.as_f64() as f32));
                }
            }
            w.push(&EncodedEpisode {
                seed: rec.seed,
                latent: LatentEpisode {
                    nz,
                    action_dim,
                    mu,
                    sigma,
                    actions: rec.actions,
                    dones: rec.dones,
                },
                rewards: rec.rewards,
            })?;
        }
    }
    let m = w.finish()?;
    let report = EncodeReport {
        episodes: m.episodes,
        steps: m.total_steps,
        vae_sha256: m.vae_sha256,
    };
    record_stage(cfg, "encode", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnReport {
    pub epoch_nll: Vec<f64>,
    pub batches: usize,
    pub param_count: usize,
    pub sha256: String,
}

pub fn train_rnn(cfg: &RunConfig) -> Result<RnnReport> {
    dispatch!(cfg, train_rnn_impl(cfg, 0)).map_err(|e| e.in_stage("train-rnn"))
}

fn train_rnn_impl<T: Real>(cfg: &RunConfig, iteration: usize) -> Result<RnnReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.run_dir);
    let vm = checkpoint::read_manifest(paths.vae())?;
    let (em, episodes) = load_encoded(paths.encoded())?;
    if em.vae_sha256 != vm.blob_sha256 {
        return Err(Error::State(format!(
            "encoded latents were made by VAE {} but the current VAE is {}; re-run encode",
            short(&em.vae_sha256),
            short(&vm.blob_sha256)
        )));
    }
    let init_seed = derive_seed(cfg.seed, stream::INIT, 1000 + iteration as u64);
    let mut rnn = MdnRnn::<T>::new(cfg.rnn_arch(), &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    let train = cfg.rnn_train();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::RNN, iteration as u64));
    let latents: Vec<LatentEpisode> = episodes.into_iter().map(|e| e.latent).collect();
    let mut log = JsonlWriter::create(paths.logs().join("rnn.jsonl"))?;
    let mut failed = None;
    let history = train_mdnrnn(&mut rnn, &latents, &train, &mut rng, |b| {
        if failed.is_none() {
            failed = log.write(b).err();
        }
        if b.batch == 0 {
            log::info!("rnn epoch {} first batch: nll {:.4} bce {:.4}", b.epoch, b.nll, b.bce);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    let epoch_nll = epoch_mean_nll(&history);
    if let Some(i) = epoch_nll.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "MDN-RNN epoch NLL", index: i });
    }
    let m = checkpoint::save_mdnrnn(paths.rnn(), &rnn, serde_json::to_value(&train)?, init_seed, &vm.blob_sha256)?;
    let report = RnnReport {
        epoch_nll,
        batches: history.len(),
        param_count: m.param_count,
        sha256: m.blob_sha256,
    };
    record_stage(cfg, "train-rnn", &report)?;
    Ok(report)
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// The trained M, or a fresh one when C ignores M's state and none exists.
fn load_rnn_or_blank<T: Real>(cfg: &RunConfig) -> Result<(Option<CheckpointManifest>, MdnRnn<T>)> {
    let dir = RunPaths::new(&cfg.run_dir).rnn();
    if dir.join(checkpoint::MANIFEST).exists() || cfg.controller.features != FeatureSet::Z {
        let (m, r) = checkpoint::load_mdnrnn::<T>(dir)?;
        return Ok((Some(m), r));
    }
    Ok((None, MdnRnn::new(cfg.rnn_arch(), &mut ChaCha8Rng::seed_from_u64(0))?))
}

/// Starting states for dreams: the first frame of every encoded episode.
pub fn load_initial_pool(cfg: &RunConfig) -> Result<InitialPool> {
    let (_, episodes) = load_encoded(RunPaths::new(&cfg.run_dir).encoded())?;
    initial_pool(&episodes)
}

fn check_inputs(controller: &CheckpointManifest, vae: &CheckpointManifest, rnn: Option<&CheckpointManifest>) -> Result<()> {
    let want = |key: &str, have: &str| match controller.inputs.get(key).and_then(|v| v.as_str()) {
        Some(h) if h != have => Err(Error::State(format!(
            "controller was trained against {key} {} but the current {key} is {}",
            short(h),
            short(have)
        ))),
        _ => Ok(()),
    };
    want("vae", &vae.blob_sha256)?;
    if let Some(r) = rnn {
        want("rnn", &r.blob_sha256)?;
        if let Some(h) = r.inputs.get("vae").and_then(|v| v.as_str()) {
            if h != vae.blob_sha256 {
                return Err(Error::State(format!(
                    "MDN-RNN was trained on latents of VAE {} but the current VAE is {}",
                    short(h),
                    short(&vae.blob_sha256)
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub mode: Mode,
    pub generations: usize,
    pub lambda: usize,
    pub param_count: usize,
    pub best_fitness: f64,
    pub best_eval: Option<f64>,
    pub final_sigma: f64,
    pub sha256: String,
}

pub fn train_controller(cfg: &RunConfig) -> Result<ControllerReport> {
    dispatch!(cfg, train_controller_impl(cfg, 0)).map_err(|e| e.in_stage("train-controller"))
}

fn train_controller_impl<T: Real>(cfg: &RunConfig, iteration: usize) -> Result<ControllerReport> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.run_dir);
    let arch = cfg.controller_arch();
    let kinds = cfg.env.spec().actions;
    let ecfg = EvolveConfig {
        lambda: cfg.controller.lambda,
        sigma0: cfg.controller.sigma0,
        generations: cfg.controller.generations,
        rollouts_per_candidate: cfg.controller.rollouts,
        eval_every: cfg.controller.eval_every,
        eval_rollouts: cfg.controller.eval_rollouts,
        seed: derive_seed(cfg.seed, stream::CMA, iteration as u64),
        workers: cfg.workers,
    };
    let x0 = vec![0.0; arch.param_count()];
    let mut log = JsonlWriter::create(paths.logs().join("controller.jsonl"))?;
    let mut log_err = None;
    let mut on_gen = |g: &crate::cmaes::GenerationRecord| {
        if log_err.is_none() {
            log_err = log.write(g).err();
        }
        log::info!(
            "generation {}: best {:.1} mean {:.1} sigma {:.4}{}",
            g.generation,
            g.best,
            g.mean,
            g.sigma,
            g.eval_score.map(|s| format!(" eval {s:.1}")).unwrap_or_default()
        );
    };
    let vm = checkpoint::read_manifest(paths.vae())?;
    let mut inputs = serde_json::Map::new();
    inputs.insert("vae".into(), vm.blob_sha256.clone().into());
    let result = match cfg.controller.mode {
        Mode::Dream => {
            let (rm, rnn) = checkpoint::load_mdnrnn::<T>(paths.rnn())?;
            check_inputs(&CheckpointManifest { inputs: Default::default(), ..rm.clone() }, &vm, Some(&rm))?;
            inputs.insert("rnn".into(), rm.blob_sha256.clone().into());
            let pool = load_initial_pool(cfg)?;
            let fitness = DreamFitness {
                arch: arch.clone(),
                model: &rnn,
                pool: &pool,
                config: cfg.dream_config(cfg.controller.temperature),
                kinds: kinds.clone(),
            };
            evolve(&x0, &fitness, &ecfg, &mut on_gen)?
        }
        Mode::Real => {
            let (_, vae) = checkpoint::load_vae::<T>(paths.vae())?;
            let (rm, rnn) = load_rnn_or_blank::<T>(cfg)?;
            if let Some(rm) = &rm {
                check_inputs(&CheckpointManifest { inputs: Default::default(), ..rm.clone() }, &vm, Some(rm))?;
                inputs.insert("rnn".into(), rm.blob_sha256.clone().into());
            }
            let env = cfg.env;
            let rollout = |params: &[f64], seeds: &[u64]| -> Result<Vec<f64>> {
                let p: Vec<T> = params.iter().map(|&v| T::lit(v)).collect();
                let c = Controller::unpack(arch.clone(), &p)?;
                let agent = WorldModelAgent::new(&vae, &rnn, &c, kinds.clone())?;
                Ok(run_episodes(EnvPool::new(env), agent, seeds)?.iter().map(|o| o.total_reward).collect())
            };
            evolve(&x0, &PerCandidate(&rollout), &ecfg, &mut on_gen)?
        }
        Mode::Random => return Err(Error::invalid("controller.mode must be real or dream")),
    };
    if let Some(e) = log_err {
        return Err(e);
    }
    inputs.insert("mode".into(), mode_name(cfg.controller.mode).into());
    let best: Vec<T> = result.best.iter().map(|&v| T::lit(v)).collect();
    let controller = Controller::unpack(arch.clone(), &best)?;
    let m = checkpoint::save_controller(paths.controller(), &controller, serde_json::to_value(&ecfg)?, ecfg.seed, inputs)?;
    let report = ControllerReport {
        mode: cfg.controller.mode,
        generations: result.history.len(),
        lambda: result.final_state.as_ref().map_or(0, |s| s.lambda),
        param_count: arch.param_count(),
        best_fitness: result.best_fitness,
        best_eval: result.best_eval,
        final_sigma: result.history.last().map_or(cfg.controller.sigma0, |g| g.sigma),
        sha256: m.blob_sha256,
    };
    record_stage(cfg, "train-controller", &report)?;
    Ok(report)
}

/// Seeds of the evaluation episodes; shared by every mode.
pub fn evaluation_seeds(cfg: &RunConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(cfg.seed, stream::EVALUATE, i)).collect()
}

/// Runs `episodes` evaluation episodes and writes `eval/report_<mode>.json`.
pub fn evaluate(cfg: &RunConfig, mode: Mode, episodes: usize) -> Result<EvalReport> {
    let r = match mode {
        Mode::Random => evaluate_random(cfg, episodes),
        _ => dispatch!(cfg, evaluate_impl(cfg, mode, episodes)),
    }
    .map_err(|e| e.in_stage("evaluate"))?;
    let path = RunPaths::new(&cfg.run_dir).eval_report(mode);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&path, serde_json::to_string_pretty(&r)?).map_err(|e| Error::io(&path, e))?;
    record_stage(cfg, &format!("evaluate-{}", mode_name(mode)), &serde_json::json!({"mean": r.mean, "std": r.std, "episodes": r.episodes}))?;
    Ok(r)
}

fn evaluate_random(cfg: &RunConfig, episodes: usize) -> Result<EvalReport> {
    let seeds = evaluation_seeds(cfg, episodes);
    let kinds = cfg.env.spec().actions;
    let mut outcomes = Vec::with_capacity(episodes);
    for chunk in seeds.chunks(EVAL_BATCH) {
        let agent = RandomAgent::new(kinds.clone(), cfg.collect.burst).with_seeds(chunk);
        outcomes.extend(run_episodes(EnvPool::new(cfg.env), agent, chunk)?);
    }
    let steps: Vec<usize> = outcomes.iter().map(|o| o.steps).collect();
    Ok(EvalReport::new(Mode::Random, cfg.env, outcomes.iter().map(|o| o.total_reward).collect(), &steps, cfg.evaluate.bins))
}

fn evaluate_impl<T: Real>(cfg: &RunConfig, mode: Mode, episodes: usize) -> Result<EvalReport> {
    let paths = RunPaths::new(&cfg.run_dir);
    let seeds = evaluation_seeds(cfg, episodes);
    let kinds = cfg.env.spec().actions;
    let vm = checkpoint::read_manifest(paths.vae())?;
    let (cm, controller) = checkpoint::load_controller::<T>(paths.controller())?;
    let mut outcomes = Vec::with_capacity(episodes);
    match mode {
        Mode::Real => {
            let (_, vae) = checkpoint::load_vae::<T>(paths.vae())?;
            let (rm, rnn) = load_rnn_or_blank::<T>(cfg)?;
            check_inputs(&cm, &vm, rm.as_ref())?;
            for chunk in seeds.chunks(EVAL_BATCH) {
                let agent = WorldModelAgent::new(&vae, &rnn, &controller, kinds.clone())?;
                outcomes.extend(run_episodes(EnvPool::new(cfg.env), agent, chunk)?);
            }
        }
        Mode::Dream => {
            let (rm, rnn) = checkpoint::load_mdnrnn::<T>(paths.rnn())?;
            check_inputs(&cm, &vm, Some(&rm))?;
            let pool = load_initial_pool(cfg)?;
            let dc = cfg.dream_config(cfg.controller.temperature);
            for chunk in seeds.chunks(EVAL_BATCH) {
                outcomes.extend(dream_rollouts(&controller, &rnn, &pool, &dc, &kinds, chunk)?);
            }
        }
        Mode::Random => unreachable!("handled by evaluate_random"),
    }
    let steps: Vec<usize> = outcomes.iter().map(|o| o.steps).collect();
    let mut r = EvalReport::new(mode, cfg.env, outcomes.iter().map(|o| o.total_reward).collect(), &steps, cfg.evaluate.bins);
    r.controller_sha256 = Some(cm.blob_sha256);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub episodes_collected: usize,
    pub collected_mean_return: f64,
    pub vae_trained: bool,
    pub rnn_final_nll: f64,
    pub controller_best: f64,
    pub real_mean: f64,
    pub real_std: f64,
}

/// Collect, train V, M and C, evaluate, and repeat with the trained agent
/// collecting the next batch of rollouts. M is retrained from scratch on
/// everything collected so far.
pub fn iterate(cfg: &RunConfig) -> Result<Vec<IterationRecord>> {
    dispatch!(cfg, iterate_impl(cfg)).map_err(|e| e.in_stage("iterate"))
}

fn iterate_impl<T: Real>(cfg: &RunConfig) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.run_dir);
    let mut log = JsonlWriter::create(paths.logs().join("iterate.jsonl"))?;
    let mut records = Vec::new();
    for k in 0..cfg.iterate.iterations {
        let collected = if k == 0 {
            if paths.dataset(0).join(crate::env::dataset::MANIFEST).exists() {
                let r = DatasetReader::open(paths.dataset(0))?;
                (r.manifest.episodes, r.manifest.mean_return)
            } else {
                let r = collect_random(cfg)?;
                (r.summary.episodes, r.summary.mean_return)
            }
        } else {
            let r = collect_with_agent::<T>(cfg, k, cfg.iterate.episodes)?;
            (r.summary.episodes, r.summary.mean_return)
        };
        let vae_trained = k == 0 || cfg.iterate.retrain_vae;
        if vae_trained {
            train_vae_impl::<T>(cfg, k)?;
        }
        encode_impl::<T>(cfg)?;
        let rnn = train_rnn_impl::<T>(cfg, k)?;
        let c = train_controller_impl::<T>(cfg, k)?;
        let eval = evaluate(cfg, Mode::Real, cfg.evaluate.episodes)?;
        let rec = IterationRecord {
            iteration: k,
            episodes_collected: collected.0,
            collected_mean_return: collected.1,
            vae_trained,
            rnn_final_nll: rnn.epoch_nll.last().copied().unwrap_or(f64::NAN),
            controller_best: c.best_eval.unwrap_or(c.best_fitness),
            real_mean: eval.mean,
            real_std: eval.std,
        };
        log::info!("iteration {k}: real return {:.1} ± {:.1}", rec.real_mean, rec.real_std);
        log.write(&rec)?;
        records.push(rec);
    }
    record_stage(cfg, "iterate", &records)?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub collect: Option<CollectReport>,
    pub vae: VaeReport,
    pub encode: EncodeReport,
    pub rnn: RnnReport,
    pub controller: ControllerReport,
    pub evaluation: EvalReport,
}

/// Every stage in order. Collection is skipped if `data/iter_000` exists.
pub fn run_all(cfg: &RunConfig) -> Result<RunSummary> {
    let paths = RunPaths::new(&cfg.run_dir);
    let collect = if paths.dataset(0).join(crate::env::dataset::MANIFEST).exists() {
        None
    } else {
        Some(collect(cfg)?)
    };
    Ok(RunSummary {
        collect,
        vae: train_vae(cfg)?,
        encode: encode(cfg)?,
        rnn: train_rnn(cfg)?,
        controller: train_controller(cfg)?,
        evaluation: evaluate(cfg, cfg.evaluate.mode, cfg.evaluate.episodes)?,
    })
}

/// Models of a finished run, loaded at the run's precision.
pub struct LoadedRun<T> {
    pub vae: Vae<T>,
    pub rnn: MdnRnn<T>,
    pub controller: Option<Controller<T>>,
    pub pool: InitialPool,
}

pub fn load_run<T: Real>(cfg: &RunConfig) -> Result<LoadedRun<T>> {
    let paths = RunPaths::new(&cfg.run_dir);
    let (vm, vae) = checkpoint::load_vae::<T>(paths.vae())?;
    let (rm, rnn) = checkpoint::load_mdnrnn::<T>(paths.rnn())?;
    check_inputs(&CheckpointManifest { inputs: Default::default(), ..rm.clone() }, &vm, Some(&rm))?;
    let controller = if paths.controller().join(checkpoint::MANIFEST).exists() {
        let (cm, c) = checkpoint::load_controller::<T>(paths.controller())?;
        check_inputs(&cm, &vm, Some(&rm))?;
        Some(c)
    } else {
        None
    };
    Ok(LoadedRun {
        vae,
        rnn,
        controller,
        pool: load_initial_pool(cfg)?,
    })
}
