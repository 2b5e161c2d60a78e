//! Episode records and the on-disk rollout dataset.
//!
//! A dataset is a directory with `manifest.json` and one `episode_NNNNNN.bin`
//! per episode. Episode file layout, all integers little-endian:
//!
//! ```text
//! magic "WMEP" | version u32 | seed u64 | T u32 | action_dim u32 | frame_len u32
//! frames   T × frame_len bytes (u8 RGB, row-major 64×64×3)
//! actions  T × action_dim f32
//! rewards  T f32
//! dones    T f32 (0 or 1)
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::frame::{Frame, FRAME_LEN};
use super::{Agent, Driver, EnvId, EnvPool};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WMEP";
const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub env: EnvId,
    pub seed: u64,
    pub action_dim: usize,
    pub frames: Vec<Frame>,
    /// `[T, action_dim]`
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
}

impl EpisodeRecord {
    pub fn new(env: EnvId, seed: u64, action_dim: usize) -> Self {
        Self {
            env,
            seed,
            action_dim,
            frames: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.dones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dones.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(|&r| f64::from(r)).sum()
    }

    /// Array lengths agree and only the last step is done.
    pub fn validate(&self) -> Result<()> {
        let t = self.dones.len();
        if self.frames.len() != t || self.rewards.len() != t || self.actions.len() != t * self.action_dim {
            return Err(Error::invalid(format!(
                "episode {}: inconsistent lengths (T={t}, frames {}, actions {}, rewards {})",
                self.seed,
                self.frames.len(),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        if let Some(i) = self.dones.iter().position(|&d| d) {
            if i + 1 != t {
                return Err(Error::invalid(format!("episode {}: done at step {i} of {t}", self.seed)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = self.len();
        let mut out = Vec::with_capacity(28 + t * (FRAME_LEN + 4 * (self.action_dim + 2)));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(self.action_dim as u32).to_le_bytes());
        out.extend_from_slice(&(FRAME_LEN as u32).to_le_bytes());
        for f in &self.frames {
            out.extend_from_slice(f.bytes());
        }
        for v in self.actions.iter().chain(&self.rewards) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &d in &self.dones {
            out.extend_from_slice(&(if d { 1.0f32 } else { 0.0 }).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(env: EnvId, bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(bad("not an episode file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(4) != VERSION {
            return Err(bad("unsupported episode version"));
        }
        let seed = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let (t, a, fl) = (u32_at(16) as usize, u32_at(20) as usize, u32_at(24) as usize);
        if fl != FRAME_LEN {
            return Err(bad("unexpected frame size"));
        }
        let want = 28 + t * FRAME_LEN + 4 * t * (a + 2);
        if bytes.len() != want {
            return Err(bad(&format!("expected {want} bytes, found {}", bytes.len())));
        }
        let mut o = 28;
        let mut frames = Vec::with_capacity(t);
        for _ in 0..t {
            frames.push(Frame::from_bytes(bytes[o..o + FRAME_LEN].to_vec())?);
            o += FRAME_LEN;
        }
        let mut floats = |n: usize| {
            let v: Vec<f32> = bytes[o..o + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            o += 4 * n;
            v
        };
        let actions = floats(t * a);
        let rewards = floats(t);
        let dones = floats(t).into_iter().map(|d| d != 0.0).collect();
        let rec = Self {
            env,
            seed,
            action_dim: a,
            frames,
            actions,
            rewards,
            dones,
        };
        rec.validate()?;
        Ok(rec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub env: EnvId,
    pub episodes: usize,
    pub frame_encoding: String,
    pub action_dim: usize,
    pub total_frames: usize,
    pub mean_return: f64,
    pub base_seed: u64,
    pub files: Vec<String>,
    /// Free-form description of what produced the data.
    pub created_with: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub episodes: usize,
    pub total_frames: usize,
    pub mean_return: f64,
}

pub fn episode_file_name(i: usize) -> String {
    format!("episode_{i:06}.bin")
}

/// Read access to a dataset directory without loading every episode.
pub struct DatasetReader {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl DatasetReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.files.len() != manifest.episodes {
            return Err(Error::format(&path, "file list does not match episode count"));
        }
        Ok(Self { dir, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.episodes
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.episodes == 0
    }

    pub fn read(&self, i: usize) -> Result<EpisodeRecord> {
        let path = self.dir.join(&self.manifest.files[i]);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        let rec = EpisodeRecord::from_bytes(self.manifest.env, &bytes, &path)?;
        if rec.action_dim != self.manifest.action_dim {
            return Err(Error::format(&path, "action dimension differs from manifest"));
        }
        Ok(rec)
    }
}

/// Loads every episode into memory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<EpisodeRecord>)> {
    let reader = DatasetReader::open(dir)?;
    let episodes = (0..reader.len()).map(|i| reader.read(i)).collect::<Result<Vec<_>>>()?;
    Ok((reader.manifest, episodes))
}

/// Writes a dataset from in-memory episodes.
pub fn write_dataset(dir: impl AsRef<Path>, episodes: &[EpisodeRecord], base_seed: u64, created_with: serde_json::Value) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let first = episodes.first().ok_or_else(|| Error::invalid("dataset needs at least one episode"))?;
    prepare_dir(dir)?;
    let mut w = DatasetWriter::new(dir, first.env, first.action_dim, base_seed);
    for e in episodes {
        w.push(e)?;
    }
    w.finish(created_with)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::invalid(format!("{} exists and is not empty", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct DatasetWriter<'a> {
    dir: &'a Path,
    env: EnvId,
    action_dim: usize,
    base_seed: u64,
    files: Vec<String>,
    frames: usize,
    return_sum: f64,
}

impl<'a> DatasetWriter<'a> {
    fn new(dir: &'a Path, env: EnvId, action_dim: usize, base_seed: u64) -> Self {
        Self {
            dir,
            env,
            action_dim,
            base_seed,
            files: Vec::new(),
            frames: 0,
            return_sum: 0.0,
        }
    }

    fn push(&mut self, e: &EpisodeRecord) -> Result<()> {
        e.validate()?;
        let name = episode_file_name(self.files.len());
        let path = self.dir.join(&name);
        let file = fs::File::create(&path).map_err(|err| Error::io(&path, err))?;
        let mut w = BufWriter::new(file);
        w.write_all(&e.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|err| Error::io(&path, err))?;
        self.files.push(name);
        self.frames += e.len();
        self.return_sum += e.total_reward();
        Ok(())
    }

    fn finish(self, created_with: serde_json::Value) -> Result<DatasetManifest> {
        let n = self.files.len();
        let manifest = DatasetManifest {
            format: "worldmodel-dataset/1".into(),
            env: self.env,
            episodes: n,
            frame_encoding: "u8 rgb 64x64x3".into(),
            action_dim: self.action_dim,
            total_frames: self.frames,
            mean_return: self.return_sum / n.max(1) as f64,
            base_seed: self.base_seed,
            files: self.files,
            created_with,
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Runs `n` episodes with seeds `seeds(i)` in batches of `batch` slots and
/// writes them to `out`. `make_agent` builds the agent for each batch from
/// that batch's seeds. On any failure the partially written directory is
/// removed.
pub fn collect_rollouts<A: Agent<Frame>>(
    env: EnvId,
    n: usize,
    seed_of: impl Fn(usize) -> u64,
    batch: usize,
    out: impl AsRef<Path>,
    created_with: serde_json::Value,
    mut make_agent: impl FnMut(&[u64]) -> Result<A>,
) -> Result<CollectSummary> {
    if n == 0 {
        return Err(Error::invalid("at least one rollout required"));
    }
    let out = out.as_ref();
    prepare_dir(out)?;
    let result = (|| {
        let action_dim = env.spec().actions.len();
        let mut writer = DatasetWriter::new(out, env, action_dim, seed_of(0));
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let seeds: Vec<u64> = (start..end).map(&seed_of).collect();
            let agent = make_agent(&seeds)?;
            let mut records: Vec<EpisodeRecord> = seeds.iter().map(|&s| EpisodeRecord::new(env, s, action_dim)).collect();
            let mut driver = Driver::new(EnvPool::new(env), agent);
            driver.reset(&seeds)?;
            driver.run_to_end(|obs, step| {
                let r = &mut records[step.slot];
                r.frames.push(obs.clone());
                r.actions.extend_from_slice(&step.action);
                r.rewards.push((step.reward + step.intrinsic) as f32);
                r.dones.push(step.done);
            })?;
            for r in &records {
                writer.push(r)?;
            }
            start = end;
        }
        writer.finish(created_with)
    })();
    match result {
        Ok(m) => Ok(CollectSummary {
            episodes: m.episodes,
            total_frames: m.total_frames,
            mean_return: m.mean_return,
        }),
        Err(e) => {
            let _ = fs::remove_dir_all(out);
            Err(e)
        }
    }
}
