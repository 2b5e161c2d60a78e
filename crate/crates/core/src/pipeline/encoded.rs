//! Encoded datasets: per-frame posterior `(μ, σ)` instead of pixels.
//!
//! Layout mirrors the pixel dataset: `manifest.json` plus one
//! `latent_NNNNNN.bin` per episode, little-endian:
//!
//! ```text
//! magic "WMLT" | version u32 | seed u64 | T u32 | nz u32 | action_dim u32
//! mu T × nz f32 | sigma T × nz f32 | actions T × action_dim f32 | rewards T f32 | dones T f32
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dream::InitialPool;
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::mdnrnn::LatentEpisode;

const MAGIC: &[u8; 4] = b"WMLT";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedEpisode {
    pub seed: u64,
    pub latent: LatentEpisode,
    pub rewards: Vec<f32>,
}

impl EncodedEpisode {
    pub fn to_bytes(&self) -> Vec<u8> {
        let l = &self.latent;
        let mut out = Vec::with_capacity(32 + 4 * (2 * l.mu.len() + l.actions.len() + 2 * l.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in [l.len(), l.nz, l.action_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let dones = l.dones.iter().map(|&d| if d { 1.0f32 } else { 0.0 });
        for v in l.mu.iter().chain(&l.sigma).chain(&l.actions).chain(&self.rewards).copied().chain(dones) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(bad("not an encoded episode"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        if u32_at(4) != VERSION as usize {
            return Err(bad("unsupported encoded episode version"));
        }
        let seed = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let (t, nz, a) = (u32_at(16), u32_at(20), u32_at(24));
        let floats = 2 * t * nz + t * a + 2 * t;
        if bytes.len() != 28 + 4 * floats {
            return Err(bad("encoded episode has the wrong length"));
        }
        let all: Vec<f32> = bytes[28..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut rest = &all[..];
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let mu = take(t * nz);
        let sigma = take(t * nz);
        let actions = take(t * a);
        let rewards = take(t);
        let dones = take(t).into_iter().map(|d| d != 0.0).collect();
        let latent = LatentEpisode {
            nz,
            action_dim: a,
            mu,
            sigma,
            actions,
            dones,
        };
        latent.validate()?;
        Ok(Self { seed, latent, rewards })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedManifest {
    pub format: String,
    pub env: EnvId,
    pub nz: usize,
    pub action_dim: usize,
    pub episodes: usize,
    pub total_steps: usize,
    /// Blob hash of the VAE checkpoint that produced the statistics.
    pub vae_sha256: String,
    /// Content hashes of the source datasets.
    pub sources: Vec<String>,
    pub files: Vec<String>,
}

pub struct EncodedWriter {
    dir: PathBuf,
    manifest: EncodedManifest,
}

impl EncodedWriter {
    /// Replaces whatever is at `dir`.
    pub fn create(dir: impl AsRef<Path>, env: EnvId, nz: usize, action_dim: usize, vae_sha256: &str, sources: Vec<String>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            manifest: EncodedManifest {
                format: "worldmodel-encoded/1".into(),
                env,
                nz,
                action_dim,
                episodes: 0,
                total_steps: 0,
                vae_sha256: vae_sha256.into(),
                sources,
                files: Vec::new(),
            },
        })
    }

    pub fn push(&mut self, e: &EncodedEpisode) -> Result<()> {
        if e.latent.nz != self.manifest.nz || e.latent.action_dim != self.manifest.action_dim {
            return Err(Error::shape("encoded episode", (self.manifest.nz, self.manifest.action_dim), (e.latent.nz, e.latent.action_dim)));
        }
        let name = format!("latent_{:06}.bin", self.manifest.files.len());
        let path = self.dir.join(&name);
        fs::write(&path, e.to_bytes()).map_err(|err| Error::io(&path, err))?;
        self.manifest.files.push(name);
        self.manifest.episodes += 1;
        self.manifest.total_steps += e.latent.len();
        Ok(())
    }

    pub fn finish(self) -> Result<EncodedManifest> {
        let path = self.dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

pub fn read_encoded_manifest(dir: impl AsRef<Path>) -> Result<EncodedManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn load_encoded(dir: impl AsRef<Path>) -> Result<(EncodedManifest, Vec<EncodedEpisode>)> {
    let dir = dir.as_ref();
    let m = read_encoded_manifest(dir)?;
    let episodes = m
        .files
        .iter()
        .map(|f| {
            let path = dir.join(f);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            EncodedEpisode::from_bytes(&bytes, &path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, episodes))
}

/// First-frame statistics of every episode.
pub fn initial_pool(episodes: &[EncodedEpisode]) -> Result<InitialPool> {
    let nz = episodes.first().map_or(0, |e| e.latent.nz);
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for e in episodes.iter().filter(|e| !e.latent.is_empty()) {
        mu.extend_from_slice(&e.latent.mu[..nz]);
        sigma.extend_from_slice(&e.latent.sigma[..nz]);
    }
    InitialPool::new(nz, mu, sigma)
}
