//! Checkpoints: a directory holding `manifest.json` and `params.bin`.
//!
//! The blob is the flat parameter vector as little-endian floats in layout
//! order, 4 bytes each for `f32` runs and 8 for `f64` runs. The manifest
//! records the architecture, hyperparameters, the layout with offsets, the
//! seed, the precision and the SHA-256 of the blob.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{Controller, ControllerArch};
use crate::error::{Error, Result};
use crate::mdnrnn::{MdnRnn, MdnRnnArch};
use crate::params::{LayerSpec, ParamVector};
use crate::tensor::{Precision, Real};
use crate::vae::{Vae, VaeArch};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const FORMAT: &str = "worldmodel-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelType {
    Vae,
    Mdnrnn,
    Controller,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub model_type: ModelType,
    pub arch: serde_json::Value,
    pub hyperparameters: serde_json::Value,
    pub layout: Vec<LayerSpec>,
    pub param_count: usize,
    pub seed: u64,
    pub precision: Precision,
    pub blob: String,
    pub blob_sha256: String,
    /// Hashes of the artifacts this one was built from.
    #[serde(default)]
    pub inputs: serde_json::Map<String, serde_json::Value>,
}

impl CheckpointManifest {
    pub fn arch<A: DeserializeOwned>(&self) -> Result<A> {
        Ok(serde_json::from_value(self.arch.clone())?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_blob<T: Real>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * (T::PRECISION.bits() as usize / 8));
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

/// Everything about a checkpoint except the parameters themselves.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub model_type: ModelType,
    pub arch: serde_json::Value,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub inputs: serde_json::Map<String, serde_json::Value>,
}

/// Writes a checkpoint, replacing any existing files of the same names.
/// Returns the manifest; its `blob_sha256` identifies the checkpoint.
pub fn save_checkpoint<T: Real>(dir: impl AsRef<Path>, meta: CheckpointMeta, params: &ParamVector<T>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = encode_blob(params.data());
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        model_type: meta.model_type,
        arch: meta.arch,
        hyperparameters: meta.hyperparameters,
        layout: params.layout().to_vec(),
        param_count: params.len(),
        seed: meta.seed,
        precision: T::PRECISION,
        blob: BLOB.into(),
        blob_sha256: sha256_hex(&blob),
        inputs: meta.inputs,
    };
    let bpath = dir.join(BLOB);
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::format(&path, format!("unsupported checkpoint format {:?}", m.format)));
    }
    Ok(m)
}

/// Loads parameters, converting precision if the checkpoint was written at
/// a different one.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>, expect: ModelType) -> Result<(CheckpointManifest, ParamVector<T>)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let bpath = dir.join(&m.blob);
    if m.model_type != expect {
        return Err(Error::format(&bpath, format!("expected a {expect:?} checkpoint, found {:?}", m.model_type)));
    }
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if sha256_hex(&bytes) != m.blob_sha256 {
        return Err(Error::format(&bpath, "blob hash does not match manifest"));
    }
    let width = m.precision.bits() as usize / 8;
    if bytes.len() != m.param_count * width {
        return Err(Error::format(&bpath, format!("expected {} bytes, found {}", m.param_count * width, bytes.len())));
    }
    let data: Vec<T> = match m.precision {
        Precision::F32 => bytes.chunks_exact(4).map(|c| T::lit(f64::from(f32::read_le(c)))).collect(),
        Precision::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    let params = ParamVector::from_data(m.layout.clone(), data)?;
    Ok((m, params))
}

fn meta(model_type: ModelType, arch: impl Serialize, hyper: serde_json::Value, seed: u64) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        model_type,
        arch: serde_json::to_value(arch)?,
        hyperparameters: hyper,
        seed,
        inputs: serde_json::Map::new(),
    })
}

pub fn save_vae<T: Real>(dir: impl AsRef<Path>, vae: &Vae<T>, hyper: serde_json::Value, seed: u64) -> Result<CheckpointManifest> {
    save_checkpoint(dir, meta(ModelType::Vae, &vae.arch, hyper, seed)?, &vae.params)
}

pub fn load_vae<T: Real>(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, Vae<T>)> {
    let (m, p) = load_checkpoint(dir, ModelType::Vae)?;
    let arch: VaeArch = m.arch()?;
    Ok((m, Vae::from_params(arch, p)?))
}

pub fn save_mdnrnn<T: Real>(
    dir: impl AsRef<Path>,
    rnn: &MdnRnn<T>,
    hyper: serde_json::Value,
    seed: u64,
    vae_hash: &str,
) -> Result<CheckpointManifest> {
    let mut meta = meta(ModelType::Mdnrnn, &rnn.arch, hyper, seed)?;
    meta.inputs.insert("vae".into(), vae_hash.into());
    save_checkpoint(dir, meta, &rnn.params)
}

pub fn load_mdnrnn<T: Real>(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, MdnRnn<T>)> {
    let (m, p) = load_checkpoint(dir, ModelType::Mdnrnn)?;
    let arch: MdnRnnArch = m.arch()?;
    Ok((m, MdnRnn::from_params(arch, p)?))
}

/// Controller parameters as one layer named `controller`.
pub fn controller_params<T: Real>(c: &Controller<T>) -> Result<ParamVector<T>> {
    let layout = vec![LayerSpec {
        name: "controller".into(),
        shape: vec![c.arch.param_count()],
        offset: 0,
    }];
    ParamVector::from_data(layout, c.pack())
}

pub fn save_controller<T: Real>(
    dir: impl AsRef<Path>,
    c: &Controller<T>,
    hyper: serde_json::Value,
    seed: u64,
    inputs: serde_json::Map<String, serde_json::Value>,
) -> Result<CheckpointManifest> {
    let mut meta = meta(ModelType::Controller, &c.arch, hyper, seed)?;
    meta.inputs = inputs;
    save_checkpoint(dir, meta, &controller_params(c)?)
}

pub fn load_controller<T: Real>(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, Controller<T>)> {
    let (m, p) = load_checkpoint(dir, ModelType::Controller)?;
    let arch: ControllerArch = m.arch()?;
    Ok((m, Controller::unpack(arch, p.data())?))
}
