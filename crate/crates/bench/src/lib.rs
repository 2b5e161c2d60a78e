//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use worldmodel_core::config::{Preset, RunConfig};
use worldmodel_core::controller::Controller;
use worldmodel_core::dream::InitialPool;
use worldmodel_core::env::{DodgeToy, Environment, Frame};
use worldmodel_core::mdnrnn::MdnRnn;
use worldmodel_core::server::ServerModels;
use worldmodel_core::vae::Vae;

/// Untrained models at the desk sizes; timing does not depend on the weights.
pub fn desk_models(preset: Preset) -> ServerModels<f32> {
    let cfg = RunConfig::preset(preset);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vae = Vae::new(cfg.vae_arch(), &mut rng);
    let rnn = MdnRnn::new(cfg.rnn_arch(), &mut rng).expect("valid preset");
    let nz = cfg.vae.nz;
    ServerModels {
        vae,
        rnn,
        controller: Controller::zeros(cfg.controller_arch()),
        has_controller: true,
        pool: InitialPool::new(nz, vec![0.0; nz], vec![1.0; nz]).expect("one row"),
        kinds: cfg.env.spec().actions,
        dream: cfg.dream_config(1.0),
    }
}

pub fn dodge_frames(n: usize) -> Vec<Frame> {
    let mut env = DodgeToy::new();
    let mut frames = vec![env.reset(1)];
    while frames.len() < n {
        match env.step(&[1.0]) {
            Ok(t) if !t.done => frames.push(t.obs),
            _ => frames.push(env.reset(frames.len() as u64)),
        }
    }
    frames
}
