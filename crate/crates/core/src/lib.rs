//! World-model agents: a convolutional VAE compresses frames into latents,
//! an MDN-RNN learns latent dynamics, and a small controller evolved with
//! CMA-ES acts on the combined features, in the real environment or inside
//! the learned "dream" environment.

pub mod agent;
pub mod autodiff;
pub mod checkpoint;
pub mod cmaes;
pub mod config;
pub mod controller;
pub mod dream;
pub mod env;
pub mod error;
pub mod mdnrnn;
pub mod params;
pub mod pipeline;
pub mod seeds;
pub mod server;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
