//! The vision model: a convolutional VAE mapping 64×64×3 frames to a latent
//! Gaussian `N(μ, σ²I)` of dimension `nz` and back.
//!
//! Encoder: four 4×4 stride-2 convolutions (64→31→14→6→2 spatially) with relu,
//! flattened to `4·c4` features, then two dense heads for μ and log σ.
//! Decoder: dense `nz → 4·c4`, reshaped to 1×1, then transposed convolutions
//! with kernels 5, 5, 6, 6 (1→5→13→30→64), relu everywhere except the sigmoid
//! output. With channels 32/64/128/256 this has exactly 4,348,547 parameters
//! at `nz = 32` and 4,446,915 at `nz = 64`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::conv::{self, Geometry};
use crate::autodiff::{dense_forward, AdamConfig, AdamState, Tape, Var};
use crate::env::frame::{Frame, FRAME_CHANNELS, FRAME_LEN, FRAME_SIDE};
use crate::error::{Error, Result};
use crate::params::{build_layout, LayerSpec, ParamVector};
use crate::tensor::{Real, Tensor};

const ENC_KERNEL: usize = 4;
const DEC_KERNELS: [usize; 4] = [5, 5, 6, 6];
const STRIDE: usize = 2;
/// Spatial extents after each encoder convolution.
const ENC_EXTENTS: [usize; 4] = [31, 14, 6, 2];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeArch {
    pub nz: usize,
    pub enc_channels: [usize; 4],
}

impl VaeArch {
    pub fn standard(nz: usize) -> Self {
        Self {
            nz,
            enc_channels: [32, 64, 128, 256],
        }
    }

    /// Half-width channels; used for fast CI runs.
    pub fn mini(nz: usize) -> Self {
        Self {
            nz,
            enc_channels: [16, 32, 64, 128],
        }
    }

    pub fn flat_dim(&self) -> usize {
        ENC_EXTENTS[3] * ENC_EXTENTS[3] * self.enc_channels[3]
    }

    fn dec_channels(&self) -> [usize; 4] {
        [self.enc_channels[2], self.enc_channels[1], self.enc_channels[0], FRAME_CHANNELS]
    }

    pub fn layout(&self) -> Vec<LayerSpec> {
        let e = self.enc_channels;
        let d = self.dec_channels();
        let k = ENC_KERNEL;
        let (nz, flat) = (self.nz, self.flat_dim());
        build_layout(&[
            ("enc1.w", vec![e[0], FRAME_CHANNELS, k, k]),
            ("enc1.b", vec![e[0]]),
            ("enc2.w", vec![e[1], e[0], k, k]),
            ("enc2.b", vec![e[1]]),
            ("enc3.w", vec![e[2], e[1], k, k]),
            ("enc3.b", vec![e[2]]),
            ("enc4.w", vec![e[3], e[2], k, k]),
            ("enc4.b", vec![e[3]]),
            ("mu.w", vec![nz, flat]),
            ("mu.b", vec![nz]),
            ("logsigma.w", vec![nz, flat]),
            ("logsigma.b", vec![nz]),
            ("dec_fc.w", vec![flat, nz]),
            ("dec_fc.b", vec![flat]),
            ("dec1.w", vec![flat, d[0], DEC_KERNELS[0], DEC_KERNELS[0]]),
            ("dec1.b", vec![d[0]]),
            ("dec2.w", vec![d[0], d[1], DEC_KERNELS[1], DEC_KERNELS[1]]),
            ("dec2.b", vec![d[1]]),
            ("dec3.w", vec![d[1], d[2], DEC_KERNELS[2], DEC_KERNELS[2]]),
            ("dec3.b", vec![d[2]]),
            ("dec4.w", vec![d[2], d[3], DEC_KERNELS[3], DEC_KERNELS[3]]),
            ("dec4.b", vec![d[3]]),
        ])
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayerSpec::len).sum()
    }
}

/// Parameter count of the standard architecture.
pub fn vae_param_count(nz: usize) -> usize {
    VaeArch::standard(nz).param_count()
}

/// Posterior parameters for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

/// A posterior together with one reparameterized draw from it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub z: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// `z = μ + σ ⊙ ε`, `ε ~ N(0, I)`. A zero σ yields `μ` exactly.
pub fn sample_latent<T: Real>(mu: &[T], sigma: &[T], rng: &mut impl Rng) -> Vec<T> {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let e: f64 = rng.sample(StandardNormal);
            m + s * T::lit(e)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae<T> {
    pub arch: VaeArch,
    pub params: ParamVector<T>,
}

fn geom(batch: usize, side: usize, channels: usize, kernel: usize, grid: usize) -> Geometry {
    Geometry {
        batch,
        height: side,
        width: side,
        channels,
        kernel,
        stride: STRIDE,
        out_h: grid,
        out_w: grid,
    }
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    v.iter_mut().for_each(|x| *x = x.max(T::zero()));
}

impl<T: Real> Vae<T> {
    pub fn new(arch: VaeArch, rng: &mut impl Rng) -> Self {
        let mut params = ParamVector::zeros(arch.layout());
        let layout = params.layout().to_vec();
        for (i, l) in layout.iter().enumerate() {
            if l.shape.len() == 1 {
                continue;
            }
            let fan_in = match l.name.as_str() {
                n if n.starts_with("enc") => l.shape[1] * l.shape[2] * l.shape[3],
                n if n.starts_with("dec") && l.shape.len() == 4 => {
                    l.shape[0] * l.shape[2] * l.shape[3] / (STRIDE * STRIDE)
                }
                _ => l.shape[1],
            };
            let gain = if l.name.starts_with("enc") || l.name.starts_with("dec") { 6.0 } else { 1.0 };
            params.init_uniform(i, (gain / fan_in as f64).sqrt(), rng);
        }
        Self { arch, params }
    }

    pub fn from_params(arch: VaeArch, params: ParamVector<T>) -> Result<Self> {
        if params.layout() != arch.layout() {
            return Err(Error::invalid("VAE parameter layout does not match architecture"));
        }
        Ok(Self { arch, params })
    }

    pub fn nz(&self) -> usize {
        self.arch.nz
    }

    fn p(&self, i: usize) -> &[T] {
        self.params.layer(i)
    }

    /// Posterior parameters for a batch of frames.
    pub fn encode_batch(&self, frames: &[&Frame]) -> Vec<LatentStats<T>> {
        let n = frames.len();
        if n == 0 {
            return Vec::new();
        }
        let mut x: Vec<T> = Vec::with_capacity(n * FRAME_LEN);
        for f in frames {
            x.extend(f.to_unit::<T>());
        }
        let e = self.arch.enc_channels;
        let mut side = FRAME_SIDE;
        let mut channels = FRAME_CHANNELS;
        for layer in 0..4 {
            let g = geom(n, side, channels, ENC_KERNEL, ENC_EXTENTS[layer]);
            x = conv::conv_forward(&x, self.p(2 * layer), self.p(2 * layer + 1), e[layer], &g);
            relu_in_place(&mut x);
            side = ENC_EXTENTS[layer];
            channels = e[layer];
        }
        let (nz, flat) = (self.arch.nz, self.arch.flat_dim());
        let mu = dense_forward(&x, self.p(8), self.p(9), n, flat, nz);
        let log_sigma = dense_forward(&x, self.p(10), self.p(11), n, flat, nz);
        (0..n)
            .map(|r| LatentStats {
                mu: mu[r * nz..(r + 1) * nz].to_vec(),
                sigma: log_sigma[r * nz..(r + 1) * nz].iter().map(|v| v.exp()).collect(),
            })
            .collect()
    }

    pub fn encode(&self, frame: &Frame) -> LatentStats<T> {
        self.encode_batch(&[frame]).pop().expect("one frame in, one code out")
    }

    /// Decodes latents `[n, nz]` (row-major) to `n` images with values in `[0, 1]`.
    pub fn decode_batch(&self, z: &[T]) -> Result<Vec<Vec<T>>> {
        let nz = self.arch.nz;
        if z.is_empty() || z.len() % nz != 0 {
            return Err(Error::shape("decode", format!("[n, {nz}]"), z.len()));
        }
        let n = z.len() / nz;
        let flat = self.arch.flat_dim();
        let mut x = dense_forward(z, self.p(12), self.p(13), n, nz, flat);
        let d = self.arch.dec_channels();
        let mut grid = 1;
        for layer in 0..4 {
            let k = DEC_KERNELS[layer];
            let side = Geometry::deconv_extent(grid, k, STRIDE);
            let c_in = if layer == 0 { flat } else { d[layer - 1] };
            let g = geom(n, side, d[layer], k, grid);
            x = conv::deconv_forward(&x, self.p(14 + 2 * layer), self.p(15 + 2 * layer), c_in, &g);
            if layer < 3 {
                relu_in_place(&mut x);
            }
            grid = side;
        }
        x.iter_mut().for_each(|v| *v = crate::tensor::sigmoid(*v));
        Ok(x.chunks_exact(FRAME_LEN).map(<[T]>::to_vec).collect())
    }

    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.arch.nz {
            return Err(Error::shape("decode", self.arch.nz, z.len()));
        }
        Ok(self.decode_batch(z)?.pop().expect("one latent in, one image out"))
    }

    /// Records the full VAE on a tape. Returns `(mu, log_sigma, reconstruction)`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, eps: Var) -> Result<(Var, Var, Var)> {
        let n = tape.value(x).rows();
        let mut h = x;
        for layer in 0..4 {
            let y = tape.conv2d(h, vars[2 * layer], vars[2 * layer + 1], STRIDE)?;
            h = tape.relu(y);
        }
        let flat = tape.reshape(h, &[n, self.arch.flat_dim()])?;
        let mu = tape.linear(flat, vars[8], vars[9])?;
        let log_sigma = tape.linear(flat, vars[10], vars[11])?;
        let sigma = tape.exp(log_sigma);
        let noise = tape.mul(sigma, eps)?;
        let z = tape.add(mu, noise)?;
        let fc = tape.linear(z, vars[12], vars[13])?;
        let mut h = tape.reshape(fc, &[n, 1, 1, self.arch.flat_dim()])?;
        for layer in 0..4 {
            let y = tape.deconv2d(h, vars[14 + 2 * layer], vars[15 + 2 * layer], STRIDE)?;
            h = if layer < 3 { tape.relu(y) } else { tape.sigmoid(y) };
        }
        Ok((mu, log_sigma, h))
    }

    /// Records the batch loss `mean_b(recon_b + max(kl_b, kl_floor))`.
    /// Returns `(loss, per-row reconstruction, per-row floored kl)`.
    pub fn loss_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        frames: &[&Frame],
        eps: Tensor<T>,
        kl_floor: f64,
    ) -> Result<(Var, Var, Var)> {
        let n = frames.len();
        let mut data = Vec::with_capacity(n * FRAME_LEN);
        for f in frames {
            data.extend(f.to_unit::<T>());
        }
        let x = tape.constant(Tensor::new(vec![n, FRAME_SIDE, FRAME_SIDE, FRAME_CHANNELS], data)?);
        let eps = tape.constant(eps);
        let (mu, log_sigma, recon) = self.forward_tape(tape, vars, x, eps)?;
        let rec = tape.sq_err_rows(recon, x)?;
        let kl_raw = tape.kl_rows(mu, log_sigma)?;
        let kl = tape.clamp_min(kl_raw, T::lit(kl_floor));
        let per_row = tape.add(rec, kl)?;
        let loss = tape.mean(per_row);
        Ok((loss, rec, kl))
    }

    /// Loss of a single frame with one latent draw from `rng`.
    pub fn loss(&self, frame: &Frame, kl_floor: f64, rng: &mut impl Rng) -> Result<VaeLoss> {
        let mut tape = Tape::new();
        let vars = self.params.on_tape(&mut tape, false);
        let nz = self.arch.nz;
        let eps = Tensor::from_fn(&[1, nz], |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let (loss, rec, kl) = self.loss_tape(&mut tape, &vars, &[frame], eps, kl_floor)?;
        Ok(VaeLoss {
            total: tape.value(loss).data()[0].as_f64(),
            reconstruction: tape.value(rec).data()[0].as_f64(),
            kl: tape.value(kl).data()[0].as_f64(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Free-bits floor per latent dimension; the summed KL is floored at
    /// `kl_tolerance · nz`.
    pub kl_tolerance: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            adam: AdamConfig::with_learning_rate(1e-4),
            kl_tolerance: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeBatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Adam state plus the free-bits floor; drives one mini-batch at a time so
/// callers can stream frames from disk.
pub struct VaeTrainer<T> {
    adam: AdamState<T>,
    kl_floor: f64,
}

impl<T: Real> VaeTrainer<T> {
    pub fn new(vae: &Vae<T>, cfg: &VaeTrainConfig) -> Self {
        Self {
            adam: AdamState::new(cfg.adam, vae.params.len()),
            kl_floor: cfg.kl_tolerance * vae.arch.nz as f64,
        }
    }

    pub fn steps(&self) -> u64 {
        self.adam.step_count()
    }

    /// One Adam update on `frames`. The returned log has `epoch`/`batch` zeroed.
    pub fn train_batch(&mut self, vae: &mut Vae<T>, frames: &[&Frame], rng: &mut impl Rng) -> Result<VaeBatchLog> {
        if frames.is_empty() {
            return Err(Error::invalid("empty VAE batch"));
        }
        let n = frames.len();
        let eps = Tensor::from_fn(&[n, vae.arch.nz], |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let mut tape = Tape::new();
        let vars = vae.params.on_tape(&mut tape, true);
        let (loss, rec, kl) = vae.loss_tape(&mut tape, &vars, frames, eps, self.kl_floor)?;
        let mean = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).sum::<f64>() / n as f64;
        let entry = VaeBatchLog {
            epoch: 0,
            batch: 0,
            loss: tape.value(loss).data()[0].as_f64(),
            reconstruction: mean(rec),
            kl: mean(kl),
        };
        let mut grads = tape.backward(loss)?;
        let flat = vae.params.flat_grads(&mut grads, &vars);
        drop(tape);
        self.adam.step(vae.params.data_mut(), &flat)?;
        Ok(entry)
    }
}

/// Trains `vae` in place with Adam over shuffled in-memory mini-batches.
pub fn train_vae<T: Real>(
    vae: &mut Vae<T>,
    frames: &[Frame],
    cfg: &VaeTrainConfig,
    rng: &mut impl Rng,
    mut on_batch: impl FnMut(&VaeBatchLog),
) -> Result<Vec<VaeBatchLog>> {
    if frames.is_empty() {
        return Err(Error::invalid("VAE training needs at least one frame"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut trainer = VaeTrainer::new(vae, cfg);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, rng);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch_frames: Vec<&Frame> = idx.iter().map(|&i| &frames[i]).collect();
            let entry = VaeBatchLog {
                epoch,
                batch,
                ..trainer.train_batch(vae, &batch_frames, rng)?
            };
            on_batch(&entry);
            log.push(entry);
        }
    }
    Ok(log)
}

/// Fisher–Yates with the crate's seeded generators.
pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
