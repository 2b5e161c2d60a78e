//! The memory model: an LSTM whose mixture-density head predicts a factored
//! Gaussian mixture over the next latent, plus an optional termination logit.
//!
//! Head layout per row: `logit π | μ | log σ`, each `nz × k` with the
//! component index fastest (`d·k + j`), then the done logit if present.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dense_forward, lstm_forward, AdamConfig, AdamState, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{build_layout, LayerSpec, ParamVector};
use crate::tensor::{log_sum_exp, sigmoid, Real, Tensor};
use crate::vae::shuffle;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdnRnnArch {
    pub nz: usize,
    pub action_dim: usize,
    /// Appends a scalar input that is 1 on the first step of an episode.
    pub start_flag: bool,
    pub hidden: usize,
    pub mixtures: usize,
    pub done_head: bool,
}

impl MdnRnnArch {
    /// Nz 32, three actions, 256 hidden units, no done head.
    pub fn carracing() -> Self {
        Self {
            nz: 32,
            action_dim: 3,
            start_flag: false,
            hidden: 256,
            mixtures: 5,
            done_head: false,
        }
    }

    /// Nz 64, one action, start flag, 512 hidden units, done head.
    pub fn doom() -> Self {
        Self {
            nz: 64,
            action_dim: 1,
            start_flag: true,
            hidden: 512,
            mixtures: 5,
            done_head: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.nz + self.action_dim + usize::from(self.start_flag)
    }

    pub fn mixture_len(&self) -> usize {
        3 * self.nz * self.mixtures
    }

    pub fn head_dim(&self) -> usize {
        self.mixture_len() + usize::from(self.done_head)
    }

    pub fn layout(&self) -> Vec<LayerSpec> {
        let (d, h, p) = (self.input_dim(), self.hidden, self.head_dim());
        build_layout(&[
            ("lstm.w", vec![4 * h, d + h]),
            ("lstm.b", vec![4 * h]),
            ("head.w", vec![p, h]),
            ("head.b", vec![p]),
        ])
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(LayerSpec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nz == 0 || self.action_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("MDN-RNN dimensions must be positive"));
        }
        if !(1..=16).contains(&self.mixtures) {
            return Err(Error::invalid("mixture count must be in 1..=16"));
        }
        Ok(())
    }
}

pub fn mdnrnn_param_count(arch: &MdnRnnArch) -> usize {
    arch.param_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Real> RnnState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams<T> {
    pub nz: usize,
    pub k: usize,
    pub logit_pi: Vec<T>,
    pub mu: Vec<T>,
    pub log_sigma: Vec<T>,
    pub done_logit: Option<T>,
}

impl<T: Real> MixtureParams<T> {
    pub fn from_head(row: &[T], nz: usize, k: usize, done_head: bool) -> Result<Self> {
        let m = nz * k;
        if row.len() != 3 * m + usize::from(done_head) {
            return Err(Error::shape("mixture head", 3 * m + usize::from(done_head), row.len()));
        }
        Ok(Self {
            nz,
            k,
            logit_pi: row[..m].to_vec(),
            mu: row[m..2 * m].to_vec(),
            log_sigma: row[2 * m..3 * m].to_vec(),
            done_logit: done_head.then(|| row[3 * m]),
        })
    }

    /// Mixture weights of dimension `d`.
    pub fn weights(&self, d: usize) -> Vec<f64> {
        softmax(&self.logit_pi[d * self.k..(d + 1) * self.k], 1.0)
    }

    pub fn done_probability(&self) -> Option<f64> {
        self.done_logit.map(|l| sigmoid(l).as_f64())
    }
}

fn softmax<T: Real>(logits: &[T], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l.as_f64() / tau).collect();
    let lse = log_sum_exp(scaled.iter().copied());
    scaled.iter().map(|s| (s - lse).exp()).collect()
}

/// `−Σ_d log Σ_j π_dj N(z_d; μ_dj, σ_dj)`, evaluated in f64.
pub fn mdn_nll<T: Real>(mix: &MixtureParams<T>, target: &[T]) -> Result<f64> {
    if target.len() != mix.nz {
        return Err(Error::shape("mdn_nll target", mix.nz, target.len()));
    }
    let k = mix.k;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for (d, z) in target.iter().enumerate() {
        let z = z.as_f64();
        let lse_pi = log_sum_exp((0..k).map(|j| mix.logit_pi[d * k + j].as_f64()));
        let terms = (0..k).map(|j| {
            let i = d * k + j;
            let ls = mix.log_sigma[i].as_f64();
            let u = (z - mix.mu[i].as_f64()) * (-ls).exp();
            mix.logit_pi[i].as_f64() - lse_pi - 0.5 * u * u - ls - half_ln_2pi
        });
        total -= log_sum_exp(terms);
    }
    Ok(total)
}

/// Divides logits by τ and scales each variance by τ.
pub fn adjust_temperature<T: Real>(mix: &MixtureParams<T>, tau: f64) -> Result<MixtureParams<T>> {
    check_tau(tau)?;
    let t = T::lit(tau);
    let dls = T::lit(0.5 * tau.ln());
    Ok(MixtureParams {
        logit_pi: mix.logit_pi.iter().map(|&l| l / t).collect(),
        log_sigma: mix.log_sigma.iter().map(|&l| l + dls).collect(),
        ..mix.clone()
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("temperature must be positive"))
    }
}

/// Draws `z'` dimension by dimension: a component from `softmax(logit π / τ)`,
/// then a value from that component with standard deviation `σ·√τ`. Consumes
/// exactly one uniform and one normal draw per dimension.
pub fn sample_next_latent<T: Real>(mix: &MixtureParams<T>, tau: f64, rng: &mut impl Rng) -> Result<Vec<T>> {
    check_tau(tau)?;
    let k = mix.k;
    let scale = tau.sqrt();
    Ok((0..mix.nz)
        .map(|d| {
            let w = softmax(&mix.logit_pi[d * k..(d + 1) * k], tau);
            let u: f64 = rng.random();
            let eps: f64 = rng.sample(StandardNormal);
            let mut acc = 0.0;
            let mut pick = k - 1;
            for (j, p) in w.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            let i = d * k + pick;
            T::lit(mix.mu[i].as_f64() + mix.log_sigma[i].as_f64().exp() * scale * eps)
        })
        .collect())
}

/// `sigmoid(done_logit) > 0.5`; exactly one half counts as alive.
pub fn predict_done<T: Real>(mix: &MixtureParams<T>) -> Result<bool> {
    match mix.done_logit {
        Some(l) => Ok(l > T::zero()),
        None => Err(Error::invalid("model has no done head")),
    }
}

/// Sequence loss: mean over steps of `nll + bce`. A `None` target marks a
/// step whose next latent is unknown (the final step of an episode); its NLL
/// term is skipped but its done term still counts.
pub fn mdnrnn_loss<T: Real>(
    mixes: &[MixtureParams<T>],
    targets: &[Option<Vec<T>>],
    dones: Option<&[bool]>,
) -> Result<f64> {
    if mixes.is_empty() {
        return Err(Error::invalid("zero-length sequence"));
    }
    if targets.len() != mixes.len() || dones.is_some_and(|d| d.len() != mixes.len()) {
        return Err(Error::shape("mdnrnn_loss", mixes.len(), (targets.len(), dones.map(<[bool]>::len))));
    }
    let mut total = 0.0;
    for (t, mix) in mixes.iter().enumerate() {
        if let Some(z) = &targets[t] {
            total += mdn_nll(mix, z)?;
        }
        if let Some(d) = dones {
            let l = mix.done_logit.ok_or_else(|| Error::invalid("model has no done head"))?.as_f64();
            let y = if d[t] { 1.0 } else { 0.0 };
            total += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        }
    }
    Ok(total / mixes.len() as f64)
}

/// Output of a batched step: heads `[n, P]`, new `h` and `c`, each `[n, H]`.
pub struct BatchStep<T> {
    pub heads: Vec<T>,
    pub h: Vec<T>,
    pub c: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdnRnn<T> {
    pub arch: MdnRnnArch,
    pub params: ParamVector<T>,
}

impl<T: Real> MdnRnn<T> {
    pub fn new(arch: MdnRnnArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamVector::zeros(arch.layout());
        let bound = 1.0 / (arch.hidden as f64).sqrt();
        params.init_uniform(0, bound, rng);
        params.init_uniform(2, bound, rng);
        let h = arch.hidden;
        params.layer_mut(1)[h..2 * h].iter_mut().for_each(|b| *b = T::one());
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: MdnRnnArch, params: ParamVector<T>) -> Result<Self> {
        arch.validate()?;
        if params.layout() != arch.layout() {
            return Err(Error::invalid("MDN-RNN parameter layout does not match architecture"));
        }
        Ok(Self { arch, params })
    }

    /// Builds the input row `[z, action, start flag]`.
    pub fn input_row(&self, z: &[T], action: &[T], first_step: bool, out: &mut Vec<T>) -> Result<()> {
        if z.len() != self.arch.nz || action.len() != self.arch.action_dim {
            return Err(Error::shape(
                "rnn input",
                (self.arch.nz, self.arch.action_dim),
                (z.len(), action.len()),
            ));
        }
        out.extend_from_slice(z);
        out.extend_from_slice(action);
        if self.arch.start_flag {
            out.push(if first_step { T::one() } else { T::zero() });
        }
        Ok(())
    }

    /// One step for `n` independent rows. Row results do not depend on `n`.
    pub fn step_batch(&self, x: &[T], h: &[T], c: &[T], n: usize) -> Result<BatchStep<T>> {
        let (d, hid) = (self.arch.input_dim(), self.arch.hidden);
        if x.len() != n * d || h.len() != n * hid || c.len() != n * hid {
            return Err(Error::shape("rnn_step", (n * d, n * hid), (x.len(), h.len(), c.len())));
        }
        let f = lstm_forward(x, h, c, self.params.layer(0), self.params.layer(1), n, d, hid);
        let mut h_new = Vec::with_capacity(n * hid);
        let mut c_new = Vec::with_capacity(n * hid);
        for r in 0..n {
            h_new.extend_from_slice(&f.out[r * 2 * hid..r * 2 * hid + hid]);
            c_new.extend_from_slice(&f.out[r * 2 * hid + hid..(r + 1) * 2 * hid]);
        }
        let heads = dense_forward(&h_new, self.params.layer(2), self.params.layer(3), n, hid, self.arch.head_dim());
        Ok(BatchStep {
            heads,
            h: h_new,
            c: c_new,
        })
    }

    /// `extra` is the start flag when the architecture has one, else empty.
    pub fn rnn_step(&self, z: &[T], action: &[T], extra: &[T], state: &RnnState<T>) -> Result<(MixtureParams<T>, RnnState<T>)> {
        if extra.len() != usize::from(self.arch.start_flag) {
            return Err(Error::shape("rnn extra input", usize::from(self.arch.start_flag), extra.len()));
        }
        let mut x = Vec::with_capacity(self.arch.input_dim());
        self.input_row(z, action, extra.first().is_some_and(|&f| f > T::zero()), &mut x)?;
        let s = self.step_batch(&x, &state.h, &state.c, 1)?;
        let mix = self.mixture(&s.heads)?;
        Ok((mix, RnnState { h: s.h, c: s.c }))
    }

    pub fn mixture(&self, head: &[T]) -> Result<MixtureParams<T>> {
        MixtureParams::from_head(head, self.arch.nz, self.arch.mixtures, self.arch.done_head)
    }
}

/// Per-frame posterior statistics of one episode, as stored by encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEpisode {
    pub nz: usize,
    pub action_dim: usize,
    /// `[T, nz]`
    pub mu: Vec<f32>,
    /// `[T, nz]`
    pub sigma: Vec<f32>,
    /// `[T, A]`
    pub actions: Vec<f32>,
    pub dones: Vec<bool>,
}

impl LatentEpisode {
    pub fn len(&self) -> usize {
        self.dones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dones.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.dones.len();
        if self.mu.len() != t * self.nz || self.actions.len() != t * self.action_dim {
            return Err(Error::shape("latent episode", t, (self.mu.len(), self.actions.len())));
        }
        if self.sigma.len() != self.mu.len() {
            return Err(Error::invalid("encoded episode lacks per-frame sigma"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub adam: AdamConfig,
    pub done_weight: f64,
}

impl Default for RnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 100,
            seq_len: 500,
            adam: AdamConfig::with_learning_rate(1e-3),
            done_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnBatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    /// Mean NLL per predicted latent.
    pub nll: f64,
    /// Mean done BCE per step; zero without a done head.
    pub bce: f64,
}

/// Mean NLL per epoch, in epoch order.
pub fn epoch_mean_nll(log: &[RnnBatchLog]) -> Vec<f64> {
    let epochs = log.iter().map(|l| l.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = log.iter().filter(|l| l.epoch == e).map(|l| l.nll).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

struct Chunk {
    episode: usize,
    start: usize,
    len: usize,
}

/// Trains with teacher forcing. Episodes are cut into consecutive windows of
/// at most `seq_len` steps, each starting from a zero state; every batch draws
/// fresh inputs `z ~ N(μ, σ)` from the stored statistics.
pub fn train_mdnrnn<T: Real>(
    model: &mut MdnRnn<T>,
    episodes: &[LatentEpisode],
    cfg: &RnnTrainConfig,
    rng: &mut impl Rng,
    mut on_batch: impl FnMut(&RnnBatchLog),
) -> Result<Vec<RnnBatchLog>> {
    if episodes.iter().all(LatentEpisode::is_empty) {
        return Err(Error::invalid("MDN-RNN training needs at least one non-empty episode"));
    }
    if cfg.batch_size == 0 || cfg.seq_len == 0 {
        return Err(Error::invalid("batch size and sequence length must be positive"));
    }
    for ep in episodes {
        ep.validate()?;
        if ep.nz != model.arch.nz || ep.action_dim != model.arch.action_dim {
            return Err(Error::shape(
                "encoded episode",
                (model.arch.nz, model.arch.action_dim),
                (ep.nz, ep.action_dim),
            ));
        }
    }
    let mut chunks = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let mut start = 0;
        while start < ep.len() {
            let len = cfg.seq_len.min(ep.len() - start);
            chunks.push(Chunk { episode: e, start, len });
            start += len;
        }
    }
    let mut adam = AdamState::new(cfg.adam, model.params.len());
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, rng);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch_chunks: Vec<&Chunk> = idx.iter().map(|&i| &chunks[i]).collect();
            let (grads, stats) = batch_gradient(model, episodes, &batch_chunks, cfg.done_weight, rng)?;
            adam.step(model.params.data_mut(), &grads)?;
            let entry = RnnBatchLog { epoch, batch, ..stats };
            on_batch(&entry);
            log.push(entry);
        }
    }
    Ok(log)
}

fn batch_gradient<T: Real>(
    model: &MdnRnn<T>,
    episodes: &[LatentEpisode],
    chunks: &[&Chunk],
    done_weight: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<T>, RnnBatchLog)> {
    let arch = &model.arch;
    let (nz, a_dim, d_in) = (arch.nz, arch.action_dim, arch.input_dim());
    let b = chunks.len();
    let steps = chunks.iter().map(|c| c.len).max().unwrap_or(0);

    // Resampled latents for each chunk, including the frame after its last step.
    let latents: Vec<Vec<T>> = chunks
        .iter()
        .map(|c| {
            let ep = &episodes[c.episode];
            let end = (c.start + c.len + 1).min(ep.len());
            let mut z = Vec::with_capacity((end - c.start) * nz);
            for i in c.start * nz..end * nz {
                let e: f64 = rng.sample(StandardNormal);
                z.push(T::lit(f64::from(ep.mu[i]) + f64::from(ep.sigma[i]) * e));
            }
            z
        })
        .collect();

    let rows = steps * b;
    let mut targets = vec![T::zero(); rows * nz];
    let mut z_mask = vec![T::zero(); rows];
    let mut done_target = vec![T::zero(); rows];
    let mut step_mask = vec![T::zero(); rows];
    let mut inputs: Vec<Vec<T>> = vec![vec![T::zero(); b * d_in]; steps];
    for (r, c) in chunks.iter().enumerate() {
        let ep = &episodes[c.episode];
        let z = &latents[r];
        for t in 0..c.len {
            let g = c.start + t;
            let x = &mut inputs[t][r * d_in..(r + 1) * d_in];
            x[..nz].copy_from_slice(&z[t * nz..(t + 1) * nz]);
            for (dst, &a) in x[nz..nz + a_dim].iter_mut().zip(&ep.actions[g * a_dim..(g + 1) * a_dim]) {
                *dst = T::lit(f64::from(a));
            }
            if arch.start_flag && g == 0 {
                x[nz + a_dim] = T::one();
            }
            let row = t * b + r;
            step_mask[row] = T::one();
            if ep.dones[g] {
                done_target[row] = T::one();
            }
            if g + 1 < ep.len() {
                z_mask[row] = T::one();
                targets[row * nz..(row + 1) * nz].copy_from_slice(&z[(t + 1) * nz..(t + 2) * nz]);
            }
        }
    }
    let batch = SequenceBatch {
        rows: b,
        inputs,
        targets,
        z_mask,
        done_target,
        step_mask,
    };
    let mut tape = Tape::new();
    let vars = model.params.on_tape(&mut tape, true);
    let (loss, stats) = sequence_loss_tape(arch, &mut tape, &vars, &batch, done_weight)?;
    let mut grads = tape.backward(loss)?;
    let flat = model.params.flat_grads(&mut grads, &vars);
    Ok((flat, stats))
}

/// Time-major teacher-forced batch: `inputs[t]` is `[rows, input_dim]` and
/// every per-row array is indexed `t * rows + r`.
#[derive(Clone, Debug)]
pub struct SequenceBatch<T> {
    pub rows: usize,
    pub inputs: Vec<Vec<T>>,
    pub targets: Vec<T>,
    /// 1 where the next latent is known.
    pub z_mask: Vec<T>,
    pub done_target: Vec<T>,
    /// 1 on real steps, 0 on padding.
    pub step_mask: Vec<T>,
}

/// Records the masked sequence loss `(Σ nll + w·Σ bce) / steps` from a zero
/// state. `vars` are the model parameters in layout order.
pub fn sequence_loss_tape<T: Real>(
    arch: &MdnRnnArch,
    tape: &mut Tape<T>,
    vars: &[Var],
    batch: &SequenceBatch<T>,
    done_weight: f64,
) -> Result<(Var, RnnBatchLog)> {
    let (nz, d_in, hid, b) = (arch.nz, arch.input_dim(), arch.hidden, batch.rows);
    let rows = batch.inputs.len() * b;
    if batch.targets.len() != rows * nz || batch.z_mask.len() != rows || batch.step_mask.len() != rows {
        return Err(Error::shape("sequence batch", rows, (batch.targets.len(), batch.z_mask.len())));
    }
    let n_steps: f64 = batch.step_mask.iter().map(|m| m.as_f64()).sum();
    let n_z: f64 = batch.z_mask.iter().map(|m| m.as_f64()).sum();
    if n_steps == 0.0 {
        return Err(Error::invalid("sequence batch has no steps"));
    }

    let mut h = tape.constant(Tensor::zeros(&[b, hid]));
    let mut c = tape.constant(Tensor::zeros(&[b, hid]));
    let mut hs = Vec::with_capacity(batch.inputs.len());
    for x in &batch.inputs {
        let xv = tape.constant(Tensor::new(vec![b, d_in], x.clone())?);
        let out = tape.lstm_cell(xv, h, c, vars[0], vars[1])?;
        h = tape.slice_last(out, 0, hid)?;
        c = tape.slice_last(out, hid, hid)?;
        hs.push(h);
    }
    let all_h = tape.concat_rows(&hs)?;
    let head = tape.linear(all_h, vars[2], vars[3])?;
    let target = tape.constant(Tensor::new(vec![rows, nz], batch.targets.clone())?);
    let nll_rows = tape.mdn_nll(head, target, nz, arch.mixtures)?;
    let zm = tape.constant(Tensor::new(vec![rows], batch.z_mask.clone())?);
    let nll_masked = tape.mul(nll_rows, zm)?;
    let nll_sum = tape.sum(nll_masked);
    let mut loss = tape.scale(nll_sum, T::lit(1.0 / n_steps));
    let mut bce_mean = 0.0;
    if arch.done_head {
        let logits = tape.slice_last(head, arch.mixture_len(), 1)?;
        let dt = tape.constant(Tensor::new(vec![rows, 1], batch.done_target.clone())?);
        let bce = tape.bce_with_logits(logits, dt)?;
        let sm = tape.constant(Tensor::new(vec![rows, 1], batch.step_mask.clone())?);
        let bce_masked = tape.mul(bce, sm)?;
        let bce_sum = tape.sum(bce_masked);
        bce_mean = tape.value(bce_sum).data()[0].as_f64() / n_steps;
        let weighted = tape.scale(bce_sum, T::lit(done_weight / n_steps));
        loss = tape.add(loss, weighted)?;
    }
    let stats = RnnBatchLog {
        epoch: 0,
        batch: 0,
        loss: tape.value(loss).data()[0].as_f64(),
        nll: tape.value(nll_sum).data()[0].as_f64() / n_z.max(1.0),
        bce: bce_mean,
    };
    Ok((loss, stats))
}
