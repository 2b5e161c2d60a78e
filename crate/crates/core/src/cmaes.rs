//! CMA-ES with the standard default strategy parameters, maximising fitness.
//!
//! Samples are drawn as `x = m + σ·C^{1/2}·ε` with the symmetric square root
//! `C^{1/2} = B·D·Bᵀ`, so the draws do not depend on the eigenvector basis the
//! solver happens to return. `ε` is read row by row from a ChaCha8 stream
//! seeded with the state's seed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{derive_seed, stream};

/// `4 + ⌊3 ln n⌋`.
pub fn default_lambda(n: usize) -> usize {
    4 + (3.0 * (n as f64).ln()).floor() as usize
}

#[derive(Clone, Debug)]
pub struct CmaEs {
    n: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mueff: f64,
    cs: f64,
    ds: f64,
    cc: f64,
    c1: f64,
    cmu: f64,
    chi_n: f64,
    mean: DVector<f64>,
    sigma: f64,
    c: DMatrix<f64>,
    /// `C^{1/2}` and `C^{-1/2}` from the latest eigendecomposition.
    sqrt_c: DMatrix<f64>,
    inv_sqrt_c: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: u64,
    seed: u64,
    rng: ChaCha8Rng,
    /// Steps `C^{1/2}ε` of the outstanding `ask`.
    pending: Option<Vec<DVector<f64>>>,
}

impl CmaEs {
    /// `lambda = None` picks [`default_lambda`].
    pub fn new(x0: &[f64], sigma0: f64, lambda: Option<usize>, seed: u64) -> Result<Self> {
        let n = x0.len();
        if n == 0 {
            return Err(Error::invalid("CMA-ES needs at least one dimension"));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::invalid(format!("sigma0 must be positive, got {sigma0}")));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial mean must be finite"));
        }
        let lambda = lambda.unwrap_or_else(|| default_lambda(n));
        if lambda < 4 {
            return Err(Error::invalid(format!("population size must be at least 4, got {lambda}")));
        }
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let cs = (mueff + 2.0) / (nf + mueff + 5.0);
        let ds = 1.0 + 2.0 * (((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(Self {
            n,
            lambda,
            mu,
            weights,
            mueff,
            cs,
            ds,
            cc,
            c1,
            cmu,
            chi_n,
            mean: DVector::from_column_slice(x0),
            sigma: sigma0,
            c: DMatrix::identity(n, n),
            sqrt_c: DMatrix::identity(n, n),
            inv_sqrt_c: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// λ candidates. Errors if the previous batch has not been told yet.
    pub fn ask(&mut self) -> Result<Vec<Vec<f64>>> {
        if self.pending.is_some() {
            return Err(Error::State("ask called twice without tell".into()));
        }
        let mut steps = Vec::with_capacity(self.lambda);
        let mut out = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let eps = DVector::from_fn(self.n, |_, _| StandardNormal.sample(&mut self.rng));
            let y = &self.sqrt_c * eps;
            out.push((&self.mean + self.sigma * &y).as_slice().to_vec());
            steps.push(y);
        }
        self.pending = Some(steps);
        Ok(out)
    }

    /// Candidate order from best to worst. Non-finite fitness ranks last and
    /// ties keep index order.
    pub fn ranking(fitness: &[f64]) -> Vec<usize> {
        let key = |f: f64| if f.is_finite() { f } else { f64::NEG_INFINITY };
        let mut idx: Vec<usize> = (0..fitness.len()).collect();
        idx.sort_by(|&a, &b| key(fitness[b]).total_cmp(&key(fitness[a])));
        idx
    }

    /// Updates the distribution from the fitness of the last `ask` batch.
    pub fn tell(&mut self, fitness: &[f64]) -> Result<()> {
        let steps = self.pending.take().ok_or_else(|| Error::State("tell called without ask".into()))?;
        if fitness.len() != self.lambda {
            self.pending = Some(steps);
            return Err(Error::shape("fitness", self.lambda, fitness.len()));
        }
        if let Some(i) = fitness.iter().position(|f| !f.is_finite()) {
            log::warn!("candidate {i} has non-finite fitness {}; ranked last", fitness[i]);
        }
        let order = Self::ranking(fitness);
        let n = self.n as f64;

        let mut y_w = DVector::zeros(self.n);
        for (w, &i) in self.weights.iter().zip(&order) {
            y_w.axpy(*w, &steps[i], 1.0);
        }
        self.mean.axpy(self.sigma, &y_w, 1.0);

        let z_w = &self.inv_sqrt_c * &y_w;
        self.p_sigma *= 1.0 - self.cs;
        self.p_sigma.axpy((self.cs * (2.0 - self.cs) * self.mueff).sqrt(), &z_w, 1.0);
        let ps_norm = self.p_sigma.norm();
        let g = self.generation as f64 + 1.0;
        let denom = (1.0 - (1.0 - self.cs).powf(2.0 * g)).sqrt();
        let h_sigma = ps_norm / denom < (1.4 + 2.0 / (n + 1.0)) * self.chi_n;

        self.p_c *= 1.0 - self.cc;
        if h_sigma {
            self.p_c.axpy((self.cc * (2.0 - self.cc) * self.mueff).sqrt(), &y_w, 1.0);
        }

        let delta = if h_sigma { 0.0 } else { self.cc * (2.0 - self.cc) };
        let decay = 1.0 - self.c1 - self.cmu + self.c1 * delta;
        let mut c = &self.c * decay;
        c.ger(self.c1, &self.p_c, &self.p_c, 1.0);
        for (w, &i) in self.weights.iter().zip(&order) {
            c.ger(self.cmu * w, &steps[i], &steps[i], 1.0);
        }
        self.c = c;

        self.sigma *= ((self.cs / self.ds) * (ps_norm / self.chi_n - 1.0)).exp();
        self.generation += 1;
        self.refresh_eigen();
        Ok(())
    }

    fn refresh_eigen(&mut self) {
        // exact symmetry, then lift the spectrum if it has become degenerate
        let c = (&self.c + self.c.transpose()) * 0.5;
        let eig = SymmetricEigen::new(c.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let floor = 1e-14 * max.max(f64::MIN_POSITIVE);
        let (c, eig) = if min < floor {
            let c = c + DMatrix::identity(self.n, self.n) * (floor - min);
            let eig = SymmetricEigen::new(c.clone());
            (c, eig)
        } else {
            (c, eig)
        };
        let d: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(floor).sqrt()).collect();
        let b = &eig.eigenvectors;
        let scaled = |f: &dyn Fn(f64) -> f64| {
            let mut bd = b.clone();
            for (j, &dj) in d.iter().enumerate() {
                bd.column_mut(j).scale_mut(f(dj));
            }
            &bd * b.transpose()
        };
        self.sqrt_c = scaled(&|v| v);
        self.inv_sqrt_c = scaled(&|v| 1.0 / v);
        self.c = c;
    }

    pub fn snapshot(&self) -> CmaSnapshot {
        CmaSnapshot {
            mean: self.mean.as_slice().to_vec(),
            sigma: self.sigma,
            covariance: self.c.as_slice().to_vec(),
            p_sigma: self.p_sigma.as_slice().to_vec(),
            p_c: self.p_c.as_slice().to_vec(),
            lambda: self.lambda,
            generation: self.generation,
            seed: self.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    /// Rebuilds a state from [`CmaEs::snapshot`]; any outstanding `ask` is lost.
    pub fn restore(s: &CmaSnapshot) -> Result<Self> {
        let mut es = Self::new(&s.mean, s.sigma, Some(s.lambda), s.seed)?;
        let n = es.n;
        if s.covariance.len() != n * n || s.p_sigma.len() != n || s.p_c.len() != n {
            return Err(Error::invalid("snapshot dimensions disagree"));
        }
        es.c = DMatrix::from_column_slice(n, n, &s.covariance);
        es.p_sigma = DVector::from_column_slice(&s.p_sigma);
        es.p_c = DVector::from_column_slice(&s.p_c);
        es.generation = s.generation;
        let pos: u128 = s
            .rng_word_pos
            .parse()
            .map_err(|_| Error::invalid("bad rng position in snapshot"))?;
        es.rng.set_word_pos(pos);
        es.refresh_eigen();
        Ok(es)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaSnapshot {
    pub mean: Vec<f64>,
    pub sigma: f64,
    /// Column-major `n × n`.
    pub covariance: Vec<f64>,
    pub p_sigma: Vec<f64>,
    pub p_c: Vec<f64>,
    pub lambda: usize,
    pub generation: u64,
    pub seed: u64,
    pub rng_word_pos: String,
}

/// Returns for a candidate on each of the given seeds, in seed order.
pub type RolloutFn<'a> = dyn Fn(&[f64], &[u64]) -> Result<Vec<f64>> + Sync + 'a;

/// Rollout returns for a whole population: `out[candidate][seed]`.
pub trait Fitness: Sync {
    fn returns(&self, candidates: &[Vec<f64>], seeds: &[u64], pool: Option<&rayon::ThreadPool>) -> Vec<Result<Vec<f64>>>;
}

/// Evaluates candidates one at a time, in parallel when a pool is given.
pub struct PerCandidate<'a>(pub &'a RolloutFn<'a>);

impl Fitness for PerCandidate<'_> {
    fn returns(&self, candidates: &[Vec<f64>], seeds: &[u64], pool: Option<&rayon::ThreadPool>) -> Vec<Result<Vec<f64>>> {
        let f = self.0;
        match pool {
            Some(p) => p.install(|| candidates.par_iter().map(|c| f(c, seeds)).collect()),
            None => candidates.iter().map(|c| f(c, seeds)).collect(),
        }
    }
}

fn mean_return(r: Result<Vec<f64>>, n: usize) -> Result<f64> {
    let returns = r?;
    if returns.len() != n {
        return Err(Error::shape("rollout returns", n, returns.len()));
    }
    Ok(returns.iter().sum::<f64>() / n as f64)
}

/// Mean return of `candidate` over `seeds`.
pub fn evaluate_candidate(candidate: &[f64], rollout: &RolloutFn, seeds: &[u64]) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one rollout seed required"));
    }
    mean_return(rollout(candidate, seeds), seeds.len())
}

/// Fitness of every candidate on the shared `seeds`. A failed candidate gets
/// the worst fitness observed in the population. Results are in candidate
/// order whatever the pool's scheduling.
pub fn evaluate_population(
    candidates: &[Vec<f64>],
    fitness: &dyn Fitness,
    seeds: &[u64],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<f64>> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one rollout seed required"));
    }
    let returns = fitness.returns(candidates, seeds, pool);
    if returns.len() != candidates.len() {
        return Err(Error::shape("population returns", candidates.len(), returns.len()));
    }
    let results: Vec<Result<f64>> = returns.into_iter().map(|r| mean_return(r, seeds.len())).collect();
    let worst = results
        .iter()
        .filter_map(|r| r.as_ref().ok())
        .copied()
        .filter(|f| f.is_finite())
        .fold(f64::INFINITY, f64::min);
    if worst == f64::INFINITY {
        return match results.into_iter().find_map(|r| r.err()) {
            Some(e) => Err(e),
            None => Err(Error::invalid("no candidate produced a finite fitness")),
        };
    }
    Ok(results
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(f) => f,
            Err(e) => {
                log::error!("candidate {i} failed: {e}");
                worst
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    /// `None` picks the default population size for the dimension.
    pub lambda: Option<usize>,
    pub sigma0: f64,
    pub generations: usize,
    pub rollouts_per_candidate: usize,
    /// Re-evaluate the generation's best every this many generations (0 = never).
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            lambda: Some(64),
            sigma0: 0.1,
            generations: 200,
            rollouts_per_candidate: 16,
            eval_every: 25,
            eval_rollouts: 1024,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best: f64,
    pub worst: f64,
    pub mean: f64,
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolveResult {
    /// The held-out winner if any evaluation ran, else the last generation's best.
    pub best: Vec<f64>,
    pub best_fitness: f64,
    pub best_eval: Option<f64>,
    pub mean: Vec<f64>,
    pub history: Vec<GenerationRecord>,
    pub final_state: Option<CmaSnapshot>,
}

/// Rollout seeds shared by every candidate of generation `g`.
pub fn generation_seeds(seed: u64, g: usize, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(seed, stream::GENERATION ^ ((g as u64) << 8), i)).collect()
}

/// Fixed held-out seeds for periodic evaluation.
pub fn held_out_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(seed, stream::HELD_OUT, i)).collect()
}

/// Runs ask/evaluate/tell for `cfg.generations` generations from `x0`.
pub fn evolve(
    x0: &[f64],
    fitness: &dyn Fitness,
    cfg: &EvolveConfig,
    mut on_generation: impl FnMut(&GenerationRecord),
) -> Result<EvolveResult> {
    if cfg.rollouts_per_candidate == 0 {
        return Err(Error::invalid("rollouts_per_candidate must be positive"));
    }
    let mut es = CmaEs::new(x0, cfg.sigma0, cfg.lambda, derive_seed(cfg.seed, stream::CMA, 0))?;
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| Error::invalid(e.to_string()))?,
        )
    } else {
        None
    };
    let eval_seeds = held_out_seeds(cfg.seed, cfg.eval_rollouts.max(1));
    let mut history = Vec::with_capacity(cfg.generations);
    let mut best = x0.to_vec();
    let mut best_fitness = f64::NEG_INFINITY;
    let mut best_eval: Option<(f64, Vec<f64>, f64)> = None;
    for g in 0..cfg.generations {
        let candidates = es.ask()?;
        let seeds = generation_seeds(cfg.seed, g, cfg.rollouts_per_candidate);
        let fit = evaluate_population(&candidates, fitness, &seeds, pool.as_ref())?;
        let top = CmaEs::ranking(&fit)[0];
        let finite: Vec<f64> = fit.iter().copied().filter(|f| f.is_finite()).collect();
        best = candidates[top].clone();
        best_fitness = fit[top];
        let mut rec = GenerationRecord {
            generation: g,
            best: fit[top],
            worst: finite.iter().copied().fold(f64::INFINITY, f64::min),
            mean: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
            sigma: es.sigma(),
            eval_score: None,
        };
        es.tell(&fit)?;
        if cfg.eval_every > 0 && (g + 1) % cfg.eval_every == 0 {
            let score = evaluate_population(std::slice::from_ref(&best), fitness, &eval_seeds, pool.as_ref())?[0];
            rec.eval_score = Some(score);
            if best_eval.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best_eval = Some((score, best.clone(), best_fitness));
            }
        }
        on_generation(&rec);
        history.push(rec);
    }
    let (best, best_fitness, best_eval) = match best_eval {
        Some((score, params, fit)) => (params, fit, Some(score)),
        None => (best, best_fitness, None),
    };
    Ok(EvolveResult {
        best,
        best_fitness,
        best_eval,
        mean: es.mean().to_vec(),
        history,
        final_state: Some(es.snapshot()),
    })
}
