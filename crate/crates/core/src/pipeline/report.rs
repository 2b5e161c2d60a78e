//! Evaluation summaries.

use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::env::EnvId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the last bin is closed.
    pub fn new(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo <= 0.0 {
            (lo - 0.5, lo + 0.5)
        } else {
            (lo, hi)
        };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values.iter().filter(|v| v.is_finite()) {
            let i = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub env: EnvId,
    pub episodes: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub mean_steps: f64,
    pub returns: Vec<f64>,
    pub histogram: Histogram,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub controller_sha256: Option<String>,
}

impl EvalReport {
    pub fn new(mode: Mode, env: EnvId, returns: Vec<f64>, steps: &[usize], bins: usize) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mode,
            env,
            episodes: returns.len(),
            mean,
            std: var.sqrt(),
            min: returns.iter().copied().fold(f64::INFINITY, f64::min),
            max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_steps: steps.iter().sum::<usize>() as f64 / n,
            histogram: Histogram::new(&returns, bins),
            returns,
            controller_sha256: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 1.0, 2.0, 3.0, 4.0], 4);
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert_eq!(h.edges, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let flat = Histogram::new(&[7.0; 3], 5);
        assert_eq!(flat.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::new(Mode::Random, EnvId::DodgeToy, vec![1.0, 3.0], &[10, 20], 2);
        assert_eq!(r.mean, 2.0);
        assert_eq!(r.std, 1.0);
        assert_eq!(r.mean_steps, 15.0);
    }
}
