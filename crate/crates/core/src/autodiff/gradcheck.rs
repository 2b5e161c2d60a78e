//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(tensor, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per tensor, evenly strided.
    pub max_coords_per_tensor: usize,
    /// Extra estimates at `10·step`, `step/10`, `100·step`, ... for coordinates
    /// that miss `tolerance`; the closest one counts. A perturbation crossing
    /// a ReLU kink spoils large steps, cancellation spoils small ones on tiny
    /// gradients, and a wrong analytic gradient fails at every step.
    pub refine: u32,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords_per_tensor: usize::MAX,
            refine: 0,
            tolerance: 1e-4,
        }
    }
}

fn eval<F>(params: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences in every (or a strided subset of) parameter coordinate.
pub fn check_gradients<F>(params: &[Tensor<f64>], build: F, cfg: GradCheckConfig) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut at = None;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; params[t].len()]);
        let len = params[t].len();
        let stride = len.div_ceil(cfg.max_coords_per_tensor.min(len)).max(1);
        for i in (0..len).step_by(stride) {
            let a = analytic[i];
            let (mut rel, mut numeric) = (f64::INFINITY, 0.0);
            for k in 0..=cfg.refine as i32 {
                let e = if k % 2 == 1 { (k + 1) / 2 } else { -k / 2 };
                let step = cfg.step * 10f64.powi(e);
                let orig = work[t].data()[i];
                work[t].data_mut()[i] = orig + step;
                let up = eval(&work, &build)?;
                work[t].data_mut()[i] = orig - step;
                let down = eval(&work, &build)?;
                work[t].data_mut()[i] = orig;
                let n = (up - down) / (2.0 * step);
                let r = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
                if r < rel {
                    (rel, numeric) = (r, n);
                }
                if rel < cfg.tolerance {
                    break;
                }
            }
            if rel > worst || at.is_none() {
                worst = worst.max(rel);
                at = Some((t, i, a, numeric));
            }
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords_checked: checked,
        worst: at,
    })
}
