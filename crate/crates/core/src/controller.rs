//! The controller: a linear map from `[z, h]` (or `[z, h, c]`) to raw actions,
//! with an optional single tanh hidden layer for the z-only variant.

use serde::{Deserialize, Serialize};

use crate::autodiff::dense_forward;
use crate::env::ActionKind;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Z,
    Zh,
    Zhc,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerArch {
    pub nz: usize,
    pub rnn_hidden: usize,
    pub features: FeatureSet,
    pub action_dim: usize,
    pub bias: bool,
    /// Width of a tanh hidden layer; `None` for the linear controller.
    pub hidden_layer: Option<usize>,
}

impl ControllerArch {
    /// `[z, h]` → 3 actions with bias: 867 parameters.
    pub fn carracing() -> Self {
        Self {
            nz: 32,
            rnn_hidden: 256,
            features: FeatureSet::Zh,
            action_dim: 3,
            bias: true,
            hidden_layer: None,
        }
    }

    /// `[z, h, c]` → 1 action, no bias: 1,088 parameters.
    pub fn doom() -> Self {
        Self {
            nz: 64,
            rnn_hidden: 512,
            features: FeatureSet::Zhc,
            action_dim: 1,
            bias: false,
            hidden_layer: None,
        }
    }

    /// `z` → 40 tanh → 3, biases in both layers: 1,443 parameters.
    pub fn carracing_z_hidden() -> Self {
        Self {
            nz: 32,
            rnn_hidden: 256,
            features: FeatureSet::Z,
            action_dim: 3,
            bias: true,
            hidden_layer: Some(40),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.features {
            FeatureSet::Z => self.nz,
            FeatureSet::Zh => self.nz + self.rnn_hidden,
            FeatureSet::Zhc => self.nz + 2 * self.rnn_hidden,
        }
    }

    fn layers(&self) -> Vec<(usize, usize)> {
        match self.hidden_layer {
            None => vec![(self.feature_dim(), self.action_dim)],
            Some(w) => vec![(self.feature_dim(), w), (w, self.action_dim)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|&(i, o)| i * o + if self.bias { o } else { 0 })
            .sum()
    }
}

/// Controller parameters, packed as each layer's `W` (row-major `[out, in]`)
/// followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller<T> {
    pub arch: ControllerArch,
    params: Vec<T>,
}

impl<T: Real> Controller<T> {
    pub fn zeros(arch: ControllerArch) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            params: vec![T::zero(); n],
        }
    }

    pub fn unpack(arch: ControllerArch, flat: &[T]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::shape("controller params", arch.param_count(), flat.len()));
        }
        Ok(Self {
            arch,
            params: flat.to_vec(),
        })
    }

    pub fn pack(&self) -> Vec<T> {
        self.params.clone()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Concatenates the configured features of one step.
    pub fn features(&self, z: &[T], h: &[T], c: &[T], out: &mut Vec<T>) {
        out.extend_from_slice(z);
        if self.arch.features != FeatureSet::Z {
            out.extend_from_slice(h);
        }
        if self.arch.features == FeatureSet::Zhc {
            out.extend_from_slice(c);
        }
    }

    /// Raw actions for `n` feature rows `[n, F]`.
    pub fn act_batch(&self, features: &[T], n: usize) -> Result<Vec<T>> {
        let f = self.arch.feature_dim();
        if features.len() != n * f {
            return Err(Error::shape("controller features", n * f, features.len()));
        }
        let mut x = features.to_vec();
        let mut offset = 0;
        let layers = self.arch.layers();
        for (li, &(i, o)) in layers.iter().enumerate() {
            let w = &self.params[offset..offset + i * o];
            offset += i * o;
            let zero = vec![T::zero(); o];
            let b = if self.arch.bias {
                offset += o;
                &self.params[offset - o..offset]
            } else {
                &zero[..]
            };
            x = dense_forward(&x, w, b, n, i, o);
            if li + 1 < layers.len() {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(x)
    }

    pub fn act(&self, features: &[T]) -> Result<Vec<T>> {
        self.act_batch(features, 1)
    }
}

/// Maps raw outputs to environment actions dimension by dimension.
pub fn squash_continuous<T: Real>(raw: &[T], kinds: &[ActionKind]) -> Result<Vec<f32>> {
    if raw.len() != kinds.len() {
        return Err(Error::shape("action", kinds.len(), raw.len()));
    }
    Ok(raw.iter().zip(kinds).map(|(r, k)| k.squash(r.as_f64())).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Thirds {
    Left,
    Stay,
    Right,
}

impl Thirds {
    pub fn value(self) -> f32 {
        match self {
            Thirds::Left => -1.0,
            Thirds::Stay => 0.0,
            Thirds::Right => 1.0,
        }
    }
}

/// Below −1/3 is left, above 1/3 is right; the boundaries themselves stay.
pub fn discretize_thirds(x: f64) -> Thirds {
    if x < -1.0 / 3.0 {
        Thirds::Left
    } else if x > 1.0 / 3.0 {
        Thirds::Right
    } else {
        Thirds::Stay
    }
}
