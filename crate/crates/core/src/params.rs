//! Flat parameter storage with a declared layout.
//!
//! Every model keeps its weights in one [`ParamVector`]: a contiguous array
//! plus a list of named, shaped slices. The same layout is written to
//! checkpoint manifests and is what the optimizers (Adam, CMA-ES) operate on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_layout(specs: &[(&str, Vec<usize>)]) -> Vec<LayerSpec> {
    let mut offset = 0;
    specs
        .iter()
        .map(|(name, shape)| {
            let spec = LayerSpec {
                name: (*name).to_string(),
                shape: shape.clone(),
                offset,
            };
            offset += spec.len();
            spec
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    layout: Vec<LayerSpec>,
    data: Vec<T>,
}

impl<T: Real> ParamVector<T> {
    pub fn zeros(layout: Vec<LayerSpec>) -> Self {
        let len = layout.last().map_or(0, |l| l.offset + l.len());
        Self {
            layout,
            data: vec![T::zero(); len],
        }
    }

    pub fn from_data(layout: Vec<LayerSpec>, data: Vec<T>) -> Result<Self> {
        let want = layout.last().map_or(0, |l| l.offset + l.len());
        let mut offset = 0;
        for l in &layout {
            if l.offset != offset {
                return Err(Error::invalid(format!("layer {} offset {} != {}", l.name, l.offset, offset)));
            }
            offset += l.len();
        }
        if data.len() != want {
            return Err(Error::shape("param vector", want, data.len()));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &[LayerSpec] {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layer(&self, i: usize) -> &[T] {
        let l = &self.layout[i];
        &self.data[l.offset..l.offset + l.len()]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut [T] {
        let (start, len) = (self.layout[i].offset, self.layout[i].len());
        &mut self.data[start..start + len]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|l| l.name == name)
    }

    pub fn tensor(&self, i: usize) -> Tensor<T> {
        Tensor::new(self.layout[i].shape.clone(), self.layer(i).to_vec()).expect("layout is consistent")
    }

    /// Fills layer `i` uniformly in `[-bound, bound]`.
    pub fn init_uniform(&mut self, i: usize, bound: f64, rng: &mut impl Rng) {
        for v in self.layer_mut(i) {
            *v = T::lit(rng.random_range(-bound..=bound));
        }
    }

    /// Registers every layer on the tape, in layout order.
    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        (0..self.layout.len())
            .map(|i| {
                let t = self.tensor(i);
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Flattens the gradients of `vars` (as returned by [`Self::on_tape`]).
    pub fn flat_grads(&self, grads: &mut Gradients<T>, vars: &[Var]) -> Vec<T> {
        let mut flat = vec![T::zero(); self.data.len()];
        for (l, v) in self.layout.iter().zip(vars) {
            if let Some(g) = grads.take(*v) {
                flat[l.offset..l.offset + l.len()].copy_from_slice(g.data());
            }
        }
        flat
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
