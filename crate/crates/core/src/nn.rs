//! Named parameter storage and dense layers shared by the encoder and flow.

use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ordered, named collection of trainable tensors. Layers refer to entries
/// by index, so the registration order is part of a model's layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Replaces all values with those of `other`, which must have the same
    /// names and shapes in the same order.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter names do not match the model layout".into()));
        }
        for ((name, mine), theirs) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers a layer with `N(0, 1/fan_in)` weights and zero bias, or all
    /// zeros when `zero` is set.
    pub fn register(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut Rng) -> Self {
        let w = if zero { Tensor::zeros(&[fan_in, fan_out]) } else { gaussian(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng) };
        let weight = params.push(format!("{name}.weight"), w);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars[self.weight])?;
        tape.add(h, vars[self.bias])
    }

    /// Single-row evaluation without a tape.
    pub fn apply(&self, params: &ParamSet, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(params.get(self.bias).data());
        matvec_acc(params.get(self.weight).data(), x, out);
    }
}

/// `out += x W` for a row-major `W: [x.len(), out.len()]`.
pub fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = out.len();
    crate::opcount::add((x.len() * n) as u64);
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += xi * wij;
        }
    }
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| { let g: f64 = StandardNormal.sample(rng); std * g }).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("finite gaussian draws")
}
