//! Layer building blocks shared by the encoders, intention component and
//! prediction head.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Everything a forward pass needs: the tape being recorded, the parameter
/// values, and (during training) the dropout source.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub dropout: Option<DropoutSource<'a>>,
}

pub struct DropoutSource<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        self.dropout = Some(DropoutSource { rate, rng });
        self
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Applies dropout when a dropout source is attached.
    pub fn drop(&mut self, x: Var) -> Result<Var> {
        match self.dropout.as_mut() {
            Some(d) => self.tape.dropout(x, d.rate, Some(&mut *d.rng)),
            None => Ok(x),
        }
    }
}

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = crate::math::sqrt(6.0 / (rows + cols) as f64);
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let values = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, values).expect("positive dims")
}

pub(crate) fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let values = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, values).expect("positive dims")
}

pub(crate) fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n]).expect("positive length")
}

pub(crate) fn ones(n: usize) -> Tensor {
    Tensor::vector(alloc::vec![1.0; n]).expect("positive length")
}

/// `x · W + b` with `W: [in×out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), xavier(inputs, outputs, rng))?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), zeros(outputs))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Fully connected stack with ReLU between layers (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn register(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i < last {
                x = ctx.tape.relu(x);
                x = ctx.drop(x)?;
            }
        }
        Ok(x)
    }
}
