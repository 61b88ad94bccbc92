//! Dense layers and ReLU multilayer perceptrons.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::Tensor;

/// `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// He-normal weights (std `sqrt(2/fan_in)`) and zero bias.
    pub fn he(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        let data = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::new(inputs, outputs, data).expect("sized"),
            bias: Tensor::zeros(1, outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(inputs, outputs),
            bias: Tensor::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of dense layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Tape handles for an [`Mlp`]'s parameters, in [`Mlp::params`] order.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub vars: Vec<Var>,
}

impl Mlp {
    pub fn he(widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths.windows(2).map(|w| Dense::he(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers every parameter as a leaf; `trainable` controls whether
    /// they receive gradients.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            vars: self.params().into_iter().map(|p| tape.leaf(p.clone(), trainable)).collect(),
        }
    }

    /// Forward pass on an already-bound copy of this network.
    pub fn forward(&self, tape: &Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        let input = tape.shape(x)[1];
        if input != self.layers[0].inputs() {
            return Err(Error::shape(
                "mlp",
                format!("input width {input}, network expects {}", self.layers[0].inputs()),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in bound.vars.chunks(2).enumerate() {
            h = tape.add_row(tape.matmul(h, pair[0])?, pair[1])?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking, returning the output matrix.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&tape, &bound, xv)?;
        let value = tape.value(out).clone();
        Ok(value)
    }
}
