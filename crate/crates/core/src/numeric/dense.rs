use rand::Rng;

use super::matrix::Matrix;
use super::param::ParamGroup;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Affine layer `x W + b` with Glorot weights and zero bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamGroup,
    pub bias: ParamGroup,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: ParamGroup::new(format!("{name}.w"), Matrix::glorot(inputs, outputs, rng)),
            bias: ParamGroup::new(format!("{name}.b"), Matrix::zeros(1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn params(&self) -> [&ParamGroup; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut ParamGroup; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
