//! Ordered parameter collections and their flat-vector layout.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Where one named parameter lives inside the flattened vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpan {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSpan {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.names.push(name.into());
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn layout(&self) -> Vec<ParamSpan> {
        let mut offset = 0;
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let span = ParamSpan {
                    name: name.clone(),
                    offset,
                    rows: t.rows(),
                    cols: t.cols(),
                };
                offset += t.len();
                span
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Same names and shapes, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::LayoutMismatch {
                expected: self.num_scalars(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let chunk = flat[offset..offset + t.len()].to_vec();
            tensors.push(Matrix::new(t.rows(), t.cols(), chunk)?);
            offset += t.len();
        }
        Ok(ParamSet {
            names: self.names.clone(),
            tensors,
        })
    }

    /// Places every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Tensor>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    pub fn concat(mut self, other: ParamSet) -> ParamSet {
        self.names.extend(other.names);
        self.tensors.extend(other.tensors);
        self
    }

    /// Splits into the first `n` tensors and the rest.
    pub fn split_at(mut self, n: usize) -> (ParamSet, ParamSet) {
        let names = self.names.split_off(n);
        let tensors = self.tensors.split_off(n);
        (self, ParamSet { names, tensors })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

/// Glorot-uniform bound `√(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn xavier_matrix<R: rand::Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = xavier_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::new(fan_in, fan_out, data).expect("length matches shape")
}
