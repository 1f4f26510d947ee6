//! Dense double-precision tensors and a recording reverse-mode autodiff graph.
//!
//! Values live in [`Tensor`]; computations are recorded on a [`Graph`] whose
//! node handles ([`Var`]) are passed between operations. Calling
//! [`Graph::backward`] on a scalar node fills the `grad` buffer of every node
//! that requires a gradient.

mod graph;
pub mod gradcheck;
pub(crate) mod kernels;

pub use graph::{BatchStats, BnMode, Graph, OpKind, UpsampleMethod, Var};


use crate::error::{Error, Result};

/// Maximum supported tensor order (batch, channel, height, width).
pub const MAX_ORDER: usize = 4;

/// N-dimensional (order <= 4) dense tensor of `f64` values.
///
/// An empty shape denotes a scalar.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    node: Option<Var>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() > MAX_ORDER {
            return Err(Error::dim(
                "tensor",
                format!("order {} exceeds {MAX_ORDER}", shape.len()),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(Vec::new(), vec![value]).expect("scalar shape")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: order <= 4")
    }

    /// Builds a tensor by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect()).expect("from_fn: order <= 4")
    }

    /// Marks the tensor as a leaf whose gradient should be accumulated.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Graph handle, present iff the tensor was produced by or registered with a graph.
    pub fn node(&self) -> Option<Var> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Interprets the shape as `[B, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::dim(
                op,
                format!("expected a 4-D tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Strips graph metadata, keeping only shape and values.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
            node: None,
        }
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub(crate) fn attach(&mut self, node: Var) {
        self.node = Some(node);
    }
}

/// Exponential moving averages of batch-norm statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn absorb(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }

    pub fn mode(&self) -> BnMode<'_> {
        BnMode::Eval {
            mean: &self.mean,
            var: &self.var,
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_must_match_shape() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::new([1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5);
        assert!(s.shape().is_empty());
        assert!(s.is_scalar());
        assert!(s.node().is_none());
    }
}
