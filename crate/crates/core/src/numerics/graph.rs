use super::{forward, kernels, Tensor};
use crate::error::Result;

/// Operations available to model code.
///
/// Model forward passes are written once against this trait and run either
/// eagerly ([`Eager`], no recording) or on a [`Tape`](super::Tape) when
/// gradients are needed. Only exact-shape and scalar broadcasting is
/// supported; `add_bias` is the single explicit row-broadcast.
pub trait Graph {
    type Var: Clone;

    /// Trainable tensor. Repeated registration of the same storage yields
    /// the same node.
    fn param(&self, t: &Tensor) -> Self::Var;
    /// Tensor that never receives gradient.
    fn constant(&self, t: Tensor) -> Self::Var;
    fn value(&self, v: &Self::Var) -> Tensor;

    fn matmul(&self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// `a · bᵀ`
    fn matmul_nt(&self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Adds a vector of length `cols` to every row.
    fn add_bias(&self, x: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;
    fn scale(&self, a: &Self::Var, c: f64) -> Self::Var;
    fn sigmoid(&self, a: &Self::Var) -> Self::Var;
    fn tanh(&self, a: &Self::Var) -> Self::Var;
    fn exp(&self, a: &Self::Var) -> Self::Var;
    fn log(&self, a: &Self::Var) -> Self::Var;
    /// Joins along the last axis.
    fn concat(&self, parts: &[Self::Var]) -> Result<Self::Var>;
    /// Columns `[start, start+len)` of the last axis.
    fn narrow(&self, a: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn slice_rows(&self, a: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn stack_rows(&self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn gather_rows(&self, table: &Self::Var, ids: &[usize]) -> Result<Self::Var>;
    /// Along the last axis.
    fn softmax(&self, a: &Self::Var) -> Result<Self::Var>;
    fn log_softmax(&self, a: &Self::Var) -> Result<Self::Var>;
    fn sum(&self, a: &Self::Var) -> Self::Var;
    /// `out[t·U + u] = a[t] + b[u]` for `a: [T×e]`, `b: [U×e]`.
    fn pairwise_add(&self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Summed negative log-likelihood of row-wise targets; `None` rows are masked.
    fn masked_nll(&self, logits: &Self::Var, targets: &[Option<usize>]) -> Result<Self::Var>;
    /// Scalar node with an externally computed value and local gradient
    /// `∂value/∂input`.
    fn with_gradient(&self, input: &Self::Var, value: f64, grad: Vec<f64>) -> Result<Self::Var>;
}

/// Forward-only evaluation with no recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Var = Tensor;

    fn param(&self, t: &Tensor) -> Tensor {
        t.detached()
    }

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }

    fn value(&self, v: &Tensor) -> Tensor {
        v.clone()
    }

    fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        forward::matmul(a, b)
    }

    fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        forward::matmul_nt(a, b)
    }

    fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        forward::add(a, b)
    }

    fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        forward::mul(a, b)
    }

    fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        forward::add_bias(x, bias)
    }

    fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        forward::map(a, |v| v * c)
    }

    fn sigmoid(&self, a: &Tensor) -> Tensor {
        forward::map(a, kernels::sigmoid)
    }

    fn tanh(&self, a: &Tensor) -> Tensor {
        forward::map(a, f64::tanh)
    }

    fn exp(&self, a: &Tensor) -> Tensor {
        forward::map(a, f64::exp)
    }

    fn log(&self, a: &Tensor) -> Tensor {
        forward::map(a, f64::ln)
    }

    fn concat(&self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        forward::concat(&refs)
    }

    fn narrow(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        forward::narrow(a, start, len)
    }

    fn slice_rows(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        forward::slice_rows(a, start, len)
    }

    fn stack_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        forward::stack_rows(&refs)
    }

    fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        forward::gather_rows(table, ids)
    }

    fn softmax(&self, a: &Tensor) -> Result<Tensor> {
        forward::softmax(a)
    }

    fn log_softmax(&self, a: &Tensor) -> Result<Tensor> {
        forward::log_softmax(a)
    }

    fn sum(&self, a: &Tensor) -> Tensor {
        forward::sum(a)
    }

    fn pairwise_add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        forward::pairwise_add(a, b)
    }

    fn masked_nll(&self, logits: &Tensor, targets: &[Option<usize>]) -> Result<Tensor> {
        forward::masked_nll(logits, targets).map(|(l, _)| Tensor::scalar(l))
    }

    fn with_gradient(&self, _input: &Tensor, value: f64, _grad: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::scalar(value))
    }
}
