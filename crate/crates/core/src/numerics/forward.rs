//! Value-level implementations of every graph operation.
//!
//! Both [`Eager`](super::Eager) and [`Tape`](super::Tape) call into these,
//! so inference and training produce bit-identical activations.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

fn with_last_dim(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    Tensor::new(vec![m, n], kernels::matmul_nt(a.data(), b.data(), m, k, n))
}

/// Which operand (if any) is broadcast as a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    None,
    Left,
    Right,
}

pub fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::None)
    } else if b.len() == 1 {
        Ok(Broadcast::Right)
    } else if a.len() == 1 {
        Ok(Broadcast::Left)
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let kind = broadcast_kind(op, a, b)?;
    let (shape, data) = match kind {
        Broadcast::None => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        ),
        Broadcast::Right => {
            let y = b.data()[0];
            (a.shape().to_vec(), a.data().iter().map(|x| f(*x, y)).collect())
        }
        Broadcast::Left => {
            let x = a.data()[0];
            (b.shape().to_vec(), b.data().iter().map(|y| f(x, *y)).collect())
        }
    };
    Tensor::new(shape, data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if bias.len() != c || x.shape().is_empty() {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(c) {
        row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect())
        .expect("map preserves shape")
}

pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?;
    let rows = first.rows();
    let mut width = 0;
    for p in parts {
        if p.rows() != rows || p.shape().len() != first.shape().len() {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        width += p.cols();
    }
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row_slice(r));
        }
    }
    Tensor::new(with_last_dim(first.shape(), width), data)
}

pub fn narrow(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = a.cols();
    if start + len > c || a.shape().is_empty() {
        return Err(Error::shape("narrow", a.shape(), &[start, len]));
    }
    let mut data = Vec::with_capacity(a.rows() * len);
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row_slice(r)[start..start + len]);
    }
    Tensor::new(with_last_dim(a.shape(), len), data)
}

pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = require_matrix("slice_rows", a)?;
    if start + len > r {
        return Err(Error::shape("slice_rows", a.shape(), &[start, len]));
    }
    Tensor::new(vec![len, c], a.data()[start * c..(start + len) * c].to_vec())
}

pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyInput("stack_rows of zero tensors".into()))?;
    let c = first.cols();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.cols() != c {
            return Err(Error::shape("stack_rows", first.shape(), p.shape()));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, c], data)
}

pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = require_matrix("gather_rows", table)?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Vocab { token: id, size: v });
        }
        data.extend_from_slice(table.row_slice(id));
    }
    Tensor::new(vec![ids.len(), d], data)
}

pub fn softmax(a: &Tensor) -> Result<Tensor> {
    let c = a.cols();
    if c == 0 || a.is_empty() {
        return Err(Error::shape("softmax", a.shape(), &[1]));
    }
    let mut out = vec![0.0; a.len()];
    for (x, o) in a.data().chunks(c).zip(out.chunks_mut(c)) {
        kernels::softmax_row(x, o);
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub fn log_softmax(a: &Tensor) -> Result<Tensor> {
    let c = a.cols();
    if c == 0 || a.is_empty() {
        return Err(Error::shape("log_softmax", a.shape(), &[1]));
    }
    let mut out = vec![0.0; a.len()];
    for (x, o) in a.data().chunks(c).zip(out.chunks_mut(c)) {
        kernels::log_softmax_row(x, o);
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn pairwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, e) = require_matrix("pairwise_add", a)?;
    let (u, e2) = require_matrix("pairwise_add", b)?;
    if e != e2 {
        return Err(Error::shape("pairwise_add", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(t * u * e);
    for ti in 0..t {
        let ar = a.row_slice(ti);
        for ui in 0..u {
            data.extend(ar.iter().zip(b.row_slice(ui)).map(|(x, y)| x + y));
        }
    }
    Tensor::new(vec![t * u, e], data)
}

/// Returns the loss and the row-wise log-softmax it was computed from.
pub fn masked_nll(logits: &Tensor, targets: &[Option<usize>]) -> Result<(f64, Tensor)> {
    let c = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::shape(
            "masked_nll",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let lsm = log_softmax(logits)?;
    let mut loss = 0.0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= c {
                return Err(Error::Vocab { token: t, size: c });
            }
            loss -= lsm.data()[r * c + t];
        }
    }
    Ok((loss, lsm))
}
