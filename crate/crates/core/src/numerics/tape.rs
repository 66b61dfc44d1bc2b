use std::cell::RefCell;
use std::collections::HashMap;

use super::forward::{self, Broadcast};
use super::graph::Graph;
use super::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    AddBias(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Concat(Vec<usize>),
    Narrow { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    StackRows(Vec<usize>),
    GatherRows { table: usize, ids: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    PairwiseAdd(usize, usize),
    MaskedNll { src: usize, targets: Vec<Option<usize>>, lsm: Tensor },
    Precomputed { src: usize, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order. A tape is confined to one thread; independent tapes
/// share nothing.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, usize>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn unary(&self, a: &Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[a.0]);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract("backward root is not on this tape".into()))?;
        if root_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
        }

        let params = self.params.borrow().clone();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[idx].requires_grad {
        return;
    }
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            acc(grads, nodes, *a, |d| {
                add_into(d, &kernels::matmul_nt(g, bv.data(), m, n, k));
            });
            acc(grads, nodes, *b, |d| {
                kernels::matmul_tn_acc(av.data(), g, m, k, n, d);
            });
        }
        Op::MatMulNt(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
            acc(grads, nodes, *a, |d| {
                add_into(d, &kernels::matmul(g, bv.data(), m, n, k));
            });
            acc(grads, nodes, *b, |d| {
                kernels::matmul_tn_acc(g, av.data(), m, n, k, d);
            });
        }
        Op::Add(a, b, kind) => {
            let total: f64 = g.iter().sum();
            acc(grads, nodes, *a, |d| match kind {
                Broadcast::Left => d[0] += total,
                _ => add_into(d, g),
            });
            acc(grads, nodes, *b, |d| match kind {
                Broadcast::Right => d[0] += total,
                _ => add_into(d, g),
            });
        }
        Op::Mul(a, b, kind) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            match kind {
                Broadcast::None => {
                    acc(grads, nodes, *a, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * bv[k];
                        }
                    });
                    acc(grads, nodes, *b, |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * av[k];
                        }
                    });
                }
                Broadcast::Right => {
                    let s = bv[0];
                    acc(grads, nodes, *a, |d| kernels::axpy(s, g, d));
                    acc(grads, nodes, *b, |d| d[0] += kernels::dot(g, av));
                }
                Broadcast::Left => {
                    let s = av[0];
                    acc(grads, nodes, *a, |d| d[0] += kernels::dot(g, bv));
                    acc(grads, nodes, *b, |d| kernels::axpy(s, g, d));
                }
            }
        }
        Op::AddBias(x, b) => {
            let c = out.cols();
            acc(grads, nodes, *x, |d| add_into(d, g));
            acc(grads, nodes, *b, |d| {
                for row in g.chunks(c) {
                    add_into(d, row);
                }
            });
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, |d| kernels::axpy(*c, g, d)),
        Op::Sigmoid(a) => acc(grads, nodes, *a, |d| {
            for (k, y) in out.data().iter().enumerate() {
                d[k] += g[k] * y * (1.0 - y);
            }
        }),
        Op::Tanh(a) => acc(grads, nodes, *a, |d| {
            for (k, y) in out.data().iter().enumerate() {
                d[k] += g[k] * (1.0 - y * y);
            }
        }),
        Op::Exp(a) => acc(grads, nodes, *a, |d| {
            for (k, y) in out.data().iter().enumerate() {
                d[k] += g[k] * y;
            }
        }),
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            acc(grads, nodes, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] / x[k];
                }
            })
        }
        Op::Concat(parts) => {
            let width = out.cols();
            let rows = out.rows();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                acc(grads, nodes, p, |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * pc..(r + 1) * pc],
                            &g[r * width + offset..r * width + offset + pc],
                        );
                    }
                });
                offset += pc;
            }
        }
        Op::Narrow { src, start } => {
            let len = out.cols();
            let sc = nodes[*src].value.cols();
            acc(grads, nodes, *src, |d| {
                for r in 0..out.rows() {
                    add_into(
                        &mut d[r * sc + start..r * sc + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            })
        }
        Op::SliceRows { src, start } => {
            let c = out.cols();
            acc(grads, nodes, *src, |d| {
                add_into(&mut d[start * c..start * c + g.len()], g);
            })
        }
        Op::StackRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                acc(grads, nodes, p, |d| add_into(d, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::GatherRows { table, ids } => {
            let c = out.cols();
            acc(grads, nodes, *table, |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                }
            })
        }
        Op::Softmax(a) => {
            let c = out.cols();
            acc(grads, nodes, *a, |d| {
                for ((y, gr), dr) in out.data().chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let s = kernels::dot(y, gr);
                    for k in 0..c {
                        dr[k] += y[k] * (gr[k] - s);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            acc(grads, nodes, *a, |d| {
                for ((y, gr), dr) in out.data().chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for k in 0..c {
                        dr[k] += gr[k] - y[k].exp() * s;
                    }
                }
            })
        }
        Op::Sum(a) => acc(grads, nodes, *a, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::PairwiseAdd(a, b) => {
            let (t, e) = (nodes[*a].value.rows(), out.cols());
            let u = nodes[*b].value.rows();
            acc(grads, nodes, *a, |d| {
                for ti in 0..t {
                    for ui in 0..u {
                        let r = ti * u + ui;
                        add_into(&mut d[ti * e..(ti + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                }
            });
            acc(grads, nodes, *b, |d| {
                for ti in 0..t {
                    for ui in 0..u {
                        let r = ti * u + ui;
                        add_into(&mut d[ui * e..(ui + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                }
            });
        }
        Op::MaskedNll { src, targets, lsm } => {
            let c = lsm.cols();
            acc(grads, nodes, *src, |d| {
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &lsm.data()[r * c..(r + 1) * c];
                        let dr = &mut d[r * c..(r + 1) * c];
                        for k in 0..c {
                            dr[k] += g[0] * row[k].exp();
                        }
                        dr[t] -= g[0];
                    }
                }
            })
        }
        Op::Precomputed { src, grad } => acc(grads, nodes, *src, |d| kernels::axpy(g[0], grad, d)),
    }
}

impl Graph for Tape {
    type Var = Var;

    fn param(&self, t: &Tensor) -> Var {
        let key = t.storage_id();
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var(id);
        }
        let v = self.push(t.detached(), Op::Leaf, true);
        self.params.borrow_mut().insert(key, v.0);
        v
    }

    fn constant(&self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    fn value(&self, v: &Var) -> Tensor {
        self.val(*v)
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = forward::matmul(&self.val(*a), &self.val(*b))?;
        Ok(self.push(value, Op::MatMul(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    fn matmul_nt(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = forward::matmul_nt(&self.val(*a), &self.val(*b))?;
        Ok(self.push(value, Op::MatMulNt(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.val(*a), self.val(*b));
        let kind = forward::broadcast_kind("add", &av, &bv)?;
        let value = forward::add(&av, &bv)?;
        Ok(self.push(value, Op::Add(a.0, b.0, kind), self.rg(&[a.0, b.0])))
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.val(*a), self.val(*b));
        let kind = forward::broadcast_kind("mul", &av, &bv)?;
        let value = forward::mul(&av, &bv)?;
        Ok(self.push(value, Op::Mul(a.0, b.0, kind), self.rg(&[a.0, b.0])))
    }

    fn add_bias(&self, x: &Var, bias: &Var) -> Result<Var> {
        let value = forward::add_bias(&self.val(*x), &self.val(*bias))?;
        Ok(self.push(value, Op::AddBias(x.0, bias.0), self.rg(&[x.0, bias.0])))
    }

    fn scale(&self, a: &Var, c: f64) -> Var {
        let value = forward::map(&self.val(*a), |v| v * c);
        self.unary(a, value, Op::Scale(a.0, c))
    }

    fn sigmoid(&self, a: &Var) -> Var {
        let value = forward::map(&self.val(*a), kernels::sigmoid);
        self.unary(a, value, Op::Sigmoid(a.0))
    }

    fn tanh(&self, a: &Var) -> Var {
        let value = forward::map(&self.val(*a), f64::tanh);
        self.unary(a, value, Op::Tanh(a.0))
    }

    fn exp(&self, a: &Var) -> Var {
        let value = forward::map(&self.val(*a), f64::exp);
        self.unary(a, value, Op::Exp(a.0))
    }

    fn log(&self, a: &Var) -> Var {
        let value = forward::map(&self.val(*a), f64::ln);
        self.unary(a, value, Op::Log(a.0))
    }

    fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let refs: Vec<&Tensor> = vals.iter().collect();
        let value = forward::concat(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat(ids), rg))
    }

    fn narrow(&self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let value = forward::narrow(&self.val(*a), start, len)?;
        Ok(self.unary(a, value, Op::Narrow { src: a.0, start }))
    }

    fn slice_rows(&self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let value = forward::slice_rows(&self.val(*a), start, len)?;
        Ok(self.unary(a, value, Op::SliceRows { src: a.0, start }))
    }

    fn stack_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let refs: Vec<&Tensor> = vals.iter().collect();
        let value = forward::stack_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::StackRows(ids), rg))
    }

    fn gather_rows(&self, table: &Var, ids: &[usize]) -> Result<Var> {
        let value = forward::gather_rows(&self.val(*table), ids)?;
        Ok(self.unary(
            table,
            value,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    fn softmax(&self, a: &Var) -> Result<Var> {
        let value = forward::softmax(&self.val(*a))?;
        Ok(self.unary(a, value, Op::Softmax(a.0)))
    }

    fn log_softmax(&self, a: &Var) -> Result<Var> {
        let value = forward::log_softmax(&self.val(*a))?;
        Ok(self.unary(a, value, Op::LogSoftmax(a.0)))
    }

    fn sum(&self, a: &Var) -> Var {
        let value = forward::sum(&self.val(*a));
        self.unary(a, value, Op::Sum(a.0))
    }

    fn pairwise_add(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = forward::pairwise_add(&self.val(*a), &self.val(*b))?;
        Ok(self.push(value, Op::PairwiseAdd(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    fn masked_nll(&self, logits: &Var, targets: &[Option<usize>]) -> Result<Var> {
        let (loss, lsm) = forward::masked_nll(&self.val(*logits), targets)?;
        Ok(self.unary(
            logits,
            Tensor::scalar(loss),
            Op::MaskedNll {
                src: logits.0,
                targets: targets.to_vec(),
                lsm,
            },
        ))
    }

    fn with_gradient(&self, input: &Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        let n = self.nodes.borrow()[input.0].value.len();
        if grad.len() != n {
            return Err(Error::shape("with_gradient", &[n], &[grad.len()]));
        }
        Ok(self.unary(
            input,
            Tensor::scalar(value),
            Op::Precomputed { src: input.0, grad },
        ))
    }
}

/// Result of [`Tape::backward`]: gradients of every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, usize>,
}

impl Gradients {
    pub fn of(&self, v: &Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter registered with [`Graph::param`].
    pub fn for_param(&self, t: &Tensor) -> Option<&[f64]> {
        self.params
            .get(&t.storage_id())
            .and_then(|&i| self.grads[i].as_deref())
    }

    /// Adds this pass's gradient into the parameter's grad buffer. Returns
    /// whether the parameter took part in the graph.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<bool> {
        match self.for_param(t) {
            Some(g) => {
                let g = g.to_vec();
                t.accumulate_grad(&g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}
