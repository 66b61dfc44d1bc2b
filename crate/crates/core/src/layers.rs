//! Linear projections, embeddings, LSTM stacks and frame stacking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

/// Range of the uniform initializer for every non-bias-special parameter.
pub const INIT_RANGE: f64 = 0.1;
/// Initial value of the LSTM forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub(crate) type ParamRefs<'a> = Vec<(String, &'a Tensor)>;
pub(crate) type ParamMuts<'a> = Vec<(String, &'a mut Tensor)>;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: uniform(rng, &[out_dim, in_dim]),
            bias: uniform(rng, &[out_dim]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        match weight.shape() {
            [out, _] if bias.shape() == [*out] => Ok(Linear { weight, bias }),
            _ => Err(Error::shape("linear", weight.shape(), bias.shape())),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<G: Graph>(&self, g: &G, x: &G::Var) -> Result<G::Var> {
        let y = g.matmul_nt(x, &g.param(&self.weight))?;
        g.add_bias(&y, &g.param(&self.bias))
    }

    pub(crate) fn push_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Token embedding table `[V × d]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Embedding {
            table: uniform(rng, &[vocab, dim]),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// Rows for `ids`, `[len(ids) × d]`.
    pub fn forward<G: Graph>(&self, g: &G, ids: &[usize]) -> Result<G::Var> {
        g.gather_rows(&g.param(&self.table), ids)
    }

    pub(crate) fn push_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a>) {
        out.push((join(prefix, "table"), &self.table));
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a>) {
        out.push((join(prefix, "table"), &mut self.table));
    }
}

/// One LSTM layer. Gate blocks are stacked in the order
/// input, forget, cell, output along the `4H` axis.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmLayer {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_ih = uniform(rng, &[4 * hidden, in_dim]);
        let w_hh = uniform(rng, &[4 * hidden, hidden]);
        let mut bias = uniform(rng, &[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS);
        LstmLayer { w_ih, w_hh, bias }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn in_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    /// One cell update given the precomputed input projection `x W_ihᵀ`.
    fn cell<G: Graph>(
        &self,
        g: &G,
        gx: &G::Var,
        h: &G::Var,
        c: &G::Var,
    ) -> Result<(G::Var, G::Var)> {
        let hd = self.hidden();
        let gh = g.matmul_nt(h, &g.param(&self.w_hh))?;
        let gates = g.add_bias(&g.add(gx, &gh)?, &g.param(&self.bias))?;
        let i = g.sigmoid(&g.narrow(&gates, 0, hd)?);
        let f = g.sigmoid(&g.narrow(&gates, hd, hd)?);
        let cand = g.tanh(&g.narrow(&gates, 2 * hd, hd)?);
        let o = g.sigmoid(&g.narrow(&gates, 3 * hd, hd)?);
        let c_next = g.add(&g.mul(&f, c)?, &g.mul(&i, &cand)?)?;
        let h_next = g.mul(&o, &g.tanh(&c_next))?;
        Ok((h_next, c_next))
    }

    fn push_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a>) {
        out.push((join(prefix, "w_ih"), &self.w_ih));
        out.push((join(prefix, "w_hh"), &self.w_hh));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a>) {
        out.push((join(prefix, "w_ih"), &mut self.w_ih));
        out.push((join(prefix, "w_hh"), &mut self.w_hh));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Per-layer `(h, c)` pairs, each `[batch × hidden]`.
#[derive(Clone, Debug)]
pub struct LstmState<V> {
    pub layers: Vec<(V, V)>,
}

impl<V> LstmState<V> {
    pub fn map<W>(&self, mut f: impl FnMut(&V) -> W) -> LstmState<W> {
        LstmState {
            layers: self.layers.iter().map(|(h, c)| (f(h), f(c))).collect(),
        }
    }
}

impl LstmState<Tensor> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((h1, c1), (h2, c2))| h1.bit_eq(h2) && c1.bit_eq(c2))
    }
}

#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new(in_dim: usize, hidden: usize, num_layers: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..num_layers)
            .map(|l| LstmLayer::new(if l == 0 { in_dim } else { hidden }, hidden, rng))
            .collect();
        LstmStack { layers }
    }

    pub fn from_layers(layers: Vec<LstmLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[1].in_dim() != pair[0].hidden() {
                return Err(Error::shape(
                    "lstm_stack",
                    &[pair[0].hidden()],
                    &[pair[1].in_dim()],
                ));
            }
        }
        Ok(LstmStack { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty stack").hidden()
    }

    pub fn zero_state(&self, batch: usize) -> LstmState<Tensor> {
        LstmState {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let z = Tensor::zeros(&[batch, l.hidden()]);
                    (z.clone(), z)
                })
                .collect(),
        }
    }

    fn check_state<V>(&self, state: &LstmState<V>) -> Result<()> {
        if state.layers.len() != self.layers.len() {
            return Err(Error::shape(
                "lstm_state",
                &[self.layers.len()],
                &[state.layers.len()],
            ));
        }
        Ok(())
    }

    /// Advances every layer by one step. `x` is `[batch × in]`; the input
    /// state is left untouched.
    pub fn step<G: Graph>(
        &self,
        g: &G,
        x: &G::Var,
        state: &LstmState<G::Var>,
    ) -> Result<(G::Var, LstmState<G::Var>)> {
        self.check_state(state)?;
        let mut input = x.clone();
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, (h, c)) in self.layers.iter().zip(&state.layers) {
            let gx = g.matmul_nt(&input, &g.param(&layer.w_ih))?;
            let (h2, c2) = layer.cell(g, &gx, h, c)?;
            input = h2.clone();
            next.push((h2, c2));
        }
        Ok((input, LstmState { layers: next }))
    }

    /// Runs a single sequence `[T × in]` from the zero state and returns the
    /// top-layer outputs `[T × H]`. Bit-identical to repeated [`Self::step`].
    pub fn forward_sequence<G: Graph>(&self, g: &G, xs: &G::Var) -> Result<G::Var> {
        let t_len = g.value(xs).rows();
        let mut input = xs.clone();
        for layer in &self.layers {
            let gx_all = g.matmul_nt(&input, &g.param(&layer.w_ih))?;
            let zero = Tensor::zeros(&[1, layer.hidden()]);
            let mut h = g.constant(zero.clone());
            let mut c = g.constant(zero);
            let mut outs = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let gx = g.slice_rows(&gx_all, t, 1)?;
                let (h2, c2) = layer.cell(g, &gx, &h, &c)?;
                outs.push(h2.clone());
                h = h2;
                c = c2;
            }
            input = g.stack_rows(&outs)?;
        }
        Ok(input)
    }

    pub(crate) fn push_params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.push_params(&join(prefix, &i.to_string()), out);
        }
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.push_params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Concatenates `stack` frames starting at frame `start`, zero-filling any
/// frame at or beyond `available`.
pub fn stacked_window(frames: &[f64], dim: usize, available: usize, start: usize, stack: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * stack];
    for k in 0..stack {
        let f = start + k;
        if f < available {
            out[k * dim..(k + 1) * dim].copy_from_slice(&frames[f * dim..(f + 1) * dim]);
        }
    }
    out
}

/// Stacks `stack` consecutive frames every `stride` frames:
/// `[T × d] → [ceil(T/stride) × d·stack]`, zero-padded on the right.
pub fn stack_subsample(frames: &Tensor, stack: usize, stride: usize) -> Result<Tensor> {
    if stack == 0 || stride == 0 {
        return Err(Error::Contract(format!(
            "stack ({stack}) and stride ({stride}) must be at least 1"
        )));
    }
    let (t, d) = match frames.shape() {
        [t, d] => (*t, *d),
        s => return Err(Error::shape("stack_subsample", s, &[0, 0])),
    };
    if t == 0 {
        return Err(Error::EmptyInput("no feature frames".into()));
    }
    let out_len = t.div_ceil(stride);
    let mut data = Vec::with_capacity(out_len * d * stack);
    for i in 0..out_len {
        data.extend(stacked_window(frames.data(), d, t, i * stride, stack));
    }
    Tensor::matrix(out_len, d * stack, data)
}
