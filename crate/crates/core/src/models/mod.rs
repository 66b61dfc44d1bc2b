//! Transducer, external language model and cold-fusion head.

mod checkpoint;

pub use checkpoint::{peek_kind, CheckpointKind, FORMAT_VERSION, MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{stack_subsample, Embedding, Linear, LstmStack, LstmState};
use crate::numerics::{Eager, Graph, Parameterized, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransducerConfig {
    /// Non-blank symbols; the blank id is this value.
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Frames concatenated per encoder input.
    pub stack: usize,
    /// Frame advance between encoder inputs.
    pub stride: usize,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub embed_dim: usize,
    pub predictor_hidden: usize,
    pub predictor_layers: usize,
    pub join_dim: usize,
    /// Cold-fusion bottleneck width; `None` means no head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
}

impl TransducerConfig {
    pub fn toy(vocab_size: usize, feature_dim: usize) -> Self {
        TransducerConfig {
            vocab_size,
            feature_dim,
            stack: 3,
            stride: 2,
            encoder_hidden: 64,
            encoder_layers: 2,
            embed_dim: 32,
            predictor_hidden: 64,
            predictor_layers: 1,
            join_dim: 64,
            bottleneck: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.feature_dim,
            self.stack,
            self.stride,
            self.encoder_hidden,
            self.encoder_layers,
            self.embed_dim,
            self.predictor_hidden,
            self.predictor_layers,
            self.join_dim,
            self.bottleneck.unwrap_or(1),
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero dimension in {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl LmConfig {
    pub fn toy(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            embed_dim: 32,
            hidden: 64,
            layers: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.vocab_size, self.embed_dim, self.hidden, self.layers].contains(&0) {
            return Err(Error::Config(format!("zero dimension in {self:?}")));
        }
        Ok(())
    }
}

const LM_BOTTLENECK_SCALE: f64 = 10.0;
const LM_EXPAND_SCALE: f64 = 3.0;

/// Gated fusion of LM logits into the predictor path.
#[derive(Clone, Debug)]
pub struct ColdFusionHead {
    pub lm_bottleneck: Linear,
    pub lm_expand: Linear,
    pub gate: Linear,
    pub combine: Linear,
}

impl ColdFusionHead {
    pub fn new(vocab_size: usize, bottleneck: usize, dim: usize, rng: &mut impl Rng) -> Self {
        ColdFusionHead {
            lm_bottleneck: Linear::new(vocab_size, bottleneck, rng),
            lm_expand: Linear::new(bottleneck, dim, rng),
            gate: Linear::new(2 * dim, 2 * dim, rng),
            combine: Linear::new(2 * dim, dim, rng),
        }
    }

    /// Starts as a pass-through of the predictor: gate fixed at one half,
    /// combine `[2I | W]` with small random `W` on the LM half and zero bias.
    /// The bottleneck reads a probability vector, so its rows start at
    /// embedding scale rather than the usual small range.
    pub fn pass_through(vocab_size: usize, bottleneck: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut head = ColdFusionHead::new(vocab_size, bottleneck, dim, rng);
        head.lm_bottleneck.weight.data_mut().iter_mut().for_each(|x| *x *= LM_BOTTLENECK_SCALE);
        head.lm_expand.weight.data_mut().iter_mut().for_each(|x| *x *= LM_EXPAND_SCALE);
        head.gate.weight = Tensor::zeros(&[2 * dim, 2 * dim]);
        head.gate.bias = Tensor::zeros(&[2 * dim]);
        let w = head.combine.weight.data_mut();
        for r in 0..dim {
            for c in 0..dim {
                w[r * 2 * dim + c] = if r == c { 2.0 } else { 0.0 };
            }
        }
        head.combine.bias = Tensor::zeros(&[dim]);
        head
    }

    /// `h_pred: [n × e]`, `z_lm: [n × V]` → `[n × e]`.
    pub fn fuse<G: Graph>(&self, g: &G, h_pred: &G::Var, z_lm: &G::Var) -> Result<G::Var> {
        let s = g.softmax(z_lm)?;
        let h_lm = self
            .lm_expand
            .forward(g, &self.lm_bottleneck.forward(g, &s)?)?;
        let cat = g.concat(&[h_pred.clone(), h_lm])?;
        let gate = g.sigmoid(&self.gate.forward(g, &cat)?);
        self.combine.forward(g, &g.mul(&gate, &cat)?)
    }

    fn push_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        self.lm_bottleneck.push_params("cold_fusion.lm_bottleneck", out);
        self.lm_expand.push_params("cold_fusion.lm_expand", out);
        self.gate.push_params("cold_fusion.gate", out);
        self.combine.push_params("cold_fusion.combine", out);
    }

    fn push_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.lm_bottleneck
            .push_params_mut("cold_fusion.lm_bottleneck", out);
        self.lm_expand.push_params_mut("cold_fusion.lm_expand", out);
        self.gate.push_params_mut("cold_fusion.gate", out);
        self.combine.push_params_mut("cold_fusion.combine", out);
    }
}

#[derive(Clone, Debug)]
pub struct TransducerModel {
    config: TransducerConfig,
    vocab_fingerprint: String,
    pub encoder: LstmStack,
    pub encoder_proj: Linear,
    /// Row `vocab_size` is the start-of-sequence embedding.
    pub embedding: Embedding,
    pub predictor: LstmStack,
    pub predictor_proj: Linear,
    pub joiner: Linear,
    pub cold_fusion: Option<ColdFusionHead>,
}

impl TransducerModel {
    pub fn new(config: TransducerConfig, vocab_fingerprint: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let encoder = LstmStack::new(c.feature_dim * c.stack, c.encoder_hidden, c.encoder_layers, rng);
        let encoder_proj = Linear::new(c.encoder_hidden, c.join_dim, rng);
        let embedding = Embedding::new(c.vocab_size + 1, c.embed_dim, rng);
        let predictor = LstmStack::new(c.embed_dim, c.predictor_hidden, c.predictor_layers, rng);
        let predictor_proj = Linear::new(c.predictor_hidden, c.join_dim, rng);
        let joiner = Linear::new(c.join_dim, c.vocab_size + 1, rng);
        let cold_fusion = c
            .bottleneck
            .map(|b| ColdFusionHead::new(c.vocab_size, b, c.join_dim, rng));
        Ok(TransducerModel {
            vocab_fingerprint: vocab_fingerprint.to_string(),
            encoder,
            encoder_proj,
            embedding,
            predictor,
            predictor_proj,
            joiner,
            cold_fusion,
            config,
        })
    }

    pub fn config(&self) -> &TransducerConfig {
        &self.config
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn blank_id(&self) -> usize {
        self.config.vocab_size
    }

    pub fn num_symbols(&self) -> usize {
        self.config.vocab_size + 1
    }

    pub fn has_cold_fusion(&self) -> bool {
        self.cold_fusion.is_some()
    }

    /// Adds a fresh [`ColdFusionHead::pass_through`] head, replacing any existing one.
    pub fn attach_cold_fusion(&mut self, bottleneck: usize, rng: &mut impl Rng) {
        let c = &mut self.config;
        c.bottleneck = Some(bottleneck);
        self.cold_fusion = Some(ColdFusionHead::pass_through(c.vocab_size, bottleneck, c.join_dim, rng));
    }

    pub fn detach_cold_fusion(&mut self) -> Option<ColdFusionHead> {
        self.config.bottleneck = None;
        self.cold_fusion.take()
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        match frames.shape() {
            [0, _] => Err(Error::EmptyInput("no feature frames".into())),
            [_, d] if *d == self.config.feature_dim => Ok(()),
            s => Err(Error::shape("encode", s, &[0, self.config.feature_dim])),
        }
    }

    /// `[T × d]` frames → `[T' × e]` encoder embeddings, `T' = ceil(T/stride)`.
    pub fn encode<G: Graph>(&self, g: &G, frames: &Tensor) -> Result<G::Var> {
        self.check_frames(frames)?;
        let stacked = stack_subsample(frames, self.config.stack, self.config.stride)?;
        let h = self.encoder.forward_sequence(g, &g.constant(stacked))?;
        self.encoder_proj.forward(g, &h)
    }

    pub fn encoder_zero_state(&self) -> LstmState<Tensor> {
        self.encoder.zero_state(1)
    }

    /// One stacked window `[1 × d·stack]` through the encoder.
    pub fn encode_window<G: Graph>(
        &self,
        g: &G,
        window: &G::Var,
        state: &LstmState<G::Var>,
    ) -> Result<(G::Var, LstmState<G::Var>)> {
        let (h, next) = self.encoder.step(g, window, state)?;
        Ok((self.encoder_proj.forward(g, &h)?, next))
    }

    pub fn predictor_zero_state(&self) -> LstmState<Tensor> {
        self.predictor.zero_state(1)
    }

    /// Feeds one token (or the start marker `blank_id`) to the predictor.
    pub fn predict_step<G: Graph>(
        &self,
        g: &G,
        token: usize,
        state: &LstmState<G::Var>,
    ) -> Result<(G::Var, LstmState<G::Var>)> {
        if token > self.blank_id() {
            return Err(Error::Vocab {
                token,
                size: self.num_symbols(),
            });
        }
        let x = self.embedding.forward(g, &[token])?;
        let (h, next) = self.predictor.step(g, &x, state)?;
        Ok((self.predictor_proj.forward(g, &h)?, next))
    }

    fn check_history(&self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            if t == self.blank_id() {
                return Err(Error::Contract("blank in predictor history".into()));
            }
            if t > self.blank_id() {
                return Err(Error::Vocab {
                    token: t,
                    size: self.vocab_size(),
                });
            }
        }
        Ok(())
    }

    /// Predictor output for the position after `tokens`, with its state.
    pub fn predict(&self, tokens: &[usize]) -> Result<(Tensor, LstmState<Tensor>)> {
        self.check_history(tokens)?;
        let (mut h, mut st) = self.predict_step(&Eager, self.blank_id(), &self.predictor_zero_state())?;
        for &t in tokens {
            (h, st) = self.predict_step(&Eager, t, &st)?;
        }
        Ok((h, st))
    }

    /// Predictor outputs for every prefix of `tokens`, `[(U+1) × e]`.
    pub fn predict_sequence<G: Graph>(&self, g: &G, tokens: &[usize]) -> Result<G::Var> {
        self.check_history(tokens)?;
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.blank_id());
        ids.extend_from_slice(tokens);
        let x = self.embedding.forward(g, &ids)?;
        let h = self.predictor.forward_sequence(g, &x)?;
        self.predictor_proj.forward(g, &h)
    }

    /// Replaces predictor outputs with the cold-fusion combination when a
    /// head is present. `z_lm` rows align with `h_pred` rows.
    pub fn predictor_output<G: Graph>(
        &self,
        g: &G,
        h_pred: &G::Var,
        z_lm: Option<&G::Var>,
    ) -> Result<G::Var> {
        match (&self.cold_fusion, z_lm) {
            (None, _) => Ok(h_pred.clone()),
            (Some(head), Some(z)) => head.fuse(g, h_pred, z),
            (Some(_), None) => Err(Error::Contract(
                "cold-fusion model needs language-model logits".into(),
            )),
        }
    }

    /// `Linear(tanh(h_enc + h_pred))` row-wise, `[n × (V+1)]`.
    pub fn join<G: Graph>(&self, g: &G, h_enc: &G::Var, h_pred: &G::Var) -> Result<G::Var> {
        self.joiner.forward(g, &g.tanh(&g.add(h_enc, h_pred)?))
    }

    /// Logits for every lattice node, row `t·(U+1) + u`.
    pub fn join_lattice<G: Graph>(&self, g: &G, enc: &G::Var, pred: &G::Var) -> Result<G::Var> {
        self.joiner.forward(g, &g.tanh(&g.pairwise_add(enc, pred)?))
    }

    /// Full lattice logits for one utterance. `lm_logits` are the LM's
    /// next-token logits for each prefix of `tokens`, `[(U+1) × V]`.
    pub fn lattice_logits<G: Graph>(
        &self,
        g: &G,
        frames: &Tensor,
        tokens: &[usize],
        lm_logits: Option<&Tensor>,
    ) -> Result<G::Var> {
        let enc = self.encode(g, frames)?;
        let pred = self.predict_sequence(g, tokens)?;
        let z = lm_logits.map(|z| g.constant(z.clone()));
        let pred = self.predictor_output(g, &pred, z.as_ref())?;
        self.join_lattice(g, &enc, &pred)
    }
}

impl Parameterized for TransducerModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        self.encoder.push_params("encoder.lstm", &mut v);
        self.encoder_proj.push_params("encoder.proj", &mut v);
        self.embedding.push_params("predictor.embedding", &mut v);
        self.predictor.push_params("predictor.lstm", &mut v);
        self.predictor_proj.push_params("predictor.proj", &mut v);
        self.joiner.push_params("joiner", &mut v);
        if let Some(h) = &self.cold_fusion {
            h.push_params(&mut v);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        self.encoder.push_params_mut("encoder.lstm", &mut v);
        self.encoder_proj.push_params_mut("encoder.proj", &mut v);
        self.embedding.push_params_mut("predictor.embedding", &mut v);
        self.predictor.push_params_mut("predictor.lstm", &mut v);
        self.predictor_proj.push_params_mut("predictor.proj", &mut v);
        self.joiner.push_params_mut("joiner", &mut v);
        if let Some(h) = &mut self.cold_fusion {
            h.push_params_mut(&mut v);
        }
        v
    }
}

/// Autoregressive LSTM language model over the non-blank symbols.
#[derive(Clone, Debug)]
pub struct NeuralLM {
    config: LmConfig,
    vocab_fingerprint: String,
    /// Row `vocab_size` is the start marker.
    pub embedding: Embedding,
    pub lstm: LstmStack,
    pub output: Linear,
}

impl NeuralLM {
    pub fn new(config: LmConfig, vocab_fingerprint: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let embedding = Embedding::new(config.vocab_size + 1, config.embed_dim, rng);
        let lstm = LstmStack::new(config.embed_dim, config.hidden, config.layers, rng);
        let output = Linear::new(config.hidden, config.vocab_size, rng);
        Ok(NeuralLM {
            config,
            vocab_fingerprint: vocab_fingerprint.to_string(),
            embedding,
            lstm,
            output,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn start_id(&self) -> usize {
        self.config.vocab_size
    }

    pub fn zero_state(&self) -> LstmState<Tensor> {
        self.lstm.zero_state(1)
    }

    /// Next-token logits `[1 × V]` after feeding `token` (or the start marker).
    pub fn step<G: Graph>(
        &self,
        g: &G,
        token: usize,
        state: &LstmState<G::Var>,
    ) -> Result<(G::Var, LstmState<G::Var>)> {
        if token > self.start_id() {
            return Err(Error::Vocab {
                token,
                size: self.vocab_size(),
            });
        }
        let x = self.embedding.forward(g, &[token])?;
        let (h, next) = self.lstm.step(g, &x, state)?;
        Ok((self.output.forward(g, &h)?, next))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab_size()) {
            Some(&t) => Err(Error::Vocab {
                token: t,
                size: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }

    /// Next-token logits after every prefix of `tokens`, `[(U+1) × V]`.
    pub fn sequence_logits<G: Graph>(&self, g: &G, tokens: &[usize]) -> Result<G::Var> {
        self.check_tokens(tokens)?;
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.start_id());
        ids.extend_from_slice(tokens);
        let x = self.embedding.forward(g, &ids)?;
        let h = self.lstm.forward_sequence(g, &x)?;
        self.output.forward(g, &h)
    }

    /// Summed token negative log-likelihood over a padded batch, and the
    /// number of scored tokens.
    pub fn batch_nll<G: Graph>(&self, g: &G, sentences: &[&[usize]]) -> Result<(G::Var, usize)> {
        for s in sentences {
            self.check_tokens(s)?;
        }
        let b = sentences.len();
        let max_len = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        if b == 0 || max_len == 0 {
            return Err(Error::EmptyInput("no tokens in language-model batch".into()));
        }
        let mut state = self.lstm.zero_state(b).map(|t| g.constant(t.clone()));
        let mut outs = Vec::with_capacity(max_len);
        let mut targets = Vec::with_capacity(max_len * b);
        for t in 0..max_len {
            let ids: Vec<usize> = sentences
                .iter()
                .map(|s| match t {
                    0 => self.start_id(),
                    _ => s.get(t - 1).copied().unwrap_or(self.start_id()),
                })
                .collect();
            targets.extend(sentences.iter().map(|s| s.get(t).copied()));
            let x = self.embedding.forward(g, &ids)?;
            let (h, next) = self.lstm.step(g, &x, &state)?;
            outs.push(h);
            state = next;
        }
        let logits = self.output.forward(g, &g.stack_rows(&outs)?)?;
        let n = targets.iter().flatten().count();
        Ok((g.masked_nll(&logits, &targets)?, n))
    }
}

impl Parameterized for NeuralLM {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        self.embedding.push_params("embedding", &mut v);
        self.lstm.push_params("lstm", &mut v);
        self.output.push_params("output", &mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        self.embedding.push_params_mut("embedding", &mut v);
        self.lstm.push_params_mut("lstm", &mut v);
        self.output.push_params_mut("output", &mut v);
        v
    }
}

/// Fails unless the two fingerprints agree.
pub fn check_fingerprint(expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::FingerprintMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}
