use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{DecodeConfig, DecodeResult, DecodeStats, FrameScorer, Search, TraceEvent};
use crate::error::{Error, Result};
use crate::layers::{stacked_window, LstmState};
use crate::models::{check_fingerprint, NeuralLM, TransducerModel};
use crate::numerics::kernels::log_softmax_row;
use crate::numerics::{Eager, Tensor};

/// Cached per-history state: predictor output (after cold fusion when the
/// model has a head), recurrent states, and the LM's next-token scores.
struct Prefix {
    output: Tensor,
    predictor: LstmState<Tensor>,
    lm: Option<LstmState<Tensor>>,
    lm_log_probs: Option<Vec<f64>>,
}

/// [`FrameScorer`] over a trained transducer and optional external LM.
///
/// Every token history is advanced through the predictor and the LM
/// exactly once; the same LM logits feed cold fusion and shallow fusion.
#[derive(Clone)]
pub struct ModelScorer {
    model: Arc<TransducerModel>,
    lm: Option<Arc<NeuralLM>>,
    cache: HashMap<Vec<usize>, Arc<Prefix>>,
    stats: DecodeStats,
}

impl ModelScorer {
    pub fn new(model: Arc<TransducerModel>, lm: Option<Arc<NeuralLM>>) -> Self {
        ModelScorer {
            model,
            lm,
            cache: HashMap::new(),
            stats: DecodeStats::default(),
        }
    }

    fn prefix(&mut self, history: &[usize]) -> Result<Arc<Prefix>> {
        if let Some(p) = self.cache.get(history) {
            return Ok(p.clone());
        }
        let (pred_in, lm_in, parent) = match history.split_last() {
            None => (self.model.blank_id(), self.lm.as_ref().map(|l| l.start_id()), None),
            Some((&last, head)) => (last, Some(last), Some(self.prefix(head)?)),
        };
        let pred_state = match &parent {
            Some(p) => p.predictor.clone(),
            None => self.model.predictor_zero_state(),
        };
        let (h_pred, predictor) = self.model.predict_step(&Eager, pred_in, &pred_state)?;
        self.stats.predictor_steps += 1;

        let (z, lm_state) = match &self.lm {
            Some(lm) => {
                let st = match parent.as_ref().and_then(|p| p.lm.clone()) {
                    Some(s) => s,
                    None => lm.zero_state(),
                };
                let (z, next) = lm.step(&Eager, lm_in.expect("lm input"), &st)?;
                self.stats.lm_steps += 1;
                (Some(z), Some(next))
            }
            None => (None, None),
        };
        let output = self.model.predictor_output(&Eager, &h_pred, z.as_ref())?;
        let lm_log_probs = z.map(|z| {
            let mut out = vec![0.0; z.len()];
            log_softmax_row(z.data(), &mut out);
            out
        });
        let p = Arc::new(Prefix {
            output,
            predictor,
            lm: lm_state,
            lm_log_probs,
        });
        self.cache.insert(history.to_vec(), p.clone());
        self.stats.prefixes = self.cache.len();
        Ok(p)
    }
}

impl FrameScorer for ModelScorer {
    type Frame = Tensor;

    fn num_symbols(&self) -> usize {
        self.model.num_symbols()
    }

    fn blank_id(&self) -> usize {
        self.model.blank_id()
    }

    fn joint_log_probs(&mut self, frame: &Tensor, history: &[usize]) -> Result<Vec<f64>> {
        let p = self.prefix(history)?;
        let z = self.model.join(&Eager, frame, &p.output)?;
        let mut out = vec![0.0; z.len()];
        log_softmax_row(z.data(), &mut out);
        Ok(out)
    }

    fn lm_log_probs(&mut self, history: &[usize]) -> Result<Vec<f64>> {
        self.prefix(history)?
            .lm_log_probs
            .clone()
            .ok_or_else(|| Error::Contract("shallow fusion without a language model".into()))
    }

    fn stats(&self) -> DecodeStats {
        self.stats
    }
}

/// A transducer, its optional external LM and a decode configuration.
pub struct Decoder {
    model: Arc<TransducerModel>,
    lm: Option<Arc<NeuralLM>>,
    config: DecodeConfig,
    active: Arc<AtomicUsize>,
}

fn check_lm(model: &TransducerModel, lm: &NeuralLM) -> Result<()> {
    check_fingerprint(model.vocab_fingerprint(), lm.vocab_fingerprint())?;
    if lm.vocab_size() != model.vocab_size() {
        return Err(Error::Config(format!(
            "language model has {} symbols, transducer has {}",
            lm.vocab_size(),
            model.vocab_size()
        )));
    }
    Ok(())
}

fn check_setup(model: &TransducerModel, lm: Option<&NeuralLM>, config: &DecodeConfig) -> Result<()> {
    config.validate()?;
    let mode = config.fusion;
    if mode.cold() != model.has_cold_fusion() {
        return Err(Error::Config(if mode.cold() {
            format!("fusion mode {mode} needs a cold-fusion model")
        } else {
            format!("a cold-fusion model cannot be decoded with fusion mode {mode}")
        }));
    }
    match (mode.uses_lm(), lm) {
        (true, None) => Err(Error::Config(format!("fusion mode {mode} needs a language model"))),
        (false, Some(_)) => Err(Error::Config(
            "a language model was given but fusion mode is none".into(),
        )),
        (true, Some(lm)) => check_lm(model, lm),
        (false, None) => Ok(()),
    }
}

impl Decoder {
    pub fn new(
        model: impl Into<Arc<TransducerModel>>,
        lm: Option<impl Into<Arc<NeuralLM>>>,
        config: DecodeConfig,
    ) -> Result<Self> {
        let model = model.into();
        let lm = lm.map(Into::into);
        check_setup(&model, lm.as_deref(), &config)?;
        Ok(Decoder {
            model,
            lm,
            config,
            active: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn model(&self) -> &TransducerModel {
        &self.model
    }

    pub fn lm(&self) -> Option<&NeuralLM> {
        self.lm.as_deref()
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: DecodeConfig) -> Result<()> {
        check_setup(&self.model, self.lm.as_deref(), &config)?;
        self.config = config;
        Ok(())
    }

    pub fn active_sessions(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    /// Replaces the external LM. Refused while any session is open or when
    /// the vocabularies differ; the transducer is never touched.
    pub fn swap_lm(&mut self, lm: impl Into<Arc<NeuralLM>>) -> Result<()> {
        let lm = lm.into();
        if self.active_sessions() > 0 {
            return Err(Error::Session(format!(
                "cannot swap the language model while {} session(s) are active",
                self.active_sessions()
            )));
        }
        if !self.config.fusion.uses_lm() {
            return Err(Error::Config("fusion mode none uses no language model".into()));
        }
        check_lm(&self.model, &lm)?;
        self.lm = Some(lm);
        Ok(())
    }

    pub fn scorer(&self) -> ModelScorer {
        ModelScorer::new(self.model.clone(), self.lm.clone())
    }

    fn search(&self, frames: &Tensor, trace: bool) -> Result<Search<ModelScorer>> {
        let enc = self.model.encode(&Eager, frames)?;
        let mut search = Search::new(self.scorer(), self.config.clone())?;
        if trace {
            search.enable_trace();
        }
        for t in 0..enc.rows() {
            search.push_frame(Tensor::row(enc.row_slice(t).to_vec()))?;
        }
        Ok(search)
    }

    pub fn decode_utterance(&self, frames: &Tensor) -> Result<DecodeResult> {
        self.search(frames, false)?.finish()
    }

    /// Like [`Self::decode_utterance`], also returning every scored transition.
    pub fn decode_traced(&self, frames: &Tensor) -> Result<(DecodeResult, Vec<TraceEvent>)> {
        let mut search = self.search(frames, true)?;
        let result = search.finish()?;
        Ok((result, search.trace().unwrap_or_default().to_vec()))
    }

    pub fn session(&self) -> Result<DecodeSession> {
        Ok(DecodeSession {
            model: self.model.clone(),
            search: Search::new(self.scorer(), self.config.clone())?,
            buffer: Vec::new(),
            buffer_start: 0,
            received: 0,
            next_window: 0,
            encoder: self.model.encoder_zero_state(),
            flushed: false,
            _guard: SessionGuard::new(self.active.clone()),
        })
    }
}

struct SessionGuard(Arc<AtomicUsize>);

impl SessionGuard {
    fn new(counter: Arc<AtomicUsize>) -> Self {
        counter.fetch_add(1, Ordering::SeqCst);
        SessionGuard(counter)
    }
}

impl Clone for SessionGuard {
    fn clone(&self) -> Self {
        SessionGuard::new(self.0.clone())
    }
}

impl Drop for SessionGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Incremental decode of one utterance fed in arbitrary frame chunks.
#[derive(Clone)]
pub struct DecodeSession {
    model: Arc<TransducerModel>,
    search: Search<ModelScorer>,
    /// Raw frames from index `buffer_start` on.
    buffer: Vec<f64>,
    buffer_start: usize,
    received: usize,
    next_window: usize,
    encoder: LstmState<Tensor>,
    flushed: bool,
    _guard: SessionGuard,
}

impl DecodeSession {
    pub fn frames_received(&self) -> usize {
        self.received
    }

    pub fn is_flushed(&self) -> bool {
        self.flushed
    }

    fn encode_window(&mut self, available: usize) -> Result<()> {
        let c = self.model.config();
        let (d, stack, stride) = (c.feature_dim, c.stack, c.stride);
        let start = self.next_window * stride - self.buffer_start;
        let window = stacked_window(&self.buffer, d, available - self.buffer_start, start, stack);
        let (h, next) = self
            .model
            .encode_window(&Eager, &Tensor::row(window), &self.encoder)?;
        self.encoder = next;
        self.search.push_frame(h)?;
        self.next_window += 1;
        let keep_from = (self.next_window * stride).min(self.received);
        let drop = keep_from - self.buffer_start;
        self.buffer.drain(..drop * d);
        self.buffer_start = keep_from;
        Ok(())
    }

    /// Consumes `[n × d]` frames. An empty chunk does nothing.
    pub fn feed(&mut self, chunk: &Tensor) -> Result<()> {
        if self.flushed {
            return Err(Error::Session("frames received after flush".into()));
        }
        if chunk.is_empty() {
            return Ok(());
        }
        let d = self.model.config().feature_dim;
        if chunk.shape().len() != 2 || chunk.cols() != d {
            return Err(Error::shape("decode_streaming", chunk.shape(), &[0, d]));
        }
        self.buffer.extend_from_slice(chunk.data());
        self.received += chunk.rows();
        let (stride, stack) = (self.model.config().stride, self.model.config().stack);
        while self.next_window * stride + stack <= self.received {
            self.encode_window(self.received)?;
        }
        Ok(())
    }

    /// Encodes the zero-padded tail and returns the final result.
    pub fn flush(&mut self) -> Result<DecodeResult> {
        if self.flushed {
            return Err(Error::Session("session already flushed".into()));
        }
        self.flushed = true;
        if self.received == 0 {
            return Err(Error::EmptyInput("no feature frames".into()));
        }
        let total = self.received.div_ceil(self.model.config().stride);
        while self.next_window < total {
            self.encode_window(self.received)?;
        }
        self.search.finish()
    }

    /// Result as if the frames seen so far were the whole utterance.
    pub fn partial(&self) -> Result<DecodeResult> {
        if self.flushed {
            return Err(Error::Session("session already flushed".into()));
        }
        self.clone().flush()
    }
}
