use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, Adam, AdamConfig, FreezeSet, Schedule};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::models::{check_fingerprint, LmConfig, NeuralLM, TransducerConfig, TransducerModel};
use crate::numerics::{Eager, Graph, Parameterized, Tape, Tensor};
use crate::transducer::{rnnt_loss, LogitLattice};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
    pub freeze: FreezeSet,
    pub seed: u64,
}

impl TrainConfig {
    pub fn lm_default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            schedule: Schedule {
                base_lr: 4e-3,
                hold_epochs: 1,
                decay: 0.5,
            },
            clip_norm: Some(5.0),
            adam: AdamConfig::default(),
            freeze: FreezeSet::default(),
            seed: 0,
        }
    }

    pub fn rnnt_default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            schedule: Schedule {
                base_lr: 2e-3,
                hold_epochs: 8,
                decay: 0.8,
            },
            clip_norm: Some(5.0),
            adam: AdamConfig::default(),
            freeze: FreezeSet::default(),
            seed: 0,
        }
    }

    pub fn cf_default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 8,
            schedule: Schedule {
                base_lr: 2.5e-3,
                hold_epochs: 3,
                decay: 0.6,
            },
            ..TrainConfig::rnnt_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Language-model runs only: `exp(dev_loss)`.
    pub dev_perplexity: Option<f64>,
    pub skipped_steps: usize,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={:e} train_loss={} dev_loss={}",
            self.epoch, self.lr, self.train_loss, self.dev_loss
        )?;
        if let Some(p) = self.dev_perplexity {
            write!(f, " dev_ppl={p}")?;
        }
        write!(f, " skipped={}", self.skipped_steps)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Dev loss of the starting point, before any update.
    pub initial_dev_loss: f64,
    /// Dev loss of the model a fine-tuning run bootstrapped from.
    pub reference_dev_loss: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_dev_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_dev_loss, |e| e.dev_loss)
    }

    /// False when the final dev loss is not at least 10% below the first
    /// epoch's.
    pub fn converged(&self) -> bool {
        match self.epochs.first() {
            Some(first) => self.final_dev_loss() < 0.9 * first.dev_loss,
            None => false,
        }
    }

    /// One `key=value` record per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("initial dev_loss={}", self.initial_dev_loss);
        if let Some(r) = self.reference_dev_loss {
            out.push_str(&format!(" reference_dev_loss={r}"));
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{e}\n"));
        }
        out
    }
}

/// Batches of indices of similar length, in a seeded random order.
fn buckets(lengths: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    out.shuffle(rng);
    out
}

fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Seeded generator for model initialisation in the recipes.
pub(crate) fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn update<P: Parameterized>(model: &mut P, adam: &mut Adam, lr: f64, cfg: &TrainConfig) -> Result<bool> {
    if let Some(c) = cfg.clip_norm {
        clip_grad_norm(model, c, &cfg.freeze);
    }
    adam.step(model, lr, &cfg.freeze)
}

const LM_EVAL_BATCH: usize = 128;

/// Mean token negative log-likelihood.
fn lm_nll(lm: &NeuralLM, sentences: &[Vec<usize>]) -> Result<f64> {
    let nonempty: Vec<&[usize]> = sentences.iter().filter(|s| !s.is_empty()).map(Vec::as_slice).collect();
    if nonempty.is_empty() {
        return Err(Error::EmptyInput("no tokens to score".into()));
    }
    let (mut total, mut count) = (0.0, 0);
    for chunk in nonempty.chunks(LM_EVAL_BATCH) {
        let (nll, n) = lm.batch_nll(&Eager, chunk)?;
        total += nll.item()?;
        count += n;
    }
    Ok(total / count as f64)
}

pub fn lm_perplexity(lm: &NeuralLM, sentences: &[Vec<usize>]) -> Result<f64> {
    Ok(lm_nll(lm, sentences)?.exp())
}

/// Trains `lm` in place on token sentences with the cross-entropy loss.
pub fn fit_lm(lm: &mut NeuralLM, train: &[Vec<usize>], dev: &[Vec<usize>], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let train: Vec<&[usize]> = train.iter().filter(|s| !s.is_empty()).map(Vec::as_slice).collect();
    if train.is_empty() {
        return Err(Error::EmptyInput("language-model training corpus has no tokens".into()));
    }
    let lengths: Vec<usize> = train.iter().map(|s| s.len()).collect();
    let mut adam = Adam::new(cfg.adam);
    let mut log = TrainLog {
        initial_dev_loss: lm_nll(lm, dev)?,
        ..TrainLog::default()
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        let skipped_before = adam.skipped();
        let (mut total, mut count) = (0.0, 0);
        for batch in buckets(&lengths, cfg.batch_size, &mut epoch_rng(cfg.seed, 11, epoch)) {
            let sents: Vec<&[usize]> = batch.iter().map(|&i| train[i]).collect();
            let tape = Tape::new();
            let (nll, n) = lm.batch_nll(&tape, &sents)?;
            let loss = tape.scale(&nll, 1.0 / n as f64);
            total += tape.value(&nll).item()?;
            count += n;
            let grads = tape.backward(&loss)?;
            for (_, p) in lm.params_mut() {
                grads.accumulate_into(p)?;
            }
            drop(tape);
            update(lm, &mut adam, lr, cfg)?;
        }
        let dev_loss = lm_nll(lm, dev)?;
        let e = EpochLog {
            epoch,
            lr,
            train_loss: total / count as f64,
            dev_loss,
            dev_perplexity: Some(dev_loss.exp()),
            skipped_steps: adam.skipped() - skipped_before,
        };
        log::info!("lm {e}");
        log.epochs.push(e);
    }
    Ok(log)
}

/// Builds a language model from `config` (seeded by `cfg.seed`) and trains it.
pub fn train_lm(
    config: LmConfig,
    vocab_fingerprint: &str,
    train: &[Vec<usize>],
    dev: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(NeuralLM, TrainLog)> {
    let mut lm = NeuralLM::new(config, vocab_fingerprint, &mut init_rng(cfg.seed, 1))?;
    let log = fit_lm(&mut lm, train, dev, cfg)?;
    Ok((lm, log))
}

fn utterance_loss<G: Graph>(
    g: &G,
    model: &TransducerModel,
    utt: &Utterance,
    lm_logits: Option<&Tensor>,
) -> Result<G::Var> {
    let logits = model.lattice_logits(g, &utt.frames, &utt.reference, lm_logits)?;
    let value = g.value(&logits);
    let positions = utt.reference.len() + 1;
    let lattice = LogitLattice::new(
        value.reshape(vec![value.rows() / positions, positions, model.num_symbols()])?,
        model.blank_id(),
    )?;
    let (loss, grad) = rnnt_loss(&lattice, &utt.reference)?;
    g.with_gradient(&logits, loss, grad.data().to_vec())
}

/// Frozen-LM logits for every prefix of every reference, computed once.
fn lm_logits_for(model: &TransducerModel, lm: Option<&NeuralLM>, utts: &[Utterance]) -> Result<Vec<Option<Tensor>>> {
    match (model.has_cold_fusion(), lm) {
        (false, _) => Ok(vec![None; utts.len()]),
        (true, None) => Err(Error::Config("a cold-fusion model needs a language model".into())),
        (true, Some(lm)) => {
            check_fingerprint(model.vocab_fingerprint(), lm.vocab_fingerprint())?;
            utts.iter()
                .map(|u| lm.sequence_logits(&Eager, &u.reference).map(Some))
                .collect()
        }
    }
}

fn mean_loss(model: &TransducerModel, utts: &[Utterance], lm_logits: &[Option<Tensor>]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::EmptyInput("no utterances to score".into()));
    }
    let mut total = 0.0;
    for (u, z) in utts.iter().zip(lm_logits) {
        total += utterance_loss(&Eager, model, u, z.as_ref())?.item()?;
    }
    Ok(total / utts.len() as f64)
}

/// Mean per-utterance transducer loss.
pub fn dev_loss_rnnt(model: &TransducerModel, lm: Option<&NeuralLM>, utts: &[Utterance]) -> Result<f64> {
    mean_loss(model, utts, &lm_logits_for(model, lm, utts)?)
}

/// Trains `model` in place. A cold-fusion model reads logits from `lm`,
/// which is borrowed immutably and so cannot change.
pub fn fit_rnnt(
    model: &mut TransducerModel,
    lm: Option<&NeuralLM>,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("transducer training set is empty".into()));
    }
    if let Some(u) = train.iter().chain(dev).find(|u| u.frames.rows() == 0) {
        return Err(Error::EmptyInput(format!("utterance {} has no frames", u.id)));
    }
    let train_z = lm_logits_for(model, lm, train)?;
    let dev_z = lm_logits_for(model, lm, dev)?;
    let lengths: Vec<usize> = train.iter().map(|u| u.frames.rows()).collect();
    let mut adam = Adam::new(cfg.adam);
    let mut log = TrainLog {
        initial_dev_loss: mean_loss(model, dev, &dev_z)?,
        ..TrainLog::default()
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        let skipped_before = adam.skipped();
        let mut non_finite = 0;
        let mut total = 0.0;
        for batch in buckets(&lengths, cfg.batch_size, &mut epoch_rng(cfg.seed, 12, epoch)) {
            let scale = 1.0 / batch.len() as f64;
            let mut ok = true;
            for &i in &batch {
                let tape = Tape::new();
                let loss = match utterance_loss(&tape, model, &train[i], train_z[i].as_ref()) {
                    Ok(l) => l,
                    Err(Error::NonFinite(msg)) => {
                        log::warn!("utterance {}: {msg}", train[i].id);
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                total += tape.value(&loss).item()?;
                let grads = tape.backward(&tape.scale(&loss, scale))?;
                for (_, p) in model.params_mut() {
                    grads.accumulate_into(p)?;
                }
            }
            if ok {
                update(model, &mut adam, lr, cfg)?;
            } else {
                non_finite += 1;
                model.zero_grads();
            }
        }
        let e = EpochLog {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            dev_loss: mean_loss(model, dev, &dev_z)?,
            dev_perplexity: None,
            skipped_steps: adam.skipped() - skipped_before + non_finite,
        };
        log::info!("rnnt {e}");
        log.epochs.push(e);
    }
    Ok(log)
}

/// Builds a transducer from `config` (seeded by `cfg.seed`) and trains it.
pub fn train_rnnt(
    config: TransducerConfig,
    vocab_fingerprint: &str,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
) -> Result<(TransducerModel, TrainLog)> {
    let mut model = TransducerModel::new(config, vocab_fingerprint, &mut init_rng(cfg.seed, 2))?;
    let log = fit_rnnt(&mut model, None, train, dev, cfg)?;
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfMode {
    Iterative,
    Scratch,
}

impl CfMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CfMode::Iterative => "iterative",
            CfMode::Scratch => "scratch",
        }
    }
}

impl fmt::Display for CfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(CfMode::Iterative),
            "scratch" => Ok(CfMode::Scratch),
            _ => Err(Error::Config(format!(
                "unknown cold-fusion mode {s:?} (expected iterative or scratch)"
            ))),
        }
    }
}

/// Where a cold-fusion run starts from.
pub enum ColdFusionRun<'a> {
    /// Copy a trained transducer and add a fresh head.
    Iterative(&'a TransducerModel),
    /// Initialise everything but the LM at random.
    Scratch(TransducerConfig),
}

impl ColdFusionRun<'_> {
    pub fn mode(&self) -> CfMode {
        match self {
            ColdFusionRun::Iterative(_) => CfMode::Iterative,
            ColdFusionRun::Scratch(_) => CfMode::Scratch,
        }
    }
}

/// Trains a cold-fusion transducer against the frozen `lm`.
pub fn finetune_coldfusion(
    run: ColdFusionRun<'_>,
    lm: &NeuralLM,
    bottleneck: usize,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
) -> Result<(TransducerModel, TrainLog)> {
    if bottleneck == 0 {
        return Err(Error::Config("cold-fusion bottleneck must be positive".into()));
    }
    let (mut model, reference) = match run {
        ColdFusionRun::Iterative(base) => {
            if base.has_cold_fusion() {
                return Err(Error::Config(
                    "iterative fine-tuning starts from a transducer without a cold-fusion head".into(),
                ));
            }
            check_fingerprint(base.vocab_fingerprint(), lm.vocab_fingerprint())?;
            let reference = dev_loss_rnnt(base, None, dev)?;
            (base.clone(), Some(reference))
        }
        ColdFusionRun::Scratch(config) => (
            TransducerModel::new(config, lm.vocab_fingerprint(), &mut init_rng(cfg.seed, 2))?,
            None,
        ),
    };
    if lm.vocab_size() != model.vocab_size() {
        return Err(Error::Config(format!(
            "language model has {} symbols, transducer has {}",
            lm.vocab_size(),
            model.vocab_size()
        )));
    }
    model.attach_cold_fusion(bottleneck, &mut init_rng(cfg.seed, 3));
    let mut log = fit_rnnt(&mut model, Some(lm), train, dev, cfg)?;
    log.reference_dev_loss = reference;
    Ok((model, log))
}
