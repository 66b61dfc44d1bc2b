//! End-to-end experiment: corpus, LM and transducer training, cold-fusion
//! fine-tuning, decoding in every fusion mode, LM swapping and the WER
//! breakdown.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lmfusion::corpus::{generate_corpus, write_dataset, write_text, CorpusSpec, GeneratedCorpus, Utterance, Vocabulary};
use lmfusion::decoder::{format_nbest, DecodeConfig, DecodeResult, Decoder, FusionMode};
use lmfusion::eval::{breakdown_report, categorize, wer, BreakdownReport, Reference, SystemOutput, WerResult};
use lmfusion::models::{LmConfig, NeuralLM, TransducerConfig, TransducerModel};
use lmfusion::training::{
    dev_loss_rnnt, finetune_coldfusion, lm_perplexity, train_lm, train_rnnt, ColdFusionRun, Schedule, TrainConfig,
    TrainLog,
};
use lmfusion::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproduceConfig {
    pub corpus: CorpusSpec,
    pub rnnt: TransducerConfig,
    pub lm: LmConfig,
    pub oracle_lm: LmConfig,
    pub bottleneck: usize,
    pub lm_train: TrainConfig,
    pub oracle_train: TrainConfig,
    pub rnnt_train: TrainConfig,
    pub cf_train: TrainConfig,
    pub beam_size: usize,
    pub max_symbols_per_frame: usize,
    /// Shallow-fusion weights tried on the dev set.
    pub lambdas: Vec<f64>,
    /// Dev utterances used for tuning `λ`.
    pub tune_utterances: usize,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let (v, d) = (corpus.vocab_size, corpus.feature_dim);
        let lm = LmConfig {
            hidden: 64,
            layers: 1,
            ..LmConfig::toy(v)
        };
        ReproduceConfig {
            rnnt: TransducerConfig {
                encoder_layers: 1,
                embed_dim: 8,
                predictor_hidden: 16,
                ..TransducerConfig::toy(v, d)
            },
            oracle_lm: lm.clone(),
            lm,
            corpus,
            bottleneck: 16,
            lm_train: TrainConfig::lm_default(),
            oracle_train: TrainConfig {
                epochs: 100,
                batch_size: 8,
                schedule: Schedule {
                    base_lr: 1e-2,
                    hold_epochs: 70,
                    decay: 0.8,
                },
                ..TrainConfig::lm_default()
            },
            rnnt_train: TrainConfig::rnnt_default(),
            cf_train: TrainConfig::cf_default(),
            beam_size: 15,
            max_symbols_per_frame: 3,
            lambdas: vec![0.1, 0.2, 0.3, 0.5, 0.7, 1.0],
            tune_utterances: 100,
        }
    }
}

impl ReproduceConfig {
    /// A few-second configuration with the same structure.
    pub fn quick() -> Self {
        let base = ReproduceConfig::default();
        let corpus = CorpusSpec {
            vocab_size: 16,
            paired_sentences: 120,
            dev_sentences: 20,
            test_sentences: 24,
            unpaired_sentences: 600,
            lm_rare_words: 2,
            lm_rare_paired_cap: 4,
            oov_rare_words: 1,
            oov_rare_paired_cap: 1,
            oov_rare_union_cap: 3,
            ..CorpusSpec::default()
        };
        let (v, d) = (corpus.vocab_size, corpus.feature_dim);
        let small = |t: TrainConfig, epochs| TrainConfig { epochs, ..t };
        ReproduceConfig {
            rnnt: TransducerConfig {
                encoder_hidden: 24,
                encoder_layers: 1,
                embed_dim: 12,
                predictor_hidden: 24,
                join_dim: 24,
                ..TransducerConfig::toy(v, d)
            },
            lm: LmConfig {
                embed_dim: 12,
                hidden: 24,
                layers: 1,
                ..LmConfig::toy(v)
            },
            oracle_lm: LmConfig {
                embed_dim: 12,
                hidden: 24,
                layers: 1,
                ..LmConfig::toy(v)
            },
            corpus,
            bottleneck: 6,
            lm_train: small(base.lm_train, 2),
            oracle_train: small(base.oracle_train, 5),
            rnnt_train: small(base.rnnt_train, 3),
            cf_train: small(base.cf_train, 2),
            beam_size: 4,
            lambdas: vec![0.2, 0.4],
            tune_utterances: 10,
            ..base
        }
    }

    /// Seeds the corpus and every training run from one number.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        for t in [
            &mut self.lm_train,
            &mut self.oracle_train,
            &mut self.rnnt_train,
            &mut self.cf_train,
        ] {
            t.seed = seed;
        }
        self
    }

    pub fn seed(&self) -> u64 {
        self.corpus.seed
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn decode_config(&self, fusion: FusionMode, lambda: f64) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_symbols_per_frame: self.max_symbols_per_frame,
            ..DecodeConfig::with_fusion(fusion, lambda)
        }
    }
}

/// Key numbers of one run. Written as `summary.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub lm_dev_perplexity: f64,
    pub oracle_lm_test_perplexity: f64,
    pub lambda_sf: f64,
    pub lambda_sf_cf: f64,
    /// Test WER per system.
    pub wer: BTreeMap<String, f64>,
    pub identical_swap_bit_exact: bool,
    pub lm_frozen_during_cf: bool,
    pub rnnt_dev_loss: f64,
    pub cf_iterative_dev_loss: f64,
    pub cf_scratch_dev_loss: f64,
    pub cf_iterative_dev_wer: f64,
    pub cf_scratch_dev_wer: f64,
    /// First fine-tuning epoch's dev loss over the bootstrapped model's.
    pub cf_warm_start_ratio: f64,
    pub cf_scratch_converged: bool,
    /// Relative WER reduction per breakdown category and fusion mode.
    pub breakdown: BTreeMap<String, BTreeMap<String, f64>>,
    pub category_counts: BTreeMap<String, usize>,
}

impl Summary {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn wer_of(&self, system: &str) -> f64 {
        self.wer.get(system).copied().unwrap_or(f64::NAN)
    }

    pub fn reduction(&self, category: &str, mode: &str) -> Option<f64> {
        self.breakdown.get(category).and_then(|m| m.get(mode)).copied()
    }
}

pub fn decode_all(decoder: &Decoder, utts: &[Utterance]) -> Result<Vec<DecodeResult>> {
    decode_parallel(decoder, utts, 1)
}

/// Decodes utterances on `threads` workers; output order follows `utts`.
pub fn decode_parallel(decoder: &Decoder, utts: &[Utterance], threads: usize) -> Result<Vec<DecodeResult>> {
    let threads = threads.clamp(1, utts.len().max(1));
    if threads == 1 {
        return utts.iter().map(|u| decoder.decode_utterance(&u.frames)).collect();
    }
    let chunk = utts.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = utts
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|u| decoder.decode_utterance(&u.frames)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(utts.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

/// Writes vocabulary, spec, paired splits and text corpora under `dir`.
pub fn write_corpus(corpus: &GeneratedCorpus, dir: &Path) -> Result<()> {
    let vocab = &corpus.vocab;
    vocab.save(&dir.join("vocab.txt"))?;
    write(&dir.join("spec.toml"), &corpus.spec.to_toml())?;
    write_dataset(&dir.join("train.tsv"), &corpus.train, vocab)?;
    write_dataset(&dir.join("dev.tsv"), &corpus.dev, vocab)?;
    write_dataset(&dir.join("test.tsv"), &corpus.test, vocab)?;
    write_text(&dir.join("unpaired.txt"), &corpus.unpaired, vocab)?;
    if let Some(oracle) = &corpus.oracle {
        write_text(&dir.join("oracle.txt"), oracle, vocab)?;
    }
    Ok(())
}

/// Test transcripts, the oracle LM's training text.
pub fn oracle_text(corpus: &GeneratedCorpus) -> Vec<Vec<usize>> {
    corpus
        .oracle
        .clone()
        .unwrap_or_else(|| corpus.test.iter().map(|u| u.reference.clone()).collect())
}

fn words(vocab: &Vocabulary, tokens: &[usize]) -> Result<Vec<String>> {
    Ok(vocab.detokenize(tokens)?.split_whitespace().map(String::from).collect())
}

pub fn system_output(vocab: &Vocabulary, utts: &[Utterance], results: &[DecodeResult]) -> Result<SystemOutput> {
    utts.iter()
        .zip(results)
        .map(|(u, r)| Ok((u.id.clone(), words(vocab, &r.best.tokens)?)))
        .collect()
}

/// Pooled WER of `system` over `utts`.
pub fn corpus_wer(vocab: &Vocabulary, utts: &[Utterance], system: &SystemOutput) -> Result<WerResult> {
    let mut total = WerResult::default();
    for u in utts {
        let hyp = system
            .get(&u.id)
            .ok_or_else(|| Error::IdMismatch(format!("no hypothesis for {}", u.id)))?;
        total = total.merge(&wer(&words(vocab, &u.reference)?, hyp)?);
    }
    Ok(total)
}

pub fn references(corpus: &GeneratedCorpus, utts: &[Utterance]) -> Result<Vec<Reference>> {
    let (paired, union) = (corpus.paired_counts(), corpus.union_counts());
    utts.iter()
        .map(|u| {
            let w = words(&corpus.vocab, &u.reference)?;
            Ok(Reference {
                id: u.id.clone(),
                category: categorize(&w, &paired, &union, corpus.spec.rare_threshold),
                words: w,
            })
        })
        .collect()
}

pub fn nbest_text(vocab: &Vocabulary, utts: &[Utterance], results: &[DecodeResult]) -> Result<String> {
    let mut out = String::new();
    for (u, r) in utts.iter().zip(results) {
        out.push_str(&format_nbest(&u.id, &r.nbest, vocab)?);
    }
    Ok(out)
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn mkdir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

struct Timer(Instant);

impl Timer {
    fn lap(&mut self, what: &str) {
        log::info!("{what} done in {:.1}s", self.0.elapsed().as_secs_f64());
        self.0 = Instant::now();
    }
}

/// Decodes `utts[..n]` for each `λ` and returns the one with the lowest
/// pooled WER, the smallest on ties.
fn tune_lambda(
    config: &ReproduceConfig,
    model: &TransducerModel,
    lm: &NeuralLM,
    fusion: FusionMode,
    vocab: &Vocabulary,
    utts: &[Utterance],
) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    let mut grid = config.lambdas.clone();
    grid.sort_by(f64::total_cmp);
    for &lambda in &grid {
        let d = Decoder::new(model.clone(), Some(lm.clone()), config.decode_config(fusion, lambda))?;
        let sys = system_output(vocab, utts, &decode_all(&d, utts)?)?;
        let w = corpus_wer(vocab, utts, &sys)?.wer;
        log::info!("tune {fusion} lambda={lambda} dev_wer={w}");
        if best.map_or(true, |(_, b)| w < b) {
            best = Some((lambda, w));
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::Config("empty lambda grid".into()))
}

fn save_log(dir: &Path, name: &str, log: &TrainLog) -> Result<()> {
    write(&dir.join(format!("{name}.log")), &log.to_text())
}

/// Runs the whole experiment, writing artifacts under `out`.
pub fn reproduce(config: &ReproduceConfig, out: &Path) -> Result<Summary> {
    let mut timer = Timer(Instant::now());
    let corpus_dir = mkdir(&out.join("corpus"))?;
    let model_dir = mkdir(&out.join("models"))?;
    let log_dir = mkdir(&out.join("logs"))?;
    let decode_dir = mkdir(&out.join("decodes"))?;
    let report_dir = mkdir(&out.join("report"))?;
    write(&out.join("config.toml"), &config.to_toml())?;

    let corpus = generate_corpus(&config.corpus)?;
    let vocab = &corpus.vocab;
    let fp = vocab.fingerprint().to_string();
    write_corpus(&corpus, &corpus_dir)?;
    let oracle_text = oracle_text(&corpus);
    timer.lap("corpus");

    let dev_text: Vec<Vec<usize>> = corpus.dev.iter().map(|u| u.reference.clone()).collect();
    let (lm, lm_log) = train_lm(config.lm.clone(), &fp, &corpus.lm_text(), &dev_text, &config.lm_train)?;
    lm.save(&model_dir.join("lm.ckpt"))?;
    save_log(&log_dir, "lm", &lm_log)?;
    timer.lap("language model");

    let (oracle, oracle_log) =
        train_lm(config.oracle_lm.clone(), &fp, &oracle_text, &oracle_text, &config.oracle_train)?;
    oracle.save(&model_dir.join("lm_oracle.ckpt"))?;
    save_log(&log_dir, "lm_oracle", &oracle_log)?;
    timer.lap("oracle language model");

    let (rnnt, rnnt_log) = train_rnnt(config.rnnt.clone(), &fp, &corpus.train, &corpus.dev, &config.rnnt_train)?;
    rnnt.save(&model_dir.join("rnnt.ckpt"))?;
    save_log(&log_dir, "rnnt", &rnnt_log)?;
    timer.lap("transducer");

    let lm_bytes = lm.to_bytes()?;
    let (cf, cf_log) = finetune_coldfusion(
        ColdFusionRun::Iterative(&rnnt),
        &lm,
        config.bottleneck,
        &corpus.train,
        &corpus.dev,
        &config.cf_train,
    )?;
    cf.save(&model_dir.join("cf.ckpt"))?;
    save_log(&log_dir, "cf_iterative", &cf_log)?;
    timer.lap("cold fusion (iterative)");
    let (scratch, scratch_log) = finetune_coldfusion(
        ColdFusionRun::Scratch(config.rnnt.clone()),
        &lm,
        config.bottleneck,
        &corpus.train,
        &corpus.dev,
        &config.cf_train,
    )?;
    scratch.save(&model_dir.join("cf_scratch.ckpt"))?;
    save_log(&log_dir, "cf_scratch", &scratch_log)?;
    let lm_frozen = lm.to_bytes()? == lm_bytes;
    timer.lap("cold fusion (scratch)");

    let tune = &corpus.dev[..config.tune_utterances.min(corpus.dev.len())];
    let lambda_sf = tune_lambda(config, &rnnt, &lm, FusionMode::Shallow, vocab, tune)?;
    let lambda_sf_cf = tune_lambda(config, &cf, &lm, FusionMode::ShallowCold, vocab, tune)?;
    timer.lap("lambda tuning");

    let test = &corpus.test;
    let mut systems: BTreeMap<String, SystemOutput> = BTreeMap::new();
    let mut run = |name: &str, decoder: &Decoder| -> Result<Vec<DecodeResult>> {
        let results = decode_all(decoder, test)?;
        write(&decode_dir.join(format!("{name}.nbest")), &nbest_text(vocab, test, &results)?)?;
        systems.insert(name.to_string(), system_output(vocab, test, &results)?);
        Ok(results)
    };
    run("none", &Decoder::new(rnnt.clone(), None::<NeuralLM>, config.decode_config(FusionMode::None, 0.0))?)?;
    run(
        "sf",
        &Decoder::new(rnnt.clone(), Some(lm.clone()), config.decode_config(FusionMode::Shallow, lambda_sf))?,
    )?;
    run(
        "sf+cf",
        &Decoder::new(cf.clone(), Some(lm.clone()), config.decode_config(FusionMode::ShallowCold, lambda_sf_cf))?,
    )?;
    let mut cf_decoder = Decoder::new(cf.clone(), Some(lm.clone()), config.decode_config(FusionMode::Cold, 0.0))?;
    let cf_results = run("cf", &cf_decoder)?;
    cf_decoder.swap_lm(NeuralLM::load_strict(&model_dir.join("lm.ckpt"), &fp)?)?;
    let identical = run("cf+swap_same", &cf_decoder)? == cf_results;
    cf_decoder.swap_lm(NeuralLM::load_strict(&model_dir.join("lm_oracle.ckpt"), &fp)?)?;
    run("cf+swap_oracle", &cf_decoder)?;
    timer.lap("test decoding");

    let mut wers = BTreeMap::new();
    for (name, sys) in &systems {
        wers.insert(name.clone(), corpus_wer(vocab, test, sys)?.wer);
    }

    let dev = &corpus.dev;
    let dev_wer = |model: &TransducerModel| -> Result<f64> {
        let d = Decoder::new(model.clone(), Some(lm.clone()), config.decode_config(FusionMode::Cold, 0.0))?;
        corpus_wer(vocab, dev, &system_output(vocab, dev, &decode_all(&d, dev)?)?).map(|w| w.wer)
    };
    let (cf_dev_wer, scratch_dev_wer) = (dev_wer(&cf)?, dev_wer(&scratch)?);
    timer.lap("dev decoding");

    let refs = references(&corpus, test)?;
    let fused: Vec<(String, SystemOutput)> = ["sf", "cf", "sf+cf"]
        .iter()
        .map(|m| (m.to_string(), systems[*m].clone()))
        .collect();
    let report = breakdown_report(&refs, &systems["none"], &fused)?;
    write(&report_dir.join("breakdown.txt"), &report.to_table())?;
    write(&report_dir.join("breakdown.tsv"), &report.to_tsv())?;

    let summary = Summary {
        seed: config.seed(),
        lm_dev_perplexity: lm_log.epochs.last().and_then(|e| e.dev_perplexity).unwrap_or(f64::NAN),
        oracle_lm_test_perplexity: lm_perplexity(&oracle, &oracle_text)?,
        lambda_sf,
        lambda_sf_cf,
        wer: wers,
        identical_swap_bit_exact: identical,
        lm_frozen_during_cf: lm_frozen,
        rnnt_dev_loss: dev_loss_rnnt(&rnnt, None, dev)?,
        cf_iterative_dev_loss: cf_log.final_dev_loss(),
        cf_scratch_dev_loss: scratch_log.final_dev_loss(),
        cf_iterative_dev_wer: cf_dev_wer,
        cf_scratch_dev_wer: scratch_dev_wer,
        cf_warm_start_ratio: cf_log
            .epochs
            .first()
            .zip(cf_log.reference_dev_loss)
            .map_or(f64::NAN, |(e, r)| e.dev_loss / r),
        cf_scratch_converged: scratch_log.converged(),
        breakdown: breakdown_map(&report),
        category_counts: report.rows.iter().map(|r| (r.name.clone(), r.utterances)).collect(),
    };
    write(&report_dir.join("summary.toml"), &summary.to_toml())?;
    Ok(summary)
}

fn breakdown_map(report: &BreakdownReport) -> BTreeMap<String, BTreeMap<String, f64>> {
    report
        .rows
        .iter()
        .map(|r| {
            let modes = report
                .modes
                .iter()
                .zip(&r.modes)
                .filter_map(|(name, m)| m.relative_reduction.map(|v| (name.clone(), v)))
                .collect();
            (r.name.clone(), modes)
        })
        .collect()
}
