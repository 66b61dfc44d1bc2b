//! Command-line front end: corpus generation, training recipes, decoding in
//! every fusion mode, scoring and the end-to-end `reproduce` run.

pub mod pipeline;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lmfusion::corpus::{generate_corpus, read_dataset, read_text, word_counts, CorpusSpec, Utterance, Vocabulary};
use lmfusion::decoder::{DecodeConfig, DecodeResult, Decoder, FusionMode};
use lmfusion::eval::{breakdown_report, categorize, Reference, SystemOutput};
use lmfusion::models::{LmConfig, NeuralLM, TransducerConfig, TransducerModel};
use lmfusion::numerics::Tensor;
use lmfusion::training::{
    finetune_coldfusion, train_lm, train_rnnt, AdamConfig, CfMode, ColdFusionRun, FreezeSet, Schedule, TrainConfig,
};
use lmfusion::{Error, Result};

use pipeline::{corpus_wer, decode_parallel, mkdir, nbest_text, system_output, write, ReproduceConfig};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "lmfusion", version, about = "Transducer ASR with shallow and cold fusion of a neural LM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic paired/unpaired corpus
    GenCorpus(GenCorpusArgs),
    /// Train the external language model
    TrainLm(TrainLmArgs),
    /// Train a transducer without fusion
    TrainRnnt(TrainRnntArgs),
    /// Fine-tune a transducer with a cold-fusion head on a frozen LM
    FinetuneCf(FinetuneCfArgs),
    /// Beam-search decode a corpus split into an n-best file
    Decode(DecodeArgs),
    /// Word error rate of an n-best file's top entries
    Evaluate(EvaluateArgs),
    /// Per-category WER breakdown of fused systems against a baseline
    Report(ReportArgs),
    /// Run the whole experiment end to end
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Corpus parameters as TOML; omitted fields take their defaults
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, env = "LMFUSION_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
}

macro_rules! train_args {
    ($name:ident, $epochs:expr, $batch:expr, $lr:expr, $hold:expr, $decay:expr) => {
        #[derive(Args, Debug, Clone)]
        pub struct $name {
            /// Training epochs
            #[arg(long, default_value_t = $epochs)]
            epochs: usize,
            /// Sentences or utterances per update
            #[arg(long, default_value_t = $batch)]
            batch_size: usize,
            /// Base learning rate
            #[arg(long, default_value_t = $lr)]
            lr: f64,
            /// Epochs at the base rate before decay starts
            #[arg(long, default_value_t = $hold)]
            hold_epochs: usize,
            /// Per-epoch learning-rate factor after the hold
            #[arg(long, default_value_t = $decay)]
            decay: f64,
            /// Global gradient-norm clip, 0 disables
            #[arg(long, default_value_t = 5.0)]
            clip: f64,
            /// Parameters kept fixed, comma separated; a trailing '*' matches a prefix
            #[arg(long, value_delimiter = ',')]
            freeze: Vec<String>,
        }

        impl $name {
            fn config(&self, seed: u64) -> TrainConfig {
                TrainConfig {
                    epochs: self.epochs,
                    batch_size: self.batch_size,
                    schedule: Schedule {
                        base_lr: self.lr,
                        hold_epochs: self.hold_epochs,
                        decay: self.decay,
                    },
                    clip_norm: (self.clip > 0.0).then_some(self.clip),
                    adam: AdamConfig::default(),
                    freeze: FreezeSet(self.freeze.clone()),
                    seed,
                }
            }
        }
    };
}

train_args!(LmTrainArgs, 2, 32, 4e-3, 1, 0.5);
train_args!(RnntTrainArgs, 12, 8, 2e-3, 8, 0.8);
train_args!(CfTrainArgs, 6, 8, 2.5e-3, 3, 0.6);

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    /// Corpus directory written by gen-corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Training text, one sentence per line [default: paired transcripts plus unpaired text]
    #[arg(long)]
    text: Option<PathBuf>,
    /// Dev text [default: dev transcripts]
    #[arg(long)]
    dev_text: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[command(flatten)]
    train: LmTrainArgs,
    /// Per-epoch log file
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, env = "LMFUSION_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct ArchArgs {
    /// Frames concatenated per encoder input
    #[arg(long, default_value_t = 3)]
    stack: usize,
    /// Frame advance between encoder inputs
    #[arg(long, default_value_t = 2)]
    stride: usize,
    #[arg(long, default_value_t = 64)]
    encoder_hidden: usize,
    #[arg(long, default_value_t = 2)]
    encoder_layers: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    predictor_hidden: usize,
    #[arg(long, default_value_t = 1)]
    predictor_layers: usize,
    #[arg(long, default_value_t = 64)]
    join_dim: usize,
}

impl ArchArgs {
    fn config(&self, vocab_size: usize, feature_dim: usize) -> TransducerConfig {
        TransducerConfig {
            vocab_size,
            feature_dim,
            stack: self.stack,
            stride: self.stride,
            encoder_hidden: self.encoder_hidden,
            encoder_layers: self.encoder_layers,
            embed_dim: self.embed_dim,
            predictor_hidden: self.predictor_hidden,
            predictor_layers: self.predictor_layers,
            join_dim: self.join_dim,
            bottleneck: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainRnntArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: RnntTrainArgs,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, env = "LMFUSION_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct FinetuneCfArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Frozen language model checkpoint
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// iterative starts from --base, scratch from random weights
    #[arg(long, default_value_t = CfMode::Iterative)]
    mode: CfMode,
    /// Transducer to fine-tune (iterative mode)
    #[arg(long)]
    base: Option<PathBuf>,
    /// Gate bottleneck width
    #[arg(long, default_value_t = 16)]
    bottleneck: usize,
    /// Architecture of the from-scratch model
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: CfTrainArgs,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, env = "LMFUSION_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Corpus directory written by gen-corpus
    #[arg(long)]
    corpus: PathBuf,
    /// train, dev or test
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    data: SplitArgs,
    /// Transducer checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Language model checkpoint, required unless --fusion none
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = FusionMode::None)]
    fusion: FusionMode,
    /// Shallow-fusion weight
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long, default_value_t = 15)]
    beam: usize,
    /// Hypotheses written per utterance
    #[arg(long, default_value_t = 5)]
    nbest: usize,
    /// Symbol expansions per frame
    #[arg(long, default_value_t = 3)]
    max_symbols: usize,
    /// Replace the LM after loading, without touching the transducer
    #[arg(long)]
    swap_lm: Option<PathBuf>,
    /// Feed frames in chunks of this size through a streaming session
    #[arg(long)]
    chunk_frames: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output n-best file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    data: SplitArgs,
    /// n-best file from decode
    #[arg(long)]
    hyp: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    data: SplitArgs,
    /// Baseline n-best file
    #[arg(long)]
    baseline: PathBuf,
    /// Fused system as NAME=PATH, repeatable
    #[arg(long = "system", required = true)]
    systems: Vec<String>,
    /// Output directory for breakdown.txt and breakdown.tsv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "LMFUSION_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Small corpus and models, for smoke runs
    #[arg(long)]
    quick: bool,
    /// Full experiment configuration as TOML; --seed still applies
    #[arg(long, conflicts_with = "quick")]
    config: Option<PathBuf>,
}

/// Exit status for an error kind. Usage errors exit with 2.
pub fn exit_code(kind: &str) -> i32 {
    const CODES: [&str; 20] = [
        "missing_file",
        "io",
        "fingerprint_mismatch",
        "config",
        "parse",
        "format",
        "version",
        "wrong_kind",
        "missing_parameter",
        "vocab",
        "unknown_word",
        "corpus_spec",
        "id_mismatch",
        "empty_input",
        "non_finite",
        "shape",
        "contract",
        "session",
        "oracle_size",
        "usage",
    ];
    match kind {
        "usage" => 2,
        _ => CODES.iter().position(|k| *k == kind).map_or(1, |i| i as i32 + 3),
    }
}

/// Error kind, with missing files told apart from other I/O failures.
pub fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing_file",
        e => e.kind(),
    }
}

fn report_error(kind: &str, message: &str) -> i32 {
    let code = exit_code(kind);
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} code={code}: {line}");
    code
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return report_error("usage", first.trim_start_matches("error: "));
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => report_error(error_kind(&e), &e.to_string()),
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::TrainLm(a) => cmd_train_lm(a),
        Command::TrainRnnt(a) => cmd_train_rnnt(a),
        Command::FinetuneCf(a) => cmd_finetune_cf(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Reproduce(a) => cmd_reproduce(a),
    }
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => CorpusSpec::from_toml(&read_string(p)?)?,
        None => CorpusSpec::default(),
    };
    spec.seed = a.seed;
    let corpus = generate_corpus(&spec)?;
    pipeline::write_corpus(&corpus, &mkdir(&a.out)?)?;
    println!(
        "wrote {} train, {} dev, {} test utterances and {} unpaired sentences to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.unpaired.len(),
        a.out.display()
    );
    Ok(())
}

struct CorpusDir {
    dir: PathBuf,
    vocab: Vocabulary,
}

impl CorpusDir {
    fn open(dir: &Path) -> Result<Self> {
        Ok(CorpusDir {
            dir: dir.to_path_buf(),
            vocab: Vocabulary::load(&dir.join("vocab.txt"))?,
        })
    }

    fn fingerprint(&self) -> &str {
        self.vocab.fingerprint()
    }

    fn split(&self, name: &str) -> Result<Vec<Utterance>> {
        if !["train", "dev", "test"].contains(&name) {
            return Err(Error::Config(format!("unknown split {name:?} (expected train, dev or test)")));
        }
        read_dataset(&self.dir.join(format!("{name}.tsv")), &self.vocab)
    }

    fn text(&self, name: &str) -> Result<Vec<Vec<usize>>> {
        read_text(&self.dir.join(name), &self.vocab)
    }

    fn spec(&self) -> Result<CorpusSpec> {
        CorpusSpec::from_toml(&read_string(&self.dir.join("spec.toml"))?)
    }
}

fn transcripts(utts: &[Utterance]) -> Vec<Vec<usize>> {
    utts.iter().map(|u| u.reference.clone()).collect()
}

fn write_log(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => Ok(()),
    }
}

fn cmd_train_lm(a: TrainLmArgs) -> Result<()> {
    let c = CorpusDir::open(&a.corpus)?;
    let text = match &a.text {
        Some(p) => read_text(p, &c.vocab)?,
        None => {
            let mut t = transcripts(&c.split("train")?);
            t.extend(c.text("unpaired.txt")?);
            t
        }
    };
    let dev = match &a.dev_text {
        Some(p) => read_text(p, &c.vocab)?,
        None => transcripts(&c.split("dev")?),
    };
    let config = LmConfig {
        vocab_size: c.vocab.len(),
        embed_dim: a.embed_dim,
        hidden: a.hidden,
        layers: a.layers,
    };
    let (lm, log) = train_lm(config, c.fingerprint(), &text, &dev, &a.train.config(a.seed))?;
    lm.save(&a.out)?;
    write_log(&a.log, &log.to_text())?;
    if let Some(e) = log.epochs.last() {
        println!("{e}");
    }
    Ok(())
}

fn feature_dim(utts: &[Utterance]) -> Result<usize> {
    utts.first()
        .map(|u| u.frames.cols())
        .ok_or_else(|| Error::EmptyInput("training split has no utterances".into()))
}

fn cmd_train_rnnt(a: TrainRnntArgs) -> Result<()> {
    let c = CorpusDir::open(&a.corpus)?;
    let (train, dev) = (c.split("train")?, c.split("dev")?);
    let config = a.arch.config(c.vocab.len(), feature_dim(&train)?);
    let (model, log) = train_rnnt(config, c.fingerprint(), &train, &dev, &a.train.config(a.seed))?;
    model.save(&a.out)?;
    write_log(&a.log, &log.to_text())?;
    if let Some(e) = log.epochs.last() {
        println!("{e}");
    }
    Ok(())
}

fn cmd_finetune_cf(a: FinetuneCfArgs) -> Result<()> {
    if a.mode == CfMode::Iterative && a.base.is_none() {
        return Err(Error::Config("iterative mode needs --base".into()));
    }
    let c = CorpusDir::open(&a.corpus)?;
    let lm = NeuralLM::load_strict(&a.lm, c.fingerprint())?;
    let (train, dev) = (c.split("train")?, c.split("dev")?);
    let base = match (a.mode, &a.base) {
        (CfMode::Iterative, Some(p)) => Some(TransducerModel::load_strict(p, c.fingerprint())?),
        _ => None,
    };
    let run = match &base {
        Some(m) => ColdFusionRun::Iterative(m),
        None => ColdFusionRun::Scratch(a.arch.config(c.vocab.len(), feature_dim(&train)?)),
    };
    let (model, log) = finetune_coldfusion(run, &lm, a.bottleneck, &train, &dev, &a.train.config(a.seed))?;
    model.save(&a.out)?;
    write_log(&a.log, &log.to_text())?;
    if let Some(e) = log.epochs.last() {
        println!("{e}");
    }
    Ok(())
}

/// Streams each utterance through a session in `chunk`-frame pieces.
fn decode_chunked(decoder: &Decoder, utts: &[Utterance], chunk: usize) -> Result<Vec<DecodeResult>> {
    if chunk == 0 {
        return Err(Error::Config("--chunk-frames must be at least 1".into()));
    }
    utts.iter()
        .map(|u| {
            let mut session = decoder.session()?;
            let d = u.frames.cols();
            for rows in u.frames.data().chunks(chunk * d.max(1)) {
                session.feed(&Tensor::matrix(rows.len() / d, d, rows.to_vec())?)?;
            }
            session.flush()
        })
        .collect()
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    if a.fusion.uses_lm() && a.lm.is_none() {
        return Err(Error::Config(format!("--fusion {} needs --lm", a.fusion)));
    }
    if !a.fusion.uses_lm() && (a.lm.is_some() || a.swap_lm.is_some()) {
        return Err(Error::Config("--lm and --swap-lm need a fusion mode other than none".into()));
    }
    let config = DecodeConfig {
        beam_size: a.beam,
        lambda: a.lambda,
        max_symbols_per_frame: a.max_symbols,
        fusion: a.fusion,
        nbest: a.nbest,
    };
    config.validate()?;
    let c = CorpusDir::open(&a.data.corpus)?;
    let utts = c.split(&a.data.split)?;
    let model = TransducerModel::load_strict(&a.model, c.fingerprint())?;
    let lm = a.lm.as_ref().map(|p| NeuralLM::load_strict(p, c.fingerprint())).transpose()?;
    let mut decoder = Decoder::new(model, lm, config)?;
    if let Some(p) = &a.swap_lm {
        decoder.swap_lm(NeuralLM::load_strict(p, c.fingerprint())?)?;
    }
    let results = match a.chunk_frames {
        Some(n) => decode_chunked(&decoder, &utts, n)?,
        None => decode_parallel(&decoder, &utts, a.threads)?,
    };
    write(&a.out, &nbest_text(&c.vocab, &utts, &results)?)?;
    let sys = system_output(&c.vocab, &utts, &results)?;
    let w = corpus_wer(&c.vocab, &utts, &sys)?;
    println!("decoded {} utterances, wer={}", utts.len(), w.wer);
    Ok(())
}

/// Top-ranked hypothesis per utterance from an n-best file.
pub fn read_nbest(path: &Path) -> Result<SystemOutput> {
    let text = read_string(path)?;
    let mut out = SystemOutput::new();
    for (i, line) in text.lines().enumerate() {
        let parse = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let rank: usize = fields[1].parse().map_err(|_| parse(format!("bad rank {:?}", fields[1])))?;
        if rank == 1 {
            let words = fields[3].split_whitespace().map(String::from).collect();
            if out.insert(fields[0].to_string(), words).is_some() {
                return Err(parse(format!("utterance {} has two rank-1 entries", fields[0])));
            }
        }
    }
    Ok(out)
}

/// Utterances without a rank-1 line decoded to nothing.
fn complete(utts: &[Utterance], mut sys: SystemOutput) -> Result<SystemOutput> {
    for u in utts {
        sys.entry(u.id.clone()).or_default();
    }
    if sys.len() != utts.len() {
        return Err(Error::IdMismatch("hypotheses name utterances outside the split".into()));
    }
    Ok(sys)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let c = CorpusDir::open(&a.data.corpus)?;
    let utts = c.split(&a.data.split)?;
    let sys = complete(&utts, read_nbest(&a.hyp)?)?;
    let w = corpus_wer(&c.vocab, &utts, &sys)?;
    println!(
        "wer={} substitutions={} insertions={} deletions={} ref_words={}",
        w.wer, w.substitutions, w.insertions, w.deletions, w.ref_words
    );
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let c = CorpusDir::open(&a.data.corpus)?;
    let utts = c.split(&a.data.split)?;
    let spec = c.spec()?;
    let train = transcripts(&c.split("train")?);
    let unpaired = c.text("unpaired.txt")?;
    let paired = word_counts(&c.vocab, train.iter().map(Vec::as_slice));
    let union = word_counts(&c.vocab, train.iter().chain(&unpaired).map(Vec::as_slice));
    let refs = utts
        .iter()
        .map(|u| {
            let words: Vec<String> = c.vocab.detokenize(&u.reference)?.split_whitespace().map(String::from).collect();
            Ok(Reference {
                id: u.id.clone(),
                category: categorize(&words, &paired, &union, spec.rare_threshold),
                words,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = complete(&utts, read_nbest(&a.baseline)?)?;
    let mut fused = Vec::new();
    let mut seen = BTreeMap::new();
    for s in &a.systems {
        let (name, path) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--system expects NAME=PATH, got {s:?}")))?;
        if seen.insert(name.to_string(), ()).is_some() {
            return Err(Error::Config(format!("system {name} given twice")));
        }
        fused.push((name.to_string(), complete(&utts, read_nbest(Path::new(path))?)?));
    }
    let report = breakdown_report(&refs, &baseline, &fused)?;
    let out = mkdir(&a.out)?;
    write(&out.join("breakdown.txt"), &report.to_table())?;
    write(&out.join("breakdown.tsv"), &report.to_tsv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_reproduce(a: ReproduceArgs) -> Result<()> {
    let base = match (&a.config, a.quick) {
        (Some(p), _) => ReproduceConfig::from_toml(&read_string(p)?)?,
        (None, true) => ReproduceConfig::quick(),
        (None, false) => ReproduceConfig::default(),
    };
    let summary = pipeline::reproduce(&base.with_seed(a.seed), &mkdir(&a.out)?)?;
    print!("{}", summary.to_toml());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(["lmfusion"].iter().chain(args)).unwrap().command
    }

    #[test]
    fn training_flags_default_to_the_recipes() {
        let seeded = |c: TrainConfig| TrainConfig { seed: 3, ..c };
        match parse(&["train-lm", "--corpus", "c", "--out", "o"]) {
            Command::TrainLm(a) => assert_eq!(a.train.config(3), seeded(TrainConfig::lm_default())),
            c => panic!("{c:?}"),
        }
        match parse(&["train-rnnt", "--corpus", "c", "--out", "o"]) {
            Command::TrainRnnt(a) => assert_eq!(a.train.config(3), seeded(TrainConfig::rnnt_default())),
            c => panic!("{c:?}"),
        }
        match parse(&["finetune-cf", "--corpus", "c", "--lm", "l", "--base", "b", "--out", "o"]) {
            Command::FinetuneCf(a) => assert_eq!(a.train.config(3), seeded(TrainConfig::cf_default())),
            c => panic!("{c:?}"),
        }
    }

    #[test]
    fn exit_codes_are_distinct() {
        let kinds = ["missing_file", "io", "fingerprint_mismatch", "config", "parse", "session", "usage"];
        let codes: std::collections::BTreeSet<i32> = kinds.iter().map(|k| exit_code(k)).collect();
        assert_eq!(codes.len(), kinds.len());
        assert_eq!(exit_code("usage"), 2);
        assert_eq!(exit_code("no_such_kind"), 1);
    }
}
