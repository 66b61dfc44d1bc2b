use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmfusion_cli::exit_code;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lmfusion"));
    c.env_remove("LMFUSION_SEED").env("RUST_LOG", "off");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "vocab_size = 10\nfeature_dim = 4\npaired_sentences = 30\ndev_sentences = 6\n\
test_sentences = 8\nunpaired_sentences = 120\nlm_rare_words = 1\nlm_rare_paired_cap = 2\n\
oov_rare_words = 0\nrare_threshold = 3\n";

/// Corpus plus LM, baseline and cold-fusion checkpoints at a few seconds' scale.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("spec.toml"), SPEC).unwrap();
        let f = Fixture { _dir: dir, root };
        ok(&["gen-corpus", "--out", s(&f.p("corpus")), "--spec", s(&f.p("spec.toml")), "--seed", "3"]);
        ok(&[
            "train-lm", "--corpus", s(&f.p("corpus")), "--out", s(&f.p("lm.ckpt")), "--embed-dim", "4",
            "--hidden", "8", "--layers", "1", "--epochs", "2", "--log", s(&f.p("lm.log")),
        ]);
        let small = [
            "--encoder-hidden", "8", "--encoder-layers", "1", "--embed-dim", "4", "--predictor-hidden", "8",
            "--join-dim", "8", "--epochs", "2",
        ];
        let (corpus, rnnt) = (f.p("corpus"), f.p("rnnt.ckpt"));
        let mut args = vec!["train-rnnt", "--corpus", s(&corpus), "--out", s(&rnnt)];
        args.extend(small);
        ok(&args);
        ok(&[
            "finetune-cf", "--corpus", s(&f.p("corpus")), "--lm", s(&f.p("lm.ckpt")), "--base",
            s(&f.p("rnnt.ckpt")), "--out", s(&f.p("cf.ckpt")), "--bottleneck", "3", "--epochs", "1",
        ]);
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn decode(&self, out: &str, extra: &[&str]) -> String {
        let (corpus, out) = (self.p("corpus"), self.p(out));
        let mut args = vec!["decode", "--corpus", s(&corpus), "--out", s(&out)];
        args.extend(extra);
        ok(&args);
        fs::read_to_string(out).unwrap()
    }
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    lines[0].to_string()
}

#[test]
fn end_to_end_small_run() {
    let f = Fixture::new();
    let rnnt = s(&f.p("rnnt.ckpt")).to_string();
    let cf = s(&f.p("cf.ckpt")).to_string();
    let lm = s(&f.p("lm.ckpt")).to_string();

    let none = f.decode("none.nbest", &["--model", &rnnt]);
    let sf0 = f.decode("sf0.nbest", &["--model", &rnnt, "--lm", &lm, "--fusion", "sf", "--lambda", "0"]);
    assert_eq!(none, sf0);
    assert_eq!(none.lines().filter(|l| l.split('\t').nth(1) == Some("1")).count(), 8);

    let full = f.decode("cf.nbest", &["--model", &cf, "--lm", &lm, "--fusion", "cf"]);
    let chunked = f.decode("cf3.nbest", &["--model", &cf, "--lm", &lm, "--fusion", "cf", "--chunk-frames", "3"]);
    let swapped = f.decode("cfs.nbest", &["--model", &cf, "--lm", &lm, "--fusion", "cf", "--swap-lm", &lm]);
    let threaded = f.decode("cft.nbest", &["--model", &cf, "--lm", &lm, "--fusion", "cf", "--threads", "3"]);
    assert_eq!(full, chunked);
    assert_eq!(full, swapped);
    assert_eq!(full, threaded);

    let eval = ok(&["evaluate", "--corpus", s(&f.p("corpus")), "--hyp", s(&f.p("none.nbest"))]);
    assert!(eval.starts_with("wer="), "{eval}");

    let sys = format!("cf={}", s(&f.p("cf.nbest")));
    ok(&[
        "report", "--corpus", s(&f.p("corpus")), "--baseline", s(&f.p("none.nbest")), "--system", &sys, "--out",
        s(&f.p("report")),
    ]);
    let tsv = fs::read_to_string(f.p("report/breakdown.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 8);
    assert!(f.p("report/breakdown.txt").exists());
    assert!(fs::read_to_string(f.p("lm.log")).unwrap().starts_with("initial dev_loss="));
}

#[test]
fn reruns_reproduce_artifacts() {
    let a = Fixture::new();
    let b = Fixture::new();
    for name in ["corpus/train.tsv", "corpus/vocab.txt", "lm.ckpt", "rnnt.ckpt", "cf.ckpt", "lm.log"] {
        assert_eq!(fs::read(a.p(name)).unwrap(), fs::read(b.p(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-corpus", "--spec", s(&spec), "--out", s(&a), "--seed", "5"]);
    let out = bin()
        .args(["gen-corpus", "--spec", s(&spec), "--out", s(&b)])
        .env("LMFUSION_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(&["gen-corpus", "--spec", s(&spec), "--out", s(&c)]);
    let read = |d: &Path| fs::read(d.join("test.tsv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn errors_are_single_lines_with_distinct_codes() {
    let unknown = run(&["decode", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(error_line(&unknown).starts_with("error kind=usage code=2"));

    let dir = tempfile::tempdir().unwrap();
    let missing = run(&[
        "decode", "--corpus", s(&dir.path().join("nope")), "--model", "x.ckpt", "--out", "y",
    ]);
    assert_eq!(missing.status.code(), Some(exit_code("missing_file")));
    assert!(error_line(&missing).starts_with("error kind=missing_file"));

    let no_lm = run(&["decode", "--corpus", "c", "--model", "m", "--fusion", "sf", "--out", "o"]);
    assert_eq!(no_lm.status.code(), Some(exit_code("config")));
    let no_base = run(&["finetune-cf", "--corpus", "c", "--lm", "l", "--out", "o"]);
    assert_eq!(no_base.status.code(), Some(exit_code("config")));
    assert!(error_line(&no_base).contains("--base"));

    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let other = dir.path().join("other.toml");
    fs::write(&other, SPEC.replace("vocab_size = 10", "vocab_size = 11")).unwrap();
    let (c1, c2) = (dir.path().join("c1"), dir.path().join("c2"));
    ok(&["gen-corpus", "--spec", s(&spec), "--out", s(&c1)]);
    ok(&["gen-corpus", "--spec", s(&other), "--out", s(&c2)]);
    let lm = dir.path().join("lm.ckpt");
    ok(&[
        "train-lm", "--corpus", s(&c1), "--out", s(&lm), "--embed-dim", "2", "--hidden", "2", "--layers", "1",
        "--epochs", "1",
    ]);
    let mismatch = run(&[
        "finetune-cf", "--corpus", s(&c2), "--lm", s(&lm), "--mode", "scratch", "--out",
        s(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(mismatch.status.code(), Some(exit_code("fingerprint_mismatch")));
    assert!(error_line(&mismatch).starts_with("error kind=fingerprint_mismatch"));

    let codes = [
        exit_code("usage"),
        exit_code("missing_file"),
        exit_code("fingerprint_mismatch"),
        exit_code("config"),
    ];
    let mut sorted = codes.to_vec();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), codes.len());
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["decode", "--help"]);
    for flag in ["--fusion", "--lambda", "--beam", "--swap-lm", "--chunk-frames", "--threads"] {
        assert!(help.contains(flag), "{flag} missing from\n{help}");
    }
    assert!(help.contains("[default: 15]"));
    assert!(help.contains("[default: 0.3]"));
    assert!(help.contains("[default: none]"));
    let cf = ok(&["finetune-cf", "--help"]);
    assert!(cf.contains("[default: iterative]"));
    assert!(cf.contains("[default: 0.6]"));
    let top = ok(&["--help"]);
    for cmd in ["gen-corpus", "train-lm", "train-rnnt", "finetune-cf", "decode", "evaluate", "report", "reproduce"] {
        assert!(top.contains(cmd), "{cmd}");
    }
}
