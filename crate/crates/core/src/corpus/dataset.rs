//! Line-oriented dataset files.
//!
//! Paired split, one utterance per line, six tab-separated fields:
//!
//! ```text
//! <id> \t <seed> \t <T> \t <d> \t <T·d space-separated floats> \t <reference words>
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so a read after a
//! write reproduces every frame value bit for bit. Text corpora hold one
//! space-separated sentence per line.

use std::fmt::Write as _;
use std::path::Path;

use super::{Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn write_dataset(path: &Path, utterances: &[Utterance], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for u in utterances {
        let (t, d) = (u.frames.rows(), u.frames.cols());
        write!(out, "{}\t{}\t{}\t{}\t", u.id, u.seed, t, d).expect("string write");
        for (i, v) in u.frames.data().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").expect("string write");
        }
        out.push('\t');
        out.push_str(&vocab.detokenize(&u.reference)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: shown.clone(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let seed: u64 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad seed {:?}", fields[1])))?;
        let t: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad frame count {:?}", fields[2])))?;
        let d: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("bad feature dim {:?}", fields[3])))?;
        let values = fields[4]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad value {s:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != t * d {
            return Err(err(format!(
                "expected {} frame values, found {}",
                t * d,
                values.len()
            )));
        }
        let reference = vocab
            .tokenize(fields[5])
            .map_err(|e| err(e.to_string()))?;
        out.push(Utterance {
            id: fields[0].to_string(),
            seed,
            frames: Tensor::matrix(t, d, values).map_err(|e| err(e.to_string()))?,
            reference,
        });
    }
    Ok(out)
}

pub fn write_text(path: &Path, sentences: &[Vec<usize>], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&vocab.detokenize(s)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            vocab.tokenize(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn corpus() -> crate::corpus::GeneratedCorpus {
        generate_corpus(&CorpusSpec {
            paired_sentences: 100,
            dev_sentences: 10,
            test_sentences: 10,
            unpaired_sentences: 2000,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_100_utterances() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.tsv");
        write_dataset(&p, &c.train, &c.vocab).unwrap();
        let back = read_dataset(&p, &c.vocab).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in back.iter().zip(&c.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.reference, b.reference);
            assert!(a.frames.bit_eq(&b.frames));
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tsv");
        std::fs::write(&p, "").unwrap();
        assert!(read_dataset(&p, &c.vocab).unwrap().is_empty());
        assert!(read_text(&p, &c.vocab).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_reports_its_line() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        write_dataset(&p, &c.train[..3], &c.vocab).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[2][..lines[2].len() / 2];
        lines[2] = cut;
        std::fs::write(&p, lines.join("\n")).unwrap();
        match read_dataset(&p, &c.vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.txt");
        write_text(&p, &c.unpaired[..50], &c.vocab).unwrap();
        assert_eq!(read_text(&p, &c.vocab).unwrap(), c.unpaired[..50].to_vec());
    }
}
