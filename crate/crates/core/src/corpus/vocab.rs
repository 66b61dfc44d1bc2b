use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered set of non-blank output symbols.
///
/// The fingerprint is a hash of the ordered symbol list; models and
/// language models interoperate iff their fingerprints are equal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    fingerprint: String,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::CorpusSpec(format!("invalid symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::CorpusSpec(format!("duplicate symbol {s:?}")));
            }
        }
        let fingerprint = fingerprint_of(&symbols);
        Ok(Vocabulary {
            symbols,
            index,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<String> {
        let words = tokens
            .iter()
            .map(|&t| {
                self.symbol(t).ok_or(Error::Vocab {
                    token: t,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::new(text.lines().filter(|l| !l.is_empty()).map(String::from).collect())
    }
}

fn fingerprint_of(symbols: &[String]) -> String {
    let mut h = Sha256::new();
    for s in symbols {
        h.update(s.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
