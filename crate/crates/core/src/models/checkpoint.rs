//! Binary checkpoint files.
//!
//! ```text
//! magic      8 bytes   "LMFUSCK1"
//! version    u32 LE
//! meta_len   u64 LE
//! meta       meta_len bytes of UTF-8 TOML
//! blobs      f64 LE values of every parameter, in `param` order
//! ```
//!
//! The TOML header carries `kind`, `vocab_fingerprint`, an optional
//! `blank_id`, a `[config]` table and one `[[param]]` entry (`name`,
//! `shape`) per tensor.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{check_fingerprint, LmConfig, NeuralLM, TransducerConfig, TransducerModel};
use crate::error::{Error, Result};
use crate::numerics::{Parameterized, Tensor};

pub const MAGIC: &[u8; 8] = b"LMFUSCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Transducer,
    LanguageModel,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Transducer => "transducer",
            CheckpointKind::LanguageModel => "lm",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<C> {
    kind: String,
    vocab_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blank_id: Option<usize>,
    config: C,
    param: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn encode<C: Serialize>(
    kind: CheckpointKind,
    fingerprint: &str,
    blank_id: Option<usize>,
    config: &C,
    params: &[(String, &Tensor)],
) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.as_str().to_string(),
        vocab_fingerprint: fingerprint.to_string(),
        blank_id,
        config,
        param: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let meta = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let n: usize = params.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(20 + meta.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for (_, t) in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Raw {
    kind: String,
    fingerprint: String,
    blank_id: Option<usize>,
    config: toml::Value,
    params: Vec<(String, Tensor)>,
}

fn split_header(bytes: &[u8]) -> Result<(Header<toml::Value>, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[20..];
    if meta_len > rest.len() {
        return Err(Error::Format("truncated header".into()));
    }
    let meta = std::str::from_utf8(&rest[..meta_len])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let header: Header<toml::Value> =
        toml::from_str(meta).map_err(|e| Error::Format(format!("corrupt header: {e}")))?;
    Ok((header, &rest[meta_len..]))
}

fn decode(bytes: &[u8]) -> Result<Raw> {
    let (header, mut blob) = split_header(bytes)?;
    let mut params = Vec::with_capacity(header.param.len());
    for p in header.param {
        let n: usize = p.shape.iter().product();
        if blob.len() < 8 * n {
            return Err(Error::Format(format!("truncated data for {}", p.name)));
        }
        let data = blob[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blob = &blob[8 * n..];
        params.push((p.name, Tensor::new(p.shape, data)?));
    }
    if !blob.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", blob.len())));
    }
    Ok(Raw {
        kind: header.kind,
        fingerprint: header.vocab_fingerprint,
        blank_id: header.blank_id,
        config: header.config,
        params,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Kind recorded in a checkpoint file, without loading its tensors.
pub fn peek_kind(path: &Path) -> Result<CheckpointKind> {
    let bytes = read(path)?;
    let (header, _) = split_header(&bytes)?;
    match header.kind.as_str() {
        "transducer" => Ok(CheckpointKind::Transducer),
        "lm" => Ok(CheckpointKind::LanguageModel),
        other => Err(Error::Format(format!("unknown kind {other:?}"))),
    }
}

impl Raw {
    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind.as_str() {
            return Err(Error::WrongKind {
                expected: kind.as_str(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    fn config<C: DeserializeOwned>(&self) -> Result<C> {
        self.config
            .clone()
            .try_into()
            .map_err(|e| Error::Format(format!("bad config: {e}")))
    }

    fn fill<P: Parameterized>(self, target: &mut P) -> Result<()> {
        let mut stored: HashMap<String, Tensor> = self.params.into_iter().collect();
        for (name, slot) in target.params_mut() {
            let t = stored
                .remove(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        match stored.keys().min() {
            Some(extra) => Err(Error::Format(format!("unexpected parameter {extra}"))),
            None => Ok(()),
        }
    }
}

fn scratch_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl TransducerModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(
            CheckpointKind::Transducer,
            self.vocab_fingerprint(),
            Some(self.blank_id()),
            self.config(),
            &self.params(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode(bytes)?;
        raw.expect_kind(CheckpointKind::Transducer)?;
        let config: TransducerConfig = raw.config()?;
        if raw.blank_id != Some(config.vocab_size) {
            return Err(Error::Format(format!(
                "blank id {:?} does not equal vocabulary size {}",
                raw.blank_id, config.vocab_size
            )));
        }
        let mut model = TransducerModel::new(config, &raw.fingerprint, &mut scratch_rng())?;
        raw.fill(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }

    /// Loads and requires the given vocabulary fingerprint.
    pub fn load_strict(path: &Path, fingerprint: &str) -> Result<Self> {
        let m = Self::load(path)?;
        check_fingerprint(fingerprint, m.vocab_fingerprint())?;
        Ok(m)
    }
}

impl NeuralLM {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(
            CheckpointKind::LanguageModel,
            self.vocab_fingerprint(),
            None,
            self.config(),
            &self.params(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode(bytes)?;
        raw.expect_kind(CheckpointKind::LanguageModel)?;
        let config: LmConfig = raw.config()?;
        let mut lm = NeuralLM::new(config, &raw.fingerprint, &mut scratch_rng())?;
        raw.fill(&mut lm)?;
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }

    pub fn load_strict(path: &Path, fingerprint: &str) -> Result<Self> {
        let lm = Self::load(path)?;
        check_fingerprint(fingerprint, lm.vocab_fingerprint())?;
        Ok(lm)
    }
}
