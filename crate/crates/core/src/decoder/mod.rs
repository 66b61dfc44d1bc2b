//! Time-synchronous transducer beam search with LM fusion.
//!
//! Each frame is expanded in levels. Level `l` holds hypotheses that have
//! emitted `l` labels within the current frame; a blank from any level
//! moves the hypothesis to the next frame. Duplicates merge by logsumexp
//! inside a level and across levels once they have consumed the frame, so
//! without pruning every hypothesis carries the exact fused score of its
//! token sequence. The final n-best list is rescored exactly.

mod search;
mod session;

pub use search::{beam_search, rescore, FrameScorer, Search};
pub use session::{DecodeSession, Decoder, ModelScorer};

use std::fmt;
use std::str::FromStr;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    None,
    Shallow,
    Cold,
    ShallowCold,
}

impl FusionMode {
    pub fn shallow(self) -> bool {
        matches!(self, FusionMode::Shallow | FusionMode::ShallowCold)
    }

    pub fn cold(self) -> bool {
        matches!(self, FusionMode::Cold | FusionMode::ShallowCold)
    }

    pub fn uses_lm(self) -> bool {
        self != FusionMode::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Shallow => "sf",
            FusionMode::Cold => "cf",
            FusionMode::ShallowCold => "sf+cf",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "sf" => Ok(FusionMode::Shallow),
            "cf" => Ok(FusionMode::Cold),
            "sf+cf" => Ok(FusionMode::ShallowCold),
            _ => Err(Error::Config(format!(
                "unknown fusion mode {s:?} (expected none, sf, cf or sf+cf)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Shallow-fusion weight; ignored unless the mode includes shallow fusion.
    pub lambda: f64,
    pub max_symbols_per_frame: usize,
    pub fusion: FusionMode,
    /// Entries kept in the returned n-best list.
    pub nbest: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 15,
            lambda: 0.3,
            max_symbols_per_frame: 3,
            fusion: FusionMode::None,
            nbest: 5,
        }
    }
}

impl DecodeConfig {
    pub fn with_fusion(fusion: FusionMode, lambda: f64) -> Self {
        DecodeConfig {
            fusion,
            lambda,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Config("max symbols per frame must be at least 1".into()));
        }
        if self.nbest == 0 {
            return Err(Error::Config("n-best size must be at least 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// `λ` as applied: zero whenever shallow fusion is off.
    pub fn effective_lambda(&self) -> f64 {
        if self.fusion.shallow() {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Score of one transition. Blank never receives the LM term.
pub fn fused_score(rnnt_logprob: f64, lm_logprob: f64, lambda: f64, is_blank: bool) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("negative lambda {lambda}")));
    }
    if !rnnt_logprob.is_finite() || (!is_blank && !lm_logprob.is_finite()) {
        return Err(Error::NonFinite("fused score input".into()));
    }
    Ok(if is_blank {
        rnnt_logprob
    } else {
        rnnt_logprob + lambda * lm_logprob
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub frames: usize,
    pub predictor_steps: usize,
    pub lm_steps: usize,
    /// Distinct token histories whose predictor state was built.
    pub prefixes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub best: Hypothesis,
    /// Best first, at most `nbest` entries.
    pub nbest: Vec<Hypothesis>,
    pub stats: DecodeStats,
}

/// One scored transition, recorded when tracing is on.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub frame: usize,
    pub history: Vec<usize>,
    pub symbol: usize,
    pub rnnt_logprob: f64,
    /// LM log-probability folded into the score; zero for blank.
    pub lm_term: f64,
}

/// `id \t rank \t score \t text` lines, rank starting at 1.
pub fn format_nbest(id: &str, nbest: &[Hypothesis], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for (rank, h) in nbest.iter().enumerate() {
        out.push_str(&format!(
            "{id}\t{}\t{}\t{}\n",
            rank + 1,
            h.log_score,
            vocab.detokenize(&h.tokens)?
        ));
    }
    Ok(out)
}
