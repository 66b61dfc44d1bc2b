//! Shared vocabulary, synthetic task generation and dataset files.

mod dataset;
mod generate;
mod vocab;

pub use dataset::{read_dataset, read_text, write_dataset, write_text};
pub use generate::{
    generate_corpus, render_frames, word_counts, word_list, CorpusSpec, GeneratedCorpus, Grammar,
    RareWords,
};
pub use vocab::Vocabulary;

use crate::numerics::Tensor;

/// One paired example: synthetic feature frames and the reference tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Seed the frames were rendered from.
    pub seed: u64,
    /// `[T × feature_dim]`
    pub frames: Tensor,
    pub reference: Vec<usize>,
}
