use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
/// Fixed so that the word list depends only on the vocabulary size.
const WORD_SEED: u64 = 0x5eed_0f_7e57;

/// Parameters of the synthetic paired/unpaired task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub paired_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub unpaired_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Out-degree of every word in the bigram grammar.
    pub successors_per_word: usize,
    /// Exponent applied to exponential draws for transition weights; larger
    /// values give peakier (lower-entropy) transitions.
    pub transition_sharpness: f64,
    /// Occurrence count below which a word is rare.
    pub rare_threshold: usize,
    /// Words kept rare in the paired transcripts but plentiful in the
    /// unpaired text.
    pub lm_rare_words: usize,
    pub lm_rare_paired_cap: usize,
    /// Words kept rare in both paired and unpaired text.
    pub oov_rare_words: usize,
    pub oov_rare_paired_cap: usize,
    pub oov_rare_union_cap: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub noise_sigma: f64,
    /// Words sharing a base acoustic signature.
    pub confusion_group_size: usize,
    /// Spread of word signatures around their group base.
    pub confusion_spread: f64,
    /// Also emit the test transcripts as a text corpus (oracle LM data).
    pub oracle_text: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 7,
            vocab_size: 40,
            feature_dim: 8,
            paired_sentences: 2000,
            dev_sentences: 200,
            test_sentences: 300,
            unpaired_sentences: 50_000,
            min_words: 4,
            max_words: 9,
            successors_per_word: 4,
            transition_sharpness: 1.5,
            rare_threshold: 10,
            lm_rare_words: 4,
            lm_rare_paired_cap: 8,
            oov_rare_words: 2,
            oov_rare_paired_cap: 2,
            oov_rare_union_cap: 6,
            frames_per_token_min: 4,
            frames_per_token_max: 6,
            noise_sigma: 0.6,
            confusion_group_size: 2,
            confusion_spread: 0.15,
            oracle_text: true,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::CorpusSpec(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        let syllables = CONSONANTS.len() * VOWELS.len();
        if self.vocab_size > syllables * (syllables - 1) {
            return fail(format!("vocab_size {} exceeds the word inventory", self.vocab_size));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return fail(format!(
                "sentence length range [{}, {}] is empty or starts at zero",
                self.min_words, self.max_words
            ));
        }
        if self.frames_per_token_min == 0 || self.frames_per_token_min > self.frames_per_token_max {
            return fail(format!(
                "frames per token range [{}, {}] is invalid",
                self.frames_per_token_min, self.frames_per_token_max
            ));
        }
        if self.successors_per_word == 0 || self.successors_per_word > self.vocab_size {
            return fail(format!(
                "successors_per_word {} must lie in [1, {}]",
                self.successors_per_word, self.vocab_size
            ));
        }
        if self.unpaired_sentences < self.paired_sentences {
            return fail(format!(
                "unpaired_sentences ({}) must be at least paired_sentences ({})",
                self.unpaired_sentences, self.paired_sentences
            ));
        }
        if self.lm_rare_words + self.oov_rare_words >= self.vocab_size {
            return fail("rare word sets leave no common words".into());
        }
        if self.lm_rare_words > 0 && self.lm_rare_paired_cap >= self.rare_threshold {
            return fail(format!(
                "lm_rare_paired_cap {} must be below rare_threshold {}",
                self.lm_rare_paired_cap, self.rare_threshold
            ));
        }
        if self.oov_rare_words > 0 {
            if self.oov_rare_union_cap >= self.rare_threshold {
                return fail(format!(
                    "oov_rare_union_cap {} must be below rare_threshold {}",
                    self.oov_rare_union_cap, self.rare_threshold
                ));
            }
            if self.oov_rare_paired_cap > self.oov_rare_union_cap {
                return fail(format!(
                    "oov_rare_paired_cap {} exceeds oov_rare_union_cap {}",
                    self.oov_rare_paired_cap, self.oov_rare_union_cap
                ));
            }
        }
        if self.noise_sigma < 0.0 || self.confusion_spread < 0.0 {
            return fail("noise_sigma and confusion_spread must be non-negative".into());
        }
        if self.confusion_group_size == 0 {
            return fail("confusion_group_size must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: CorpusSpec =
            toml::from_str(text).map_err(|e| Error::CorpusSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Deterministic pseudo-word list (`"baki"`, `"tosu"`, ...).
pub fn word_list(n: usize) -> Vec<String> {
    let mut syllables = Vec::new();
    for c in CONSONANTS {
        for v in VOWELS {
            syllables.push(format!("{c}{v}"));
        }
    }
    let mut pairs: Vec<(usize, usize)> = (0..syllables.len())
        .flat_map(|a| (0..syllables.len()).map(move |b| (a, b)))
        .filter(|(a, b)| a != b)
        .collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(WORD_SEED));
    pairs
        .into_iter()
        .take(n)
        .map(|(a, b)| format!("{}{}", syllables[a], syllables[b]))
        .collect()
}

/// Bigram transition table with a start distribution.
#[derive(Clone, Debug)]
pub struct Grammar {
    pub start: Vec<(usize, f64)>,
    pub successors: Vec<Vec<(usize, f64)>>,
}

fn weighted(rng: &mut ChaCha8Rng, ids: Vec<usize>, sharpness: f64) -> Vec<(usize, f64)> {
    let raw: Vec<f64> = ids
        .iter()
        .map(|_| (-(rng.gen::<f64>().max(1e-12)).ln()).powf(sharpness))
        .collect();
    let total: f64 = raw.iter().sum();
    ids.into_iter().zip(raw.into_iter().map(|w| w / total)).collect()
}

impl Grammar {
    fn generate(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Self {
        let v = spec.vocab_size;
        let all: Vec<usize> = (0..v).collect();
        let start_ids = all
            .choose_multiple(rng, spec.successors_per_word.max(v / 2))
            .copied()
            .collect();
        let start = weighted(rng, start_ids, spec.transition_sharpness);
        let successors = (0..v)
            .map(|_| {
                let ids = all
                    .choose_multiple(rng, spec.successors_per_word)
                    .copied()
                    .collect();
                weighted(rng, ids, spec.transition_sharpness)
            })
            .collect();
        Grammar { start, successors }
    }

    fn pick(rng: &mut ChaCha8Rng, dist: &[(usize, f64)]) -> usize {
        let mut u: f64 = rng.gen();
        for &(id, p) in dist {
            if u < p {
                return id;
            }
            u -= p;
        }
        dist.last().expect("non-empty distribution").0
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, min_words: usize, max_words: usize) -> Vec<usize> {
        let len = rng.gen_range(min_words..=max_words);
        let mut out = Vec::with_capacity(len);
        let mut w = Self::pick(rng, &self.start);
        out.push(w);
        while out.len() < len {
            w = Self::pick(rng, &self.successors[w]);
            out.push(w);
        }
        out
    }

    /// Log probability of a sentence under the grammar (ignoring length).
    pub fn log_prob(&self, sentence: &[usize]) -> f64 {
        let find = |d: &[(usize, f64)], w: usize| {
            d.iter()
                .find(|(id, _)| *id == w)
                .map_or(f64::NEG_INFINITY, |(_, p)| p.ln())
        };
        let mut lp = 0.0;
        for (i, &w) in sentence.iter().enumerate() {
            lp += if i == 0 {
                find(&self.start, w)
            } else {
                find(&self.successors[sentence[i - 1]], w)
            };
        }
        lp
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RareWords {
    pub lm_rare: Vec<usize>,
    pub oov_rare: Vec<usize>,
}

/// Output of [`generate_corpus`].
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    pub grammar: Grammar,
    pub signatures: Vec<Vec<f64>>,
    pub rare: RareWords,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub unpaired: Vec<Vec<usize>>,
    /// Test transcripts, present when `spec.oracle_text` is set.
    pub oracle: Option<Vec<Vec<usize>>>,
}

impl GeneratedCorpus {
    pub fn paired_counts(&self) -> BTreeMap<String, usize> {
        word_counts(&self.vocab, self.train.iter().map(|u| u.reference.as_slice()))
    }

    pub fn union_counts(&self) -> BTreeMap<String, usize> {
        word_counts(
            &self.vocab,
            self.train
                .iter()
                .map(|u| u.reference.as_slice())
                .chain(self.unpaired.iter().map(Vec::as_slice)),
        )
    }

    /// Language-model training text: paired transcripts plus unpaired text.
    pub fn lm_text(&self) -> Vec<Vec<usize>> {
        self.train
            .iter()
            .map(|u| u.reference.clone())
            .chain(self.unpaired.iter().cloned())
            .collect()
    }
}

pub fn word_counts<'a>(
    vocab: &Vocabulary,
    sentences: impl Iterator<Item = &'a [usize]>,
) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for &t in s {
            if let Some(w) = vocab.symbol(t) {
                *counts.entry(w.to_string()).or_insert(0) += 1;
            }
        }
    }
    counts
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn utterance_seed(seed: u64, split: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split << 48) ^ index
}

/// Renders a token sequence as noisy signature frames.
pub fn render_frames(
    spec: &CorpusSpec,
    signatures: &[Vec<f64>],
    tokens: &[usize],
    utt_seed: u64,
) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let d = spec.feature_dim;
    let mut data = Vec::new();
    for &t in tokens {
        let n = rng.gen_range(spec.frames_per_token_min..=spec.frames_per_token_max);
        for _ in 0..n {
            for k in 0..d {
                let e = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push(signatures[t][k] + e);
            }
        }
    }
    let rows = data.len() / d;
    Tensor::matrix(rows, d, data).expect("frame layout")
}

struct Caps<'a> {
    spec: &'a CorpusSpec,
    rare: &'a RareWords,
}

impl Caps<'_> {
    fn paired_ok(&self, counts: &[usize], s: &[usize]) -> bool {
        self.check(counts, s, &self.rare.lm_rare, self.spec.lm_rare_paired_cap)
            && self.check(counts, s, &self.rare.oov_rare, self.spec.oov_rare_paired_cap)
    }

    fn union_ok(&self, counts: &[usize], s: &[usize]) -> bool {
        self.check(counts, s, &self.rare.oov_rare, self.spec.oov_rare_union_cap)
    }

    fn check(&self, counts: &[usize], s: &[usize], words: &[usize], cap: usize) -> bool {
        words
            .iter()
            .all(|w| counts[*w] + s.iter().filter(|t| *t == w).count() <= cap)
    }
}

fn sample_split(
    spec: &CorpusSpec,
    grammar: &Grammar,
    rng: &mut ChaCha8Rng,
    count: usize,
    exclude: &HashSet<Vec<usize>>,
    mut accept: impl FnMut(&[usize]) -> bool,
    what: &str,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(count);
    let budget = 1000 * count.max(1) + 10_000;
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::CorpusSpec(format!(
                "could only draw {} of {count} {what} sentences within the rare-word caps",
                out.len()
            )));
        }
        let s = grammar.sample(rng, spec.min_words, spec.max_words);
        if exclude.contains(&s) || !accept(&s) {
            continue;
        }
        out.push(s);
    }
    Ok(out)
}

/// Generates the full synthetic task. Deterministic in `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let vocab = Vocabulary::new(word_list(spec.vocab_size))?;
    let v = spec.vocab_size;

    let mut grammar_rng = stream(spec.seed, 1);
    let grammar = Grammar::generate(spec, &mut grammar_rng);

    // Rare words are drawn among words reachable as successors.
    let mut reachable: Vec<usize> = {
        let mut set: Vec<bool> = vec![false; v];
        for succ in &grammar.successors {
            for (w, _) in succ {
                set[*w] = true;
            }
        }
        (0..v).filter(|w| set[*w]).collect()
    };
    if reachable.len() < spec.lm_rare_words + spec.oov_rare_words {
        return Err(Error::CorpusSpec(
            "grammar reaches too few words to assign the rare word sets".into(),
        ));
    }
    reachable.shuffle(&mut grammar_rng);
    let mut lm_rare: Vec<usize> = reachable[..spec.lm_rare_words].to_vec();
    let mut oov_rare: Vec<usize> =
        reachable[spec.lm_rare_words..spec.lm_rare_words + spec.oov_rare_words].to_vec();
    lm_rare.sort_unstable();
    oov_rare.sort_unstable();
    let rare = RareWords { lm_rare, oov_rare };

    let signatures = {
        let mut rng = stream(spec.seed, 2);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(&mut rng);
        let mut sigs = vec![Vec::new(); v];
        for group in order.chunks(spec.confusion_group_size) {
            let base: Vec<f64> = (0..spec.feature_dim).map(|_| unit.sample(&mut rng)).collect();
            for &w in group {
                sigs[w] = base
                    .iter()
                    .map(|b| b + spec.confusion_spread * unit.sample(&mut rng))
                    .collect();
            }
        }
        sigs
    };

    let caps = Caps { spec, rare: &rare };
    let mut text_rng = stream(spec.seed, 3);
    let mut held_out = HashSet::new();
    let test_text = sample_split(spec, &grammar, &mut text_rng, spec.test_sentences, &held_out, |_| true, "test")?;
    held_out.extend(test_text.iter().cloned());
    let dev_text = sample_split(spec, &grammar, &mut text_rng, spec.dev_sentences, &held_out, |_| true, "dev")?;
    held_out.extend(dev_text.iter().cloned());

    let mut counts = vec![0usize; v];
    let train_text = sample_split(
        spec,
        &grammar,
        &mut text_rng,
        spec.paired_sentences,
        &held_out,
        |s| {
            let ok = caps.paired_ok(&counts, s);
            if ok {
                s.iter().for_each(|t| counts[*t] += 1);
            }
            ok
        },
        "paired",
    )?;
    let unpaired = sample_split(
        spec,
        &grammar,
        &mut text_rng,
        spec.unpaired_sentences,
        &held_out,
        |s| {
            let ok = caps.union_ok(&counts, s);
            if ok {
                s.iter().for_each(|t| counts[*t] += 1);
            }
            ok
        },
        "unpaired",
    )?;

    for &w in &rare.lm_rare {
        if counts[w] < spec.rare_threshold {
            return Err(Error::CorpusSpec(format!(
                "LM-rare word {:?} reaches only {} occurrences in paired+unpaired text (needs {})",
                vocab.symbol(w).unwrap_or("?"),
                counts[w],
                spec.rare_threshold
            )));
        }
    }

    let render = |split: u64, prefix: &str, texts: &[Vec<usize>]| -> Vec<Utterance> {
        texts
            .iter()
            .enumerate()
            .map(|(i, toks)| {
                let seed = utterance_seed(spec.seed, split, i as u64);
                Utterance {
                    id: format!("{prefix}-{i:05}"),
                    seed,
                    frames: render_frames(spec, &signatures, toks, seed),
                    reference: toks.clone(),
                }
            })
            .collect()
    };
    let train = render(0, "train", &train_text);
    let dev = render(1, "dev", &dev_text);
    let test = render(2, "test", &test_text);
    let oracle = spec.oracle_text.then(|| test_text.clone());

    Ok(GeneratedCorpus {
        spec: spec.clone(),
        vocab,
        grammar,
        signatures,
        rare,
        train,
        dev,
        test,
        unpaired,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            paired_sentences: 300,
            dev_sentences: 40,
            test_sentences: 60,
            unpaired_sentences: 3000,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn noiseless_frames_repeat_signatures() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let c = generate_corpus(&spec).unwrap();
        let tokens = [0usize, 1, 2];
        let frames = render_frames(&spec, &c.signatures, &tokens, 99);
        let mut tok = 0;
        for r in 0..frames.rows() {
            let frame = frames.row_slice(r);
            if frame != c.signatures[tokens[tok]].as_slice() {
                tok += 1;
            }
            assert_eq!(frame, c.signatures[tokens[tok]].as_slice());
        }
        assert_eq!(tok, 2);
        let n = frames.rows();
        assert!(n >= 3 * spec.frames_per_token_min && n <= 3 * spec.frames_per_token_max);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        assert_eq!(a.unpaired, b.unpaired);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x, y);
            assert!(x.frames.bit_eq(&y.frames));
        }
        let c = generate_corpus(&CorpusSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.unpaired, c.unpaired);
    }

    #[test]
    fn rare_word_frequency_audit() {
        let spec = small_spec();
        let c = generate_corpus(&spec).unwrap();
        let paired = c.paired_counts();
        let union = c.union_counts();
        let count = |m: &BTreeMap<String, usize>, w: usize| {
            m.get(c.vocab.symbol(w).unwrap()).copied().unwrap_or(0)
        };
        for &w in &c.rare.lm_rare {
            assert!(count(&paired, w) < spec.rare_threshold);
            assert!(count(&union, w) >= spec.rare_threshold);
        }
        for &w in &c.rare.oov_rare {
            assert!(count(&union, w) < spec.rare_threshold);
        }
    }

    #[test]
    fn test_split_shares_no_sentence_with_train() {
        let c = generate_corpus(&small_spec()).unwrap();
        let train: HashSet<&Vec<usize>> = c.train.iter().map(|u| &u.reference).collect();
        assert!(c.test.iter().all(|u| !train.contains(&u.reference)));
        assert!(c.dev.iter().all(|u| !train.contains(&u.reference)));
        let unpaired: HashSet<&Vec<usize>> = c.unpaired.iter().collect();
        assert!(c.test.iter().all(|u| !unpaired.contains(&u.reference)));
    }

    #[test]
    fn oracle_text_is_test_transcripts() {
        let c = generate_corpus(&small_spec()).unwrap();
        let oracle = c.oracle.unwrap();
        assert_eq!(oracle.len(), c.test.len());
        assert!(oracle.iter().zip(&c.test).all(|(o, u)| *o == u.reference));
    }

    #[test]
    fn inconsistent_caps_are_rejected() {
        let spec = CorpusSpec {
            lm_rare_paired_cap: 12,
            ..small_spec()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::CorpusSpec(_))));
        let spec = CorpusSpec {
            unpaired_sentences: 10,
            ..small_spec()
        };
        assert!(matches!(spec.validate(), Err(Error::CorpusSpec(_))));
        // unpaired text too small for the LM-rare words to reach the threshold
        let spec = CorpusSpec {
            paired_sentences: 20,
            unpaired_sentences: 20,
            ..small_spec()
        };
        let err = generate_corpus(&spec).unwrap_err();
        assert!(err.to_string().contains("LM-rare"), "{err}");
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = small_spec();
        assert_eq!(CorpusSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(CorpusSpec::from_toml("bogus_field = 1").is_err());
    }

    #[test]
    fn word_list_is_unique_and_stable() {
        let w = word_list(200);
        let set: HashSet<&String> = w.iter().collect();
        assert_eq!(set.len(), 200);
        assert_eq!(word_list(5), w[..5].to_vec());
    }
}
