use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use super::{fused_score, DecodeConfig, DecodeResult, DecodeStats, Hypothesis, TraceEvent};
use crate::error::{Error, Result};
use crate::numerics::kernels::log_add;

/// Source of transducer and LM log-probabilities for a token history.
///
/// Implementations are expected to depend on the history only through its
/// token sequence, which is what makes duplicate merging sound.
pub trait FrameScorer: Clone {
    type Frame: Clone;

    /// `V + 1`, blank included.
    fn num_symbols(&self) -> usize;
    fn blank_id(&self) -> usize;
    /// Normalized log-probabilities over all `V + 1` symbols.
    fn joint_log_probs(&mut self, frame: &Self::Frame, history: &[usize]) -> Result<Vec<f64>>;
    /// External LM log-probabilities over the `V` non-blank symbols.
    fn lm_log_probs(&mut self, history: &[usize]) -> Result<Vec<f64>>;

    fn stats(&self) -> DecodeStats {
        DecodeStats::default()
    }
}

fn merge(map: &mut BTreeMap<Vec<usize>, f64>, tokens: Vec<usize>, score: f64) {
    map.entry(tokens)
        .and_modify(|s| *s = log_add(*s, score))
        .or_insert(score);
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_score
        .total_cmp(&a.log_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn prune(map: BTreeMap<Vec<usize>, f64>, beam: usize) -> Vec<Hypothesis> {
    let mut v: Vec<Hypothesis> = map
        .into_iter()
        .filter(|(_, s)| s.is_finite())
        .map(|(tokens, log_score)| Hypothesis { tokens, log_score })
        .collect();
    v.sort_by(rank);
    v.truncate(beam);
    v
}

/// Incremental beam search state. Cloning it snapshots the search.
#[derive(Clone)]
pub struct Search<S: FrameScorer> {
    scorer: S,
    config: DecodeConfig,
    beam: Vec<Hypothesis>,
    frames: Vec<S::Frame>,
    /// Joint distributions by `(frame index, history)`, reused when the
    /// final hypotheses are rescored.
    joints: HashMap<(usize, Vec<usize>), Vec<f64>>,
    trace: Option<Vec<TraceEvent>>,
}

fn cached_joint<S: FrameScorer>(
    joints: &mut HashMap<(usize, Vec<usize>), Vec<f64>>,
    scorer: &mut S,
    t: usize,
    frame: &S::Frame,
    history: &[usize],
) -> Result<Vec<f64>> {
    let key = (t, history.to_vec());
    if let Some(lp) = joints.get(&key) {
        return Ok(lp.clone());
    }
    let lp = scorer.joint_log_probs(frame, history)?;
    joints.insert(key, lp.clone());
    Ok(lp)
}

impl<S: FrameScorer> Search<S> {
    pub fn new(scorer: S, config: DecodeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Search {
            scorer,
            config,
            beam: vec![Hypothesis {
                tokens: Vec::new(),
                log_score: 0.0,
            }],
            frames: Vec::new(),
            joints: HashMap::new(),
            trace: None,
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }

    pub fn frames_consumed(&self) -> usize {
        self.frames.len()
    }

    pub fn beam(&self) -> &[Hypothesis] {
        &self.beam
    }

    pub fn scorer(&self) -> &S {
        &self.scorer
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn push_frame(&mut self, frame: S::Frame) -> Result<()> {
        let t = self.frames.len();
        let blank = self.scorer.blank_id();
        let v = self.scorer.num_symbols();
        let shallow = self.config.fusion.shallow();
        let lambda = self.config.effective_lambda();
        let max_sym = self.config.max_symbols_per_frame;

        let mut finished = BTreeMap::new();
        let mut level = std::mem::take(&mut self.beam);
        for l in 0..=max_sym {
            // Parents in a level are distinct sequences, so their one-label
            // extensions are too and need no merging.
            let mut next: Vec<(f64, usize, usize)> = Vec::new();
            for (parent, h) in level.iter().enumerate() {
                let lp = cached_joint(&mut self.joints, &mut self.scorer, t, &frame, &h.tokens)?;
                let blank_score = fused_score(lp[blank], 0.0, lambda, true)?;
                merge(&mut finished, h.tokens.clone(), h.log_score + blank_score);
                if let Some(trace) = &mut self.trace {
                    trace.push(TraceEvent {
                        frame: t,
                        history: h.tokens.clone(),
                        symbol: blank,
                        rnnt_logprob: lp[blank],
                        lm_term: 0.0,
                    });
                }
                if l == max_sym {
                    continue;
                }
                let lm = if shallow {
                    Some(self.scorer.lm_log_probs(&h.tokens)?)
                } else {
                    None
                };
                for k in (0..v).filter(|&k| k != blank) {
                    let lm_k = lm.as_ref().map_or(0.0, |lm| lm[k]);
                    let s = fused_score(lp[k], lm_k, lambda, false)?;
                    if let Some(trace) = &mut self.trace {
                        trace.push(TraceEvent {
                            frame: t,
                            history: h.tokens.clone(),
                            symbol: k,
                            rnnt_logprob: lp[k],
                            lm_term: lambda * lm_k,
                        });
                    }
                    let score = h.log_score + s;
                    if score.is_finite() {
                        next.push((score, parent, k));
                    }
                }
            }
            let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
                b.0.total_cmp(&a.0).then_with(|| {
                    let ta = level[a.1].tokens.iter().chain(std::iter::once(&a.2));
                    ta.cmp(level[b.1].tokens.iter().chain(std::iter::once(&b.2)))
                })
            };
            let beam = self.config.beam_size;
            if next.len() > beam {
                next.select_nth_unstable_by(beam - 1, order);
                next.truncate(beam);
            }
            next.sort_by(order);
            level = next
                .into_iter()
                .map(|(log_score, parent, k)| {
                    let mut tokens = Vec::with_capacity(level[parent].tokens.len() + 1);
                    tokens.extend_from_slice(&level[parent].tokens);
                    tokens.push(k);
                    Hypothesis { tokens, log_score }
                })
                .collect();
            if level.is_empty() {
                break;
            }
        }
        self.beam = prune(finished, self.config.beam_size);
        if self.beam.is_empty() {
            return Err(Error::NonFinite("every hypothesis scored -inf".into()));
        }
        self.frames.push(frame);
        Ok(())
    }

    /// Rescores the surviving hypotheses exactly and returns them ranked.
    pub fn finish(&mut self) -> Result<DecodeResult> {
        if self.frames.is_empty() {
            return Err(Error::EmptyInput("no frames decoded".into()));
        }
        let mut nbest = Vec::with_capacity(self.beam.len());
        let Search {
            scorer,
            config,
            beam,
            frames,
            joints,
            ..
        } = self;
        for h in beam.iter() {
            let log_score = rescore_with(
                scorer,
                frames.len(),
                &h.tokens,
                config,
                |s, t, hist| cached_joint(joints, s, t, &frames[t], hist),
            )?;
            nbest.push(Hypothesis {
                tokens: h.tokens.clone(),
                log_score,
            });
        }
        nbest.sort_by(rank);
        nbest.truncate(self.config.nbest);
        let mut stats = self.scorer.stats();
        stats.frames = self.frames.len();
        Ok(DecodeResult {
            best: nbest[0].clone(),
            nbest,
            stats,
        })
    }
}

/// Decodes a complete frame sequence.
pub fn beam_search<S: FrameScorer>(
    scorer: S,
    frames: &[S::Frame],
    config: &DecodeConfig,
) -> Result<DecodeResult> {
    let mut search = Search::new(scorer, config.clone())?;
    for f in frames {
        search.push_frame(f.clone())?;
    }
    search.finish()
}

/// Exact fused score of `tokens`: the log-sum over every alignment that
/// emits at most `max_symbols_per_frame` labels per frame, plus `λ` times
/// the LM log-probability of the sequence when shallow fusion is on.
pub fn rescore<S: FrameScorer>(
    scorer: &mut S,
    frames: &[S::Frame],
    tokens: &[usize],
    config: &DecodeConfig,
) -> Result<f64> {
    rescore_with(scorer, frames.len(), tokens, config, |s, t, hist| {
        s.joint_log_probs(&frames[t], hist)
    })
}

fn rescore_with<S: FrameScorer>(
    scorer: &mut S,
    frames: usize,
    tokens: &[usize],
    config: &DecodeConfig,
    mut joint: impl FnMut(&mut S, usize, &[usize]) -> Result<Vec<f64>>,
) -> Result<f64> {
    if frames == 0 {
        return Err(Error::EmptyInput("no frames to rescore".into()));
    }
    let blank = scorer.blank_id();
    if let Some(&bad) = tokens.iter().find(|&&y| y >= blank) {
        return Err(Error::Vocab {
            token: bad,
            size: blank,
        });
    }
    let (un, m) = (tokens.len() + 1, config.max_symbols_per_frame + 1);
    let idx = |u: usize, k: usize| u * m + k;
    let mut cur = vec![f64::NEG_INFINITY; un * m];
    cur[0] = 0.0;
    let mut blank_lp = vec![f64::NEG_INFINITY; un];
    for t in 0..frames {
        if t > 0 {
            let mut next = vec![f64::NEG_INFINITY; un * m];
            for u in 0..un {
                let mut s = f64::NEG_INFINITY;
                for k in 0..m {
                    s = log_add(s, cur[idx(u, k)] + blank_lp[u]);
                }
                next[idx(u, 0)] = s;
            }
            cur = next;
        }
        for u in 0..un {
            if cur[idx(u, 0)..idx(u, 0) + m].iter().all(|x| *x == f64::NEG_INFINITY) {
                blank_lp[u] = f64::NEG_INFINITY;
                continue;
            }
            let lp = joint(scorer, t, &tokens[..u])?;
            blank_lp[u] = lp[blank];
            if u + 1 < un {
                let y = lp[tokens[u]];
                for k in 0..m - 1 {
                    let from = cur[idx(u, k)];
                    if from > f64::NEG_INFINITY {
                        let to = idx(u + 1, k + 1);
                        cur[to] = log_add(cur[to], from + y);
                    }
                }
            }
        }
    }
    let mut total = f64::NEG_INFINITY;
    for k in 0..m {
        total = log_add(total, cur[idx(un - 1, k)] + blank_lp[un - 1]);
    }
    if config.fusion.shallow() {
        let mut lm_total = 0.0;
        for u in 0..tokens.len() {
            lm_total += scorer.lm_log_probs(&tokens[..u])?[tokens[u]];
        }
        total += config.effective_lambda() * lm_total;
    }
    Ok(total)
}
