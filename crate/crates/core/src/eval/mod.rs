//! Word error rate and the per-category breakdown of fusion gains.

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Edit counts of one or more aligned utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WerResult {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerResult {
    fn from_counts(substitutions: usize, insertions: usize, deletions: usize, ref_words: usize) -> Self {
        WerResult {
            substitutions,
            insertions,
            deletions,
            ref_words,
            wer: if ref_words == 0 {
                0.0
            } else {
                (substitutions + insertions + deletions) as f64 / ref_words as f64
            },
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Pooled counts; the rate is recomputed from the totals.
    pub fn merge(&self, other: &WerResult) -> WerResult {
        WerResult::from_counts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_words + other.ref_words,
        )
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Edit {
    Diagonal,
    Insert,
    Delete,
}

/// Minimum-edit alignment with unit costs. Among equally cheap alignments
/// the backtrace prefers substitution, then insertion, then deletion.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<WerResult> {
    let (n, m) = (reference.len(), hypothesis.len());
    if n == 0 {
        return Err(Error::EmptyInput("reference has no words".into()));
    }
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            d[i][j] = (d[i - 1][j - 1] + sub).min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let step = if i > 0 && j > 0 {
            let sub = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
            if d[i][j] == d[i - 1][j - 1] + sub {
                s += sub;
                Edit::Diagonal
            } else if d[i][j] == d[i][j - 1] + 1 {
                Edit::Insert
            } else {
                Edit::Delete
            }
        } else if j > 0 {
            Edit::Insert
        } else {
            Edit::Delete
        };
        match step {
            Edit::Diagonal => {
                i -= 1;
                j -= 1;
            }
            Edit::Insert => {
                ins += 1;
                j -= 1;
            }
            Edit::Delete => {
                del += 1;
                i -= 1;
            }
        }
    }
    Ok(WerResult::from_counts(s, ins, del, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WordCategory {
    Common,
    FixedByLm,
    RareOov,
}

impl WordCategory {
    pub const ALL: [WordCategory; 3] = [WordCategory::Common, WordCategory::FixedByLm, WordCategory::RareOov];

    pub fn as_str(self) -> &'static str {
        match self {
            WordCategory::Common => "Common",
            WordCategory::FixedByLm => "Fixed-by-LM",
            WordCategory::RareOov => "Rare/OOV",
        }
    }
}

impl fmt::Display for WordCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Rare means fewer than `threshold` occurrences. An utterance with no word
/// rare in the paired transcripts is Common; one whose paired-rare words all
/// reach the threshold once the unpaired text is counted is Fixed-by-LM;
/// anything else is Rare/OOV.
pub fn categorize<S: AsRef<str>>(
    words: &[S],
    paired_counts: &BTreeMap<String, usize>,
    union_counts: &BTreeMap<String, usize>,
    threshold: usize,
) -> WordCategory {
    let count = |c: &BTreeMap<String, usize>, w: &str| c.get(w).copied().unwrap_or(0);
    let rare: Vec<&str> = words
        .iter()
        .map(AsRef::as_ref)
        .filter(|w| count(paired_counts, w) < threshold)
        .collect();
    if rare.is_empty() {
        WordCategory::Common
    } else if rare.iter().all(|w| count(union_counts, w) >= threshold) {
        WordCategory::FixedByLm
    } else {
        WordCategory::RareOov
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LengthTercile {
    Short,
    Medium,
    Long,
}

impl LengthTercile {
    pub const ALL: [LengthTercile; 3] = [LengthTercile::Short, LengthTercile::Medium, LengthTercile::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            LengthTercile::Short => "Short",
            LengthTercile::Medium => "Medium",
            LengthTercile::Long => "Long",
        }
    }
}

/// Evaluation reference: words and word-type category of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub id: String,
    pub words: Vec<String>,
    pub category: WordCategory,
}

/// Hypothesis words by utterance id.
pub type SystemOutput = BTreeMap<String, Vec<String>>;

/// Splits references into length terciles by word count, ties broken by
/// id. Earlier terciles take the remainder, so sizes differ by at most one.
pub fn terciles(refs: &[Reference]) -> BTreeMap<String, LengthTercile> {
    let mut order: Vec<&Reference> = refs.iter().collect();
    order.sort_by(|a, b| a.words.len().cmp(&b.words.len()).then_with(|| a.id.cmp(&b.id)));
    let n = order.len();
    let mut out = BTreeMap::new();
    let mut start = 0;
    for (k, t) in LengthTercile::ALL.into_iter().enumerate() {
        let size = n / 3 + usize::from(k < n % 3);
        for r in &order[start..start + size] {
            out.insert(r.id.clone(), t);
        }
        start += size;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeResult {
    pub wer: WerResult,
    /// `(base − fused) / base`; `None` when the baseline makes no errors
    /// but the fused system does.
    pub relative_reduction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BreakdownRow {
    pub name: String,
    pub utterances: usize,
    pub baseline: WerResult,
    pub modes: Vec<ModeResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BreakdownReport {
    pub modes: Vec<String>,
    /// `All`, the three terciles, then the three word-type categories.
    pub rows: Vec<BreakdownRow>,
}

fn relative_reduction(base: &WerResult, fused: &WerResult) -> Option<f64> {
    if base.errors() == 0 {
        (fused.errors() == 0).then_some(0.0)
    } else {
        Some((base.wer - fused.wer) / base.wer)
    }
}

fn score(refs: &[&Reference], system: &SystemOutput) -> Result<WerResult> {
    let mut total = WerResult::default();
    for r in refs {
        let hyp = system
            .get(&r.id)
            .ok_or_else(|| Error::IdMismatch(format!("no hypothesis for {}", r.id)))?;
        total = total.merge(&wer(&r.words, hyp)?);
    }
    Ok(total)
}

fn check_ids(refs: &[Reference], name: &str, system: &SystemOutput) -> Result<()> {
    if system.len() != refs.len() || refs.iter().any(|r| !system.contains_key(&r.id)) {
        return Err(Error::IdMismatch(format!(
            "system {name} covers {} utterances, the references {}",
            system.len(),
            refs.len()
        )));
    }
    Ok(())
}

pub fn breakdown_report(
    refs: &[Reference],
    baseline: &SystemOutput,
    fused: &[(String, SystemOutput)],
) -> Result<BreakdownReport> {
    if refs.is_empty() {
        return Err(Error::EmptyInput("no references to report on".into()));
    }
    check_ids(refs, "baseline", baseline)?;
    for (name, sys) in fused {
        check_ids(refs, name, sys)?;
    }
    let tercile = terciles(refs);
    let mut groups: Vec<(String, Vec<&Reference>)> = vec![("All".into(), refs.iter().collect())];
    for t in LengthTercile::ALL {
        groups.push((t.as_str().into(), refs.iter().filter(|r| tercile[&r.id] == t).collect()));
    }
    for c in WordCategory::ALL {
        groups.push((c.as_str().into(), refs.iter().filter(|r| r.category == c).collect()));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (name, members) in groups {
        let base = score(&members, baseline)?;
        let modes = fused
            .iter()
            .map(|(_, sys)| {
                let w = score(&members, sys)?;
                Ok(ModeResult {
                    relative_reduction: relative_reduction(&base, &w),
                    wer: w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(BreakdownRow {
            name,
            utterances: members.len(),
            baseline: base,
            modes,
        });
    }
    Ok(BreakdownReport {
        modes: fused.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{:.1}%", 100.0 * v))
}

impl BreakdownReport {
    pub fn row(&self, name: &str) -> Option<&BreakdownRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned table: WER per system and relative reduction per mode.
    pub fn to_table(&self) -> String {
        let mut head = format!("{:<12} {:>5} {:>8}", "category", "utts", "baseline");
        for m in &self.modes {
            head.push_str(&format!(" {:>8} {:>8}", m, "rel"));
        }
        let mut out = head;
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>5} {:>7.2}%",
                r.name,
                r.utterances,
                100.0 * r.baseline.wer
            ));
            for m in &r.modes {
                out.push_str(&format!(" {:>7.2}% {:>8}", 100.0 * m.wer.wer, pct(m.relative_reduction)));
            }
            out.push('\n');
        }
        out
    }

    /// Tab-separated, one line per (category, mode), full precision.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("category\tutterances\tbaseline_wer\tmode\tfused_wer\trelative_reduction\n");
        for r in &self.rows {
            for (name, m) in self.modes.iter().zip(&r.modes) {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    r.name,
                    r.utterances,
                    r.baseline.wer,
                    name,
                    m.wer.wer,
                    m.relative_reduction.map_or_else(|| "nan".into(), |v| v.to_string())
                ));
            }
        }
        out
    }
}
