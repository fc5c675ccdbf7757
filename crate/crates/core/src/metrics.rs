//! Text normalization, word alignment, WER and rare-word WER.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::TranscriptEntry;

/// ASCII punctuation stripped from token edges.
pub const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty reference corpus (N=0)")]
    EmptyReference,
    #[error("no rare reference words (N_r=0)")]
    NoRareWords,
    #[error("empty corpus: no tokens to count")]
    EmptyCorpus,
    #[error("coverage must be in (0, 1], got {0}")]
    Coverage(f64),
    #[error("id {0:?} has no matching hypothesis")]
    MissingHypothesis(String),
    #[error("hypothesis id {0:?} has no matching reference")]
    MissingReference(String),
    #[error("frequency table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizerConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub remove_fillers: bool,
    pub filler_set: Vec<String>,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            remove_fillers: false,
            filler_set: vec!["uh".into(), "um".into()],
        }
    }
}

impl NormalizerConfig {
    pub fn with_fillers_removed(mut self) -> Self {
        self.remove_fillers = true;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        for f in &self.filler_set {
            if f.chars().any(|c| c.is_uppercase() || PUNCTUATION.contains(c)) {
                return Err(format!("filler {f:?} must be lowercase and punctuation-free"));
            }
        }
        Ok(())
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii() && PUNCTUATION.contains(c)
}

/// Splits on whitespace, then optionally lowercases, strips edge punctuation
/// and drops fillers, in that order. Tokens reduced to nothing are removed.
pub fn normalize(text: &str, config: &NormalizerConfig) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let mut tok = if config.lowercase { raw.to_lowercase() } else { raw.to_string() };
            if config.strip_punctuation {
                tok = tok.trim_matches(is_punct).to_string();
            }
            if tok.is_empty() || (config.remove_fillers && config.filler_set.contains(&tok)) {
                None
            } else {
                Some(tok)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Match { ref_index: usize, hyp_index: usize },
    Substitute { ref_index: usize, hyp_index: usize },
    Delete { ref_index: usize },
    Insert { hyp_index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EditAlignment {
    pub ops: Vec<EditOp>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditAlignment {
    pub fn cost(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn matches(&self) -> usize {
        self.ref_len - self.substitutions - self.deletions
    }

    pub fn counts(&self) -> ErrorCounts {
        ErrorCounts {
            substitutions: self.substitutions as u64,
            deletions: self.deletions as u64,
            insertions: self.insertions as u64,
            ref_words: self.ref_len as u64,
        }
    }
}

/// Minimum-edit alignment with unit costs. Backtrace ties prefer
/// match, then substitution, then deletion, then insertion.
pub fn edit_align<S: AsRef<str>, H: AsRef<str>>(reference: &[S], hypothesis: &[H]) -> EditAlignment {
    let n = reference.len();
    let m = hypothesis.len();
    let width = m + 1;
    let mut dp = vec![0u32; (n + 1) * width];
    for (j, cell) in dp[..width].iter_mut().enumerate() {
        *cell = j as u32;
    }
    for i in 1..=n {
        dp[i * width] = i as u32;
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = dp[(i - 1) * width + j - 1] + u32::from(!same);
            let del = dp[(i - 1) * width + j] + 1;
            let ins = dp[i * width + j - 1] + 1;
            dp[i * width + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut s, mut d, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * width + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = dp[(i - 1) * width + j - 1];
            if same && here == diag {
                ops.push(EditOp::Match { ref_index: i - 1, hyp_index: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && here == diag + 1 {
                ops.push(EditOp::Substitute { ref_index: i - 1, hyp_index: j - 1 });
                s += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dp[(i - 1) * width + j] + 1 {
            ops.push(EditOp::Delete { ref_index: i - 1 });
            d += 1;
            i -= 1;
        } else {
            ops.push(EditOp::Insert { hyp_index: j - 1 });
            ins += 1;
            j -= 1;
        }
    }
    ops.reverse();
    EditAlignment { ops, substitutions: s, deletions: d, insertions: ins, ref_len: n }
}

/// Summed S/D/I/N; merging is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorCounts {
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub ref_words: u64,
}

impl ErrorCounts {
    pub fn merge(self, other: Self) -> Self {
        Self {
            substitutions: self.substitutions + other.substitutions,
            deletions: self.deletions + other.deletions,
            insertions: self.insertions + other.insertions,
            ref_words: self.ref_words + other.ref_words,
        }
    }

    pub fn errors(&self) -> u64 {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WerStats {
    #[serde(rename = "S")]
    pub substitutions: u64,
    #[serde(rename = "D")]
    pub deletions: u64,
    #[serde(rename = "I")]
    pub insertions: u64,
    #[serde(rename = "N")]
    pub ref_words: u64,
    pub wer: f64,
}

impl TryFrom<ErrorCounts> for WerStats {
    type Error = MetricsError;

    fn try_from(c: ErrorCounts) -> Result<Self, MetricsError> {
        if c.ref_words == 0 {
            return Err(MetricsError::EmptyReference);
        }
        Ok(Self {
            substitutions: c.substitutions,
            deletions: c.deletions,
            insertions: c.insertions,
            ref_words: c.ref_words,
            wer: c.errors() as f64 / c.ref_words as f64,
        })
    }
}

/// Corpus-level WER: counts are summed over utterances before dividing.
pub fn wer<'a, I>(alignments: I) -> Result<WerStats, MetricsError>
where
    I: IntoIterator<Item = &'a EditAlignment>,
{
    alignments
        .into_iter()
        .map(EditAlignment::counts)
        .fold(ErrorCounts::default(), ErrorCounts::merge)
        .try_into()
}

/// Word counts plus the common set covering `coverage` of the token mass.
#[derive(Debug, Clone, PartialEq)]
pub struct WordFrequencyTable {
    ranked: Vec<(String, u64)>,
    total: u64,
    coverage: f64,
    common_len: usize,
    common: HashSet<String>,
}

impl WordFrequencyTable {
    /// The common set is the shortest prefix of words ranked by
    /// (count desc, word asc) whose cumulative count reaches
    /// `coverage * total`. The word crossing the boundary is common.
    pub fn from_counts<I>(counts: I, coverage: f64) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (String, u64)>,
    {
        if !(coverage > 0.0 && coverage <= 1.0) {
            return Err(MetricsError::Coverage(coverage));
        }
        let mut merged: HashMap<String, u64> = HashMap::new();
        for (w, c) in counts {
            *merged.entry(w).or_default() += c;
        }
        let mut ranked: Vec<(String, u64)> = merged.into_iter().filter(|(_, c)| *c > 0).collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let total: u64 = ranked.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return Err(MetricsError::EmptyCorpus);
        }
        let target = coverage * total as f64;
        let mut cumulative = 0u64;
        let mut common_len = ranked.len();
        for (i, (_, c)) in ranked.iter().enumerate() {
            cumulative += c;
            if cumulative as f64 >= target {
                common_len = i + 1;
                break;
            }
        }
        let common = ranked[..common_len].iter().map(|(w, _)| w.clone()).collect();
        Ok(Self { ranked, total, coverage, common_len, common })
    }

    /// Same counts, common set recomputed at a different coverage.
    pub fn with_coverage(&self, coverage: f64) -> Result<Self, MetricsError> {
        Self::from_counts(self.ranked.iter().cloned(), coverage)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn ranked(&self) -> &[(String, u64)] {
        &self.ranked
    }

    pub fn common_set(&self) -> &HashSet<String> {
        &self.common
    }

    pub fn count(&self, token: &str) -> u64 {
        self.ranked.iter().find(|(w, _)| w == token).map_or(0, |(_, c)| *c)
    }

    /// `token` must already be normalized. Unseen tokens are rare.
    pub fn is_rare(&self, token: &str) -> bool {
        !self.common.contains(token)
    }

    pub fn to_file(&self) -> FreqTableFile {
        FreqTableFile {
            coverage: self.coverage,
            total: self.total,
            words: self.ranked.iter().map(|(w, c)| FreqEntry { w: w.clone(), count: *c }).collect(),
            common_set_size: self.common_len,
        }
    }

    pub fn from_file(file: FreqTableFile) -> Result<Self, MetricsError> {
        let table = Self::from_counts(file.words.into_iter().map(|e| (e.w, e.count)), file.coverage)?;
        if table.total != file.total {
            return Err(MetricsError::Table(format!("total {} does not match counts sum {}", file.total, table.total)));
        }
        if table.common_len != file.common_set_size {
            return Err(MetricsError::Table(format!(
                "common_set_size {} does not match {} recomputed at coverage {}",
                file.common_set_size, table.common_len, file.coverage
            )));
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqEntry {
    pub w: String,
    pub count: u64,
}

/// On-disk frequency table layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqTableFile {
    pub coverage: f64,
    pub total: u64,
    pub words: Vec<FreqEntry>,
    pub common_set_size: usize,
}

pub fn build_freq_table<'a, I>(transcripts: I, normalizer: &NormalizerConfig, coverage: f64) -> Result<WordFrequencyTable, MetricsError>
where
    I: IntoIterator<Item = &'a str>,
{
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(MetricsError::Coverage(coverage));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in transcripts {
        for tok in normalize(text, normalizer) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    WordFrequencyTable::from_counts(counts, coverage)
}

/// Normalizes a raw word and looks it up. A word that normalizes away
/// (pure punctuation, filler) is not rare.
pub fn is_rare(word: &str, table: &WordFrequencyTable, normalizer: &NormalizerConfig) -> bool {
    normalize(word, normalizer).iter().any(|t| table.is_rare(t))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RareCounts {
    pub substitutions: u64,
    pub deletions: u64,
    pub rare_ref_words: u64,
}

impl RareCounts {
    pub fn merge(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            rare_ref_words: self.rare_ref_words + o.rare_ref_words,
        }
    }
}

/// Substitutions and deletions landing on rare reference words.
/// Insertions have no reference word and are never counted.
pub fn rare_counts<S: AsRef<str>>(reference: &[S], alignment: &EditAlignment, table: &WordFrequencyTable) -> RareCounts {
    let rare: Vec<bool> = reference.iter().map(|w| table.is_rare(w.as_ref())).collect();
    let mut c = RareCounts {
        rare_ref_words: rare.iter().filter(|r| **r).count() as u64,
        ..Default::default()
    };
    for op in &alignment.ops {
        match *op {
            EditOp::Substitute { ref_index, .. } if rare[ref_index] => c.substitutions += 1,
            EditOp::Delete { ref_index } if rare[ref_index] => c.deletions += 1,
            _ => {}
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RareWerStats {
    #[serde(rename = "S_r")]
    pub substitutions: u64,
    #[serde(rename = "D_r")]
    pub deletions: u64,
    #[serde(rename = "N_r")]
    pub rare_ref_words: u64,
    pub rare_wer: f64,
}

impl TryFrom<RareCounts> for RareWerStats {
    type Error = MetricsError;

    fn try_from(c: RareCounts) -> Result<Self, MetricsError> {
        if c.rare_ref_words == 0 {
            return Err(MetricsError::NoRareWords);
        }
        Ok(Self {
            substitutions: c.substitutions,
            deletions: c.deletions,
            rare_ref_words: c.rare_ref_words,
            rare_wer: (c.substitutions + c.deletions) as f64 / c.rare_ref_words as f64,
        })
    }
}

/// Full score report. Rare fields are present only when a table was given.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    #[serde(flatten)]
    pub wer: WerStats,
    #[serde(flatten)]
    pub rare: Option<RareWerStats>,
}

/// Pairs reference and hypothesis entries by id, in reference order.
/// Every id must appear on both sides.
pub fn join_by_id<'a>(
    refs: &'a [TranscriptEntry],
    hyps: &'a [TranscriptEntry],
) -> Result<Vec<(&'a TranscriptEntry, &'a TranscriptEntry)>, MetricsError> {
    let by_id: HashMap<&str, &TranscriptEntry> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        let h = by_id.get(r.id.as_str()).ok_or_else(|| MetricsError::MissingHypothesis(r.id.clone()))?;
        out.push((r, *h));
    }
    if hyps.len() != refs.len() {
        let ref_ids: HashSet<&str> = refs.iter().map(|r| r.id.as_str()).collect();
        if let Some(h) = hyps.iter().find(|h| !ref_ids.contains(h.id.as_str())) {
            return Err(MetricsError::MissingReference(h.id.clone()));
        }
    }
    Ok(out)
}

/// Corpus WER plus, with a table, rare-word WER. Per-utterance work runs on
/// the current rayon pool; counts are merged in reference order.
pub fn score(
    refs: &[TranscriptEntry],
    hyps: &[TranscriptEntry],
    table: Option<&WordFrequencyTable>,
    normalizer: &NormalizerConfig,
) -> Result<ScoreReport, MetricsError> {
    use rayon::prelude::*;

    let joined = join_by_id(refs, hyps)?;
    let per_utt: Vec<(ErrorCounts, RareCounts)> = joined
        .par_iter()
        .map(|(r, h)| {
            let rt = normalize(&r.transcript, normalizer);
            let ht = normalize(&h.transcript, normalizer);
            let al = edit_align(&rt, &ht);
            let rare = table.map(|t| rare_counts(&rt, &al, t)).unwrap_or_default();
            (al.counts(), rare)
        })
        .collect();
    let (counts, rare) = per_utt
        .into_iter()
        .fold((ErrorCounts::default(), RareCounts::default()), |(a, b), (c, d)| (a.merge(c), b.merge(d)));
    let wer = WerStats::try_from(counts)?;
    let rare = match table {
        Some(_) => Some(RareWerStats::try_from(rare)?),
        None => None,
    };
    Ok(ScoreReport { wer, rare })
}

/// Rare-word WER over joined reference/hypothesis transcripts.
pub fn rare_wer(
    refs: &[TranscriptEntry],
    hyps: &[TranscriptEntry],
    table: &WordFrequencyTable,
    normalizer: &NormalizerConfig,
) -> Result<RareWerStats, MetricsError> {
    Ok(score(refs, hyps, Some(table), normalizer)?.rare.expect("table supplied"))
}
