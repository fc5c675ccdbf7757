//! Pseudo-label data selection: words-per-second, confidence and
//! model-disagreement percentile cuts, alignment-based segmentation, and
//! the rare-word keep rule, composed into an ordered pipeline.
//!
//! Each stage first computes its corpus statistics over the records that
//! survived the earlier stages, then decides per record. A record is
//! dropped by at most one stage (the first to drop it) and outputs keep
//! input order. Segmentation replaces a record by its segments in place.

use std::collections::{BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{total_hours, HypothesisPair, UtteranceRecord, WordSpan};
use crate::metrics::{edit_align, normalize, NormalizerConfig, WordFrequencyTable};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("record {0:?} has no hypothesis pair")]
    MissingPair(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Wps,
    Confidence,
    Disagreement,
    Segmentation,
    RareData,
}

impl Stage {
    pub const DEFAULT_ORDER: [Stage; 5] = [Stage::Wps, Stage::Confidence, Stage::Disagreement, Stage::Segmentation, Stage::RareData];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Pass,
    WpsLow,
    ConfidenceLow,
    DisagreementLow,
    DisagreementHigh,
    AlignMissing,
    SegmentEmpty,
    RareData,
}

/// Keep/drop verdict. `kept` holds exactly when `reason` is `Pass`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub id: String,
    pub kept: bool,
    pub reason: DropReason,
    pub statistic: Option<f64>,
}

impl FilterDecision {
    pub fn pass(id: &str, statistic: Option<f64>) -> Self {
        Self { id: id.to_string(), kept: true, reason: DropReason::Pass, statistic }
    }

    pub fn drop(id: &str, reason: DropReason, statistic: Option<f64>) -> Self {
        debug_assert_ne!(reason, DropReason::Pass);
        Self { id: id.to_string(), kept: false, reason, statistic }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    pub wps_threshold: f64,
    pub confidence_fraction: f64,
    pub disagreement_low_fraction: f64,
    pub disagreement_high_fraction: f64,
    /// Records without a hypothesis pair are an error when set, otherwise
    /// they are kept and tallied as unscored.
    pub require_pairs: bool,
    pub max_segment_s: f64,
    pub rare_min_count: f64,
    pub rare_word_fraction: f64,
    /// Countries whose records are subject to the rare-data rule; all
    /// others (and records without a country) are kept.
    pub exempt_countries_complement: BTreeSet<String>,
    pub frequency_coverage: f64,
    pub normalizer: NormalizerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: Stage::DEFAULT_ORDER.to_vec(),
            wps_threshold: 0.5,
            confidence_fraction: 0.20,
            disagreement_low_fraction: 0.20,
            disagreement_high_fraction: 0.20,
            require_pairs: true,
            max_segment_s: 10.0,
            rare_min_count: 2.0,
            rare_word_fraction: 0.25,
            exempt_countries_complement: ["US", "GB", "CA", "AU"].into_iter().map(String::from).collect(),
            frequency_coverage: 0.90,
            normalizer: NormalizerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let err = |m: String| Err(SelectionError::Config(m));
        let mut seen = HashSet::new();
        for s in &self.stages {
            if !seen.insert(s) {
                return err(format!("stage {s:?} listed twice"));
            }
        }
        for (name, v) in [
            ("confidence_fraction", self.confidence_fraction),
            ("disagreement_low_fraction", self.disagreement_low_fraction),
            ("disagreement_high_fraction", self.disagreement_high_fraction),
            ("rare_word_fraction", self.rare_word_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.disagreement_low_fraction + self.disagreement_high_fraction > 1.0 {
            return err("disagreement_low_fraction + disagreement_high_fraction must be <= 1".into());
        }
        for (name, v) in [
            ("wps_threshold", self.wps_threshold),
            ("max_segment_s", self.max_segment_s),
            ("rare_min_count", self.rare_min_count),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.frequency_coverage > 0.0 && self.frequency_coverage <= 1.0) {
            return err(format!("frequency_coverage must be in (0, 1], got {}", self.frequency_coverage));
        }
        self.normalizer.validate().map_err(SelectionError::Config)
    }
}

/// `floor(fraction * n)`; the small slack absorbs products such as
/// `0.29 * 100 = 28.999999999999996`.
pub fn cut_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).min(n)
}

pub fn words_per_second(record: &UtteranceRecord) -> f64 {
    record.word_count() as f64 / record.duration_s
}

/// Drops records whose rate is strictly below `threshold`.
pub fn wps_filter(record: &UtteranceRecord, threshold: f64) -> FilterDecision {
    let rate = words_per_second(record);
    if rate < threshold {
        FilterDecision::drop(&record.id, DropReason::WpsLow, Some(rate))
    } else {
        FilterDecision::pass(&record.id, Some(rate))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceCut {
    /// Confidence of the last dropped record; `None` when nothing is dropped.
    pub threshold: Option<f64>,
    /// One per input record, in input order.
    pub decisions: Vec<FilterDecision>,
    pub unscored: usize,
}

fn by_value_then_id(a: &(f64, &str), b: &(f64, &str)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

/// Drops exactly `floor(fraction * n)` of the `n` records carrying a
/// confidence: the smallest under (confidence, id) order.
pub fn confidence_cut(records: &[UtteranceRecord], fraction: f64) -> ConfidenceCut {
    let mut scored: Vec<(f64, &str)> = records.iter().filter_map(|r| r.confidence.map(|c| (c, r.id.as_str()))).collect();
    let unscored = records.len() - scored.len();
    let k = cut_count(fraction, scored.len());
    scored.sort_unstable_by(by_value_then_id);
    let dropped: HashSet<&str> = scored[..k].iter().map(|(_, id)| *id).collect();
    let threshold = k.checked_sub(1).map(|i| scored[i].0);
    let decisions = records
        .iter()
        .map(|r| {
            if dropped.contains(r.id.as_str()) {
                FilterDecision::drop(&r.id, DropReason::ConfidenceLow, r.confidence)
            } else {
                FilterDecision::pass(&r.id, r.confidence)
            }
        })
        .collect();
    ConfidenceCut { threshold, decisions, unscored }
}

/// Word-level edit distance between the two hypotheses over the longer length.
pub fn disagreement_score(pair: &HypothesisPair) -> f64 {
    let a: Vec<&str> = pair.primary_hyp.split_whitespace().collect();
    let b: Vec<&str> = pair.secondary_hyp.split_whitespace().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    edit_align(&a, &b).cost() as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementCut {
    pub low_threshold: Option<f64>,
    pub high_threshold: Option<f64>,
    pub decisions: Vec<FilterDecision>,
}

/// Core of the disagreement cut over precomputed `(id, score)` pairs.
/// Returns decisions in input order.
pub fn disagreement_cut_scores(scores: &[(&str, f64)], low_fraction: f64, high_fraction: f64) -> DisagreementCut {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&i, &j| by_value_then_id(&(scores[i].1, scores[i].0), &(scores[j].1, scores[j].0)));
    let low = cut_count(low_fraction, n);
    let high_start = n.saturating_sub(cut_count(high_fraction, n)).max(low);
    let mut reason = vec![DropReason::Pass; n];
    for &i in &order[..low] {
        reason[i] = DropReason::DisagreementLow;
    }
    for &i in &order[high_start..] {
        reason[i] = DropReason::DisagreementHigh;
    }
    let decisions = scores
        .iter()
        .zip(reason)
        .map(|(&(id, s), r)| match r {
            DropReason::Pass => FilterDecision::pass(id, Some(s)),
            r => FilterDecision::drop(id, r, Some(s)),
        })
        .collect();
    DisagreementCut {
        low_threshold: low.checked_sub(1).map(|i| scores[order[i]].1),
        high_threshold: (high_start < n).then(|| scores[order[high_start]].1),
        decisions,
    }
}

/// Drops the `floor(low * n)` least and `floor(high * n)` most disagreeing
/// pairs under (score, id) order.
pub fn disagreement_cut(pairs: &[HypothesisPair], low_fraction: f64, high_fraction: f64) -> DisagreementCut {
    let scores: Vec<(&str, f64)> = pairs.par_iter().map(|p| (p.id.as_str(), disagreement_score(p))).collect();
    disagreement_cut_scores(&scores, low_fraction, high_fraction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub record: UtteranceRecord,
    /// Single word longer than the segment limit.
    pub oversize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segmentation {
    Segments(Vec<Segment>),
    Dropped(DropReason),
}

/// Greedy left-to-right packing of aligned words into segments no longer
/// than `max_segment_s`. Child ids are `{parent}#k` from k = 0; child
/// alignments are relative to the child start, recorded in `offset_s`.
pub fn segment_utterance(record: &UtteranceRecord, max_segment_s: f64) -> Segmentation {
    let Some(spans) = &record.word_alignments else {
        return Segmentation::Dropped(DropReason::AlignMissing);
    };
    if spans.is_empty() {
        return Segmentation::Dropped(DropReason::SegmentEmpty);
    }
    let base_offset = record.offset_s.unwrap_or(0.0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < spans.len() {
        let start = spans[i].start_s;
        let mut j = i + 1;
        while j < spans.len() && spans[j].end_s - start <= max_segment_s {
            j += 1;
        }
        let words = &spans[i..j];
        let end = words[words.len() - 1].end_s;
        let shifted: Vec<WordSpan> = words
            .iter()
            .map(|w| WordSpan { word: w.word.clone(), start_s: w.start_s - start, end_s: w.end_s - start })
            .collect();
        let child = UtteranceRecord {
            id: format!("{}#{}", record.id, out.len()),
            audio_path: record.audio_path.clone(),
            duration_s: end - start,
            transcript: words.iter().map(|w| w.word.as_str()).collect::<Vec<_>>().join(" "),
            confidence: record.confidence,
            country: record.country.clone(),
            source: record.source.clone(),
            word_alignments: Some(shifted),
            offset_s: Some(base_offset + start),
        };
        out.push(Segment { oversize: end - start > max_segment_s, record: child });
        i = j;
    }
    Segmentation::Segments(out)
}

/// Keeps a record from a filtered country only if its rare-word count `R`
/// satisfies `R >= min(rare_min_count, rare_word_fraction * W)`.
/// `W` and `R` count normalized tokens.
pub fn rare_data_keep(record: &UtteranceRecord, table: &WordFrequencyTable, config: &PipelineConfig) -> FilterDecision {
    let filtered = record.country.as_ref().is_some_and(|c| config.exempt_countries_complement.contains(c));
    let tokens = normalize(&record.transcript, &config.normalizer);
    let rare = tokens.iter().filter(|t| table.is_rare(t)).count();
    let stat = Some(rare as f64);
    if !filtered {
        return FilterDecision::pass(&record.id, stat);
    }
    let needed = config.rare_min_count.min(config.rare_word_fraction * tokens.len() as f64);
    if rare as f64 >= needed {
        FilterDecision::pass(&record.id, stat)
    } else {
        FilterDecision::drop(&record.id, DropReason::RareData, stat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub input_records: usize,
    pub dropped: usize,
    pub dropped_hours: f64,
    /// wps: the rate threshold; confidence: last dropped confidence;
    /// disagreement: largest low-side score dropped.
    pub threshold: Option<f64>,
    /// disagreement only: smallest high-side score dropped.
    pub threshold_high: Option<f64>,
    pub unscored: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments_emitted: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oversize_segments: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub input_records: usize,
    pub input_hours: f64,
    pub stages: Vec<StageReport>,
    pub kept_records: usize,
    pub kept_hours: f64,
    pub dropped_records: usize,
    pub dropped_hours: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub kept: Vec<UtteranceRecord>,
    pub dropped: Vec<UtteranceRecord>,
    /// One per output unit (kept or dropped), in output order.
    pub decisions: Vec<FilterDecision>,
    pub report: PipelineReport,
}

/// Position of a unit in the output: input index, then segment index + 1
/// (0 for records that were never segmented).
type Key = (usize, usize);

struct Unit {
    key: Key,
    record: UtteranceRecord,
    decision: FilterDecision,
}

/// Runs the configured stages over `manifest`. Auxiliary inputs are checked
/// against the enabled stages before any record is touched.
pub fn run_pipeline(
    config: &PipelineConfig,
    manifest: &[UtteranceRecord],
    pairs: Option<&[HypothesisPair]>,
    table: Option<&WordFrequencyTable>,
) -> Result<PipelineOutput, SelectionError> {
    config.validate()?;
    if config.stages.contains(&Stage::Disagreement) && pairs.is_none() {
        return Err(SelectionError::Config("disagreement stage enabled but no hypothesis pairs supplied".into()));
    }
    if config.stages.contains(&Stage::RareData) && table.is_none() {
        return Err(SelectionError::Config("rare_data stage enabled but no frequency table supplied".into()));
    }
    let pair_index: HashMap<&str, &HypothesisPair> = pairs.unwrap_or(&[]).iter().map(|p| (p.id.as_str(), p)).collect();

    let mut alive: Vec<Unit> = manifest
        .iter()
        .enumerate()
        .map(|(i, r)| Unit { key: (i, 0), decision: FilterDecision::pass(&r.id, None), record: r.clone() })
        .collect();
    let mut dropped: Vec<Unit> = Vec::new();
    let mut stages = Vec::with_capacity(config.stages.len());

    for &stage in &config.stages {
        let input_records = alive.len();
        let mut report = StageReport {
            stage,
            input_records,
            dropped: 0,
            dropped_hours: 0.0,
            threshold: None,
            threshold_high: None,
            unscored: 0,
            segments_emitted: None,
            oversize_segments: None,
        };
        let decisions: Vec<FilterDecision> = match stage {
            Stage::Wps => {
                report.threshold = Some(config.wps_threshold);
                alive.par_iter().map(|u| wps_filter(&u.record, config.wps_threshold)).collect()
            }
            Stage::Confidence => {
                let records: Vec<UtteranceRecord> = alive.iter().map(|u| u.record.clone()).collect();
                let cut = confidence_cut(&records, config.confidence_fraction);
                report.threshold = cut.threshold;
                report.unscored = cut.unscored;
                cut.decisions
            }
            Stage::Disagreement => {
                let scores: Vec<Option<f64>> = alive
                    .par_iter()
                    .map(|u| {
                        // Segments share the hypotheses of the utterance they were cut from.
                        let parent = manifest[u.key.0].id.as_str();
                        pair_index.get(u.record.id.as_str()).or_else(|| pair_index.get(parent)).map(|p| disagreement_score(p))
                    })
                    .collect();
                if config.require_pairs {
                    if let Some(pos) = scores.iter().position(Option::is_none) {
                        return Err(SelectionError::MissingPair(alive[pos].record.id.clone()));
                    }
                }
                let scored: Vec<(&str, f64)> = alive
                    .iter()
                    .zip(&scores)
                    .filter_map(|(u, s)| s.map(|s| (u.record.id.as_str(), s)))
                    .collect();
                report.unscored = input_records - scored.len();
                let cut = disagreement_cut_scores(&scored, config.disagreement_low_fraction, config.disagreement_high_fraction);
                report.threshold = cut.low_threshold;
                report.threshold_high = cut.high_threshold;
                let mut by_scored = cut.decisions.into_iter();
                alive
                    .iter()
                    .zip(&scores)
                    .map(|(u, s)| match s {
                        Some(_) => by_scored.next().expect("one decision per scored record"),
                        None => FilterDecision::pass(&u.record.id, None),
                    })
                    .collect()
            }
            Stage::Segmentation => {
                let outcomes: Vec<Segmentation> =
                    alive.par_iter().map(|u| segment_utterance(&u.record, config.max_segment_s)).collect();
                let mut next = Vec::with_capacity(alive.len());
                let (mut emitted, mut oversize) = (0, 0);
                for (unit, outcome) in std::mem::take(&mut alive).into_iter().zip(outcomes) {
                    match outcome {
                        Segmentation::Segments(segs) => {
                            emitted += segs.len();
                            for (k, seg) in segs.into_iter().enumerate() {
                                oversize += usize::from(seg.oversize);
                                next.push(Unit {
                                    key: (unit.key.0, k + 1),
                                    decision: FilterDecision::pass(&seg.record.id, None),
                                    record: seg.record,
                                });
                            }
                        }
                        Segmentation::Dropped(reason) => {
                            report.dropped += 1;
                            report.dropped_hours += unit.record.duration_s / 3600.0;
                            dropped.push(Unit { decision: FilterDecision::drop(&unit.record.id, reason, None), ..unit });
                        }
                    }
                }
                alive = next;
                report.segments_emitted = Some(emitted);
                report.oversize_segments = Some(oversize);
                stages.push(report);
                continue;
            }
            Stage::RareData => {
                let table = table.expect("checked above");
                alive.par_iter().map(|u| rare_data_keep(&u.record, table, config)).collect()
            }
        };

        let mut survivors = Vec::with_capacity(alive.len());
        for (unit, decision) in std::mem::take(&mut alive).into_iter().zip(decisions) {
            if decision.kept {
                survivors.push(Unit { decision, ..unit });
            } else {
                report.dropped += 1;
                report.dropped_hours += unit.record.duration_s / 3600.0;
                dropped.push(Unit { decision, ..unit });
            }
        }
        alive = survivors;
        stages.push(report);
    }

    dropped.sort_by_key(|u| u.key);
    let mut decisions = Vec::with_capacity(alive.len() + dropped.len());
    {
        let (mut a, mut d) = (alive.iter().peekable(), dropped.iter().peekable());
        loop {
            let take_alive = match (a.peek(), d.peek()) {
                (Some(x), Some(y)) => x.key < y.key,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            let unit = if take_alive { a.next() } else { d.next() }.expect("peeked");
            decisions.push(unit.decision.clone());
        }
    }
    let kept: Vec<UtteranceRecord> = alive.into_iter().map(|u| u.record).collect();
    let dropped: Vec<UtteranceRecord> = dropped.into_iter().map(|u| u.record).collect();
    let report = PipelineReport {
        input_records: manifest.len(),
        input_hours: total_hours(manifest),
        stages,
        kept_records: kept.len(),
        kept_hours: total_hours(&kept),
        dropped_records: dropped.len(),
        dropped_hours: total_hours(&dropped),
    };
    Ok(PipelineOutput { kept, dropped, decisions, report })
}
