//! Corpus data model and JSONL manifest I/O.
//!
//! One JSON object per line. Keys are emitted in a fixed order:
//! `id, audio_path, duration_s, transcript, confidence, country, source,
//! word_alignments, offset_s`. Optional keys are omitted when absent, and an
//! explicit `null` on input is treated the same as an absent key. Floats use
//! the shortest representation that round-trips.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("line {line}: malformed JSON: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: record {id:?}: {field}: {message}")]
    Validation {
        line: usize,
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

/// A single timed word from a forced alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// One corpus row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: String,
    pub duration_s: f64,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty", deserialize_with = "null_as_empty")]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_alignments: Option<Vec<WordSpan>>,
    /// Start of this record inside `audio_path`, set on segments cut from a
    /// longer parent utterance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_s: Option<f64>,
}

fn null_as_empty<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    Ok(Option::<String>::deserialize(d)?.unwrap_or_default())
}

impl UtteranceRecord {
    pub fn new(id: impl Into<String>, audio_path: impl Into<String>, duration_s: f64, transcript: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            audio_path: audio_path.into(),
            duration_s,
            transcript: transcript.into(),
            confidence: None,
            country: None,
            source: String::new(),
            word_alignments: None,
            offset_s: None,
        }
    }

    /// Words are maximal runs of non-whitespace; punctuation stays attached.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.transcript.split_whitespace()
    }

    pub fn word_count(&self) -> usize {
        self.words().count()
    }

    /// Checks every record invariant, returning the offending field and reason.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.id.is_empty() {
            return Err(("id", "must be non-empty".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(("duration_s", format!("must be finite and > 0, got {}", self.duration_s)));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(("confidence", format!("confidence out of range [0,1]: {c}")));
            }
        }
        if let Some(country) = &self.country {
            if country.len() != 2 || !country.bytes().all(|b| b.is_ascii_uppercase()) {
                return Err(("country", format!("expected ISO 3166-1 alpha-2 code, got {country:?}")));
            }
        }
        if let Some(off) = self.offset_s {
            if !(off.is_finite() && off >= 0.0) {
                return Err(("offset_s", format!("must be finite and >= 0, got {off}")));
            }
        }
        if let Some(spans) = &self.word_alignments {
            let mut prev_end = 0.0_f64;
            for (i, span) in spans.iter().enumerate() {
                if span.word.is_empty() {
                    return Err(("word_alignments", format!("span {i} has an empty word")));
                }
                if !(span.start_s.is_finite() && span.end_s.is_finite()) || span.start_s < 0.0 || span.start_s >= span.end_s {
                    return Err((
                        "word_alignments",
                        format!("span {i} needs 0 <= start_s < end_s, got [{}, {}]", span.start_s, span.end_s),
                    ));
                }
                if span.start_s < prev_end {
                    return Err(("word_alignments", format!("span {i} overlaps or precedes the previous span")));
                }
                if span.end_s > self.duration_s {
                    return Err(("word_alignments", format!("span {i} ends after duration_s")));
                }
                prev_end = span.end_s;
            }
            if !spans.iter().map(|s| s.word.as_str()).eq(self.words()) {
                return Err(("word_alignments", "aligned words differ from transcript words".into()));
            }
        }
        Ok(())
    }
}

/// Teacher and re-decode hypotheses for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisPair {
    pub id: String,
    pub primary_hyp: String,
    pub secondary_hyp: String,
}

/// Minimal `{id, transcript}` view used for scoring; other keys are ignored.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TranscriptEntry {
    pub id: String,
    pub transcript: String,
}

fn parse_lines<T, R, F>(reader: R, mut validate: F) -> Result<Vec<T>, ManifestError>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
    F: FnMut(&T, usize) -> Result<String, ManifestError>,
{
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| ManifestError::Io { line: line_no, source })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|source| ManifestError::Parse { line: line_no, source })?;
        let id = validate(&item, line_no)?;
        if !seen.insert(id.clone()) {
            return Err(ManifestError::DuplicateId { line: line_no, id });
        }
        out.push(item);
    }
    Ok(out)
}

/// Reads and validates a manifest. Records come back in file order.
pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<UtteranceRecord>, ManifestError> {
    parse_lines(reader, |rec: &UtteranceRecord, line| {
        rec.check().map_err(|(field, message)| ManifestError::Validation {
            line,
            id: rec.id.clone(),
            field,
            message,
        })?;
        Ok(rec.id.clone())
    })
}

pub fn parse_hypothesis_pairs<R: BufRead>(reader: R) -> Result<Vec<HypothesisPair>, ManifestError> {
    parse_lines(reader, |p: &HypothesisPair, line| {
        if p.id.is_empty() {
            return Err(ManifestError::Validation {
                line,
                id: String::new(),
                field: "id",
                message: "must be non-empty".into(),
            });
        }
        Ok(p.id.clone())
    })
}

pub fn parse_transcripts<R: BufRead>(reader: R) -> Result<Vec<TranscriptEntry>, ManifestError> {
    parse_lines(reader, |e: &TranscriptEntry, line| {
        if e.id.is_empty() {
            return Err(ManifestError::Validation {
                line,
                id: String::new(),
                field: "id",
                message: "must be non-empty".into(),
            });
        }
        Ok(e.id.clone())
    })
}

fn write_lines<T: Serialize, W: Write>(items: &[T], mut w: W) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_manifest<W: Write>(records: &[UtteranceRecord], w: W) -> std::io::Result<()> {
    write_lines(records, w)
}

pub fn write_hypothesis_pairs<W: Write>(pairs: &[HypothesisPair], w: W) -> std::io::Result<()> {
    write_lines(pairs, w)
}

pub fn manifest_to_bytes(records: &[UtteranceRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_manifest(records, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Sum of `duration_s` in hours, accumulated in slice order.
pub fn total_hours(records: &[UtteranceRecord]) -> f64 {
    records.iter().map(|r| r.duration_s).sum::<f64>() / 3600.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<UtteranceRecord>, ManifestError> {
        parse_manifest(s.as_bytes())
    }

    #[test]
    fn parses_minimal_line() {
        let recs = parse(r#"{"id":"u1","audio_path":"a.wav","duration_s":10.0,"transcript":"hello world"}"#).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].word_count(), 2);
        assert_eq!(recs[0].confidence, None);
        assert_eq!(recs[0].source, "");
    }

    #[test]
    fn empty_input_gives_empty_list() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("\n\n").unwrap().is_empty());
    }

    #[test]
    fn confidence_out_of_range_is_rejected() {
        let err = parse(r#"{"id":"u1","audio_path":"a","duration_s":1.0,"transcript":"x","confidence":1.5}"#).unwrap_err();
        match err {
            ManifestError::Validation { field, message, id, line } => {
                assert_eq!(field, "confidence");
                assert_eq!(id, "u1");
                assert_eq!(line, 1);
                assert!(message.contains("confidence out of range"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let input = "{\"id\":\"a\",\"audio_path\":\"a\",\"duration_s\":1,\"transcript\":\"\"}\n{not json\n";
        match parse(input).unwrap_err() {
            ManifestError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let l = r#"{"id":"a","audio_path":"a","duration_s":1,"transcript":""}"#;
        match parse(&format!("{l}\n{l}\n")).unwrap_err() {
            ManifestError::DuplicateId { line, id } => {
                assert_eq!(line, 2);
                assert_eq!(id, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn null_optional_fields_equal_absent() {
        let a = parse(r#"{"id":"a","audio_path":"p","duration_s":2,"transcript":"x","confidence":null,"country":null,"source":null,"word_alignments":null}"#).unwrap();
        let b = parse(r#"{"id":"a","audio_path":"p","duration_s":2,"transcript":"x"}"#).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn field_invariants() {
        let bad = [
            (r#"{"id":"a","audio_path":"p","duration_s":0,"transcript":""}"#, "duration_s"),
            (r#"{"id":"","audio_path":"p","duration_s":1,"transcript":""}"#, "id"),
            (r#"{"id":"a","audio_path":"p","duration_s":1,"transcript":"","country":"usa"}"#, "country"),
            (
                r#"{"id":"a","audio_path":"p","duration_s":1,"transcript":"x y","word_alignments":[{"word":"x","start_s":0,"end_s":0.5},{"word":"y","start_s":0.4,"end_s":0.9}]}"#,
                "word_alignments",
            ),
            (
                r#"{"id":"a","audio_path":"p","duration_s":1,"transcript":"x y","word_alignments":[{"word":"x","start_s":0,"end_s":0.5}]}"#,
                "word_alignments",
            ),
            (
                r#"{"id":"a","audio_path":"p","duration_s":1,"transcript":"x","word_alignments":[{"word":"x","start_s":0,"end_s":1.5}]}"#,
                "word_alignments",
            ),
            (
                r#"{"id":"a","audio_path":"p","duration_s":1,"transcript":"x","word_alignments":[{"word":"x","start_s":0.5,"end_s":0.5}]}"#,
                "word_alignments",
            ),
        ];
        for (line, want) in bad {
            match parse(line).unwrap_err() {
                ManifestError::Validation { field, .. } => assert_eq!(field, want, "{line}"),
                other => panic!("unexpected {other:?} for {line}"),
            }
        }
    }

    #[test]
    fn writer_omits_absent_keys_and_keeps_order() {
        let r1 = UtteranceRecord::new("r1", "a.wav", 1.5, "hi");
        let mut r2 = UtteranceRecord::new("r2", "b.wav", 2.0, "yo");
        r2.confidence = Some(0.25);
        r2.country = Some("US".into());
        let text = String::from_utf8(manifest_to_bytes(&[r1, r2])).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], r#"{"id":"r1","audio_path":"a.wav","duration_s":1.5,"transcript":"hi"}"#);
        assert_eq!(
            lines[1],
            r#"{"id":"r2","audio_path":"b.wav","duration_s":2.0,"transcript":"yo","confidence":0.25,"country":"US"}"#
        );
    }

    #[test]
    fn pairs_round_trip() {
        let pairs = vec![HypothesisPair { id: "a".into(), primary_hyp: "x y".into(), secondary_hyp: "x".into() }];
        let mut buf = Vec::new();
        write_hypothesis_pairs(&pairs, &mut buf).unwrap();
        assert_eq!(parse_hypothesis_pairs(buf.as_slice()).unwrap(), pairs);
    }

    #[test]
    fn transcripts_ignore_extra_keys() {
        let e = parse_transcripts(r#"{"id":"a","transcript":"x","duration_s":3}"#.as_bytes()).unwrap();
        assert_eq!(e[0].transcript, "x");
    }
}
