mod common;

use asrkit::manifest::{
    manifest_to_bytes, parse_hypothesis_pairs, parse_manifest, write_hypothesis_pairs, write_manifest, HypothesisPair,
    ManifestError, UtteranceRecord, WordSpan,
};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = UtteranceRecord> {
    (
        "[^\\s]{1,12}",
        "\\PC{0,20}",
        1e-3f64..1e5,
        prop::collection::vec("[^\\s]{1,6}", 0..8),
        prop::option::of(0.0f64..=1.0),
        prop::option::of("[A-Z]{2}"),
        "[a-z_]{0,8}",
        prop::bool::ANY,
        prop::option::of(0.0f64..1e4),
        prop::collection::vec(0.0f64..1.0, 16),
    )
        .prop_map(|(id, path, duration, words, confidence, country, source, aligned, offset, cuts)| {
            let mut r = UtteranceRecord::new(id, path, duration, words.join(" "));
            r.confidence = confidence;
            r.country = country;
            r.source = source;
            r.offset_s = offset;
            if aligned {
                let mut points: Vec<f64> = cuts[..2 * words.len()].iter().map(|c| c * duration).collect();
                points.sort_by(f64::total_cmp);
                points.dedup();
                if points.len() == 2 * words.len() {
                    r.word_alignments = Some(
                        words
                            .iter()
                            .zip(points.chunks(2))
                            .map(|(w, p)| WordSpan { word: w.clone(), start_s: p[0], end_s: p[1] })
                            .collect(),
                    );
                }
            }
            r
        })
}

fn unique(records: Vec<UtteranceRecord>) -> Vec<UtteranceRecord> {
    let mut seen = std::collections::HashSet::new();
    records.into_iter().filter(|r| seen.insert(r.id.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn write_then_parse_is_identity(records in prop::collection::vec(record(), 0..20).prop_map(unique)) {
        let bytes = manifest_to_bytes(&records);
        let parsed = parse_manifest(&bytes[..]).unwrap();
        prop_assert_eq!(&parsed, &records);
        prop_assert_eq!(manifest_to_bytes(&parsed), bytes.clone());
        let mut via_writer = Vec::new();
        write_manifest(&records, &mut via_writer).unwrap();
        prop_assert_eq!(via_writer, bytes);
    }

    #[test]
    fn invalid_records_are_rejected_with_field(r in record(), which in 0usize..6) {
        let mut bad = r.clone();
        let field = match which {
            0 => { bad.duration_s = -bad.duration_s; "duration_s" }
            1 => { bad.confidence = Some(1.0 + bad.duration_s); "confidence" }
            2 => { bad.country = Some("usa".into()); "country" }
            3 => { bad.id.clear(); "id" }
            4 => { bad.offset_s = Some(-1.0); "offset_s" }
            _ => {
                bad.word_alignments = Some(vec![WordSpan { word: "x".into(), start_s: 0.0, end_s: bad.duration_s * 2.0 }]);
                "word_alignments"
            }
        };
        let line = serde_json::to_string(&bad).unwrap();
        match parse_manifest(line.as_bytes()) {
            Err(ManifestError::Validation { field: f, line: 1, .. }) => prop_assert_eq!(f, field),
            other => prop_assert!(false, "expected validation error on {}, got {:?}", field, other),
        }
    }

    #[test]
    fn pairs_round_trip(ids in prop::collection::btree_set("[a-z0-9]{1,8}", 0..10), text in "\\PC{0,30}") {
        let pairs: Vec<HypothesisPair> = ids
            .into_iter()
            .map(|id| HypothesisPair { id, primary_hyp: text.clone(), secondary_hyp: text.chars().rev().collect() })
            .collect();
        let mut buf = Vec::new();
        write_hypothesis_pairs(&pairs, &mut buf).unwrap();
        prop_assert_eq!(parse_hypothesis_pairs(&buf[..]).unwrap(), pairs);
    }
}

#[test]
fn keys_follow_fixed_order_and_optional_fields_are_omitted() {
    let mut r = UtteranceRecord::new("u1", "a.wav", 10.0, "hello world");
    let line = String::from_utf8(manifest_to_bytes(std::slice::from_ref(&r))).unwrap();
    assert_eq!(line, "{\"id\":\"u1\",\"audio_path\":\"a.wav\",\"duration_s\":10.0,\"transcript\":\"hello world\"}\n");
    r.confidence = Some(0.5);
    r.country = Some("US".into());
    r.source = "video".into();
    r.word_alignments = Some(vec![
        WordSpan { word: "hello".into(), start_s: 0.0, end_s: 0.4 },
        WordSpan { word: "world".into(), start_s: 0.5, end_s: 1.0 },
    ]);
    r.offset_s = Some(2.5);
    let line = String::from_utf8(manifest_to_bytes(&[r])).unwrap();
    let keys: Vec<&str> = ["\"id\"", "\"audio_path\"", "\"duration_s\"", "\"transcript\"", "\"confidence\"", "\"country\"", "\"source\"", "\"word_alignments\"", "\"offset_s\""]
        .into_iter()
        .collect();
    let positions: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
}

#[test]
fn null_optional_fields_read_as_absent() {
    let with_nulls = r#"{"id":"u1","audio_path":"a.wav","duration_s":1.5,"transcript":"","confidence":null,"country":null,"source":null,"word_alignments":null,"offset_s":null}"#;
    let parsed = parse_manifest(with_nulls.as_bytes()).unwrap();
    assert_eq!(parsed, vec![UtteranceRecord::new("u1", "a.wav", 1.5, "")]);
}

#[test]
fn generator_corpus_is_valid_and_stable() {
    let a = common::synthetic_corpus(5, 500);
    assert!(a.iter().all(|r| r.check().is_ok()));
    assert_eq!(manifest_to_bytes(&a), manifest_to_bytes(&common::synthetic_corpus(5, 500)));
}
