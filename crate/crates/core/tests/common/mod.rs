//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use asrkit::manifest::{HypothesisPair, UtteranceRecord, WordSpan};
use asrkit::rnnt::{AlignmentBand, RnntInstance};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Every move sequence of `frames` blanks and `u` labels that ends in a
/// blank, as a list of booleans (true = label).
pub fn alignments(frames: usize, u: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    let len = frames + u - 1;
    let mut cur = Vec::with_capacity(len + 1);
    fn rec(cur: &mut Vec<bool>, len: usize, labels_left: usize, blanks_left: usize, out: &mut Vec<Vec<bool>>) {
        if cur.len() == len {
            let mut done = cur.clone();
            done.push(false);
            out.push(done);
            return;
        }
        if labels_left > 0 {
            cur.push(true);
            rec(cur, len, labels_left - 1, blanks_left, out);
            cur.pop();
        }
        if blanks_left > 0 {
            cur.push(false);
            rec(cur, len, labels_left, blanks_left - 1, out);
            cur.pop();
        }
    }
    rec(&mut cur, len, u, frames - 1, &mut out);
    out
}

/// `-ln` of the summed path probabilities over all alignments whose token
/// emission frames satisfy `allow(token_index, frame)`.
pub fn brute_force_loss(inst: &RnntInstance, allow: impl Fn(usize, usize) -> bool) -> f64 {
    let (frames, u_max, vocab) = (inst.frames(), inst.target_len(), inst.vocab());
    let mut total = 0.0;
    for path in alignments(frames, u_max) {
        let (mut t, mut u, mut p) = (0usize, 0usize, 1.0f64);
        let mut ok = true;
        for &is_label in &path {
            let start = inst.index(t, u, 0);
            let probs = softmax(&inst.logits()[start..start + vocab]);
            if is_label {
                if !allow(u, t) {
                    ok = false;
                    break;
                }
                p *= probs[inst.targets()[u]];
                u += 1;
            } else {
                p *= probs[0];
                t += 1;
            }
        }
        if ok {
            assert_eq!((t, u), (frames, u_max));
            total += p;
        }
    }
    -total.ln()
}

pub fn brute_force_full(inst: &RnntInstance) -> f64 {
    brute_force_loss(inst, |_, _| true)
}

/// Token `u` (0-based) may be emitted only within `[a_u - b_l, a_u + b_r]`.
pub fn brute_force_band(inst: &RnntInstance, band: &AlignmentBand) -> f64 {
    let a = band.token_frames().to_vec();
    let (l, r) = (band.left() as i64, band.right() as i64);
    brute_force_loss(inst, move |u, t| {
        let t = t as i64;
        a[u] - l <= t && t <= a[u] + r
    })
}

pub fn random_instance(rng: &mut impl Rng, max_t: usize, max_u: usize, max_v: usize) -> RnntInstance {
    let frames = rng.gen_range(1..=max_t);
    let u = rng.gen_range(0..=max_u);
    let vocab = rng.gen_range(2..=max_v);
    let targets = (0..u).map(|_| rng.gen_range(1..vocab)).collect();
    let logits = (0..frames * (u + 1) * vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
    RnntInstance::new(frames, vocab, targets, logits).unwrap()
}

pub fn random_band(rng: &mut impl Rng, inst: &RnntInstance, max_buffer: usize) -> AlignmentBand {
    let mut a: Vec<i64> = (0..inst.target_len()).map(|_| rng.gen_range(0..inst.frames() as i64)).collect();
    a.sort_unstable();
    AlignmentBand::new(a, rng.gen_range(0..=max_buffer), rng.gen_range(0..=max_buffer)).unwrap()
}

/// Plain exponential recursion, no memo table shared with anything else.
pub fn recursive_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = recursive_levenshtein(ra, rb) + usize::from(x != y);
            let del = recursive_levenshtein(ra, b) + 1;
            let ins = recursive_levenshtein(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Memoized top-down variant of the same recursion for longer inputs.
pub fn memo_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut [Option<usize>], w: usize) -> usize {
        if i == 0 {
            return j;
        }
        if j == 0 {
            return i;
        }
        if let Some(v) = memo[i * w + j] {
            return v;
        }
        let v = (go(a, b, i - 1, j - 1, memo, w) + usize::from(a[i - 1] != b[j - 1]))
            .min(go(a, b, i - 1, j, memo, w) + 1)
            .min(go(a, b, i, j - 1, memo, w) + 1);
        memo[i * w + j] = Some(v);
        v
    }
    let w = b.len() + 1;
    let mut memo = vec![None; (a.len() + 1) * w];
    go(a, b, a.len(), b.len(), &mut memo, w)
}

const VOCAB: &[&str] = &[
    "the", "a", "to", "and", "of", "i", "you", "it", "that", "is", "in", "we", "so", "like", "just", "um", "uh",
    "music", "game", "video", "phone", "weather", "call", "today", "really", "going", "know", "gaap", "ebitda",
    "aphasia", "portal", "zanzibar", "quokka", "reykjavik", "mitochondria", "saxophone", "kilimanjaro",
];

fn zipf_word(rng: &mut impl Rng) -> &'static str {
    // Squaring a uniform draw skews toward the head of the list.
    let x: f64 = rng.gen();
    VOCAB[((x * x) * VOCAB.len() as f64) as usize]
}

pub fn synthetic_record(rng: &mut impl Rng, i: usize) -> UtteranceRecord {
    let duration = (rng.gen_range(10..=3000) as f64) / 100.0;
    let n_words = rng.gen_range(0..=(duration * 2.5) as usize);
    let words: Vec<&str> = (0..n_words).map(|_| zipf_word(rng)).collect();
    let mut r = UtteranceRecord::new(format!("utt{i:05}"), format!("audio/{i:05}.wav"), duration, words.join(" "));
    if rng.gen_bool(0.95) {
        r.confidence = Some(rng.gen_range(0..=1000) as f64 / 1000.0);
    }
    r.country = match rng.gen_range(0..10) {
        0..=2 => Some("US".into()),
        3 => Some("GB".into()),
        4 => Some("CA".into()),
        5 => Some("AU".into()),
        6 => Some("IN".into()),
        7 => Some("NG".into()),
        8 => Some("BR".into()),
        _ => None,
    };
    r.source = ["video", "portal", "assistant"].choose(rng).unwrap().to_string();
    if rng.gen_bool(0.9) {
        let slot = duration / n_words.max(1) as f64;
        r.word_alignments = Some(
            words
                .iter()
                .enumerate()
                .map(|(k, w)| WordSpan {
                    word: w.to_string(),
                    start_s: k as f64 * slot,
                    end_s: (k as f64 * slot + slot * 0.8).min(duration),
                })
                .collect(),
        );
    }
    r
}

pub fn synthetic_corpus(seed: u64, n: usize) -> Vec<UtteranceRecord> {
    let mut rng = rng(seed);
    (0..n).map(|i| synthetic_record(&mut rng, i)).collect()
}

/// Secondary hypothesis = primary with random word edits.
pub fn synthetic_pairs(seed: u64, records: &[UtteranceRecord]) -> Vec<HypothesisPair> {
    let mut rng = rng(seed);
    records
        .iter()
        .map(|r| {
            let mut words: Vec<&str> = r.words().collect();
            let edits = rng.gen_range(0..=words.len().max(1));
            for _ in 0..edits {
                match rng.gen_range(0..3) {
                    0 if !words.is_empty() => {
                        let k = rng.gen_range(0..words.len());
                        words.remove(k);
                    }
                    1 if !words.is_empty() => {
                        let k = rng.gen_range(0..words.len());
                        words[k] = zipf_word(&mut rng);
                    }
                    _ => {
                        let k = rng.gen_range(0..=words.len());
                        words.insert(k, zipf_word(&mut rng));
                    }
                }
            }
            HypothesisPair { id: r.id.clone(), primary_hyp: r.transcript.clone(), secondary_hyp: words.join(" ") }
        })
        .collect()
}
