use serde::Serialize;

use super::RnntError;
use crate::manifest::WordSpan;

/// Inclusive frame range `[lo, hi]` of one lattice row; empty when `hi < lo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowRange {
    pub lo: i64,
    pub hi: i64,
}

impl RowRange {
    pub(crate) fn full(frames: usize, target_len: usize) -> Vec<RowRange> {
        vec![RowRange { lo: 0, hi: frames as i64 - 1 }; target_len + 1]
    }

    #[inline]
    pub fn contains(&self, t: usize) -> bool {
        let t = t as i64;
        self.lo <= t && t <= self.hi
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-token alignment frames with left/right buffers.
///
/// Token `u` (1-based) may only be emitted at frames
/// `[a_u - left, a_u + right]`. On the lattice this keeps row `u` to
/// `[a_u - left, a_{u+1} + right]`, with row 0 starting at frame 0 and
/// row U ending at the last frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentBand {
    token_frames: Vec<i64>,
    left: usize,
    right: usize,
}

impl AlignmentBand {
    pub const DEFAULT_BUFFER: usize = 15;

    pub fn new(token_frames: Vec<i64>, left: usize, right: usize) -> Result<Self, RnntError> {
        if let Some(i) = token_frames.windows(2).position(|w| w[1] < w[0]) {
            return Err(RnntError::Band(format!("token frames must be non-decreasing (index {})", i + 1)));
        }
        Ok(Self { token_frames, left, right })
    }

    pub fn token_frames(&self) -> &[i64] {
        &self.token_frames
    }

    pub fn left(&self) -> usize {
        self.left
    }

    pub fn right(&self) -> usize {
        self.right
    }

    pub fn with_buffers(&self, left: usize, right: usize) -> Self {
        Self { token_frames: self.token_frames.clone(), left, right }
    }

    /// Valid frame range of every lattice row, clamped to `[0, frames-1]`.
    pub fn rows(&self, frames: usize, target_len: usize) -> Result<Vec<RowRange>, RnntError> {
        if self.token_frames.len() != target_len {
            return Err(RnntError::Band(format!(
                "band has {} token frames but the target has {target_len} tokens",
                self.token_frames.len()
            )));
        }
        let last = frames as i64 - 1;
        let (left, right) = (self.left as i64, self.right as i64);
        Ok((0..=target_len)
            .map(|u| {
                let lo = if u == 0 { 0 } else { (self.token_frames[u - 1] - left).max(0) };
                let hi = if u == target_len { last } else { (self.token_frames[u] + right).min(last) };
                RowRange { lo, hi }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellCount {
    pub full: usize,
    pub restricted: usize,
}

/// Lattice nodes computed with and without the band.
pub fn cell_count(frames: usize, target_len: usize, band: Option<&AlignmentBand>) -> Result<CellCount, RnntError> {
    let full = frames * (target_len + 1);
    let restricted = match band {
        Some(b) => b.rows(frames, target_len)?.iter().map(RowRange::len).sum(),
        None => full,
    };
    Ok(CellCount { full, restricted })
}

/// Spreads each word's tokens evenly over its span, floors to frames,
/// clamps to `[0, frames-1]` and keeps the sequence non-decreasing.
pub fn band_from_word_spans(
    spans: &[WordSpan],
    tokens_per_word: &[usize],
    frame_rate_hz: f64,
    frames: usize,
    left: usize,
    right: usize,
) -> Result<AlignmentBand, RnntError> {
    if spans.len() != tokens_per_word.len() {
        return Err(RnntError::Band(format!(
            "{} word spans but {} token counts",
            spans.len(),
            tokens_per_word.len()
        )));
    }
    if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
        return Err(RnntError::Band(format!("frame rate must be > 0, got {frame_rate_hz}")));
    }
    if frames == 0 {
        return Err(RnntError::Band("frame count must be >= 1".into()));
    }
    let last = frames as i64 - 1;
    let mut out = Vec::with_capacity(tokens_per_word.iter().sum());
    let mut floor = 0i64;
    for (span, &k) in spans.iter().zip(tokens_per_word) {
        if k == 0 {
            return Err(RnntError::Band(format!("word {:?} has zero tokens", span.word)));
        }
        let step = (span.end_s - span.start_s) / k as f64;
        for j in 0..k {
            let at = span.start_s + step * j as f64;
            let frame = ((at * frame_rate_hz).floor() as i64).clamp(0, last).max(floor);
            floor = frame;
            out.push(frame);
        }
    }
    AlignmentBand::new(out, left, right)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(w: &str, s: f64, e: f64) -> WordSpan {
        WordSpan { word: w.into(), start_s: s, end_s: e }
    }

    #[test]
    fn even_spacing_inside_word() {
        let b = band_from_word_spans(&[span("hi", 0.0, 1.0)], &[2], 12.5, 13, 15, 15).unwrap();
        assert_eq!(b.token_frames(), &[0, 6]);
    }

    #[test]
    fn single_token_takes_word_start() {
        let b = band_from_word_spans(&[span("x", 0.33, 0.9)], &[1], 12.5, 100, 0, 0).unwrap();
        assert_eq!(b.token_frames(), &[4]);
    }

    #[test]
    fn frames_clamp_to_last() {
        let b = band_from_word_spans(&[span("x", 5.0, 6.0)], &[3], 12.5, 10, 0, 0).unwrap();
        assert_eq!(b.token_frames(), &[9, 9, 9]);
    }

    #[test]
    fn result_is_non_decreasing() {
        let spans = [span("a", 0.0, 2.0), span("b", 2.0, 2.04), span("c", 3.0, 3.5)];
        let b = band_from_word_spans(&spans, &[4, 2, 1], 12.5, 30, 0, 0).unwrap();
        assert!(b.token_frames().windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(b.token_frames().len(), 7);
    }

    #[test]
    fn span_errors() {
        assert!(band_from_word_spans(&[span("a", 0.0, 1.0)], &[], 12.5, 10, 0, 0).is_err());
        assert!(band_from_word_spans(&[span("a", 0.0, 1.0)], &[0], 12.5, 10, 0, 0).is_err());
        assert!(band_from_word_spans(&[span("a", 0.0, 1.0)], &[1], 0.0, 10, 0, 0).is_err());
    }

    #[test]
    fn decreasing_frames_rejected() {
        assert!(AlignmentBand::new(vec![3, 2], 0, 0).is_err());
    }

    #[test]
    fn cell_count_examples() {
        let b = AlignmentBand::new((0..20).map(|i| i * 5).collect(), 15, 15).unwrap();
        let c = cell_count(100, 20, Some(&b)).unwrap();
        assert_eq!(c.full, 2100);
        assert!(c.restricted <= 720);
        assert_eq!(cell_count(7, 0, None).unwrap(), CellCount { full: 7, restricted: 7 });
        let empty = AlignmentBand::new(vec![], 1, 1).unwrap();
        assert_eq!(cell_count(7, 0, Some(&empty)).unwrap(), CellCount { full: 7, restricted: 7 });
        let sat = AlignmentBand::new(vec![0, 3, 3], 10, 10).unwrap();
        let c = cell_count(10, 3, Some(&sat)).unwrap();
        assert_eq!(c.restricted, c.full);
    }

    #[test]
    fn interior_band_hits_formula_exactly() {
        // No clamping: widths telescope to T + U(b_l + b_r + 1).
        let b = AlignmentBand::new(vec![20, 30, 40], 2, 3).unwrap();
        let c = cell_count(100, 3, Some(&b)).unwrap();
        assert_eq!(c.restricted, 100 + 3 * (2 + 3 + 1));
    }
}
