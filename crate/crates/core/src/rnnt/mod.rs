//! Transducer (RNN-T) loss over the full T x (U+1) lattice and over an
//! alignment-restricted band, with analytic gradients w.r.t. raw logits.
//!
//! Conventions: blank id is 0, logits are pre-softmax and laid out as
//! `[t][u][v]`, losses are in nats, everything is computed in `f64`.

mod band;
mod case;
mod extended;
mod gradcheck;

pub use band::{band_from_word_spans, cell_count, AlignmentBand, CellCount, RowRange};
pub use case::{BandSpec, LossCase, LossOutput};
pub use gradcheck::{grad_check, grad_check_against, GradCheck};

use rayon::prelude::*;
use thiserror::Error;

pub const BLANK: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RnntError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target {index} has id {id}, expected 1..={max}")]
    Target { index: usize, id: usize, max: usize },
    #[error("invalid band: {0}")]
    Band(String),
    #[error("infeasible band: no complete alignment path survives the restriction")]
    Infeasible,
}

/// Logits for one utterance plus its target token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RnntInstance {
    frames: usize,
    vocab: usize,
    targets: Vec<usize>,
    logits: Vec<f64>,
}

impl RnntInstance {
    /// `logits` is flat `[frames][targets.len() + 1][vocab]`.
    pub fn new(frames: usize, vocab: usize, targets: Vec<usize>, logits: Vec<f64>) -> Result<Self, RnntError> {
        if frames == 0 {
            return Err(RnntError::Shape("T must be >= 1".into()));
        }
        if vocab < 2 {
            return Err(RnntError::Shape(format!("V must be >= 2, got {vocab}")));
        }
        let expected = frames * (targets.len() + 1) * vocab;
        if logits.len() != expected {
            return Err(RnntError::Shape(format!(
                "expected {frames}x{}x{vocab} = {expected} logits, got {}",
                targets.len() + 1,
                logits.len()
            )));
        }
        if let Some((index, &id)) = targets.iter().enumerate().find(|(_, &id)| id == BLANK || id >= vocab) {
            return Err(RnntError::Target { index, id, max: vocab - 1 });
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(RnntError::Shape(format!("logit {i} is not finite")));
        }
        Ok(Self { frames, vocab, targets, logits })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn target_len(&self) -> usize {
        self.targets.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    #[inline]
    pub fn index(&self, t: usize, u: usize, v: usize) -> usize {
        (t * (self.targets.len() + 1) + u) * self.vocab + v
    }

    fn node_logits(&self, t: usize, u: usize) -> &[f64] {
        let start = self.index(t, u, 0);
        &self.logits[start..start + self.vocab]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// Same layout as the instance logits; zero outside the band.
    pub gradients: Option<Vec<f64>>,
    pub valid_cells: usize,
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-node blank/label log-probabilities, forward and backward variables.
struct Lattice<'a> {
    inst: &'a RnntInstance,
    rows: Vec<RowRange>,
    width: usize,
    lse: Vec<f64>,
    blank: Vec<f64>,
    label: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl<'a> Lattice<'a> {
    fn new(inst: &'a RnntInstance, rows: Vec<RowRange>) -> Self {
        let width = inst.target_len() + 1;
        let cells = inst.frames * width;
        let mut lat = Self {
            inst,
            rows,
            width,
            lse: vec![f64::NEG_INFINITY; cells],
            blank: vec![f64::NEG_INFINITY; cells],
            label: vec![f64::NEG_INFINITY; cells],
            alpha: vec![f64::NEG_INFINITY; cells],
            beta: vec![f64::NEG_INFINITY; cells],
        };
        let u_max = inst.target_len();
        for t in 0..inst.frames {
            for u in 0..=u_max {
                if !lat.valid(t, u) {
                    continue;
                }
                let node = inst.node_logits(t, u);
                let lse = log_sum_exp(node);
                let c = t * width + u;
                lat.lse[c] = lse;
                lat.blank[c] = node[BLANK] - lse;
                if u < u_max {
                    lat.label[c] = node[inst.targets[u]] - lse;
                }
            }
        }
        lat
    }

    #[inline]
    fn valid(&self, t: usize, u: usize) -> bool {
        self.rows[u].contains(t)
    }

    fn valid_cells(&self) -> usize {
        self.rows.iter().map(RowRange::len).sum()
    }

    fn forward(&mut self) -> f64 {
        let (frames, width, u_max) = (self.inst.frames, self.width, self.inst.target_len());
        for t in 0..frames {
            for u in 0..=u_max {
                if !self.valid(t, u) {
                    continue;
                }
                let c = t * width + u;
                if t == 0 && u == 0 {
                    self.alpha[c] = 0.0;
                    continue;
                }
                let mut a = f64::NEG_INFINITY;
                if t > 0 {
                    let p = c - width;
                    a = log_add(a, self.alpha[p] + self.blank[p]);
                }
                if u > 0 {
                    let p = c - 1;
                    a = log_add(a, self.alpha[p] + self.label[p]);
                }
                self.alpha[c] = a;
            }
        }
        let end = (frames - 1) * width + u_max;
        self.alpha[end] + self.blank[end]
    }

    fn backward(&mut self) {
        let (frames, width, u_max) = (self.inst.frames, self.width, self.inst.target_len());
        for t in (0..frames).rev() {
            for u in (0..=u_max).rev() {
                if !self.valid(t, u) {
                    continue;
                }
                let c = t * width + u;
                if t == frames - 1 && u == u_max {
                    self.beta[c] = self.blank[c];
                    continue;
                }
                let mut b = f64::NEG_INFINITY;
                if t + 1 < frames {
                    b = log_add(b, self.blank[c] + self.beta[c + width]);
                }
                if u < u_max {
                    b = log_add(b, self.label[c] + self.beta[c + 1]);
                }
                self.beta[c] = b;
            }
        }
    }

    fn gradients(&self, log_z: f64) -> Vec<f64> {
        let inst = self.inst;
        let (frames, width, u_max, vocab) = (inst.frames, self.width, inst.target_len(), inst.vocab);
        let mut grad = vec![0.0; inst.logits.len()];
        for t in 0..frames {
            for u in 0..=u_max {
                if !self.valid(t, u) {
                    continue;
                }
                let c = t * width + u;
                let alpha = self.alpha[c];
                let after_blank = if t + 1 < frames {
                    self.beta[c + width]
                } else if u == u_max {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                let blank_flow = (alpha + self.blank[c] + after_blank - log_z).exp();
                let label_flow = if u < u_max { (alpha + self.label[c] + self.beta[c + 1] - log_z).exp() } else { 0.0 };
                let occupancy = blank_flow + label_flow;
                let base = inst.index(t, u, 0);
                let node = inst.node_logits(t, u);
                for v in 0..vocab {
                    grad[base + v] = (node[v] - self.lse[c]).exp() * occupancy;
                }
                grad[base + BLANK] -= blank_flow;
                if u < u_max {
                    grad[base + inst.targets[u]] -= label_flow;
                }
            }
        }
        grad
    }
}

fn run(inst: &RnntInstance, rows: Vec<RowRange>, with_grad: bool) -> Result<LossResult, RnntError> {
    let mut lat = Lattice::new(inst, rows);
    let log_z = lat.forward();
    if !log_z.is_finite() {
        return Err(RnntError::Infeasible);
    }
    let gradients = with_grad.then(|| {
        lat.backward();
        lat.gradients(log_z)
    });
    Ok(LossResult { loss: -log_z, gradients, valid_cells: lat.valid_cells() })
}

/// Negative log-likelihood summed over every monotonic alignment.
pub fn rnnt_loss_full(inst: &RnntInstance, with_grad: bool) -> Result<LossResult, RnntError> {
    run(inst, RowRange::full(inst.frames, inst.target_len()), with_grad)
}

/// Same recursion with lattice nodes outside the band treated as impossible.
pub fn rnnt_loss_restricted(inst: &RnntInstance, band: &AlignmentBand, with_grad: bool) -> Result<LossResult, RnntError> {
    let rows = band.rows(inst.frames, inst.target_len())?;
    run(inst, rows, with_grad)
}

/// Evaluates a batch in parallel; each instance is independent.
pub fn rnnt_loss_batch(
    batch: &[(RnntInstance, Option<AlignmentBand>)],
    with_grad: bool,
) -> Vec<Result<LossResult, RnntError>> {
    batch
        .par_iter()
        .map(|(inst, band)| match band {
            Some(b) => rnnt_loss_restricted(inst, b, with_grad),
            None => rnnt_loss_full(inst, with_grad),
        })
        .collect()
}
