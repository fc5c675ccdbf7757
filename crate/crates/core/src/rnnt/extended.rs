//! Double-double arithmetic and a linear-space forward pass built on it.
//! The gradient check uses this to take differences of nearly equal losses
//! without losing the low-order digits.

use super::{RnntInstance, RowRange, BLANK};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from_sum(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, b);
        Dd { hi, lo }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }

    pub fn mul_f64(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        let (hi, lo) = quick_two_sum(p, e + self.lo * b);
        Dd { hi, lo }
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f64(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f64(q2));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd { hi: q3, lo: 0.0 })
    }

    /// Exact scaling by `2^k`.
    pub fn ldexp(self, k: i32) -> Dd {
        let s = pow2(k);
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    /// `exp(x)` for moderate `x` (no overflow handling beyond f64 range).
    pub fn exp(self) -> Dd {
        const SQUARINGS: i32 = 10;
        let k = (self.hi / LN2.hi).round();
        let r = self.sub(LN2.mul_f64(k)).ldexp(-SQUARINGS);
        // expm1(r) by Taylor series, then (1 + s)^2 - 1 = s * (2 + s) repeatedly.
        let mut term = r;
        let mut s = r;
        for n in 2..=12 {
            term = term.mul(r).mul_f64(1.0 / n as f64);
            s = s.add(term);
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..SQUARINGS {
            s = s.mul(s.add(Dd { hi: 2.0, lo: 0.0 }));
        }
        s.add(Dd::ONE).ldexp(k as i32)
    }
}

fn pow2(k: i32) -> f64 {
    // Split to stay inside the normal range for large |k|.
    let half = k / 2;
    f64::powi(2.0, half) * f64::powi(2.0, k - half)
}

/// Blank and label probabilities of one lattice node.
fn node_probs(inst: &RnntInstance, t: usize, u: usize, shift: Option<(usize, f64)>) -> (Dd, Dd) {
    let node = inst.node_logits(t, u);
    let m = node.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<Dd> = node
        .iter()
        .enumerate()
        .map(|(v, &x)| {
            let d = match shift {
                Some((k, delta)) if k == v => Dd::from_sum(x - m, delta),
                _ => Dd { hi: x - m, lo: 0.0 },
            };
            d.exp()
        })
        .collect();
    let z = e.iter().fold(Dd::ZERO, |acc, &x| acc.add(x));
    let label = if u < inst.target_len() { e[inst.targets[u]].div(z) } else { Dd::ZERO };
    (e[BLANK].div(z), label)
}

/// Node probabilities of the unperturbed instance, reused across probes.
pub(crate) struct ProbeLattice<'a> {
    inst: &'a RnntInstance,
    rows: &'a [RowRange],
    blank: Vec<Dd>,
    label: Vec<Dd>,
}

/// Total path probability as `mantissa * 2^exponent`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Scaled {
    pub mantissa: Dd,
    pub exponent: i64,
}

impl<'a> ProbeLattice<'a> {
    pub fn new(inst: &'a RnntInstance, rows: &'a [RowRange]) -> Self {
        let width = inst.target_len() + 1;
        let mut blank = vec![Dd::ZERO; inst.frames * width];
        let mut label = vec![Dd::ZERO; inst.frames * width];
        for t in 0..inst.frames {
            for u in 0..width {
                if rows[u].contains(t) {
                    (blank[t * width + u], label[t * width + u]) = node_probs(inst, t, u, None);
                }
            }
        }
        Self { inst, rows, blank, label }
    }

    /// Path probability with logit `index` shifted by `delta`.
    pub fn probability(&self, index: usize, delta: f64) -> Scaled {
        let inst = self.inst;
        let (frames, width, vocab) = (inst.frames, inst.target_len() + 1, inst.vocab);
        let node = index / vocab;
        let (pt, pu) = (node / width, node % width);
        let shifted = self.rows[pu].contains(pt).then(|| node_probs(inst, pt, pu, Some((index % vocab, delta))));
        let probs = |t: usize, u: usize| match shifted {
            Some(p) if (t, u) == (pt, pu) => p,
            _ => (self.blank[t * width + u], self.label[t * width + u]),
        };

        let mut exponent = 0i64;
        let mut prev = vec![Dd::ZERO; width];
        let mut cur = vec![Dd::ZERO; width];
        for t in 0..frames {
            for u in 0..width {
                cur[u] = Dd::ZERO;
                if !self.rows[u].contains(t) {
                    continue;
                }
                if t == 0 && u == 0 {
                    cur[u] = Dd::ONE;
                    continue;
                }
                let mut a = Dd::ZERO;
                if t > 0 && self.rows[u].contains(t - 1) {
                    a = a.add(prev[u].mul(probs(t - 1, u).0));
                }
                if u > 0 && self.rows[u - 1].contains(t) {
                    a = a.add(cur[u - 1].mul(probs(t, u - 1).1));
                }
                cur[u] = a;
            }
            let peak = cur.iter().map(|d| d.hi.abs()).fold(0.0, f64::max);
            if peak > 0.0 {
                let k = peak.log2().floor() as i32;
                for d in cur.iter_mut() {
                    *d = d.ldexp(-k);
                }
                exponent += k as i64;
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        let mantissa = prev[width - 1].mul(probs(frames - 1, width - 1).0);
        Scaled { mantissa, exponent }
    }
}

/// `ln(a / b)` for two scaled probabilities, accurate when the ratio is near 1.
pub(crate) fn log_ratio(a: Scaled, b: Scaled) -> f64 {
    let shift = a.exponent - b.exponent;
    let ratio = a.mantissa.ldexp(shift as i32).div(b.mantissa);
    let q = ratio.sub(Dd::ONE);
    (q.hi + q.lo).ln_1p()
}
