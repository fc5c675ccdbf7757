use serde::Serialize;

use super::extended::{log_ratio, ProbeLattice};
use super::{rnnt_loss_full, rnnt_loss_restricted, AlignmentBand, RnntError, RnntInstance, RowRange};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over every logit.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    /// Largest `|sum_v grad(t,u,v)|` over lattice nodes.
    pub max_node_sum: f64,
}

fn loss_of(inst: &RnntInstance, band: Option<&AlignmentBand>, with_grad: bool) -> Result<super::LossResult, RnntError> {
    match band {
        Some(b) => rnnt_loss_restricted(inst, b, with_grad),
        None => rnnt_loss_full(inst, with_grad),
    }
}

/// Central finite differences on every logit versus the analytic gradient.
/// Each difference `loss(x+e) - loss(x-e)` is taken in double-double
/// arithmetic so that small gradients are not swamped by cancellation.
pub fn grad_check(inst: &RnntInstance, band: Option<&AlignmentBand>, epsilon: f64) -> Result<GradCheck, RnntError> {
    let analytic = loss_of(inst, band, true)?.gradients.expect("requested");
    grad_check_against(inst, band, epsilon, &analytic)
}

/// Like [`grad_check`] but against caller-supplied gradients.
pub fn grad_check_against(
    inst: &RnntInstance,
    band: Option<&AlignmentBand>,
    epsilon: f64,
    analytic: &[f64],
) -> Result<GradCheck, RnntError> {
    if analytic.len() != inst.logits().len() {
        return Err(RnntError::Shape("gradient length differs from logits".into()));
    }
    loss_of(inst, band, false)?;
    let rows = match band {
        Some(b) => b.rows(inst.frames(), inst.target_len())?,
        None => RowRange::full(inst.frames(), inst.target_len()),
    };
    let probe = ProbeLattice::new(inst, &rows);
    let mut out = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, max_node_sum: 0.0 };
    for (i, &a) in analytic.iter().enumerate() {
        let plus = probe.probability(i, epsilon);
        let minus = probe.probability(i, -epsilon);
        // loss = -ln P, so loss(x+e) - loss(x-e) = -ln(P+ / P-).
        let numeric = -log_ratio(plus, minus) / (2.0 * epsilon);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
        out.max_abs_error = out.max_abs_error.max(abs);
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = i;
        }
    }
    for node in analytic.chunks(inst.vocab()) {
        out.max_node_sum = out.max_node_sum.max(node.iter().sum::<f64>().abs());
    }
    Ok(out)
}
