//! Parameter, compute and transducer-loss memory arithmetic for Transformer
//! encoders.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid train plan: {0}")]
    Plan(String),
}

pub const FFN_MULTIPLIER: u64 = 4;
/// Post-frontend frame shift.
pub const DEFAULT_FRAME_MS: f64 = 80.0;
pub const PREDICTOR_PARAMS: u64 = 19_000_000;
pub const JOINER_PARAMS: u64 = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: u64,
    pub layers: u64,
    pub heads: u64,
    pub frame_ms: f64,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn new(hidden: u64, layers: u64, heads: u64) -> Result<Self, BudgetError> {
        let c = Self { hidden, layers, heads, frame_ms: DEFAULT_FRAME_MS, dropout: 0.1 };
        c.validate()?;
        Ok(c)
    }

    /// The three encoder sizes as (label, config).
    pub fn table() -> [(&'static str, EncoderConfig); 3] {
        [
            ("100M", Self::new(512, 36, 8).expect("valid")),
            ("1B", Self::new(1152, 60, 16).expect("valid")),
            ("10B", Self::new(3072, 90, 48).expect("valid")),
        ]
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return Err(BudgetError::Config("hidden, layers and heads must be >= 1".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(BudgetError::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if !(self.frame_ms.is_finite() && self.frame_ms > 0.0) {
            return Err(BudgetError::Config(format!("frame_ms must be > 0, got {}", self.frame_ms)));
        }
        Ok(())
    }
}

/// Parameter count broken into auditable line items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// `12 * layers * hidden^2`: 4d^2 attention projections plus 8d^2 FFN.
    pub core: u64,
    /// Two pre-norm layernorms per block plus the final one, gain and bias each.
    pub layernorm: u64,
    /// q/k/v/out biases (4d) and FFN biases (4d + d) per block.
    pub bias: u64,
    /// `core + layernorm + bias`.
    pub encoder: u64,
    /// Rough VGG frontend estimate, see [`frontend_params`].
    pub frontend_estimate: u64,
    pub predictor: u64,
    pub joiner: u64,
    pub total: u64,
}

/// Three VGG blocks of two 3x3 convolutions (64, 128, 256 channels) over
/// 80-dim features, each block pooling by 2, then a linear projection of
/// the flattened `256 * 10` features to the hidden size.
pub fn frontend_params(hidden: u64) -> u64 {
    let conv = |cin: u64, cout: u64| cin * cout * 9 + cout;
    let convs = conv(1, 64) + conv(64, 64) + conv(64, 128) + conv(128, 128) + conv(128, 256) + conv(256, 256);
    let flat = 256 * (80 / 8);
    convs + flat * hidden + hidden
}

pub fn param_count(c: &EncoderConfig) -> ParamCount {
    let (d, n) = (c.hidden, c.layers);
    let core = n * (4 * d * d + 2 * FFN_MULTIPLIER * d * d);
    let layernorm = n * 2 * 2 * d + 2 * d;
    let bias = n * (4 * d + FFN_MULTIPLIER * d + d);
    let encoder = core + layernorm + bias;
    let frontend_estimate = frontend_params(d);
    ParamCount {
        core,
        layernorm,
        bias,
        encoder,
        frontend_estimate,
        predictor: PREDICTOR_PARAMS,
        joiner: JOINER_PARAMS,
        total: encoder + frontend_estimate + PREDICTOR_PARAMS + JOINER_PARAMS,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopsConvention {
    /// `2 * params` FLOPs per frame.
    #[serde(rename = "forward_2ND")]
    Forward2Nd,
    /// `6 * params` FLOPs per frame (forward plus twice that for backward).
    #[serde(rename = "train_6ND")]
    Train6Nd,
}

impl FlopsConvention {
    pub fn factor(self) -> f64 {
        match self {
            Self::Forward2Nd => 2.0,
            Self::Train6Nd => 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub batch_hours: f64,
    pub updates: u64,
    pub convention: FlopsConvention,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self { batch_hours: 23.0, updates: 200_000, convention: FlopsConvention::Train6Nd }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), BudgetError> {
        if !(self.batch_hours.is_finite() && self.batch_hours > 0.0) {
            return Err(BudgetError::Plan(format!("batch_hours must be > 0, got {}", self.batch_hours)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsEstimate {
    pub convention: FlopsConvention,
    /// Parameters the estimate is based on (encoder line item).
    pub params: u64,
    pub frames_per_update: f64,
    pub updates: u64,
    pub flops_per_update: f64,
    pub total_flops: f64,
    pub total_pflops: f64,
}

/// Encoder training compute: `factor * params * frames_per_update * updates`
/// with `frames_per_update = batch_hours * 3600 * 1000 / frame_ms`.
pub fn flops_total(c: &EncoderConfig, plan: &TrainPlan) -> FlopsEstimate {
    let params = param_count(c).encoder;
    let frames_per_update = plan.batch_hours * 3600.0 * 1000.0 / c.frame_ms;
    let flops_per_update = plan.convention.factor() * params as f64 * frames_per_update;
    let total_flops = flops_per_update * plan.updates as f64;
    FlopsEstimate {
        convention: plan.convention,
        params,
        frames_per_update,
        updates: plan.updates,
        flops_per_update,
        total_flops,
        total_pflops: total_flops / 1e15,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossShape {
    pub batch: u64,
    pub frames: u64,
    pub target_len: u64,
    pub vocab: u64,
    pub left: u64,
    pub right: u64,
    pub bytes_per_cell: u64,
}

impl Default for LossShape {
    /// One 10 s segment at 80 ms frames, 40 target tokens, 4095 BPE units
    /// plus blank, 15/15 buffers, fp32.
    fn default() -> Self {
        Self { batch: 1, frames: 125, target_len: 40, vocab: 4096, left: 15, right: 15, bytes_per_cell: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LossMemory {
    pub full_bytes: u64,
    pub restricted_bytes: u64,
}

/// Joiner output memory for the full lattice versus the restricted band.
/// The band term `T + U * (b_l + b_r + 1)` is capped at the full lattice.
pub fn loss_memory(s: &LossShape) -> LossMemory {
    let full_cells = s.frames * (s.target_len + 1);
    let band_cells = (s.frames + s.target_len * (s.left + s.right + 1)).min(full_cells);
    let per_cell = s.vocab * s.bytes_per_cell * s.batch;
    LossMemory { full_bytes: full_cells * per_cell, restricted_bytes: band_cells * per_cell }
}

/// Scale for the second FFN linear layer in an `layers`-block stack.
pub fn init_scale(layers: u64) -> f64 {
    1.0 / (2.0 * layers as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub encoder: EncoderConfig,
    pub plan: TrainPlan,
    pub params: ParamCount,
    pub flops: FlopsEstimate,
    pub loss_shape: LossShape,
    pub loss_memory: LossMemory,
    pub init_scale: f64,
}

pub fn budget_report(encoder: EncoderConfig, plan: TrainPlan, loss_shape: LossShape) -> Result<BudgetReport, BudgetError> {
    encoder.validate()?;
    plan.validate()?;
    Ok(BudgetReport {
        params: param_count(&encoder),
        flops: flops_total(&encoder, &plan),
        loss_memory: loss_memory(&loss_shape),
        init_scale: init_scale(encoder.layers),
        encoder,
        plan,
        loss_shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_params_for_table_rows() {
        let got: Vec<u64> = EncoderConfig::table().iter().map(|(_, c)| param_count(c).core).collect();
        assert_eq!(got, vec![113_246_208, 955_514_880, 10_192_158_720]);
    }

    #[test]
    fn totals_near_labels() {
        for ((_, c), label) in EncoderConfig::table().iter().zip([1e8, 1e9, 1e10]) {
            let p = param_count(c);
            assert!(((p.encoder as f64 - label) / label).abs() < 0.3);
            assert!(p.encoder > p.core);
        }
    }

    #[test]
    fn ten_b_flops() {
        let (_, c) = EncoderConfig::table()[2];
        let f = flops_total(&c, &TrainPlan::default());
        assert_eq!(f.frames_per_update, 1_035_000.0);
        assert!((f.total_pflops / 1.27e7 - 1.0).abs() < 0.01, "{}", f.total_pflops);
        let ratio = f.total_pflops / 8.41e6;
        assert!((0.5..=2.0).contains(&ratio));
    }

    #[test]
    fn flops_zero_and_linear() {
        let (_, c) = EncoderConfig::table()[0];
        let zero = TrainPlan { updates: 0, ..Default::default() };
        assert_eq!(flops_total(&c, &zero).total_pflops, 0.0);
        let slow = EncoderConfig { frame_ms: 160.0, ..c };
        assert_eq!(flops_total(&slow, &TrainPlan::default()).total_flops * 2.0, flops_total(&c, &TrainPlan::default()).total_flops);
        let fwd = TrainPlan { convention: FlopsConvention::Forward2Nd, ..Default::default() };
        assert_eq!(flops_total(&c, &fwd).total_flops * 3.0, flops_total(&c, &TrainPlan::default()).total_flops);
    }

    #[test]
    fn loss_memory_examples() {
        let s = LossShape { batch: 1, frames: 100, target_len: 20, vocab: 4096, left: 15, right: 15, bytes_per_cell: 4 };
        let m = loss_memory(&s);
        assert_eq!(m.full_bytes, 34_406_400);
        assert_eq!(m.restricted_bytes, 11_796_480);
        let m = loss_memory(&LossShape { target_len: 0, ..s });
        assert_eq!(m.full_bytes, m.restricted_bytes);
        let m = loss_memory(&LossShape { left: 100, right: 100, ..s });
        assert_eq!(m.full_bytes, m.restricted_bytes);
    }

    #[test]
    fn init_scale_values() {
        assert!((init_scale(1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((init_scale(36) - 0.117851).abs() < 1e-6);
        assert!((init_scale(90) - 0.074536).abs() < 1e-6);
    }

    #[test]
    fn config_errors() {
        assert!(EncoderConfig::new(512, 0, 8).is_err());
        assert!(EncoderConfig::new(510, 36, 8).is_err());
        assert!(TrainPlan { batch_hours: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn convention_json_names() {
        assert_eq!(serde_json::to_string(&FlopsConvention::Train6Nd).unwrap(), "\"train_6ND\"");
        assert_eq!(serde_json::to_string(&FlopsConvention::Forward2Nd).unwrap(), "\"forward_2ND\"");
    }
}
