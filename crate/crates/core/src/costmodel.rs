//! Analytic FLOP, memory and time model of one pipeline stage.
//!
//! FLOPs count matrix multiplications only. Forward+backward model FLOPs for
//! one microbatch are
//!
//! ```text
//! 72·b·s·l·h² · (1 + s/(6h) + v/(16·l·h))
//! ```
//!
//! which splits into the attention projections and score matmuls
//! (`24bslh² + 12bs²lh`), the feed-forward block (`48bslh²`) and the logit
//! layer (`4.5·bshv`). Backward costs twice the forward; recomputing attention
//! adds the score matmuls' forward again to the backward pass. Utilization
//! always divides by model FLOPs, never by the recompute-inflated count.

use num_bigint::BigInt;
use serde::Serialize;

use crate::config::{AttentionMode, FfnKind, HardwareProfile, ModelConfig, ParallelConfig, Pass};
use crate::fraction::Fraction;

/// Forward+backward model FLOPs of one microbatch through the whole model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    pub total_per_microbatch: f64,
    pub attention_term: f64,
    pub ffn_term: f64,
    pub vocab_term: f64,
}

pub fn model_flops(model: &ModelConfig, b: u64) -> FlopsBreakdown {
    let (s, l, h, v) = (model.seq_len as f64, model.layers as f64, model.hidden as f64, model.vocab as f64);
    let b = b as f64;
    let attention_term = (24.0 * s * l * h * h + 12.0 * s * s * l * h) * b;
    let ffn_term = 3.0 * l * ffn_flops(model, 1) as f64 * b;
    let vocab_term = 4.5 * s * h * v * b;
    FlopsBreakdown {
        total_per_microbatch: attention_term + ffn_term + vocab_term,
        attention_term,
        ffn_term,
        vocab_term,
    }
}

/// [`model_flops`] total as an exact rational.
pub fn model_flops_exact(model: &ModelConfig, b: u64) -> Fraction {
    let (b, s, l, h, v) = (
        BigInt::from(b),
        BigInt::from(model.seq_len),
        BigInt::from(model.layers),
        BigInt::from(model.hidden),
        BigInt::from(model.vocab),
    );
    let bs = &b * &s;
    let twice = BigInt::from(144) * &bs * &l * &h * &h
        + BigInt::from(24) * &bs * &s * &l * &h
        + BigInt::from(9) * &bs * &h * &v;
    Fraction::new(twice, 2)
}

/// Forward FLOPs of one layer's feed-forward block.
///
/// GPT: two matmuls through a `4h` intermediate. LLaMA: three matmuls through
/// an `8h/3` intermediate, `3 · 2·b·s·h·(8h/3)`. Both come to `16·b·s·h²`.
pub fn ffn_flops(model: &ModelConfig, b: u64) -> u128 {
    let (b, s, h) = (b as u128, model.seq_len as u128, model.hidden as u128);
    let tokens = b * s;
    match model.ffn {
        FfnKind::Gpt => {
            let inter = 4 * h;
            let up = 2 * tokens * h * inter;
            let down = 2 * tokens * inter * h;
            up + down
        }
        FfnKind::Llama => {
            // Each projection is 2·tokens·h·(8h/3); accumulate in thirds so
            // the non-integral intermediate width stays exact.
            let inter_thirds = 8 * h;
            let gate = 2 * tokens * h * inter_thirds;
            let up = 2 * tokens * h * inter_thirds;
            let down = 2 * tokens * inter_thirds * h;
            (gate + up + down) / 3
        }
    }
}

/// Forward FLOPs of one layer's attention core (`QK^T` and scores·`V`).
pub fn core_attention_forward_flops(model: &ModelConfig, b: u64) -> f64 {
    let (s, h) = (model.seq_len as f64, model.hidden as f64);
    4.0 * s * s * h * b as f64
}

/// Per-token-per-layer activation coefficient `c(mode)`; activation bytes per
/// layer are `s·b·h·c / t`.
pub trait ActivationModel {
    fn coefficient(&self, model: &ModelConfig, mode: AttentionMode) -> f64;
}

/// Tensor- and sequence-parallel activation memory: `34 + 5·a·s/h` bytes per
/// token-hidden element with scores stored, `34` when the attention core is
/// recomputed or fused.
impl ActivationModel for crate::config::ActivationCoefficients {
    fn coefficient(&self, model: &ModelConfig, mode: AttentionMode) -> f64 {
        match mode {
            AttentionMode::None => {
                self.base + self.scores * model.num_heads as f64 * model.seq_len as f64 / model.hidden as f64
            }
            AttentionMode::Recompute | AttentionMode::Flash => self.base,
        }
    }
}

/// Resident activation bytes of one microbatch on one stage device.
pub fn activation_bytes(model: &ModelConfig, par: &ParallelConfig) -> f64 {
    activation_bytes_with(model, par, &par.activation)
}

pub fn activation_bytes_with(model: &ModelConfig, par: &ParallelConfig, coeff: &dyn ActivationModel) -> f64 {
    let layers_per_stage = (model.layers / par.pipeline) as f64;
    let c = coeff.coefficient(model, par.attention);
    layers_per_stage * model.seq_len as f64 * model.hidden as f64 * c / par.tensor as f64 * par.micro_batch as f64
}

/// Parameters held by `stage` across its tensor-parallel group: `12h²` per
/// layer, plus an `h·v` embedding on the first and on the last stage (one
/// shared copy when there is a single stage).
pub fn stage_params(model: &ModelConfig, par: &ParallelConfig, stage: u64) -> f64 {
    let h = model.hidden as f64;
    let layers_per_stage = (model.layers / par.pipeline) as f64;
    let holds_embedding = stage == 0 || stage + 1 == par.pipeline;
    let embedding = if holds_embedding { h * model.vocab as f64 } else { 0.0 };
    12.0 * h * h * layers_per_stage + embedding
}

/// Parameter, gradient and optimizer bytes on one device of `stage`.
pub fn static_bytes(model: &ModelConfig, par: &ParallelConfig, stage: u64) -> f64 {
    stage_params(model, par, stage) / par.tensor as f64 * par.bytes_per_param
}

/// Everything the simulator needs to know about one stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageCost {
    /// Seconds for one microbatch forward.
    pub fwd_time: f64,
    pub bwd_time: f64,
    pub slot_time: f64,
    /// Hardware FLOPs of one microbatch through the stage (all tensor ranks).
    pub flops_fwd: f64,
    pub flops_bwd: f64,
    pub act_bytes_per_mb: f64,
    /// Per-stage device bytes that do not depend on the schedule.
    pub static_bytes: Vec<f64>,
    /// Whole-model model FLOPs of one microbatch.
    pub model_flops_per_mb: f64,
    pub micro_batch: u64,
    pub pipeline: u64,
    pub tensor: u64,
}

/// Seconds to integer microseconds, rounding half up.
pub fn to_micros(seconds: f64) -> u64 {
    (seconds * 1e6 + 0.5).floor() as u64
}

impl StageCost {
    pub fn fwd_us(&self) -> u64 {
        to_micros(self.fwd_time)
    }

    pub fn bwd_us(&self) -> u64 {
        to_micros(self.bwd_time)
    }

    /// `T(b)` in microseconds as the simulator sees it.
    pub fn slot_us(&self) -> u64 {
        self.fwd_us() + self.bwd_us()
    }

    /// The same stage run as a one-stage pipeline, for measuring `MFU_stage`.
    /// Keeps `pipeline` so per-stage FLOPs stay `F / p`.
    pub fn single_stage_slice(&self) -> StageCost {
        let interior = self.static_bytes.get(self.static_bytes.len() / 2).copied().unwrap_or(0.0);
        StageCost { static_bytes: vec![interior], ..self.clone() }
    }

    /// A cost with arbitrary timings, for driving the simulator directly.
    pub fn synthetic(pipeline: u64, fwd_time: f64, bwd_time: f64, act_bytes_per_mb: f64) -> Self {
        StageCost {
            fwd_time,
            bwd_time,
            slot_time: fwd_time + bwd_time,
            flops_fwd: 0.0,
            flops_bwd: 0.0,
            act_bytes_per_mb,
            static_bytes: vec![0.0; pipeline as usize],
            model_flops_per_mb: 0.0,
            micro_batch: 1,
            pipeline,
            tensor: 1,
        }
    }
}

pub fn stage_times(model: &ModelConfig, par: &ParallelConfig, hw: &HardwareProfile) -> StageCost {
    let b = par.micro_batch;
    let p = par.pipeline;
    let flops = model_flops(model, b);
    let flops_fwd = flops.total_per_microbatch / 3.0 / p as f64;
    let recompute = match par.attention {
        AttentionMode::Recompute => {
            core_attention_forward_flops(model, b) * (model.layers / p) as f64
        }
        AttentionMode::None | AttentionMode::Flash => 0.0,
    };
    let flops_bwd = 2.0 * flops_fwd + recompute;

    let device_rate = par.tensor as f64 * hw.peak_flops;
    let fwd_time = flops_fwd / (device_rate * hw.efficiency.get(Pass::Forward, par.attention));
    let bwd_time = flops_bwd / (device_rate * hw.efficiency.get(Pass::Backward, par.attention));

    StageCost {
        fwd_time,
        bwd_time,
        slot_time: fwd_time + bwd_time,
        flops_fwd,
        flops_bwd,
        act_bytes_per_mb: activation_bytes(model, par),
        static_bytes: (0..p).map(|stage| static_bytes(model, par, stage)).collect(),
        model_flops_per_mb: flops.total_per_microbatch,
        micro_batch: b,
        pipeline: p,
        tensor: par.tensor,
    }
}
