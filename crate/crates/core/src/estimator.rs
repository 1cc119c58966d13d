//! Whole-model MFU from single-stage measurements.
//!
//! With `m = B/b` microbatches, a 1F1B iteration lasts `(m + p - 1)·T(b)`,
//! where `T(b)` is one stage's forward+backward time. For homogeneous stages
//! this gives
//!
//! ```text
//! MFU(b) = MFU_stage(b) · B / (B + b·(p - 1))
//! ```
//!
//! and the speedup from micro-batch size `y` to `x`
//!
//! ```text
//! MFU(x) / MFU(y) = (B + y·(p-1)) / (B + x·(p-1)) · MFU_stage(x) / MFU_stage(y)
//! ```
//!
//! Pipeline communication, optimizer time and eviction overhead are ignored,
//! so the predicted speedup is an upper bound. All arithmetic is exact.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::config::{AttentionMode, HardwareProfile, ModelConfig, ParallelConfig, Pass};
use crate::costmodel::{core_attention_forward_flops, model_flops_exact, StageCost};
use crate::engine::SimRun;
use crate::fraction::Fraction;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EstimatorError {
    #[error("MFU must be in (0, 1], got {value}")]
    MfuOutOfRange { value: String },
    #[error("micro-batch size must be >= 1")]
    ZeroMicroBatch,
    #[error("global batch and pipeline size must be >= 1 (B={global_batch}, p={pipeline})")]
    Context { global_batch: u64, pipeline: u64 },
    #[error("single-stage MFU needs a one-stage run, got p={p}")]
    NotSingleStage { p: usize },
    #[error("run has zero duration")]
    EmptyRun,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MeasurementSource {
    /// Supplied by the user, e.g. profiled on real hardware.
    Measured,
    /// Derived from the cost model or the simulator.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMeasurement {
    pub b: u64,
    pub mfu_stage: Fraction,
    pub source: MeasurementSource,
}

fn check_mfu(value: &Fraction) -> Result<(), EstimatorError> {
    if value.is_positive() && *value <= Fraction::one() {
        Ok(())
    } else {
        Err(EstimatorError::MfuOutOfRange { value: value.to_f64().to_string() })
    }
}

impl StageMeasurement {
    pub fn new(b: u64, mfu_stage: Fraction, source: MeasurementSource) -> Result<Self, EstimatorError> {
        if b == 0 {
            return Err(EstimatorError::ZeroMicroBatch);
        }
        match source {
            MeasurementSource::Measured => check_mfu(&mfu_stage)?,
            // Microsecond rounding of T(b) can push a simulated value a hair past 1.
            MeasurementSource::Simulated if !mfu_stage.is_positive() => {
                return Err(EstimatorError::MfuOutOfRange { value: mfu_stage.to_f64().to_string() });
            }
            MeasurementSource::Simulated => {}
        }
        Ok(StageMeasurement { b, mfu_stage, source })
    }

    pub fn measured(b: u64, mfu_stage: &str) -> Result<Self, EstimatorError> {
        let value = mfu_stage
            .parse()
            .map_err(|_| EstimatorError::MfuOutOfRange { value: mfu_stage.to_string() })?;
        Self::new(b, value, MeasurementSource::Measured)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatorContext {
    pub global_batch: u64,
    pub pipeline: u64,
    /// `F / F_stage`; equal to `p` for an even layer split.
    pub f_over_fstage: Fraction,
}

impl EstimatorContext {
    pub fn new(global_batch: u64, pipeline: u64) -> Result<Self, EstimatorError> {
        if global_batch == 0 || pipeline == 0 {
            return Err(EstimatorError::Context { global_batch, pipeline });
        }
        Ok(EstimatorContext { global_batch, pipeline, f_over_fstage: Fraction::from(pipeline) })
    }

    /// `B / (B + b·(p - 1))`: the share of the iteration spent outside bubbles.
    pub fn bubble_factor(&self, b: u64) -> Fraction {
        let big_b = self.global_batch;
        Fraction::new(big_b, big_b + b * (self.pipeline - 1))
    }
}

pub fn mfu_model_from_stage(meas: &StageMeasurement, ctx: &EstimatorContext) -> Fraction {
    &meas.mfu_stage * &ctx.bubble_factor(meas.b)
}

/// `MFU(x) / MFU(y)`.
pub fn speedup_ratio(x: &StageMeasurement, y: &StageMeasurement, ctx: &EstimatorContext) -> Fraction {
    let big_b = ctx.global_batch;
    let p1 = ctx.pipeline - 1;
    let bubbles = Fraction::new(big_b + y.b * p1, big_b + x.b * p1);
    bubbles * (&x.mfu_stage / &y.mfu_stage)
}

/// Single-stage MFU from a one-stage simulation: the stage's per-device model
/// FLOPs per microbatch over `P·T(b)`, with `T(b)` the run's time per
/// microbatch.
pub fn mfu_stage_from_run(
    run: &SimRun,
    cost: &StageCost,
    hw: &HardwareProfile,
) -> Result<StageMeasurement, EstimatorError> {
    if run.p != 1 {
        return Err(EstimatorError::NotSingleStage { p: run.p });
    }
    if run.total_time_us == 0 {
        return Err(EstimatorError::EmptyRun);
    }
    let stage_flops = Fraction::from_f64(cost.model_flops_per_mb) / Fraction::from(cost.pipeline * cost.tensor);
    // P·T with T = total_time_us / m microseconds
    let capacity =
        Fraction::from_f64(hw.peak_flops) * Fraction::new(run.total_time_us, run.m as u64 * 1_000_000);
    let mfu = stage_flops / capacity;
    StageMeasurement::new(cost.micro_batch, mfu, MeasurementSource::Simulated)
}

/// Single-stage MFU straight from the cost model, in exact arithmetic (no
/// microsecond rounding).
pub fn mfu_stage_from_cost(
    model: &ModelConfig,
    par: &ParallelConfig,
    hw: &HardwareProfile,
) -> Result<StageMeasurement, EstimatorError> {
    let p = Fraction::from(par.pipeline);
    let stage_model = model_flops_exact(model, par.micro_batch) / p.clone();
    let stage_fwd = &stage_model / &Fraction::from(3u64);
    let recompute = match par.attention {
        AttentionMode::Recompute => {
            Fraction::from_f64(core_attention_forward_flops(model, par.micro_batch))
                * Fraction::from(model.layers / par.pipeline)
        }
        AttentionMode::None | AttentionMode::Flash => Fraction::zero(),
    };
    let stage_bwd = Fraction::from(2u64) * stage_fwd.clone() + recompute;
    let eff_f = Fraction::from_f64(hw.efficiency.get(Pass::Forward, par.attention));
    let eff_b = Fraction::from_f64(hw.efficiency.get(Pass::Backward, par.attention));
    // The tensor split and P cancel between numerator and T.
    let work_time = stage_fwd / eff_f + stage_bwd / eff_b;
    StageMeasurement::new(par.micro_batch, stage_model / work_time, MeasurementSource::Simulated)
}

/// Predicted vs. observed speedup when moving from measurement `y` to `x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub predicted_mfu_x: Fraction,
    pub predicted_mfu_y: Fraction,
    pub predicted_speedup: Fraction,
    pub observed_speedup: Fraction,
    /// `|predicted - observed| / observed`
    pub relative_gap: Fraction,
    /// The prediction is an upper bound; `true` is the expected case.
    pub prediction_exceeds_observation: bool,
}

impl Comparison {
    pub const NOTE: &'static str =
        "predicted speedup ignores pipeline communication, optimizer and eviction overhead; it is an approximate upper bound";
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "predicted {:.4}, observed {:.4}, gap {:.2}%",
            self.predicted_speedup.to_f64(),
            self.observed_speedup.to_f64(),
            100.0 * self.relative_gap.to_f64()
        )
    }
}

pub fn predict_vs_observed(
    x: &StageMeasurement,
    y: &StageMeasurement,
    observed_x: &Fraction,
    observed_y: &Fraction,
    ctx: &EstimatorContext,
) -> Result<Comparison, EstimatorError> {
    check_mfu(observed_x)?;
    check_mfu(observed_y)?;
    let predicted_speedup = speedup_ratio(x, y, ctx);
    let observed_speedup = observed_x / observed_y;
    let diff = if predicted_speedup >= observed_speedup {
        &predicted_speedup - &observed_speedup
    } else {
        &observed_speedup - &predicted_speedup
    };
    Ok(Comparison {
        predicted_mfu_x: mfu_model_from_stage(x, ctx),
        predicted_mfu_y: mfu_model_from_stage(y, ctx),
        relative_gap: &diff / &observed_speedup,
        prediction_exceeds_observation: predicted_speedup > observed_speedup,
        predicted_speedup,
        observed_speedup,
    })
}

/// Parses `b mfu_stage` lines. Blank lines and `#` comments are skipped.
pub fn parse_measurements(text: &str) -> Result<Vec<StageMeasurement>, EstimatorError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<_> = content.split_whitespace().collect();
        let [b, mfu] = fields[..] else {
            return Err(EstimatorError::Parse { line: line_no, message: format!("expected `b mfu_stage`, got {content:?}") });
        };
        let b: u64 = b
            .parse()
            .map_err(|_| EstimatorError::Parse { line: line_no, message: format!("bad micro-batch size {b:?}") })?;
        let meas = StageMeasurement::measured(b, mfu)
            .map_err(|e| EstimatorError::Parse { line: line_no, message: e.to_string() })?;
        out.push(meas);
    }
    Ok(out)
}
