//! Simulator and analytic estimator for pipeline-parallel Transformer training.
//!
//! - [`config`]: model, parallelism and hardware inputs, presets, device layout
//! - [`costmodel`]: FLOPs, activation and parameter bytes, per-pass times
//! - [`schedule`]: 1F1B and BPipe per-stage programs
//! - [`engine`]: discrete-event simulation, memory timelines, traces
//! - [`estimator`]: whole-model MFU and speedup from single-stage MFU

pub mod config;
pub mod costmodel;
pub mod engine;
pub mod estimator;
pub mod fraction;
pub mod schedule;

pub use config::{
    validate_config, AttentionMode, DeviceLayout, FfnKind, HardwareProfile, ModelConfig, ParallelConfig, Preset,
    ValidatedConfig,
};
pub use costmodel::{model_flops, stage_times, FlopsBreakdown, StageCost};
pub use engine::{memory_timeline, simulate, simulated_mfu, SimRun};
pub use estimator::{mfu_model_from_stage, speedup_ratio, EstimatorContext, StageMeasurement};
pub use fraction::Fraction;
pub use schedule::{build_1f1b, build_bpipe, peak_resident, Schedule};
