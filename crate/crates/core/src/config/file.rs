//! TOML config files.
//!
//! ```toml
//! [model]
//! name = "gpt3-96b"          # optional, default "custom"
//! num_heads = 104
//! hidden = 9984
//! layers = 80
//! seq_len = 2048
//! vocab = 51200              # optional, default 51200 (gpt) / 32000 (llama)
//! ffn = "gpt"                # optional, "gpt" | "llama", default "gpt"
//!
//! [parallel]
//! global_batch = 128
//! tensor = 4                 # optional, default 1
//! pipeline = 8               # optional, default 1
//! micro_batch = 1            # optional, default 1
//! attention = "recompute"    # optional, "none" | "recompute" | "flash", default "none"
//! bpipe = false              # optional, default false
//! bytes_per_param = 18       # optional, default 18
//! act_coeff_base = 34        # optional, default 34
//! act_coeff_scores = 5       # optional, default 5
//!
//! [hardware]                 # optional section, defaults to 80 GiB A100 nodes
//! peak_flops = 312e12
//! mem_per_device = 85899345920
//! intra_node_bw = 300e9
//! inter_node_bw = 25e9
//! gpus_per_node = 8
//! eff_forward_none = 1.0     # eff_{forward,backward}_{none,recompute,flash}, default 1.0
//! ```
//!
//! Unknown keys are errors. `[model]` and `[parallel]` are required.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::{
    ActivationCoefficients, AttentionMode, Efficiency, FfnKind, HardwareProfile, ModelConfig, ParallelConfig, Pass,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    model: RawModel,
    parallel: RawParallel,
    #[serde(default)]
    hardware: RawHardware,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: Option<String>,
    num_heads: u64,
    hidden: u64,
    layers: u64,
    seq_len: u64,
    vocab: Option<u64>,
    ffn: Option<FfnKind>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParallel {
    global_batch: u64,
    tensor: Option<u64>,
    pipeline: Option<u64>,
    micro_batch: Option<u64>,
    attention: Option<AttentionMode>,
    bpipe: Option<bool>,
    bytes_per_param: Option<f64>,
    act_coeff_base: Option<f64>,
    act_coeff_scores: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHardware {
    peak_flops: Option<f64>,
    mem_per_device: Option<u64>,
    intra_node_bw: Option<f64>,
    inter_node_bw: Option<f64>,
    gpus_per_node: Option<u64>,
    eff_forward_none: Option<f64>,
    eff_backward_none: Option<f64>,
    eff_forward_recompute: Option<f64>,
    eff_backward_recompute: Option<f64>,
    eff_forward_flash: Option<f64>,
    eff_backward_flash: Option<f64>,
}

/// Parses a config document. Values are not validated here; run
/// [`super::validate_config`] on the result.
pub fn parse_config_str(text: &str) -> Result<(ModelConfig, ParallelConfig, HardwareProfile), ConfigError> {
    if text.trim().is_empty() {
        return Err(ConfigError::Parse { offset: 0, message: "empty config".into() });
    }
    let raw: RawFile = toml::from_str(text).map_err(|e| ConfigError::Parse {
        offset: e.span().map(|s| s.start).unwrap_or(0),
        message: e.message().to_string(),
    })?;

    let ffn = raw.model.ffn.unwrap_or(FfnKind::Gpt);
    let model = ModelConfig {
        name: raw.model.name.unwrap_or_else(|| "custom".into()),
        num_heads: raw.model.num_heads,
        hidden: raw.model.hidden,
        layers: raw.model.layers,
        seq_len: raw.model.seq_len,
        vocab: raw.model.vocab.unwrap_or_else(|| ffn.default_vocab()),
        ffn,
    };

    let rp = raw.parallel;
    let defaults = ActivationCoefficients::default();
    let par = ParallelConfig {
        tensor: rp.tensor.unwrap_or(1),
        pipeline: rp.pipeline.unwrap_or(1),
        micro_batch: rp.micro_batch.unwrap_or(1),
        global_batch: rp.global_batch,
        attention: rp.attention.unwrap_or(AttentionMode::None),
        bpipe: rp.bpipe.unwrap_or(false),
        bytes_per_param: rp.bytes_per_param.unwrap_or(ParallelConfig::DEFAULT_BYTES_PER_PARAM),
        activation: ActivationCoefficients {
            base: rp.act_coeff_base.unwrap_or(defaults.base),
            scores: rp.act_coeff_scores.unwrap_or(defaults.scores),
        },
    };

    let rh = raw.hardware;
    let base = HardwareProfile::a100_80g();
    let mut efficiency = Efficiency::default();
    for (pass, mode, value) in [
        (Pass::Forward, AttentionMode::None, rh.eff_forward_none),
        (Pass::Backward, AttentionMode::None, rh.eff_backward_none),
        (Pass::Forward, AttentionMode::Recompute, rh.eff_forward_recompute),
        (Pass::Backward, AttentionMode::Recompute, rh.eff_backward_recompute),
        (Pass::Forward, AttentionMode::Flash, rh.eff_forward_flash),
        (Pass::Backward, AttentionMode::Flash, rh.eff_backward_flash),
    ] {
        if let Some(value) = value {
            efficiency.set(pass, mode, value);
        }
    }
    let hw = HardwareProfile {
        peak_flops: rh.peak_flops.unwrap_or(base.peak_flops),
        mem_per_device: rh.mem_per_device.unwrap_or(base.mem_per_device),
        intra_node_bw: rh.intra_node_bw.unwrap_or(base.intra_node_bw),
        inter_node_bw: rh.inter_node_bw.unwrap_or(base.inter_node_bw),
        gpus_per_node: rh.gpus_per_node.unwrap_or(base.gpus_per_node),
        efficiency,
    };
    Ok((model, par, hw))
}

pub fn load_config_file(
    path: impl AsRef<Path>,
) -> Result<(ModelConfig, ParallelConfig, HardwareProfile), ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config_str(&text)
}
