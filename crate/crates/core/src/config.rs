//! Model, parallelism and hardware configuration.
//!
//! Everything here is plain data plus validation. [`validate_config`] collects
//! every violated invariant instead of stopping at the first one, so a config
//! file with several mistakes is reported in one pass.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod file;
mod layout;

pub use file::{load_config_file, parse_config_str, ConfigError};
pub use layout::{identity_layout, pair_adjacent_layout, DeviceLayout, LayoutError, Placement};

/// Shape of the feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// Two matmuls through a `4h` intermediate.
    Gpt,
    /// Gated block: three matmuls through an `8h/3` intermediate.
    Llama,
}

impl FfnKind {
    pub fn default_vocab(self) -> u64 {
        match self {
            FfnKind::Gpt => 51_200,
            FfnKind::Llama => 32_000,
        }
    }
}

impl fmt::Display for FfnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FfnKind::Gpt => "gpt",
            FfnKind::Llama => "llama",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub num_heads: u64,
    pub hidden: u64,
    pub layers: u64,
    pub seq_len: u64,
    pub vocab: u64,
    pub ffn: FfnKind,
}

impl ModelConfig {
    pub fn llama_65b() -> Self {
        ModelConfig {
            name: "llama-65b".into(),
            num_heads: 64,
            hidden: 8192,
            layers: 80,
            seq_len: 2048,
            vocab: FfnKind::Llama.default_vocab(),
            ffn: FfnKind::Llama,
        }
    }

    pub fn gpt3_96b() -> Self {
        ModelConfig {
            name: "gpt3-96b".into(),
            num_heads: 104,
            hidden: 9984,
            layers: 80,
            seq_len: 2048,
            vocab: FfnKind::Gpt.default_vocab(),
            ffn: FfnKind::Gpt,
        }
    }
}

/// How the attention core is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Plain attention; score and softmax tensors are stored.
    None,
    /// Attention core recomputed during backward.
    Recompute,
    /// Fused attention; nothing quadratic in `s` is stored, nothing recomputed.
    Flash,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::None, AttentionMode::Recompute, AttentionMode::Flash];

    fn index(self) -> usize {
        match self {
            AttentionMode::None => 0,
            AttentionMode::Recompute => 1,
            AttentionMode::Flash => 2,
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::Recompute => "recompute",
            AttentionMode::Flash => "flash",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(AttentionMode::None),
            "recompute" => Ok(AttentionMode::Recompute),
            "flash" => Ok(AttentionMode::Flash),
            other => Err(format!("unknown attention mode {other:?} (expected none, recompute or flash)")),
        }
    }
}

/// Per-layer activation bytes are `s*b*h*(base + scores*a*s/h)`; the `scores`
/// term only applies when attention scores are kept (`AttentionMode::None`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationCoefficients {
    pub base: f64,
    pub scores: f64,
}

impl Default for ActivationCoefficients {
    fn default() -> Self {
        ActivationCoefficients { base: 34.0, scores: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub tensor: u64,
    pub pipeline: u64,
    pub micro_batch: u64,
    pub global_batch: u64,
    pub attention: AttentionMode,
    pub bpipe: bool,
    /// Parameter + gradient + optimizer bytes per parameter.
    pub bytes_per_param: f64,
    pub activation: ActivationCoefficients,
}

impl ParallelConfig {
    pub const DEFAULT_BYTES_PER_PARAM: f64 = 18.0;

    /// Number of microbatches per iteration, `B / b`.
    pub fn microbatches(&self) -> u64 {
        self.global_batch / self.micro_batch.max(1)
    }

    pub fn with_micro_batch(mut self, b: u64) -> Self {
        self.micro_batch = b;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pass {
    Forward,
    Backward,
}

/// Achievable fraction of peak FLOPS per (pass, attention mode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    forward: [f64; 3],
    backward: [f64; 3],
}

impl Default for Efficiency {
    fn default() -> Self {
        Efficiency::uniform(1.0)
    }
}

impl Efficiency {
    pub fn uniform(value: f64) -> Self {
        Efficiency { forward: [value; 3], backward: [value; 3] }
    }

    pub fn get(&self, pass: Pass, mode: AttentionMode) -> f64 {
        match pass {
            Pass::Forward => self.forward[mode.index()],
            Pass::Backward => self.backward[mode.index()],
        }
    }

    pub fn set(&mut self, pass: Pass, mode: AttentionMode, value: f64) {
        match pass {
            Pass::Forward => self.forward[mode.index()] = value,
            Pass::Backward => self.backward[mode.index()] = value,
        }
    }

    pub fn with(mut self, pass: Pass, mode: AttentionMode, value: f64) -> Self {
        self.set(pass, mode, value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Peak FLOP/s of one device.
    pub peak_flops: f64,
    pub mem_per_device: u64,
    /// Bytes/s between devices of one node.
    pub intra_node_bw: f64,
    /// Bytes/s between devices of different nodes.
    pub inter_node_bw: f64,
    pub gpus_per_node: u64,
    pub efficiency: Efficiency,
}

impl HardwareProfile {
    /// 80 GiB A100 nodes: 312 TFLOP/s bf16, 300 GB/s NVLink per direction,
    /// 200 Gb/s InfiniBand between nodes, 8 GPUs per node.
    pub fn a100_80g() -> Self {
        HardwareProfile {
            peak_flops: 312e12,
            mem_per_device: 80 * (1 << 30),
            intra_node_bw: 300e9,
            inter_node_bw: 25e9,
            gpus_per_node: 8,
            efficiency: Efficiency::default(),
        }
    }
}

impl Default for HardwareProfile {
    fn default() -> Self {
        HardwareProfile::a100_80g()
    }
}

/// The two bundled model configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Llama65B,
    Gpt3_96B,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Llama65B => "llama-65b",
            Preset::Gpt3_96B => "gpt3-96b",
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Llama65B => ModelConfig::llama_65b(),
            Preset::Gpt3_96B => ModelConfig::gpt3_96b(),
        }
    }

    /// t=4, p=8, B=128, b=1; LLaMA runs plain attention, GPT-3 recomputes it.
    pub fn parallel(self) -> ParallelConfig {
        ParallelConfig {
            tensor: 4,
            pipeline: 8,
            micro_batch: 1,
            global_batch: 128,
            attention: match self {
                Preset::Llama65B => AttentionMode::None,
                Preset::Gpt3_96B => AttentionMode::Recompute,
            },
            bpipe: false,
            bytes_per_param: ParallelConfig::DEFAULT_BYTES_PER_PARAM,
            activation: ActivationCoefficients::default(),
        }
    }

    pub fn bundle(self) -> (ModelConfig, ParallelConfig, HardwareProfile) {
        (self.model(), self.parallel(), HardwareProfile::a100_80g())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llama-65b" => Ok(Preset::Llama65B),
            "gpt3-96b" => Ok(Preset::Gpt3_96B),
            other => Err(format!("unknown preset {other:?} (expected llama-65b or gpt3-96b)")),
        }
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{invariant} ({detail})")]
pub struct Violation {
    pub invariant: String,
    pub detail: String,
}

impl Violation {
    fn new(invariant: impl Into<String>, detail: impl Into<String>) -> Self {
        Violation { invariant: invariant.into(), detail: detail.into() }
    }
}

/// A configuration bundle whose invariants all hold.
#[derive(Debug, Clone)]
pub struct ValidatedConfig {
    pub model: ModelConfig,
    pub parallel: ParallelConfig,
    pub hardware: HardwareProfile,
    pub layout: DeviceLayout,
    pub warnings: Vec<String>,
}

/// Checks every invariant of the three inputs and returns either the
/// validated bundle or the full list of violations.
pub fn validate_config(
    model: &ModelConfig,
    par: &ParallelConfig,
    hw: &HardwareProfile,
) -> Result<ValidatedConfig, Vec<Violation>> {
    let mut v = Vec::new();

    let positive = |v: &mut Vec<Violation>, name: &str, value: u64| {
        if value == 0 {
            v.push(Violation::new(format!("{name} > 0"), format!("{name}=0")));
        }
    };
    positive(&mut v, "num_heads", model.num_heads);
    positive(&mut v, "hidden", model.hidden);
    positive(&mut v, "layers", model.layers);
    positive(&mut v, "seq_len", model.seq_len);
    positive(&mut v, "vocab", model.vocab);
    positive(&mut v, "tensor", par.tensor);
    positive(&mut v, "pipeline", par.pipeline);
    positive(&mut v, "micro_batch", par.micro_batch);
    positive(&mut v, "global_batch", par.global_batch);
    positive(&mut v, "gpus_per_node", hw.gpus_per_node);
    positive(&mut v, "mem_per_device", hw.mem_per_device);

    let (h, a, l) = (model.hidden, model.num_heads, model.layers);
    let (t, p, b, big_b) = (par.tensor, par.pipeline, par.micro_batch, par.global_batch);

    if a > 0 && h % a != 0 {
        v.push(Violation::new("h mod a != 0", format!("h={h}, a={a}")));
    }
    if b > 0 && big_b % b != 0 {
        v.push(Violation::new("B mod b != 0", format!("B={big_b}, b={b}")));
    }
    if p > 0 && l % p != 0 {
        v.push(Violation::new("l mod p != 0", format!("l={l}, p={p}")));
    }
    if t > 0 && a % t != 0 {
        v.push(Violation::new("a mod t != 0", format!("a={a}, t={t}")));
    }
    if t > 0 && h % t != 0 {
        v.push(Violation::new("h mod t != 0", format!("h={h}, t={t}")));
    }
    if !(par.bytes_per_param > 0.0 && par.bytes_per_param.is_finite()) {
        v.push(Violation::new("bytes_per_param > 0", format!("bytes_per_param={}", par.bytes_per_param)));
    }
    for (name, c) in [("act_coeff_base", par.activation.base), ("act_coeff_scores", par.activation.scores)] {
        if !(c >= 0.0 && c.is_finite()) {
            v.push(Violation::new(format!("{name} >= 0"), format!("{name}={c}")));
        }
    }

    for (name, rate) in [
        ("peak_flops", hw.peak_flops),
        ("intra_node_bw", hw.intra_node_bw),
        ("inter_node_bw", hw.inter_node_bw),
    ] {
        if !(rate > 0.0 && rate.is_finite()) {
            v.push(Violation::new(format!("{name} > 0"), format!("{name}={rate}")));
        }
    }
    for mode in AttentionMode::ALL {
        let fwd = hw.efficiency.get(Pass::Forward, mode);
        let bwd = hw.efficiency.get(Pass::Backward, mode);
        for (pass, e) in [("forward", fwd), ("backward", bwd)] {
            if !(e > 0.0 && e <= 1.0) {
                v.push(Violation::new("efficiency in (0, 1]", format!("efficiency[{pass}, {mode}]={e}")));
            }
        }
        // Keeps t_b >= t_f: backward does twice the forward work.
        if fwd > 0.0 && bwd > 0.0 && 2.0 * bwd < fwd {
            v.push(Violation::new(
                "backward efficiency >= forward efficiency / 2",
                format!("efficiency[forward, {mode}]={fwd}, efficiency[backward, {mode}]={bwd}"),
            ));
        }
    }

    if par.bpipe && p > 0 && p < 2 {
        v.push(Violation::new("bpipe requires p >= 2", format!("p={p}")));
    }

    let layout = if p > 0 && hw.gpus_per_node > 0 {
        let built = if par.bpipe {
            pair_adjacent_layout(p as usize, hw.gpus_per_node as usize)
        } else {
            identity_layout(p as usize, hw.gpus_per_node as usize)
        };
        match built {
            Ok(layout) => Some(layout),
            Err(e) => {
                v.push(Violation::new("evictor/acceptor pairs co-located", e.to_string()));
                None
            }
        }
    } else {
        None
    };

    if !v.is_empty() {
        return Err(v);
    }

    let mut warnings = Vec::new();
    let m = par.microbatches();
    if m < p {
        warnings.push(format!(
            "m = B/b = {m} < p = {p}: schedule is valid but dominated by pipeline bubbles"
        ));
    }

    Ok(ValidatedConfig {
        model: model.clone(),
        parallel: par.clone(),
        hardware: hw.clone(),
        layout: layout.expect("layout built when no violations"),
        warnings,
    })
}
