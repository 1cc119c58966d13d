use std::path::PathBuf;

use pipesim::config::{
    identity_layout, load_config_file, pair_adjacent_layout, validate_config, AttentionMode, ConfigError, DeviceLayout,
    HardwareProfile, ModelConfig, ParallelConfig, Preset, ValidatedConfig, Violation,
};
use pipesim::costmodel::{stage_times, StageCost};
use pipesim::engine::{
    export_memory_dump, export_trace, memory_timeline, simulate, simulated_mfu, MemoryTimeline, SimRun,
};
use pipesim::estimator::{
    mfu_model_from_stage, mfu_stage_from_cost, mfu_stage_from_run, parse_measurements, predict_vs_observed,
    speedup_ratio, Comparison, EstimatorContext, EstimatorError, StageMeasurement,
};
use pipesim::fraction::Fraction;
use pipesim::schedule::{build_1f1b, build_bpipe, OpKind};
use thiserror::Error;

use crate::report::{Cell, Report, Section};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration")]
    Invalid(Vec<Violation>),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Output(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Usage(_) => 2,
            CliError::Config(_) | CliError::Read { .. } | CliError::Output(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::NotSingleStage { .. } | EstimatorError::EmptyRun => CliError::Internal(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn internal(context: &str) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::Internal(format!("{context}: {e}"))
}

#[derive(Debug, Clone)]
pub enum Source {
    Preset(Preset),
    File(PathBuf),
}

impl Source {
    pub fn load(&self) -> Result<(ModelConfig, ParallelConfig, HardwareProfile), CliError> {
        match self {
            Source::Preset(preset) => Ok(preset.bundle()),
            Source::File(path) => Ok(load_config_file(path)?),
        }
    }
}

fn validated(model: &ModelConfig, par: &ParallelConfig, hw: &HardwareProfile) -> Result<ValidatedConfig, CliError> {
    validate_config(model, par, hw).map_err(CliError::Invalid)
}

fn config_section(cfg: &ValidatedConfig) -> Section {
    let (m, par, hw) = (&cfg.model, &cfg.parallel, &cfg.hardware);
    let mut s = Section::new("config");
    s.row("model", Cell::text(&m.name))
        .row("heads", Cell::int(m.num_heads, "count"))
        .row("hidden", Cell::int(m.hidden, "count"))
        .row("layers", Cell::int(m.layers, "count"))
        .row("seq_len", Cell::int(m.seq_len, "tokens"))
        .row("vocab", Cell::int(m.vocab, "tokens"))
        .row("ffn", Cell::text(m.ffn.to_string()))
        .row("tensor parallel", Cell::int(par.tensor, "devices"))
        .row("pipeline stages", Cell::int(par.pipeline, "stages"))
        .row("micro-batch b", Cell::int(par.micro_batch, "samples"))
        .row("global batch B", Cell::int(par.global_batch, "samples"))
        .row("microbatches m", Cell::int(par.microbatches(), "count"))
        .row("attention", Cell::text(par.attention.to_string()))
        .row("bpipe", Cell::text(if par.bpipe { "on" } else { "off" }))
        .row("peak compute", Cell::sci(hw.peak_flops, "FLOP/s"))
        .row("device memory", Cell::int(hw.mem_per_device, "B"))
        .row("intra-node bandwidth", Cell::sci(hw.intra_node_bw, "B/s"))
        .row("inter-node bandwidth", Cell::sci(hw.inter_node_bw, "B/s"))
        .row("gpus per node", Cell::int(hw.gpus_per_node, "devices"));
    s
}

fn warnings_section(cfg: &ValidatedConfig) -> Option<Section> {
    if cfg.warnings.is_empty() {
        return None;
    }
    let mut s = Section::new("warnings");
    for w in &cfg.warnings {
        s.row("warning", Cell::text(w));
    }
    Some(s)
}

pub fn cmd_validate(source: &Source) -> Result<Report, CliError> {
    let (model, par, hw) = source.load()?;
    let cfg = validated(&model, &par, &hw)?;
    let mut report = Report::default();
    report.push(config_section(&cfg));
    if let Some(w) = warnings_section(&cfg) {
        report.push(w);
    }
    let mut s = Section::new("validation");
    s.row("status", Cell::text("valid"));
    report.push(s);
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    pub bpipe: Option<bool>,
    pub micro_batch: Option<u64>,
    pub attention: Option<AttentionMode>,
    pub trace: Option<PathBuf>,
    pub mem_dump: Option<PathBuf>,
}

fn run_schedule(
    cost: &StageCost,
    hw: &HardwareProfile,
    layout: &DeviceLayout,
    p: u64,
    m: u64,
    bpipe: bool,
) -> Result<SimRun, CliError> {
    let (p, m) = (p as usize, m as usize);
    let schedule = if bpipe { build_bpipe(p, m) } else { build_1f1b(p, m) }.map_err(|e| internal("schedule")(&e))?;
    simulate(&schedule, cost, hw, layout).map_err(|e| internal("simulation")(&e))
}

fn bubble_fraction(run: &SimRun) -> Fraction {
    let idle: u64 = run.per_stage_idle_us.iter().sum();
    let capacity = run.p as u64 * run.total_time_us;
    if capacity == 0 {
        Fraction::zero()
    } else {
        Fraction::new(idle, capacity)
    }
}

fn memory_section(timeline: &MemoryTimeline) -> Section {
    let mut s = Section::with_columns(
        "memory",
        &["peak activations", "activation bytes", "static bytes", "peak bytes", "fits"],
    );
    for d in &timeline.devices {
        s.row_cells(
            format!("stage {}", d.stage),
            vec![
                Cell::int(d.peak_activations, "activations"),
                Cell::bytes(d.peak_activation_bytes),
                Cell::bytes(d.static_bytes),
                Cell::bytes(d.peak_bytes),
                Cell::pass_fail(d.feasible),
            ],
        );
    }
    s
}

pub fn cmd_simulate(source: &Source, opts: &SimulateOptions) -> Result<Report, CliError> {
    let (model, mut par, hw) = source.load()?;
    if let Some(b) = opts.micro_batch {
        par.micro_batch = b;
    }
    if let Some(mode) = opts.attention {
        par.attention = mode;
    }
    if let Some(on) = opts.bpipe {
        par.bpipe = on;
    }
    let cfg = validated(&model, &par, &hw)?;
    let (model, par, hw) = (&cfg.model, &cfg.parallel, &cfg.hardware);

    let cost = stage_times(model, par, hw);
    let m = par.microbatches();
    let run = run_schedule(&cost, hw, &cfg.layout, par.pipeline, m, par.bpipe)?;
    let timeline = memory_timeline(&run, hw.mem_per_device);

    if let Some(path) = &opts.trace {
        export_trace(&run, &cfg.layout, path).map_err(|e| CliError::Output(e.to_string()))?;
    }
    if let Some(path) = &opts.mem_dump {
        export_memory_dump(&run, path).map_err(|e| CliError::Output(e.to_string()))?;
    }

    let mut report = Report::default();
    report.push(config_section(&cfg));
    if let Some(w) = warnings_section(&cfg) {
        report.push(w);
    }
    report.push(memory_section(&timeline));

    let mut feas = Section::new("feasibility");
    feas.row("max peak activations", Cell::int(timeline.max_peak_activations(), "activations"))
        .row("max peak bytes", Cell::bytes(timeline.max_peak_bytes()))
        .row("device memory", Cell::int(hw.mem_per_device, "B"))
        .row("FEASIBILITY:", Cell::pass_fail(timeline.all_feasible()));
    report.push(feas);

    let slot = cost.slot_us();
    let mut timing = Section::new("timing");
    timing
        .row("forward time", Cell::int(cost.fwd_us(), "us"))
        .row("backward time", Cell::int(cost.bwd_us(), "us"))
        .row("stage time T(b)", Cell::int(slot, "us"))
        .row("total time", Cell::int(run.total_time_us, "us"))
        .row("1F1B closed form (m+p-1)T(b)", Cell::int((m + par.pipeline - 1) * slot, "us"))
        .row("bubble fraction", Cell::fraction(&bubble_fraction(&run)))
        .row("simulated MFU", Cell::fraction(&simulated_mfu(&run, model, par, hw)));
    report.push(timing);

    let stage = mfu_stage_from_cost(model, par, hw)?;
    let ctx = EstimatorContext::new(par.global_batch, par.pipeline)?;
    let mut est = Section::new("estimator");
    est.row("single-stage MFU", Cell::fraction(&stage.mfu_stage))
        .row("predicted MFU", Cell::fraction(&mfu_model_from_stage(&stage, &ctx)));
    report.push(est);

    if par.bpipe {
        let baseline = run_schedule(&cost, hw, &cfg.layout, par.pipeline, m, false)?;
        let evictions = run.events.iter().filter(|e| e.op.kind == OpKind::Evict).count() as u64;
        let overhead = run.total_time_us.saturating_sub(baseline.total_time_us);
        let stall: u64 = run.load_stall_us.iter().sum();
        let transfer = run.transfer_us.iter().copied().max().unwrap_or(0);
        let attributed = match (overhead, stall) {
            (0, _) => "none",
            (_, 0) => "other",
            _ => "load stalls",
        };
        let mut s = Section::new("bpipe");
        s.row("evictions", Cell::int(evictions, "count"))
            .row("transfer time per activation", Cell::int(transfer, "us"))
            .row("1F1B baseline total time", Cell::int(baseline.total_time_us, "us"))
            .row("overhead vs 1F1B", Cell::int(overhead, "us"))
            .row("load stall time", Cell::int(stall, "us"))
            .row("overhead attributed to", Cell::text(attributed));
        for (stage, &us) in run.load_stall_us.iter().enumerate() {
            if us > 0 {
                s.row(format!("stage {stage} load stall"), Cell::int(us, "us"));
            }
        }
        report.push(s);
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    pub b_from: u64,
    pub b_to: u64,
    pub mfu_stage_from: Option<String>,
    pub mfu_stage_to: Option<String>,
    pub global_batch: Option<u64>,
    pub pipeline: Option<u64>,
    pub observed_from: Option<String>,
    pub observed_to: Option<String>,
    pub measurements: Option<PathBuf>,
}

fn parse_fraction(name: &str, text: &str) -> Result<Fraction, CliError> {
    text.parse().map_err(|_| CliError::Usage(format!("{name}: not a number: {text:?}")))
}

pub fn cmd_estimate(source: Option<&Source>, opts: &EstimateOptions) -> Result<Report, CliError> {
    let loaded = source.map(Source::load).transpose()?;
    let global_batch = opts
        .global_batch
        .or(loaded.as_ref().map(|(_, par, _)| par.global_batch))
        .ok_or_else(|| CliError::Usage("--B is required without --preset or --config".into()))?;
    let pipeline = opts
        .pipeline
        .or(loaded.as_ref().map(|(_, par, _)| par.pipeline))
        .ok_or_else(|| CliError::Usage("--p is required without --preset or --config".into()))?;
    let ctx = EstimatorContext::new(global_batch, pipeline)?;

    let table = match &opts.measurements {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.clone(), source })?;
            parse_measurements(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => Vec::new(),
    };
    let lookup = |b: u64, inline: &Option<String>, flag: &str| -> Result<StageMeasurement, CliError> {
        if let Some(text) = inline {
            return Ok(StageMeasurement::measured(b, text)?);
        }
        table
            .iter()
            .find(|m| m.b == b)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("no single-stage MFU for b={b}: pass {flag} or --measurements")))
    };
    let from = lookup(opts.b_from, &opts.mfu_stage_from, "--mfu-stage-from")?;
    let to = lookup(opts.b_to, &opts.mfu_stage_to, "--mfu-stage-to")?;

    let mut report = Report::default();
    let mut inputs = Section::new("inputs");
    inputs
        .row("global batch B", Cell::int(global_batch, "samples"))
        .row("pipeline stages p", Cell::int(pipeline, "stages"))
        .row("from: micro-batch b", Cell::int(from.b, "samples"))
        .row("from: single-stage MFU", Cell::fraction(&from.mfu_stage))
        .row("to: micro-batch b", Cell::int(to.b, "samples"))
        .row("to: single-stage MFU", Cell::fraction(&to.mfu_stage));
    report.push(inputs);

    let mut pred = Section::new("prediction");
    pred.row("from: bubble factor", Cell::fraction(&ctx.bubble_factor(from.b)))
        .row("from: predicted MFU", Cell::fraction(&mfu_model_from_stage(&from, &ctx)))
        .row("to: bubble factor", Cell::fraction(&ctx.bubble_factor(to.b)))
        .row("to: predicted MFU", Cell::fraction(&mfu_model_from_stage(&to, &ctx)))
        .row("predicted speedup", Cell::ratio(&speedup_ratio(&to, &from, &ctx)));
    report.push(pred);

    match (&opts.observed_from, &opts.observed_to) {
        (Some(of), Some(ot)) => {
            let of = parse_fraction("--observed-from", of)?;
            let ot = parse_fraction("--observed-to", ot)?;
            let cmp = predict_vs_observed(&to, &from, &ot, &of, &ctx)?;
            report.push(comparison_section(&cmp, &of, &ot));
        }
        (None, None) => {}
        _ => return Err(CliError::Usage("--observed-from and --observed-to go together".into())),
    }
    Ok(report)
}

fn comparison_section(cmp: &Comparison, observed_from: &Fraction, observed_to: &Fraction) -> Section {
    let mut s = Section::new("comparison");
    s.row("from: observed MFU", Cell::fraction(observed_from))
        .row("to: observed MFU", Cell::fraction(observed_to))
        .row("observed speedup", Cell::ratio(&cmp.observed_speedup))
        .row("predicted speedup", Cell::ratio(&cmp.predicted_speedup))
        .row("relative gap", Cell::percent(&cmp.relative_gap))
        .row("prediction exceeds observation", Cell::text(if cmp.prediction_exceeds_observation { "yes" } else { "no" }))
        .row("note", Cell::text(Comparison::NOTE));
    s
}

struct SweepRow {
    b: u64,
    mfu_stage: Fraction,
    predicted: Fraction,
    fwd_flops_per_sample: f64,
    peak_1f1b: f64,
    fits_1f1b: bool,
    bpipe: Option<(f64, bool)>,
}

/// A simulated row, or the violations that kept `b` from being simulated.
type PlannedRow = Result<Result<SweepRow, CliError>, Vec<Violation>>;

fn sweep_one(cfg: &ValidatedConfig) -> Result<SweepRow, CliError> {
    let (model, par, hw) = (&cfg.model, &cfg.parallel, &cfg.hardware);
    let m = par.microbatches();
    let g = hw.gpus_per_node as usize;
    let cost = stage_times(model, par, hw);

    let slice = cost.single_stage_slice();
    let single_layout = identity_layout(1, g).map_err(|e| internal("layout")(&e))?;
    let single = run_schedule(&slice, hw, &single_layout, 1, m, false)?;
    let stage = mfu_stage_from_run(&single, &slice, hw)?;
    let ctx = EstimatorContext::new(par.global_batch, par.pipeline)?;
    let predicted = mfu_model_from_stage(&stage, &ctx);

    let p = par.pipeline as usize;
    let plain_layout = identity_layout(p, g).map_err(|e| internal("layout")(&e))?;
    let plain = memory_timeline(&run_schedule(&cost, hw, &plain_layout, par.pipeline, m, false)?, hw.mem_per_device);
    let bpipe = match (p >= 2).then(|| pair_adjacent_layout(p, g)) {
        Some(Ok(layout)) => {
            let t = memory_timeline(&run_schedule(&cost, hw, &layout, par.pipeline, m, true)?, hw.mem_per_device);
            Some((t.max_peak_bytes(), t.all_feasible()))
        }
        _ => None,
    };
    Ok(SweepRow {
        b: par.micro_batch,
        mfu_stage: stage.mfu_stage,
        predicted,
        fwd_flops_per_sample: cost.flops_fwd / par.micro_batch as f64,
        peak_1f1b: plain.max_peak_bytes(),
        fits_1f1b: plain.all_feasible(),
        bpipe,
    })
}

pub fn cmd_sweep(source: &Source, b_list: &[u64]) -> Result<Report, CliError> {
    let (model, par, hw) = source.load()?;
    let mut bs = b_list.to_vec();
    bs.sort_unstable();
    bs.dedup();
    if bs.is_empty() {
        return Err(CliError::Usage("--b-list is empty".into()));
    }

    // Invalid entries become warning rows; the rest simulate in parallel.
    let mut plans = Vec::new();
    for &b in &bs {
        let par_b = ParallelConfig { micro_batch: b, ..par.clone() };
        plans.push((b, validate_config(&model, &par_b, &hw)));
    }
    let results: Vec<(u64, PlannedRow)> = std::thread::scope(|scope| {
        let handles: Vec<_> = plans
            .iter()
            .map(|(b, plan)| {
                let b = *b;
                match plan {
                    Ok(cfg) => (b, Some(scope.spawn(move || sweep_one(cfg))), None),
                    Err(v) => (b, None, Some(v.clone())),
                }
            })
            .collect();
        handles
            .into_iter()
            .map(|(b, handle, violations)| match (handle, violations) {
                (Some(h), _) => {
                    let row = h.join().unwrap_or_else(|_| Err(CliError::Internal(format!("sweep b={b} panicked"))));
                    (b, Ok(row))
                }
                (None, v) => (b, Err(v.unwrap_or_default())),
            })
            .collect()
    });

    let mut report = Report::default();
    let mut s = Section::with_columns(
        "sweep",
        &["single-stage MFU", "predicted MFU", "stage fwd FLOPs/sample", "1F1B peak", "1F1B fits", "BPipe peak", "BPipe fits"],
    );
    let mut per_sample = Vec::new();
    for (b, result) in results {
        match result {
            Ok(row) => {
                let row = row?;
                per_sample.push(row.fwd_flops_per_sample);
                let (bp_peak, bp_fits) = match row.bpipe {
                    Some((peak, fits)) => (Cell::bytes(peak), Cell::pass_fail(fits)),
                    None => (Cell::text("n/a"), Cell::text("n/a")),
                };
                s.row_cells(
                    format!("b={}", row.b),
                    vec![
                        Cell::fraction(&row.mfu_stage),
                        Cell::fraction(&row.predicted),
                        Cell::sci(row.fwd_flops_per_sample, "FLOP"),
                        Cell::bytes(row.peak_1f1b),
                        Cell::pass_fail(row.fits_1f1b),
                        bp_peak,
                        bp_fits,
                    ],
                );
            }
            Err(violations) => {
                let detail: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                s.row_cells(format!("b={b}"), vec![Cell::text(format!("warning: skipped, {}", detail.join("; ")))]);
            }
        }
    }
    report.push(s);

    let mut checks = Section::new("checks");
    let linear = per_sample.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12 * w[0].abs());
    checks.row("rows", Cell::int(per_sample.len() as u64, "count"));
    checks.row("stage FLOPs linear in b", Cell::pass_fail(linear));
    report.push(checks);
    Ok(report)
}
