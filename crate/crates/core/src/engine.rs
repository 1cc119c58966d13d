//! Discrete-event simulation of a schedule.
//!
//! Every stage device has two lanes: a compute lane running forwards and
//! backwards, and a transfer lane running evictions and loads. Each lane
//! executes its ops in schedule order; an op starts at the earliest instant
//! its lane is free and all of its dependencies are satisfied. Time is kept in
//! integer microseconds so closed-form checks are exact.
//!
//! Stage-to-stage activation handoff is free. Evictions and loads take
//! `act_bytes_per_mb / bandwidth`, with intra-node bandwidth when the pair
//! shares a node.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{DeviceLayout, HardwareProfile, ModelConfig, ParallelConfig};
use crate::costmodel::{model_flops, to_micros, StageCost};
use crate::fraction::Fraction;
use crate::schedule::{DepKind, OpKind, Schedule, ScheduleError, ScheduleOp};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("malformed schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("layout has {layout} stages, schedule has {schedule}")]
    LayoutMismatch { layout: usize, schedule: usize },
    #[error("cost describes {cost} stages, schedule has {schedule}")]
    CostMismatch { cost: usize, schedule: usize },
    #[error("dependency refers to an op not in the schedule: {op}")]
    UnknownOp { op: ScheduleOp },
    #[error("dependency cycle: no runnable op, blocked lane heads: {}", blocked.iter().map(|op| op.to_string()).collect::<Vec<_>>().join(", "))]
    Deadlock { blocked: Vec<ScheduleOp> },
}

#[derive(Debug, Error)]
#[error("cannot write {path}: {source}")]
pub struct ExportError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SimEvent {
    pub op: ScheduleOp,
    pub start_us: u64,
    pub end_us: u64,
}

impl SimEvent {
    pub fn stage(&self) -> usize {
        self.op.stage
    }

    pub fn duration_us(&self) -> u64 {
        self.end_us - self.start_us
    }
}

/// Resident activation count on one device from `time_us` until the next step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryStep {
    pub time_us: u64,
    pub activations: u64,
}

/// A completed simulation. Immutable once returned.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRun {
    pub p: usize,
    pub m: usize,
    /// All ops in start-time order (ties: microbatch, kind, stage).
    pub events: Vec<SimEvent>,
    /// Per stage device: activations resident, own plus hosted.
    pub mem_series: Vec<Vec<MemoryStep>>,
    pub total_time_us: u64,
    pub per_stage_busy_us: Vec<u64>,
    pub per_stage_idle_us: Vec<u64>,
    /// Time backwards waited for a load beyond their other constraints.
    pub load_stall_us: Vec<u64>,
    /// Duration of one eviction or load issued by each stage (0 if none).
    pub transfer_us: Vec<u64>,
    /// Hardware FLOPs executed, recomputation included.
    pub flops_done: f64,
    pub act_bytes_per_mb: f64,
    pub static_bytes: Vec<f64>,
}

fn transfer_duration(cost: &StageCost, hw: &HardwareProfile, layout: &DeviceLayout, stage: usize, peer: usize) -> u64 {
    if cost.act_bytes_per_mb == 0.0 {
        return 0;
    }
    let bw = if layout.colocated(stage, peer) { hw.intra_node_bw } else { hw.inter_node_bw };
    to_micros(cost.act_bytes_per_mb / bw)
}

/// Start time, then microbatch, kind and stage.
type OrderKey = (u64, usize, OpKind, usize);

pub fn simulate(
    schedule: &Schedule,
    cost: &StageCost,
    hw: &HardwareProfile,
    layout: &DeviceLayout,
) -> Result<SimRun, SimError> {
    let p = schedule.p;
    if layout.stages() != p {
        return Err(SimError::LayoutMismatch { layout: layout.stages(), schedule: p });
    }
    if cost.static_bytes.len() != p {
        return Err(SimError::CostMismatch { cost: cost.static_bytes.len(), schedule: p });
    }

    let ops: Vec<ScheduleOp> = schedule.ops().copied().collect();
    let index: HashMap<ScheduleOp, usize> = ops.iter().enumerate().map(|(i, op)| (*op, i)).collect();
    if index.len() != ops.len() {
        let mut seen = HashMap::new();
        for op in &ops {
            if seen.insert(*op, ()).is_some() {
                return Err(ScheduleError::Duplicate { op: *op }.into());
            }
        }
    }

    let mut preds: Vec<Vec<(usize, DepKind)>> = vec![Vec::new(); ops.len()];
    for dep in &schedule.deps {
        let before = *index.get(&dep.before).ok_or(SimError::UnknownOp { op: dep.before })?;
        let after = *index.get(&dep.after).ok_or(SimError::UnknownOp { op: dep.after })?;
        preds[after].push((before, dep.kind));
    }

    let (fwd_us, bwd_us) = (cost.fwd_us(), cost.bwd_us());
    let mut transfer_us = vec![0u64; p];
    let duration: Vec<u64> = ops
        .iter()
        .map(|op| match op.kind {
            OpKind::Forward => fwd_us,
            OpKind::Backward => bwd_us,
            OpKind::Evict | OpKind::Load => {
                let d = transfer_duration(cost, hw, layout, op.stage, op.peer.unwrap_or(op.stage));
                transfer_us[op.stage] = d;
                d
            }
        })
        .collect();

    // Lane 2s is stage s compute, 2s+1 is stage s transfers.
    let mut lanes: Vec<Vec<usize>> = vec![Vec::new(); 2 * p];
    for (i, op) in ops.iter().enumerate() {
        let lane = 2 * op.stage + usize::from(!op.kind.is_compute());
        lanes[lane].push(i);
    }

    let mut start: Vec<Option<u64>> = vec![None; ops.len()];
    let mut end: Vec<Option<u64>> = vec![None; ops.len()];
    let mut head = vec![0usize; lanes.len()];
    let mut lane_free = vec![0u64; lanes.len()];
    let mut load_stall_us = vec![0u64; p];
    let mut events = Vec::with_capacity(ops.len());

    // Earliest start of `id` given committed predecessors, or None if a
    // predecessor is still pending. Also returns the bound without loads.
    let ready_at = |id: usize, lane_free: u64, start: &[Option<u64>], end: &[Option<u64>]| -> Option<(u64, u64)> {
        let mut at = lane_free;
        let mut without_loads = lane_free;
        for &(pred, kind) in &preds[id] {
            let t = match kind {
                DepKind::FinishToStart => end[pred]?,
                DepKind::StartToStart => start[pred]?,
            };
            at = at.max(t);
            if ops[pred].kind != OpKind::Load {
                without_loads = without_loads.max(t);
            }
        }
        Some((at, without_loads))
    };

    for _ in 0..ops.len() {
        // (tie-break key, lane, start, start ignoring loads)
        let mut best: Option<(OrderKey, usize, u64, u64)> = None;
        for (lane, ids) in lanes.iter().enumerate() {
            let Some(&id) = ids.get(head[lane]) else { continue };
            if let Some((at, without_loads)) = ready_at(id, lane_free[lane], &start, &end) {
                let op = ops[id];
                let key = (at, op.microbatch, op.kind, op.stage);
                if best.as_ref().is_none_or(|(k, ..)| key < *k) {
                    best = Some((key, lane, at, without_loads));
                }
            }
        }
        let Some((_, lane, at, without_loads)) = best else {
            let blocked = lanes
                .iter()
                .enumerate()
                .filter_map(|(lane, ids)| ids.get(head[lane]).map(|&id| ops[id]))
                .collect();
            return Err(SimError::Deadlock { blocked });
        };
        let id = lanes[lane][head[lane]];
        let finish = at + duration[id];
        start[id] = Some(at);
        end[id] = Some(finish);
        lane_free[lane] = finish;
        head[lane] += 1;
        if ops[id].kind == OpKind::Backward {
            load_stall_us[ops[id].stage] += at - without_loads;
        }
        events.push(SimEvent { op: ops[id], start_us: at, end_us: finish });
    }

    let total_time_us = events.iter().map(|e| e.end_us).max().unwrap_or(0);
    let mut per_stage_busy_us = vec![0u64; p];
    let mut flops_done = 0.0;
    for e in &events {
        match e.op.kind {
            OpKind::Forward => {
                per_stage_busy_us[e.stage()] += e.duration_us();
                flops_done += cost.flops_fwd;
            }
            OpKind::Backward => {
                per_stage_busy_us[e.stage()] += e.duration_us();
                flops_done += cost.flops_bwd;
            }
            OpKind::Evict | OpKind::Load => {}
        }
    }
    let per_stage_idle_us = per_stage_busy_us.iter().map(|busy| total_time_us - busy).collect();

    Ok(SimRun {
        p,
        m: schedule.m,
        mem_series: activation_series(&events, p),
        events,
        total_time_us,
        per_stage_busy_us,
        per_stage_idle_us,
        load_stall_us,
        transfer_us,
        flops_done,
        act_bytes_per_mb: cost.act_bytes_per_mb,
        static_bytes: cost.static_bytes.clone(),
    })
}

/// An activation is resident from the end of its forward until the end of
/// its backward. Evicting moves it to the peer at the start of the transfer;
/// loading moves it back at the end. Deltas at one instant are applied
/// together.
fn activation_series(events: &[SimEvent], p: usize) -> Vec<Vec<MemoryStep>> {
    let mut deltas: BTreeMap<u64, Vec<i64>> = BTreeMap::new();
    let mut add = |time: u64, device: usize, delta: i64| {
        deltas.entry(time).or_insert_with(|| vec![0; p])[device] += delta;
    };
    for e in events {
        let s = e.stage();
        match e.op.kind {
            OpKind::Forward => add(e.end_us, s, 1),
            OpKind::Backward => add(e.end_us, s, -1),
            OpKind::Evict => {
                let peer = e.op.peer.expect("evict has a peer");
                add(e.start_us, s, -1);
                add(e.start_us, peer, 1);
            }
            OpKind::Load => {
                let peer = e.op.peer.expect("load has a peer");
                add(e.end_us, s, 1);
                add(e.end_us, peer, -1);
            }
        }
    }

    let mut series: Vec<Vec<MemoryStep>> = vec![vec![MemoryStep { time_us: 0, activations: 0 }]; p];
    let mut count = vec![0i64; p];
    for (time, delta) in deltas {
        for device in 0..p {
            if delta[device] == 0 {
                continue;
            }
            count[device] += delta[device];
            debug_assert!(count[device] >= 0, "negative residency on device {device}");
            let step = MemoryStep { time_us: time, activations: count[device].max(0) as u64 };
            let last = series[device].last_mut().expect("seeded");
            if last.time_us == time {
                *last = step;
            } else {
                series[device].push(step);
            }
        }
    }
    series
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceMemory {
    pub stage: usize,
    pub peak_activations: u64,
    pub peak_activation_bytes: f64,
    pub static_bytes: f64,
    pub peak_bytes: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryTimeline {
    pub devices: Vec<DeviceMemory>,
    /// `(time_us, bytes)` steps per device.
    pub series: Vec<Vec<(u64, u64)>>,
}

impl MemoryTimeline {
    pub fn all_feasible(&self) -> bool {
        self.devices.iter().all(|d| d.feasible)
    }

    pub fn max_peak_activations(&self) -> u64 {
        self.devices.iter().map(|d| d.peak_activations).max().unwrap_or(0)
    }

    pub fn max_peak_bytes(&self) -> f64 {
        self.devices.iter().map(|d| d.peak_bytes).fold(0.0, f64::max)
    }
}

/// Resident bytes per device: static bytes plus resident activations.
pub fn memory_timeline(run: &SimRun, mem_per_device: u64) -> MemoryTimeline {
    let devices = (0..run.p)
        .map(|stage| {
            let peak = run.mem_series[stage].iter().map(|s| s.activations).max().unwrap_or(0);
            let act = peak as f64 * run.act_bytes_per_mb;
            let stat = run.static_bytes[stage];
            let total = stat + act;
            DeviceMemory {
                stage,
                peak_activations: peak,
                peak_activation_bytes: act,
                static_bytes: stat,
                peak_bytes: total,
                feasible: total <= mem_per_device as f64,
            }
        })
        .collect();
    let series = (0..run.p)
        .map(|stage| {
            run.mem_series[stage]
                .iter()
                .map(|s| (s.time_us, resident_bytes(run, stage, s.activations)))
                .collect()
        })
        .collect();
    MemoryTimeline { devices, series }
}

fn resident_bytes(run: &SimRun, stage: usize, activations: u64) -> u64 {
    (run.static_bytes[stage] + activations as f64 * run.act_bytes_per_mb).round() as u64
}

/// Idle microseconds per stage: total time minus compute time.
pub fn bubble_time(run: &SimRun) -> Vec<u64> {
    run.per_stage_idle_us.clone()
}

/// Model FLOPs of the iteration over aggregate device capacity and time:
/// `m·F / (p·t·P·total_time)`.
pub fn simulated_mfu(run: &SimRun, model: &ModelConfig, par: &ParallelConfig, hw: &HardwareProfile) -> Fraction {
    let flops = Fraction::from_f64(model_flops(model, par.micro_batch).total_per_microbatch);
    let work = Fraction::from(run.m as u64) * flops * Fraction::from(1_000_000u64);
    let devices = Fraction::from(run.p as u64 * par.tensor);
    let capacity = devices * Fraction::from_f64(hw.peak_flops) * Fraction::from(run.total_time_us);
    work / capacity
}

#[derive(Serialize)]
#[serde(untagged)]
enum TraceEvent {
    Duration {
        name: String,
        ph: &'static str,
        ts: u64,
        dur: u64,
        pid: usize,
        tid: usize,
    },
    Counter {
        name: &'static str,
        ph: &'static str,
        pid: usize,
        tid: usize,
        ts: u64,
        args: CounterArgs,
    },
}

#[derive(Serialize)]
struct CounterArgs {
    bytes: u64,
}

fn trace_name(op: &ScheduleOp) -> String {
    match op.kind {
        OpKind::Forward => format!("F{}", op.microbatch),
        OpKind::Backward => format!("B{}", op.microbatch),
        OpKind::Evict => format!("evict{}", op.microbatch),
        OpKind::Load => format!("load{}", op.microbatch),
    }
}

/// Chrome Trace Event Format document: one `"X"` event per op (`pid` = node,
/// `tid` = stage) and one `"C"` counter per memory step.
pub fn trace_json(run: &SimRun, layout: &DeviceLayout) -> String {
    let mut out: Vec<TraceEvent> = run
        .events
        .iter()
        .map(|e| TraceEvent::Duration {
            name: trace_name(&e.op),
            ph: "X",
            ts: e.start_us,
            dur: e.duration_us(),
            pid: layout.node_of(e.stage()),
            tid: e.stage(),
        })
        .collect();
    for stage in 0..run.p {
        for step in &run.mem_series[stage] {
            out.push(TraceEvent::Counter {
                name: "resident_bytes",
                ph: "C",
                pid: layout.node_of(stage),
                tid: stage,
                ts: step.time_us,
                args: CounterArgs { bytes: resident_bytes(run, stage, step.activations) },
            });
        }
    }
    serde_json::to_string(&out).expect("trace events serialize")
}

pub fn export_trace(run: &SimRun, layout: &DeviceLayout, path: impl AsRef<Path>) -> Result<(), ExportError> {
    write_file(path.as_ref(), trace_json(run, layout).as_bytes())
}

/// `device time_us bytes`, one line per memory step.
pub fn memory_dump(run: &SimRun) -> String {
    let mut out = String::new();
    for stage in 0..run.p {
        for step in &run.mem_series[stage] {
            out.push_str(&format!("{stage} {} {}\n", step.time_us, resident_bytes(run, stage, step.activations)));
        }
    }
    out
}

pub fn export_memory_dump(run: &SimRun, path: impl AsRef<Path>) -> Result<(), ExportError> {
    write_file(path.as_ref(), memory_dump(run).as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExportError> {
    let err = |source| ExportError { path: path.to_path_buf(), source };
    let mut f = std::fs::File::create(path).map_err(err)?;
    f.write_all(bytes).map_err(err)?;
    f.flush().map_err(err)
}
