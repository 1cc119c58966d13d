//! 1F1B and BPipe pipeline schedules.
//!
//! A [`Schedule`] is a per-stage program: the ordered list of operations each
//! stage executes, plus the precedence edges between operations on different
//! stages. BPipe keeps the 1F1B compute order and inserts `Evict`/`Load`
//! transfers on the first half of the pipeline so no device holds more than
//! `ceil((p + 2) / 2)` activations.
//!
//! Eviction policy: after a forward, if the resident count plus any load that
//! will land before the next backward completes exceeds the bound, the
//! activation just produced is sent to stage `p - 1 - x`. An evicted
//! activation `i` is loaded back when backward `i - 1` starts.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

/// Declaration order is the simulator's tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum OpKind {
    Forward,
    Backward,
    Evict,
    Load,
}

impl OpKind {
    pub fn is_compute(self) -> bool {
        matches!(self, OpKind::Forward | OpKind::Backward)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Forward => "forward",
            OpKind::Backward => "backward",
            OpKind::Evict => "evict",
            OpKind::Load => "load",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ScheduleOp {
    pub kind: OpKind,
    pub stage: usize,
    pub microbatch: usize,
    /// The paired stage, for `Evict` and `Load` only.
    pub peer: Option<usize>,
}

impl ScheduleOp {
    pub fn forward(stage: usize, microbatch: usize) -> Self {
        ScheduleOp { kind: OpKind::Forward, stage, microbatch, peer: None }
    }

    pub fn backward(stage: usize, microbatch: usize) -> Self {
        ScheduleOp { kind: OpKind::Backward, stage, microbatch, peer: None }
    }

    pub fn evict(stage: usize, microbatch: usize, peer: usize) -> Self {
        ScheduleOp { kind: OpKind::Evict, stage, microbatch, peer: Some(peer) }
    }

    pub fn load(stage: usize, microbatch: usize, peer: usize) -> Self {
        ScheduleOp { kind: OpKind::Load, stage, microbatch, peer: Some(peer) }
    }
}

impl fmt::Display for ScheduleOp {
    /// `stage kind microbatch [peer]`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.stage, self.kind.as_str(), self.microbatch)?;
        if let Some(peer) = self.peer {
            write!(f, " {peer}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DepKind {
    /// `after` may start once `before` has finished.
    FinishToStart,
    /// `after` may start once `before` has started.
    StartToStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Dependency {
    pub before: ScheduleOp,
    pub after: ScheduleOp,
    pub kind: DepKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("schedule needs p >= {min_p} and m >= 1 (p={p}, m={m})")]
    Shape { p: usize, m: usize, min_p: usize },
    #[error("stage index {stage} out of range for p={p}")]
    StageOutOfRange { stage: usize, p: usize },
    #[error("{op}: backward before its forward")]
    BackwardBeforeForward { op: ScheduleOp },
    #[error("{op}: activation not resident")]
    NotResident { op: ScheduleOp },
    #[error("{op}: appears twice")]
    Duplicate { op: ScheduleOp },
    #[error("{op}: out of order ({detail})")]
    Order { op: ScheduleOp, detail: String },
    #[error("{op}: missing dependency {detail}")]
    MissingDependency { op: ScheduleOp, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub p: usize,
    pub m: usize,
    pub per_stage_ops: Vec<Vec<ScheduleOp>>,
    pub deps: Vec<Dependency>,
    /// Resident-activation bound `K`; set for BPipe schedules.
    pub bpipe_threshold: Option<usize>,
}

/// `ceil((p + 2) / 2)`
pub fn bpipe_bound(p: usize) -> usize {
    (p + 3) / 2
}

/// Number of warmup forwards at `stage`.
fn warmup(p: usize, m: usize, stage: usize) -> usize {
    (p - 1 - stage).min(m)
}

fn one_f_one_b_order(p: usize, m: usize, stage: usize) -> Vec<ScheduleOp> {
    let w = warmup(p, m, stage);
    let mut ops = Vec::with_capacity(2 * m);
    ops.extend((0..w).map(|i| ScheduleOp::forward(stage, i)));
    for k in 0..m - w {
        ops.push(ScheduleOp::forward(stage, w + k));
        ops.push(ScheduleOp::backward(stage, k));
    }
    ops.extend((m - w..m).map(|i| ScheduleOp::backward(stage, i)));
    ops
}

fn fs(before: ScheduleOp, after: ScheduleOp) -> Dependency {
    Dependency { before, after, kind: DepKind::FinishToStart }
}

fn compute_deps(p: usize, m: usize, per_stage_ops: &[Vec<ScheduleOp>]) -> Vec<Dependency> {
    let mut deps = Vec::new();
    for ops in per_stage_ops {
        let compute: Vec<_> = ops.iter().filter(|op| op.kind.is_compute()).collect();
        deps.extend(compute.windows(2).map(|w| fs(*w[0], *w[1])));
    }
    for i in 0..m {
        for s in 0..p {
            deps.push(fs(ScheduleOp::forward(s, i), ScheduleOp::backward(s, i)));
            if s + 1 < p {
                deps.push(fs(ScheduleOp::forward(s, i), ScheduleOp::forward(s + 1, i)));
                deps.push(fs(ScheduleOp::backward(s + 1, i), ScheduleOp::backward(s, i)));
            }
        }
    }
    deps
}

/// One-forward-one-backward: stage `x` runs `min(p - 1 - x, m)` warmup
/// forwards, alternates forward and backward, then drains the backwards.
pub fn build_1f1b(p: usize, m: usize) -> Result<Schedule, ScheduleError> {
    if p == 0 || m == 0 {
        return Err(ScheduleError::Shape { p, m, min_p: 1 });
    }
    let per_stage_ops: Vec<_> = (0..p).map(|s| one_f_one_b_order(p, m, s)).collect();
    let deps = compute_deps(p, m, &per_stage_ops);
    Ok(Schedule { p, m, per_stage_ops, deps, bpipe_threshold: None })
}

/// 1F1B plus activation eviction from stage `x < p/2` to stage `p - 1 - x`.
pub fn build_bpipe(p: usize, m: usize) -> Result<Schedule, ScheduleError> {
    if p < 2 || m == 0 {
        return Err(ScheduleError::Shape { p, m, min_p: 2 });
    }
    let bound = bpipe_bound(p);
    let base = build_1f1b(p, m)?;
    let mut per_stage_ops = base.per_stage_ops;
    let mut deps = base.deps;
    for (x, ops) in per_stage_ops.iter_mut().enumerate().take(p / 2) {
        let (with_transfers, transfer_deps) = insert_transfers(ops, x, p - 1 - x, bound);
        *ops = with_transfers;
        deps.extend(transfer_deps);
    }
    Ok(Schedule { p, m, per_stage_ops, deps, bpipe_threshold: Some(bound) })
}

fn insert_transfers(
    compute: &[ScheduleOp],
    stage: usize,
    peer: usize,
    bound: usize,
) -> (Vec<ScheduleOp>, Vec<Dependency>) {
    let mut resident = BTreeSet::new();
    let mut away = BTreeSet::new();
    let mut ops = Vec::with_capacity(compute.len());
    let mut deps = Vec::new();

    for (idx, op) in compute.iter().enumerate() {
        let i = op.microbatch;
        match op.kind {
            OpKind::Forward => {
                ops.push(*op);
                resident.insert(i);
                let next_backward = compute[idx + 1..].iter().find(|o| o.kind == OpKind::Backward);
                let pending = next_backward.is_some_and(|b| away.contains(&(b.microbatch + 1)));
                if resident.len() + usize::from(pending) > bound {
                    let evict = ScheduleOp::evict(stage, i, peer);
                    ops.push(evict);
                    deps.push(fs(*op, evict));
                    resident.remove(&i);
                    away.insert(i);
                }
            }
            OpKind::Backward => {
                let next = i + 1;
                if away.remove(&next) {
                    let load = ScheduleOp::load(stage, next, peer);
                    ops.push(load);
                    deps.push(fs(ScheduleOp::evict(stage, next, peer), load));
                    deps.push(Dependency { before: *op, after: load, kind: DepKind::StartToStart });
                    deps.push(fs(load, ScheduleOp::backward(stage, next)));
                    resident.insert(next);
                }
                ops.push(*op);
                resident.remove(&i);
            }
            OpKind::Evict | OpKind::Load => unreachable!("compute list holds compute ops only"),
        }
    }
    (ops, deps)
}

/// Result of replaying one stage's op list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageReplay {
    /// Most activations simultaneously resident on the stage's own device.
    pub peak_own: usize,
    /// Most of this stage's activations simultaneously held by its peer.
    pub peak_away: usize,
    pub evictions: usize,
    pub loads: usize,
}

/// Replays one stage's list, counting resident activations: `+1` on forward
/// or load, `-1` on backward or evict. A forward immediately followed by the
/// eviction of its own output is one step (the activation leaves as it is
/// produced).
pub fn replay_stage(schedule: &Schedule, stage: usize) -> Result<StageReplay, ScheduleError> {
    let ops = schedule
        .per_stage_ops
        .get(stage)
        .ok_or(ScheduleError::StageOutOfRange { stage, p: schedule.p })?;
    let mut resident = BTreeSet::new();
    let mut away = BTreeSet::new();
    let mut produced = BTreeSet::new();
    let mut consumed = BTreeSet::new();
    let mut out = StageReplay::default();

    for (idx, op) in ops.iter().enumerate() {
        let i = op.microbatch;
        match op.kind {
            OpKind::Forward => {
                if !produced.insert(i) {
                    return Err(ScheduleError::Duplicate { op: *op });
                }
                resident.insert(i);
            }
            OpKind::Backward => {
                if !produced.contains(&i) {
                    return Err(ScheduleError::BackwardBeforeForward { op: *op });
                }
                if !consumed.insert(i) {
                    return Err(ScheduleError::Duplicate { op: *op });
                }
                if !resident.remove(&i) {
                    return Err(ScheduleError::NotResident { op: *op });
                }
            }
            OpKind::Evict => {
                if !resident.remove(&i) {
                    return Err(ScheduleError::NotResident { op: *op });
                }
                away.insert(i);
                out.evictions += 1;
            }
            OpKind::Load => {
                if !away.remove(&i) {
                    return Err(ScheduleError::NotResident { op: *op });
                }
                resident.insert(i);
                out.loads += 1;
            }
        }
        let evicted_next = ops
            .get(idx + 1)
            .is_some_and(|next| next.kind == OpKind::Evict && next.microbatch == i);
        if !(op.kind == OpKind::Forward && evicted_next) {
            out.peak_own = out.peak_own.max(resident.len());
        }
        out.peak_away = out.peak_away.max(away.len());
    }
    Ok(out)
}

/// Peak resident activation count on the device of `stage`, counting
/// activations hosted for its evictor.
///
/// The replay has no clock, so an acceptor's own peak and its hosted peak are
/// added even if they never coincide. This over-approximates; the simulator's
/// memory timeline gives the timed value.
pub fn peak_resident(schedule: &Schedule, stage: usize) -> Result<usize, ScheduleError> {
    let own = replay_stage(schedule, stage)?;
    let hosted = hosted_peak(schedule, stage)?;
    Ok(own.peak_own + hosted)
}

fn hosted_peak(schedule: &Schedule, stage: usize) -> Result<usize, ScheduleError> {
    let mut hosted = 0;
    for (evictor, ops) in schedule.per_stage_ops.iter().enumerate() {
        if evictor != stage && ops.iter().any(|op| op.kind == OpKind::Evict && op.peer == Some(stage)) {
            hosted += replay_stage(schedule, evictor)?.peak_away;
        }
    }
    Ok(hosted)
}

impl Schedule {
    pub fn ops(&self) -> impl Iterator<Item = &ScheduleOp> {
        self.per_stage_ops.iter().flatten()
    }

    pub fn compute_ops(&self, stage: usize) -> impl Iterator<Item = &ScheduleOp> {
        self.per_stage_ops[stage].iter().filter(|op| op.kind.is_compute())
    }

    pub fn is_bpipe(&self) -> bool {
        self.bpipe_threshold.is_some()
    }

    /// Stages that evict at least once.
    pub fn evictors(&self) -> Vec<usize> {
        (0..self.p)
            .filter(|&s| self.per_stage_ops[s].iter().any(|op| op.kind == OpKind::Evict))
            .collect()
    }

    /// One op per line, `stage kind microbatch [peer]`, stage by stage.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        for op in self.ops() {
            writeln!(out, "{op}").expect("write to String");
        }
        out
    }

    /// Checks ordering, residency and the cross-stage dependency edges.
    pub fn check(&self) -> Result<(), ScheduleError> {
        if self.per_stage_ops.len() != self.p {
            return Err(ScheduleError::Shape { p: self.p, m: self.m, min_p: 1 });
        }
        let dep_set: HashMap<(ScheduleOp, ScheduleOp), DepKind> =
            self.deps.iter().map(|d| ((d.before, d.after), d.kind)).collect();
        let has = |a: ScheduleOp, b: ScheduleOp| dep_set.get(&(a, b)) == Some(&DepKind::FinishToStart);

        for stage in 0..self.p {
            let mut last = [None::<usize>; 2];
            for op in self.compute_ops(stage) {
                let slot = usize::from(op.kind == OpKind::Backward);
                if last[slot].is_some_and(|prev| op.microbatch <= prev) {
                    return Err(ScheduleError::Order { op: *op, detail: "microbatch indices must increase".into() });
                }
                last[slot] = Some(op.microbatch);
                if op.stage != stage {
                    return Err(ScheduleError::Order { op: *op, detail: format!("listed under stage {stage}") });
                }
            }
            replay_stage(self, stage)?;
            for op in &self.per_stage_ops[stage] {
                if op.kind == OpKind::Load && !has(*op, ScheduleOp::backward(stage, op.microbatch)) {
                    return Err(ScheduleError::MissingDependency {
                        op: *op,
                        detail: "load -> backward".into(),
                    });
                }
            }
        }
        for i in 0..self.m {
            for s in 0..self.p.saturating_sub(1) {
                if !has(ScheduleOp::forward(s, i), ScheduleOp::forward(s + 1, i)) {
                    return Err(ScheduleError::MissingDependency {
                        op: ScheduleOp::forward(s + 1, i),
                        detail: format!("forward on stage {s}"),
                    });
                }
                if !has(ScheduleOp::backward(s + 1, i), ScheduleOp::backward(s, i)) {
                    return Err(ScheduleError::MissingDependency {
                        op: ScheduleOp::backward(s, i),
                        detail: format!("backward on stage {}", s + 1),
                    });
                }
            }
        }
        if let Some(k) = self.bpipe_threshold {
            if k != bpipe_bound(self.p) {
                return Err(ScheduleError::Order {
                    op: self.per_stage_ops[0][0],
                    detail: format!("threshold {k} != ceil((p+2)/2)"),
                });
            }
        }
        Ok(())
    }
}
