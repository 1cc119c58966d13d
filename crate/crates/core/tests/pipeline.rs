mod common;

use pipesim::config::{identity_layout, pair_adjacent_layout, HardwareProfile};
use pipesim::costmodel::StageCost;
use pipesim::engine::{memory_dump, simulate, trace_json, SimRun};
use pipesim::schedule::{bpipe_bound, build_1f1b, build_bpipe, peak_resident, replay_stage, OpKind, Schedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(schedule: &Schedule, cost: &StageCost, hw: &HardwareProfile) -> SimRun {
    let layout = pair_adjacent_layout(schedule.p, hw.gpus_per_node as usize).unwrap();
    simulate(schedule, cost, hw, &layout).unwrap()
}

fn peak(run: &SimRun, stage: usize) -> u64 {
    run.mem_series[stage].iter().map(|s| s.activations).max().unwrap()
}

#[test]
fn one_f_one_b_total_time_closed_form() {
    let hw = HardwareProfile::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in [1usize, 2, 3, 4, 5, 8, 16] {
        for m in [1, p, 2 * p + 1, 16 * p] {
            let fwd = rng.gen_range(1..=5000u64);
            let bwd = rng.gen_range(1..=10_000u64);
            let cost = StageCost::synthetic(p as u64, fwd as f64 * 1e-6, bwd as f64 * 1e-6, 0.0);
            let run = run(&build_1f1b(p, m).unwrap(), &cost, &hw);
            assert_eq!(run.total_time_us, (m + p - 1) as u64 * (fwd + bwd), "p={p} m={m}");
            let busy = m as u64 * (fwd + bwd);
            assert!(run.per_stage_busy_us.iter().all(|&b| b == busy));
        }
    }
}

#[test]
fn one_f_one_b_peak_is_p_minus_x() {
    let hw = HardwareProfile::default();
    for p in [1usize, 2, 4, 7, 8, 16] {
        for m in [1, p / 2 + 1, p, 4 * p] {
            let schedule = build_1f1b(p, m).unwrap();
            let cost = StageCost::synthetic(p as u64, 3e-3, 7e-3, 1.0);
            let run = run(&schedule, &cost, &hw);
            for x in 0..p {
                let expected = (p - x).min(m);
                assert_eq!(peak_resident(&schedule, x).unwrap(), expected, "p={p} m={m} x={x}");
                assert_eq!(peak(&run, x), expected as u64, "p={p} m={m} x={x}");
            }
        }
    }
}

#[test]
fn bpipe_respects_bound_under_random_timings() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for p in [2usize, 3, 4, 5, 8, 16] {
        let k = bpipe_bound(p);
        for m in [p, 2 * p, 4 * p] {
            let schedule = build_bpipe(p, m).unwrap();
            for x in 0..p {
                assert!(peak_resident(&schedule, x).unwrap() <= k, "replay p={p} m={m} x={x}");
            }
            // Transfers at most half a forward: they hide behind compute.
            for _ in 0..5 {
                let fwd = rng.gen_range(100..=5000u64) as f64 * 1e-6;
                let bwd = fwd * rng.gen_range(1.0..3.0);
                let hw = HardwareProfile { intra_node_bw: rng.gen_range(1.0..1e3) / (0.5 * fwd), ..Default::default() };
                let cost = StageCost::synthetic(p as u64, fwd, bwd, rng.gen_range(0.0..1.0));
                let run = run(&schedule, &cost, &hw);
                for x in 0..p {
                    assert!(peak(&run, x) <= k as u64, "engine p={p} m={m} x={x}: {}", peak(&run, x));
                }
            }
        }
    }
}

#[test]
fn bpipe_transfers_only_between_pairs() {
    for p in [4usize, 8, 16] {
        let m = 4 * p;
        let schedule = build_bpipe(p, m).unwrap();
        let cost = StageCost::synthetic(p as u64, 1e-3, 2e-3, 1e6);
        let run = run(&schedule, &cost, &HardwareProfile::default());
        for e in run.events.iter().filter(|e| !e.op.kind.is_compute()) {
            let x = e.op.stage;
            assert!(x < p / 2, "{} issued by stage {x}", e.op);
            assert_eq!(e.op.peer, Some(p - 1 - x));
        }
        let evictors: Vec<usize> = (0..p).filter(|&x| replay_stage(&schedule, x).unwrap().evictions > 0).collect();
        assert_eq!(evictors, schedule.evictors());
        for x in 0..p {
            let r = replay_stage(&schedule, x).unwrap();
            assert_eq!(r.evictions, r.loads);
        }
    }
}

#[test]
fn bpipe_eight_stages_evicts_from_first_three() {
    let schedule = build_bpipe(8, 32).unwrap();
    assert_eq!(schedule.evictors(), vec![0, 1, 2]);
    let four = build_bpipe(4, 4).unwrap();
    let total: usize = (0..4).map(|x| replay_stage(&four, x).unwrap().evictions).sum();
    assert_eq!(total, 1);
}

#[test]
fn simulation_is_deterministic() {
    let schedule = build_bpipe(8, 24).unwrap();
    let cost = StageCost::synthetic(8, 1.5e-3, 3.1e-3, 5e8);
    let hw = HardwareProfile::default();
    let layout = identity_layout(8, 8).unwrap();
    let a = simulate(&schedule, &cost, &hw, &layout).unwrap();
    let b = simulate(&schedule, &cost, &hw, &layout).unwrap();
    assert_eq!(a, b);
    assert_eq!(trace_json(&a, &layout), trace_json(&b, &layout));
    assert_eq!(memory_dump(&a), memory_dump(&b));
}

#[test]
fn traces_pass_schema_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let p = [2usize, 4, 8, 16][rng.gen_range(0..4)];
        let m = p * rng.gen_range(1..=4);
        let gpus = [2usize, 4, 8][rng.gen_range(0..3)];
        let bpipe = rng.gen_bool(0.5);
        let schedule = if bpipe { build_bpipe(p, m) } else { build_1f1b(p, m) }.unwrap();
        let layout = pair_adjacent_layout(p, gpus).unwrap();
        let cost = StageCost::synthetic(p as u64, rng.gen_range(1e-4..1e-2), rng.gen_range(2e-4..2e-2), 1e8);
        let run = simulate(&schedule, &cost, &HardwareProfile::default(), &layout).unwrap();
        let node_of: Vec<usize> = (0..p).map(|x| layout.node_of(x)).collect();
        let problems = common::trace_problems(&trace_json(&run, &layout), p, m, &node_of);
        assert!(problems.is_empty(), "p={p} m={m} bpipe={bpipe}: {problems:?}");
    }
}

#[test]
fn exported_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = build_bpipe(4, 8).unwrap();
    let layout = identity_layout(4, 8).unwrap();
    let cost = StageCost::synthetic(4, 1e-3, 2e-3, 1e9);
    let run = simulate(&schedule, &cost, &HardwareProfile::default(), &layout).unwrap();

    let trace = dir.path().join("trace.json");
    pipesim::engine::export_trace(&run, &layout, &trace).unwrap();
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(common::trace_problems(&text, 4, 8, &[0; 4]).is_empty());

    let dump = dir.path().join("mem.txt");
    pipesim::engine::export_memory_dump(&run, &dump).unwrap();
    let text = std::fs::read_to_string(&dump).unwrap();
    for line in text.lines() {
        let fields: Vec<u64> = line.split(' ').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 3);
        assert!(fields[0] < 4);
        assert_eq!(fields[2] % 1_000_000_000, 0);
    }
    let missing = dir.path().join("no/such/dir/trace.json");
    assert!(pipesim::engine::export_trace(&run, &layout, &missing).is_err());
}

#[test]
fn slow_transfers_stall_backwards() {
    let schedule = build_bpipe(8, 32).unwrap();
    let cost = StageCost::synthetic(8, 1e-3, 2e-3, 1e9);
    let mut hw = HardwareProfile::default();
    let baseline = run(&build_1f1b(8, 32).unwrap(), &cost, &hw).total_time_us;
    hw.intra_node_bw = 1e9 / 0.5e-3;
    assert_eq!(run(&schedule, &cost, &hw).total_time_us, baseline);
    hw.intra_node_bw = 1e9 / 20e-3;
    let slow = run(&schedule, &cost, &hw);
    assert!(slow.total_time_us > baseline);
    assert!(slow.load_stall_us.iter().sum::<u64>() > 0);
    assert!(slow.load_stall_us.iter().enumerate().all(|(x, &s)| x < 3 || s == 0));
    let kinds = slow.events.iter().filter(|e| e.op.kind == OpKind::Load).count();
    assert_eq!(kinds, slow.events.iter().filter(|e| e.op.kind == OpKind::Evict).count());
}
