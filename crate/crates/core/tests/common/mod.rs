//! Reference computations shared by the integration tests. Each one works
//! from the published formulas, not from the crate's implementation.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use serde_json::Value;

pub fn int(n: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

pub fn ratio(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// `72·b·s·l·h²·(1 + s/(6h) + v/(16·l·h))`, evaluated as printed.
pub fn model_flops_oracle(b: u64, s: u64, l: u64, h: u64, v: u64) -> BigRational {
    let lead = int(72) * int(b) * int(s) * int(l) * int(h) * int(h);
    let bracket = int(1) + ratio(s, 6 * h) + ratio(v, 16 * l * h);
    lead * bracket
}

/// A `(rows × inner) · (inner × cols)` matmul: one multiply and one add per
/// inner step for every output element.
pub fn matmul_flops(rows: &BigRational, inner: &BigRational, cols: &BigRational) -> BigRational {
    int(2) * rows * inner * cols
}

/// Gate, up and down projections through an `8h/3` intermediate.
pub fn llama_ffn_oracle(b: u64, s: u64, h: u64) -> BigRational {
    let tokens = int(b * s);
    let hidden = int(h);
    let inter = ratio(8 * h, 3);
    let gate = matmul_flops(&tokens, &hidden, &inter);
    let up = matmul_flops(&tokens, &hidden, &inter);
    let down = matmul_flops(&tokens, &inter, &hidden);
    gate + up + down
}

/// Up and down projections through a `4h` intermediate.
pub fn gpt_ffn_oracle(b: u64, s: u64, h: u64) -> BigRational {
    let tokens = int(b * s);
    let hidden = int(h);
    let inter = int(4 * h);
    matmul_flops(&tokens, &hidden, &inter) + matmul_flops(&tokens, &inter, &hidden)
}

/// Bytes stored for backward by one Transformer layer under tensor and
/// sequence parallelism with 16-bit activations and 1-byte dropout masks,
/// summed tensor by tensor.
pub fn layer_activation_bytes_oracle(s: f64, b: f64, h: f64, a: f64, t: f64, keep_scores: bool) -> f64 {
    let sbh = s * b * h;
    let mut attention = vec![
        2.0 * sbh, // QKV projection input
        2.0 * sbh, // Q
        2.0 * sbh, // K
        2.0 * sbh, // V
        2.0 * sbh, // output projection input
        sbh,       // output dropout mask
    ];
    if keep_scores {
        let scores = a * s * s * b;
        attention.extend([
            2.0 * scores, // softmax output
            scores,       // attention dropout mask
            2.0 * scores, // attention dropout output
        ]);
    }
    let mlp = [
        2.0 * sbh, // first linear input
        8.0 * sbh, // GeLU input
        8.0 * sbh, // second linear input
        sbh,       // dropout mask
    ];
    let norms = [2.0 * sbh, 2.0 * sbh];
    let total: f64 = attention.iter().chain(mlp.iter()).chain(norms.iter()).sum();
    total / t
}

/// Problems found in a Chrome trace document, given the run's shape and the
/// node of every stage.
pub fn trace_problems(doc: &str, p: usize, m: usize, node_of: &[usize]) -> Vec<String> {
    let mut problems = Vec::new();
    let value: Value = match serde_json::from_str(doc) {
        Ok(v) => v,
        Err(e) => return vec![format!("not JSON: {e}")],
    };
    let Some(events) = value.as_array() else {
        return vec!["top level is not an array".into()];
    };
    let mut forwards = vec![0usize; p];
    let mut backwards = vec![0usize; p];
    let mut compute_spans: Vec<Vec<(u64, u64)>> = vec![Vec::new(); p];
    for (i, e) in events.iter().enumerate() {
        let field = |k: &str| e.get(k).and_then(Value::as_u64);
        let (Some(pid), Some(tid), Some(ts)) = (field("pid"), field("tid"), field("ts")) else {
            problems.push(format!("event {i}: missing pid/tid/ts"));
            continue;
        };
        let (pid, tid) = (pid as usize, tid as usize);
        if tid >= p {
            problems.push(format!("event {i}: tid {tid} out of range"));
            continue;
        }
        if node_of[tid] != pid {
            problems.push(format!("event {i}: stage {tid} on pid {pid}, expected {}", node_of[tid]));
        }
        let name = e.get("name").and_then(Value::as_str).unwrap_or("");
        match e.get("ph").and_then(Value::as_str) {
            Some("X") => {
                let Some(dur) = field("dur") else {
                    problems.push(format!("event {i}: X without dur"));
                    continue;
                };
                let (kind, mb) = match name.find(|c: char| c.is_ascii_digit()) {
                    Some(at) => (&name[..at], name[at..].parse::<usize>().ok()),
                    None => (name, None),
                };
                if !mb.is_some_and(|mb| mb < m) {
                    problems.push(format!("event {i}: bad microbatch in {name:?}"));
                }
                match kind {
                    "F" => {
                        forwards[tid] += 1;
                        compute_spans[tid].push((ts, ts + dur));
                    }
                    "B" => {
                        backwards[tid] += 1;
                        compute_spans[tid].push((ts, ts + dur));
                    }
                    "evict" | "load" => {}
                    other => problems.push(format!("event {i}: unknown op {other:?}")),
                }
            }
            Some("C") => {
                let bytes = e.get("args").and_then(|a| a.get("bytes")).and_then(Value::as_u64);
                if bytes.is_none() {
                    problems.push(format!("event {i}: counter without integer args.bytes"));
                }
            }
            other => problems.push(format!("event {i}: unexpected ph {other:?}")),
        }
    }
    for stage in 0..p {
        if forwards[stage] != m || backwards[stage] != m {
            problems.push(format!("stage {stage}: {} forwards, {} backwards", forwards[stage], backwards[stage]));
        }
        let spans = &mut compute_spans[stage];
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            problems.push(format!("stage {stage}: overlapping compute"));
        }
    }
    problems
}
