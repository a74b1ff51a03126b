//! Static cost models over SPMD programs and the search reward.

use std::collections::HashMap;
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ir::OpKind;
use crate::spmd::{collective_stats, SpmdKind, SpmdProgram};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub memory_budget_bytes: f64,
    pub flops_per_second: f64,
    pub bytes_per_second: f64,
    pub per_collective_latency_seconds: f64,
    pub w_mem: f64,
    pub w_comm: f64,
    pub w_steps: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            memory_budget_bytes: 16.0 * (1u64 << 30) as f64,
            flops_per_second: 1e14,
            bytes_per_second: 1e11,
            per_collective_latency_seconds: 1e-6,
            w_mem: 0.1,
            w_comm: 1.0,
            w_steps: 0.01,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("memory_budget_bytes", self.memory_budget_bytes),
            ("flops_per_second", self.flops_per_second),
            ("bytes_per_second", self.bytes_per_second),
            ("per_collective_latency_seconds", self.per_collective_latency_seconds),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(CostError::NonPositive(name));
            }
        }
        for (name, v) in [("w_mem", self.w_mem), ("w_comm", self.w_comm), ("w_steps", self.w_steps)] {
            if !(v >= 0.0) {
                return Err(CostError::NonPositive(name));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CostError> {
        let mut p = CostParams::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CostError::Parse { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{}`", line)))?;
            let v: f64 = v.trim().parse().map_err(|e| err(format!("{}: {}", k.trim(), e)))?;
            let slot = match k.trim() {
                "memory_budget_bytes" => &mut p.memory_budget_bytes,
                "flops_per_second" => &mut p.flops_per_second,
                "bytes_per_second" => &mut p.bytes_per_second,
                "per_collective_latency_seconds" => &mut p.per_collective_latency_seconds,
                "w_mem" => &mut p.w_mem,
                "w_comm" => &mut p.w_comm,
                "w_steps" => &mut p.w_steps,
                other => return Err(err(format!("unknown key `{}`", other))),
            };
            *slot = v;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "memory_budget_bytes = {}\nflops_per_second = {}\nbytes_per_second = {}\nper_collective_latency_seconds = {}\nw_mem = {}\nw_comm = {}\nw_steps = {}\n",
            self.memory_budget_bytes,
            self.flops_per_second,
            self.bytes_per_second,
            self.per_collective_latency_seconds,
            self.w_mem,
            self.w_comm,
            self.w_steps
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub peak_memory_bytes: u64,
    pub all_reduce_bytes: u64,
    pub all_gather_bytes: u64,
    /// Total bytes moved by collectives.
    pub comm_bytes: u64,
    pub reduction_bytes: u64,
    pub num_collectives: usize,
    pub flop_count: u64,
    pub runtime_estimate_seconds: f64,
    pub feasible: bool,
}

impl CostReport {
    pub fn table(&self) -> String {
        let rows: [(&str, String); 9] = [
            ("peak_memory_bytes", self.peak_memory_bytes.to_string()),
            ("reduction_bytes", self.reduction_bytes.to_string()),
            ("all_gather_bytes", self.all_gather_bytes.to_string()),
            ("comm_bytes", self.comm_bytes.to_string()),
            ("num_collectives", self.num_collectives.to_string()),
            ("flop_count", self.flop_count.to_string()),
            ("runtime_estimate_seconds", format!("{:.6e}", self.runtime_estimate_seconds)),
            ("feasible", self.feasible.to_string()),
            ("all_reduce_bytes", self.all_reduce_bytes.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{:<26} {}", k, v).unwrap();
        }
        out
    }
}

/// Per-device peak of live local buffers. Arguments are live throughout;
/// op results from definition to last use, the returned value to the end.
pub fn peak_liveness(sp: &SpmdProgram) -> u64 {
    let args: u64 = sp.args.iter().map(|(_, t)| t.local_bytes(&sp.mesh)).sum();
    let n = sp.ops.len();
    let pos: HashMap<&str, usize> = sp.ops.iter().enumerate().map(|(i, o)| (o.id.as_str(), i)).collect();
    let mut last = (0..n).collect::<Vec<_>>();
    for (i, op) in sp.ops.iter().enumerate() {
        for o in &op.operands {
            if let Some(&j) = pos.get(o.as_str()) {
                last[j] = last[j].max(i);
            }
        }
    }
    if let Some(&r) = pos.get(sp.result.as_str()) {
        last[r] = n;
    }
    // Sweep: +size at definition, -size after last use.
    let mut delta = vec![0i64; n + 2];
    for (j, op) in sp.ops.iter().enumerate() {
        let b = op.ty.local_bytes(&sp.mesh) as i64;
        delta[j] += b;
        delta[last[j] + 1] -= b;
    }
    let mut live = 0i64;
    let mut peak = 0i64;
    for d in delta.iter().take(n) {
        live += d;
        peak = peak.max(live);
    }
    args + peak as u64
}

/// Per-device flops of one base op on local shapes.
pub fn op_flops(kind: &OpKind, operand_shapes: &[Vec<usize>], result_shape: &[usize]) -> u64 {
    let elems = |s: &[usize]| s.iter().product::<usize>() as u64;
    match kind {
        OpKind::Dot(d) => {
            let k: usize = d.lhs_contract.iter().map(|&c| operand_shapes[0][c]).product();
            2 * elems(result_shape) * k as u64
        }
        OpKind::ReduceSum { .. } | OpKind::ReduceMax { .. } => elems(&operand_shapes[0]),
        OpKind::Constant { .. }
        | OpKind::Transpose { .. }
        | OpKind::Reshape { .. }
        | OpKind::BroadcastInDim { .. }
        | OpKind::Slice { .. }
        | OpKind::Concatenate { .. } => 0,
        _ => elems(result_shape),
    }
}

pub fn flop_count(sp: &SpmdProgram) -> u64 {
    let mut shapes: HashMap<&str, Vec<usize>> =
        sp.args.iter().map(|(id, t)| (id.as_str(), t.local_shape(&sp.mesh))).collect();
    let mut total = 0;
    for op in &sp.ops {
        let local = op.ty.local_shape(&sp.mesh);
        if let SpmdKind::Base(kind) = &op.kind {
            let ops: Vec<Vec<usize>> = op.operands.iter().map(|o| shapes[o.as_str()].clone()).collect();
            total += op_flops(kind, &ops, &local);
        }
        shapes.insert(&op.id, local);
    }
    total
}

/// (all_reduce bytes, all_gather bytes).
pub fn comm_cost(sp: &SpmdProgram) -> (u64, u64) {
    let st = collective_stats(sp);
    (st.reduce_bytes, st.gather_bytes)
}

pub fn runtime_estimate(sp: &SpmdProgram, cp: &CostParams) -> f64 {
    let st = collective_stats(sp);
    flop_count(sp) as f64 / cp.flops_per_second
        + st.comm_bytes() as f64 / cp.bytes_per_second
        + cp.per_collective_latency_seconds * st.collectives() as f64
}

pub fn cost_report(sp: &SpmdProgram, cp: &CostParams) -> CostReport {
    let mut r = memory_and_comm(sp, cp);
    r.flop_count = flop_count(sp);
    r.runtime_estimate_seconds = r.flop_count as f64 / cp.flops_per_second
        + r.comm_bytes as f64 / cp.bytes_per_second
        + cp.per_collective_latency_seconds * r.num_collectives as f64;
    r
}

/// The parts of [`cost_report`] that [`reward`] reads; flops and runtime are
/// left at zero.
pub fn memory_and_comm(sp: &SpmdProgram, cp: &CostParams) -> CostReport {
    let st = collective_stats(sp);
    let peak = peak_liveness(sp);
    CostReport {
        peak_memory_bytes: peak,
        all_reduce_bytes: st.reduce_bytes,
        all_gather_bytes: st.gather_bytes,
        comm_bytes: st.comm_bytes(),
        reduction_bytes: st.reduce_bytes,
        num_collectives: st.collectives(),
        feasible: peak as f64 <= cp.memory_budget_bytes,
        ..Default::default()
    }
}

/// Scalar in [0, 1]; 0 when over budget. Communication (reductions,
/// gathers, plus each collective's latency expressed in bytes) is
/// normalised by `baseline_bytes`, the peak liveness of the replicated plan.
pub fn reward(cr: &CostReport, cp: &CostParams, steps: usize, baseline_bytes: u64) -> f64 {
    if !cr.feasible {
        return 0.0;
    }
    let latency_bytes = cr.num_collectives as f64 * cp.per_collective_latency_seconds * cp.bytes_per_second;
    let comm = ((cr.reduction_bytes + cr.all_gather_bytes) as f64 + latency_bytes) / baseline_bytes.max(1) as f64;
    1.0 / (1.0
        + cp.w_comm * comm
        + cp.w_mem * cr.peak_memory_bytes as f64 / cp.memory_budget_bytes
        + cp.w_steps * steps as f64)
}
