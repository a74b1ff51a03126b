//! Per-device programs with distributed types and explicit collectives.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write;

use serde::Serialize;

use crate::ir::print::{op_call, print_mesh, quote};
use crate::ir::{OpKind, Program, TensorType, ValueId};
use crate::mesh::{local_shape, Mesh, ShardingSpec};
use crate::tiled::{localize, TilingError, TilingState};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpmdError {
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error("lowering invariant violated at %{at}: {msg}")]
    Internal { at: String, msg: String },
}

/// Global type plus sharding.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistType {
    pub global: TensorType,
    pub spec: ShardingSpec,
}

impl DistType {
    pub fn replicated(global: TensorType) -> Self {
        let spec = ShardingSpec::replicated(global.rank());
        DistType { global, spec }
    }

    pub fn local_shape(&self, mesh: &Mesh) -> Vec<usize> {
        local_shape(&self.global, &self.spec, mesh).expect("divisibility checked when tiling")
    }

    pub fn local_bytes(&self, mesh: &Mesh) -> u64 {
        (self.local_shape(mesh).iter().product::<usize>() * self.global.dtype.byte_size()) as u64
    }
}

/// `f32[16,64{"shard"}]`, with unreduced sums as a `partial` suffix.
pub fn print_dist_type(t: &DistType) -> String {
    let dims: Vec<String> = t
        .global
        .shape
        .iter()
        .zip(&t.spec.dims)
        .map(|(s, a)| match a {
            Some(a) => format!("{}{{{}}}", s, quote(a)),
            None => s.to_string(),
        })
        .collect();
    let mut out = format!("f32[{}]", dims.join(","));
    if !t.spec.pending_sum.is_empty() {
        let axes: Vec<String> = t.spec.pending_sum.iter().map(|a| quote(a)).collect();
        write!(out, " partial{{{}}}", axes.join(",")).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum SpmdKind {
    /// Base op on local shapes; shape attributes are local.
    Base(OpKind),
    /// Sums partial values over the axis, ascending device coordinate.
    AllReduce {
        axis: String,
    },
    AllGather {
        axis: String,
        dim: usize,
    },
    /// Takes this device's chunk of a replicated value; no communication.
    SliceByCoord {
        axis: String,
        dim: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpmdOp {
    pub id: ValueId,
    pub kind: SpmdKind,
    pub operands: Vec<ValueId>,
    pub ty: DistType,
    pub scope: Option<String>,
}

impl SpmdOp {
    pub fn is_collective(&self) -> bool {
        matches!(self.kind, SpmdKind::AllReduce { .. } | SpmdKind::AllGather { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpmdProgram {
    pub name: String,
    pub mesh: Mesh,
    pub args: Vec<(ValueId, DistType)>,
    pub ops: Vec<SpmdOp>,
    pub result: ValueId,
}

impl SpmdProgram {
    pub fn value_type(&self, id: &str) -> Option<&DistType> {
        self.args
            .iter()
            .find(|a| a.0 == id)
            .map(|a| &a.1)
            .or_else(|| self.ops.iter().find(|o| o.id == id).map(|o| &o.ty))
    }

    pub fn result_type(&self) -> &DistType {
        self.value_type(&self.result).expect("result is defined")
    }
}

pub fn print_spmd(p: &SpmdProgram) -> String {
    let mut out = String::new();
    if !p.mesh.is_empty() {
        writeln!(out, "{}", print_mesh(&p.mesh)).unwrap();
    }
    let args: Vec<String> = p.args.iter().map(|(id, t)| format!("%{}: {}", id, print_dist_type(t))).collect();
    writeln!(out, "spmd @{}({}) -> {} {{", p.name, args.join(", "), print_dist_type(p.result_type())).unwrap();
    for op in &p.ops {
        let call = match &op.kind {
            SpmdKind::Base(k) => op_call(k, &op.operands, op.scope.as_deref()),
            SpmdKind::AllReduce { axis } => {
                format!("all_reduce(%{}) {{axis={}, reduction=sum}}", op.operands[0], quote(axis))
            }
            SpmdKind::AllGather { axis, dim } => {
                format!("all_gather(%{}) {{axis={}, dim={}}}", op.operands[0], quote(axis), dim)
            }
            SpmdKind::SliceByCoord { axis, dim } => {
                format!("slice_by_coord(%{}) {{axis={}, dim={}}}", op.operands[0], quote(axis), dim)
            }
        };
        writeln!(out, "  %{} = {} : {}", op.id, call, print_dist_type(&op.ty)).unwrap();
    }
    writeln!(out, "  return %{}", p.result).unwrap();
    out.push_str("}\n");
    out
}

struct Lowering<'a> {
    s: &'a TilingState,
    used: HashSet<String>,
    ops: Vec<SpmdOp>,
    /// Per value: current name and per-dim axes.
    cur: Vec<(String, Vec<Option<usize>>)>,
    cache: HashMap<(usize, Vec<Option<usize>>), String>,
}

impl<'a> Lowering<'a> {
    fn fresh(&mut self, base: String) -> String {
        let mut cand = base.clone();
        let mut k = 1;
        while !self.used.insert(cand.clone()) {
            cand = format!("{}{}", base, k);
            k += 1;
        }
        cand
    }

    fn dist(&self, v: usize, dims: &[Option<usize>]) -> DistType {
        DistType { global: self.s.info().types[v].clone(), spec: self.s.spec_from_dims(dims) }
    }

    /// Name of `v` resharded to `req`, emitting gathers then slices.
    fn convert(&mut self, v: usize, req: &[Option<usize>]) -> String {
        let (name, have) = self.cur[v].clone();
        if have == req {
            return name;
        }
        if let Some(n) = self.cache.get(&(v, req.to_vec())) {
            return n.clone();
        }
        let info = self.s.info().clone();
        let base = info.ids[v].clone();
        let scope = info.scope(v).map(str::to_string);
        let mut dims = have.clone();
        let mut cur = name;
        for d in 0..dims.len() {
            if let Some(a) = dims[d] {
                if req[d] != Some(a) {
                    dims[d] = None;
                    let id = self.fresh(format!("{}.gather", base));
                    self.ops.push(SpmdOp {
                        id: id.clone(),
                        kind: SpmdKind::AllGather { axis: info.axis_name(a).to_string(), dim: d },
                        operands: vec![cur],
                        ty: self.dist(v, &dims),
                        scope: scope.clone(),
                    });
                    cur = id;
                }
            }
        }
        for d in 0..dims.len() {
            if let (Some(a), None) = (req[d], dims[d]) {
                dims[d] = Some(a);
                let id = self.fresh(format!("{}.slice", base));
                self.ops.push(SpmdOp {
                    id: id.clone(),
                    kind: SpmdKind::SliceByCoord { axis: info.axis_name(a).to_string(), dim: d },
                    operands: vec![cur],
                    ty: self.dist(v, &dims),
                    scope: scope.clone(),
                });
                cur = id;
            }
        }
        self.cache.insert((v, req.to_vec()), cur.clone());
        cur
    }
}

/// Lowers a partitioning state to per-device code.
pub fn lower_state(s: &TilingState) -> SpmdProgram {
    let info = s.info().clone();
    let mut lw = Lowering {
        s,
        used: info.ids.iter().cloned().collect(),
        ops: Vec::new(),
        cur: (0..info.num_args).map(|v| (info.ids[v].clone(), s.value_dims(v))).collect(),
        cache: HashMap::new(),
    };
    let args = (0..info.num_args).map(|v| (info.ids[v].clone(), lw.dist(v, &s.value_dims(v)))).collect();
    for o in 0..info.ops.len() {
        let op = info.op(o);
        let v = info.op_value(o);
        let operands: Vec<String> = info.ops[o]
            .operands
            .iter()
            .enumerate()
            .map(|(pos, &src)| {
                let req = s.operand_requirement(o, pos);
                lw.convert(src, &req)
            })
            .collect();
        let dims = s.value_dims(v);
        let sums = s.sum_axes(o);
        let mut ty = lw.dist(v, &dims);
        let local = ty.local_shape(info.mesh());
        ty.spec.pending_sum = sums.iter().map(|&a| info.axis_name(a).to_string()).collect();
        let id = if sums.is_empty() { op.id.clone() } else { lw.fresh(format!("{}.partial", op.id)) };
        lw.ops.push(SpmdOp {
            id: id.clone(),
            kind: SpmdKind::Base(localize(&op.kind, &local)),
            operands,
            ty: ty.clone(),
            scope: op.scope.clone(),
        });
        let mut name = id;
        for (k, &a) in sums.iter().enumerate() {
            ty.spec.pending_sum.remove(0);
            let id = if k + 1 == sums.len() { op.id.clone() } else { lw.fresh(format!("{}.partial", op.id)) };
            lw.ops.push(SpmdOp {
                id: id.clone(),
                kind: SpmdKind::AllReduce { axis: info.axis_name(a).to_string() },
                operands: vec![name],
                ty: ty.clone(),
                scope: op.scope.clone(),
            });
            name = id;
        }
        lw.cur.push((name, dims));
    }
    let result = lw.cur[info.result].0.clone();
    SpmdProgram { name: info.program.name.clone(), mesh: info.mesh().clone(), args, ops: lw.ops, result }
}

pub fn lower_to_spmd(p: &Program) -> Result<SpmdProgram, SpmdError> {
    let s = TilingState::from_program(p)?;
    Ok(lower_state(&s))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AxisStats {
    pub all_reduce: usize,
    pub all_gather: usize,
    pub reduce_bytes: u64,
    pub gather_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CollectiveStats {
    pub all_reduce: usize,
    pub all_gather: usize,
    pub slice_by_coord: usize,
    pub reduce_bytes: u64,
    pub gather_bytes: u64,
    pub per_axis: BTreeMap<String, AxisStats>,
}

impl CollectiveStats {
    pub fn collectives(&self) -> usize {
        self.all_reduce + self.all_gather
    }

    pub fn comm_bytes(&self) -> u64 {
        self.reduce_bytes + self.gather_bytes
    }

    /// Aligned text table, one row per axis plus a total.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>10} {:>14} {:>10} {:>14}\n",
            "axis", "all_reduce", "reduce_bytes", "all_gather", "gather_bytes"
        );
        for (axis, s) in &self.per_axis {
            writeln!(
                out,
                "{:<12} {:>10} {:>14} {:>10} {:>14}",
                axis, s.all_reduce, s.reduce_bytes, s.all_gather, s.gather_bytes
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<12} {:>10} {:>14} {:>10} {:>14}",
            "total", self.all_reduce, self.reduce_bytes, self.all_gather, self.gather_bytes
        )
        .unwrap();
        out
    }
}

pub fn collective_stats(p: &SpmdProgram) -> CollectiveStats {
    let mut st = CollectiveStats::default();
    let mut local: HashMap<&str, u64> = p.args.iter().map(|(id, t)| (id.as_str(), t.local_bytes(&p.mesh))).collect();
    for op in &p.ops {
        let bytes = op.ty.local_bytes(&p.mesh);
        match &op.kind {
            SpmdKind::AllReduce { axis } => {
                let b = op.ty.global.byte_size() as u64;
                st.all_reduce += 1;
                st.reduce_bytes += b;
                let e = st.per_axis.entry(axis.clone()).or_default();
                e.all_reduce += 1;
                e.reduce_bytes += b;
            }
            SpmdKind::AllGather { axis, .. } => {
                let b = bytes - local[op.operands[0].as_str()];
                st.all_gather += 1;
                st.gather_bytes += b;
                let e = st.per_axis.entry(axis.clone()).or_default();
                e.all_gather += 1;
                e.gather_bytes += b;
            }
            SpmdKind::SliceByCoord { .. } => st.slice_by_coord += 1,
            SpmdKind::Base(_) => {}
        }
        local.insert(&op.id, bytes);
    }
    st
}
