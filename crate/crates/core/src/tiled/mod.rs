//! The partitioning dialect: tile loops, sum loops, atomic regions.
//!
//! Internally a partitioned program is a [`TilingState`]: the base program
//! plus, for every op, the set of mesh axes it is looped over (its *nest*),
//! the axes each argument is tiled on, and the atomic (replicated) markers.
//! [`TilingState::materialize`] renders that state as loop-form IR and
//! [`TilingState::from_program`] reads loop-form IR back; the public rewrites
//! round-trip through those two.

mod convert;

pub(crate) use convert::localize;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use crate::ir::{validate_and_infer, IrError, OpKind, Program, Stmt, TensorType, ValueId};
use crate::mesh::{Mesh, ShardingSpec};
use crate::propagation::rules::{lookup_rule, PropagationRule};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TilingError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("unknown value %{0}")]
    UnknownValue(String),
    #[error("axis \"{0}\" is not declared in the mesh")]
    UnknownAxis(String),
    #[error("illegal tiling of %{value} dim {dim} over \"{axis}\": {reason}")]
    Illegal { value: String, dim: usize, axis: String, reason: String },
    #[error("%{value} is already tiled over \"{axis}\"")]
    AlreadyTiled { value: String, axis: String },
    #[error("%{0} is atomic and cannot be tiled")]
    Atomic(String),
    #[error("unsupported loop structure at %{at}: {msg}")]
    NonCanonical { at: String, msg: String },
}

#[derive(Clone, Debug)]
pub struct OpInfo {
    pub operands: Vec<usize>,
    pub rule: PropagationRule,
}

/// Indexed view of a base program. Values are numbered arguments first,
/// then op results in program order.
#[derive(Clone, Debug)]
pub struct ProgramInfo {
    pub program: Program,
    pub num_args: usize,
    pub ids: Vec<ValueId>,
    pub index: HashMap<ValueId, usize>,
    pub types: Vec<TensorType>,
    pub ops: Vec<OpInfo>,
    /// Per value: (op index, operand position) of every use.
    pub uses: Vec<Vec<(usize, usize)>>,
    pub result: usize,
}

impl ProgramInfo {
    pub fn new(program: Program) -> Result<Self, TilingError> {
        validate_and_infer(&program)?;
        if !program.is_base() {
            return Err(TilingError::NonCanonical {
                at: program.name.clone(),
                msg: "expected a program without tiling constructs".into(),
            });
        }
        let mut ids = Vec::new();
        let mut types = Vec::new();
        for a in &program.args {
            ids.push(a.id.clone());
            types.push(a.ty.clone());
        }
        let num_args = ids.len();
        let mut index: HashMap<ValueId, usize> = ids.iter().cloned().enumerate().map(|(i, v)| (v, i)).collect();
        let mut ops = Vec::new();
        let mut uses = vec![Vec::new(); num_args];
        for (k, op) in program.base_ops().enumerate() {
            let operands: Vec<usize> = op.operands.iter().map(|o| index[o]).collect();
            for (pos, &o) in operands.iter().enumerate() {
                uses[o].push((k, pos));
            }
            let shapes: Vec<&[usize]> = operands.iter().map(|&o| types[o].shape.as_slice()).collect();
            let rule = lookup_rule(&op.kind, &shapes, &op.ty.shape)
                .map_err(|e| TilingError::NonCanonical { at: op.id.clone(), msg: e.to_string() })?;
            index.insert(op.id.clone(), ids.len());
            ids.push(op.id.clone());
            types.push(op.ty.clone());
            uses.push(Vec::new());
            ops.push(OpInfo { operands, rule });
        }
        let result = index[&program.result];
        Ok(ProgramInfo { program, num_args, ids, index, types, ops, uses, result })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.program.mesh
    }

    pub fn num_values(&self) -> usize {
        self.ids.len()
    }

    pub fn is_arg(&self, v: usize) -> bool {
        v < self.num_args
    }

    /// Op producing value `v`, if it is not an argument.
    pub fn producer(&self, v: usize) -> Option<usize> {
        v.checked_sub(self.num_args)
    }

    pub fn op_value(&self, op: usize) -> usize {
        self.num_args + op
    }

    pub fn op(&self, op: usize) -> &crate::ir::Operation {
        match &self.program.body[op] {
            Stmt::Op(o) => o,
            _ => unreachable!("base program"),
        }
    }

    pub fn scope(&self, v: usize) -> Option<&str> {
        match self.producer(v) {
            None => self.program.args[v].scope.as_deref(),
            Some(op) => self.op(op).scope.as_deref(),
        }
    }

    pub fn value(&self, id: &str) -> Result<usize, TilingError> {
        self.index.get(id).copied().ok_or_else(|| TilingError::UnknownValue(id.to_string()))
    }

    pub fn axis(&self, name: &str) -> Result<usize, TilingError> {
        self.mesh().axis_index(name).ok_or_else(|| TilingError::UnknownAxis(name.to_string()))
    }

    pub fn axis_name(&self, axis: usize) -> &str {
        &self.mesh().axes()[axis].0
    }

    pub fn axis_size(&self, axis: usize) -> usize {
        self.mesh().axes()[axis].1
    }
}

/// One loop around an op: `axis` iterates over iteration dim `iter` of the
/// op's rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NestEntry {
    pub axis: usize,
    pub iter: usize,
}

/// Comparable fingerprint of a state, independent of the shared program.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub arg_dims: Vec<Vec<Option<usize>>>,
    pub nests: Vec<Vec<NestEntry>>,
    pub atomic: BTreeSet<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct TilingState {
    info: Arc<ProgramInfo>,
    /// Per argument, per dim: the mesh axis it is tiled over.
    arg_dims: Vec<Vec<Option<usize>>>,
    /// Per op, sorted by axis.
    nests: Vec<Vec<NestEntry>>,
    /// (value, axis) pairs marked replicated.
    atomic: BTreeSet<(usize, usize)>,
}

impl PartialEq for TilingState {
    fn eq(&self, other: &Self) -> bool {
        self.arg_dims == other.arg_dims && self.nests == other.nests && self.atomic == other.atomic
    }
}

impl TilingState {
    /// Unpartitioned state of a base program.
    pub fn new(base: Program) -> Result<Self, TilingError> {
        Ok(Self::from_info(Arc::new(ProgramInfo::new(base)?)))
    }

    pub fn from_info(info: Arc<ProgramInfo>) -> Self {
        let arg_dims = info.program.args.iter().map(|a| vec![None; a.ty.rank()]).collect();
        let nests = vec![Vec::new(); info.ops.len()];
        TilingState { info, arg_dims, nests, atomic: BTreeSet::new() }
    }

    /// Reads a (possibly tiled) program.
    pub fn from_program(p: &Program) -> Result<Self, TilingError> {
        convert::extract(p)
    }

    /// Renders the state as loop-form IR.
    pub fn materialize(&self) -> Program {
        convert::materialize(self)
    }

    pub fn info(&self) -> &Arc<ProgramInfo> {
        &self.info
    }

    pub fn base(&self) -> &Program {
        &self.info.program
    }

    pub fn key(&self) -> StateKey {
        StateKey { arg_dims: self.arg_dims.clone(), nests: self.nests.clone(), atomic: self.atomic.clone() }
    }

    pub fn nest(&self, op: usize) -> &[NestEntry] {
        &self.nests[op]
    }

    pub fn nest_axis(&self, op: usize, axis: usize) -> Option<NestEntry> {
        self.nests[op].iter().copied().find(|e| e.axis == axis)
    }

    pub fn is_atomic(&self, v: usize, axis: usize) -> bool {
        self.atomic.contains(&(v, axis))
    }

    pub fn atomic_set(&self) -> &BTreeSet<(usize, usize)> {
        &self.atomic
    }

    /// Axis per dim of the value as produced (after any all-reduce of sums).
    pub fn value_dims(&self, v: usize) -> Vec<Option<usize>> {
        match self.info.producer(v) {
            None => self.arg_dims[v].clone(),
            Some(op) => {
                let mut dims = vec![None; self.info.types[v].rank()];
                for e in &self.nests[op] {
                    if let Some(r) = self.info.ops[op].rule.iter_dims[e.iter].result {
                        dims[r] = Some(e.axis);
                    }
                }
                dims
            }
        }
    }

    pub fn is_tiled_on(&self, v: usize, axis: usize) -> bool {
        self.value_dims(v).contains(&Some(axis))
    }

    pub fn is_tiled(&self, v: usize) -> bool {
        self.value_dims(v).iter().any(Option::is_some)
    }

    /// Axes over which the op produces partial sums.
    pub fn sum_axes(&self, op: usize) -> Vec<usize> {
        self.nests[op].iter().filter(|e| self.info.ops[op].rule.iter_dims[e.iter].is_sum()).map(|e| e.axis).collect()
    }

    /// Axis per dim in which operand `pos` of `op` is consumed inside the
    /// op's loops.
    pub fn operand_requirement(&self, op: usize, pos: usize) -> Vec<Option<usize>> {
        let info = &self.info;
        let v = info.ops[op].operands[pos];
        let mut dims = vec![None; info.types[v].rank()];
        for e in &self.nests[op] {
            if let Some(d) = info.ops[op].rule.iter_dims[e.iter].operands[pos] {
                dims[d] = Some(e.axis);
            }
        }
        dims
    }

    pub fn spec_from_dims(&self, dims: &[Option<usize>]) -> ShardingSpec {
        ShardingSpec {
            dims: dims.iter().map(|d| d.map(|a| self.info.axis_name(a).to_string())).collect(),
            pending_sum: Vec::new(),
        }
    }

    pub fn value_spec(&self, v: usize) -> ShardingSpec {
        self.spec_from_dims(&self.value_dims(v))
    }

    pub fn arg_specs(&self) -> Vec<(ValueId, ShardingSpec)> {
        (0..self.info.num_args).map(|v| (self.info.ids[v].clone(), self.value_spec(v))).collect()
    }

    pub fn output_spec(&self) -> ShardingSpec {
        self.value_spec(self.info.result)
    }

    /// Why `(v, dim, axis)` cannot be tiled, or `None` if it can.
    pub fn tile_blocker(&self, v: usize, dim: usize, axis: usize) -> Option<String> {
        let info = &self.info;
        let ty = &info.types[v];
        if dim >= ty.rank() {
            return Some(format!("dim out of range for {}", ty));
        }
        let size = info.axis_size(axis);
        if !ty.shape[dim].is_multiple_of(size) {
            return Some(format!("size {} not divisible by {}", ty.shape[dim], size));
        }
        if self.atomic.contains(&(v, axis)) {
            return Some("value is atomic on this axis".into());
        }
        let dims = self.value_dims(v);
        if dims.contains(&Some(axis)) {
            return Some("value already tiled on this axis".into());
        }
        if dims[dim].is_some() {
            return Some("dim already tiled on another axis".into());
        }
        if let Some(op) = info.producer(v) {
            let rule = &info.ops[op].rule;
            let Some(it) = rule.iter_of_result(dim) else {
                return Some(format!("{} result dim is blocked", rule.kind));
            };
            if self.nests[op].iter().any(|e| e.axis == axis) {
                return Some("producer already loops over this axis".into());
            }
            if rule.iter_dims[it].operands.iter().all(Option::is_none) {
                return Some("result dim has no operand source".into());
            }
        }
        None
    }

    /// Tiles value `v` on `dim` over `axis`: for arguments the input is
    /// supplied sharded, for op results the producer is looped over the axis.
    pub fn tile(&mut self, v: usize, dim: usize, axis: usize) -> Result<(), TilingError> {
        if let Some(reason) = self.tile_blocker(v, dim, axis) {
            if self.atomic.contains(&(v, axis)) {
                return Err(TilingError::Atomic(self.info.ids[v].clone()));
            }
            if self.value_dims(v).contains(&Some(axis)) {
                return Err(TilingError::AlreadyTiled {
                    value: self.info.ids[v].clone(),
                    axis: self.info.axis_name(axis).to_string(),
                });
            }
            return Err(TilingError::Illegal {
                value: self.info.ids[v].clone(),
                dim,
                axis: self.info.axis_name(axis).to_string(),
                reason,
            });
        }
        match self.info.producer(v) {
            None => self.arg_dims[v][dim] = Some(axis),
            Some(op) => {
                let iter = self.info.ops[op].rule.iter_of_result(dim).expect("checked");
                self.add_nest(op, NestEntry { axis, iter });
            }
        }
        Ok(())
    }

    pub(crate) fn add_nest(&mut self, op: usize, entry: NestEntry) {
        let nest = &mut self.nests[op];
        debug_assert!(nest.iter().all(|e| e.axis != entry.axis && e.iter != entry.iter));
        nest.push(entry);
        nest.sort();
    }

    pub(crate) fn set_arg_dim(&mut self, arg: usize, dim: usize, axis: usize) {
        self.arg_dims[arg][dim] = Some(axis);
    }

    pub(crate) fn mark_atomic(&mut self, v: usize, axis: usize) {
        self.atomic.insert((v, axis));
    }

    /// Marks `v` replicated on `axes`; errors if it is tiled on any of them.
    pub fn wrap_atomic(&mut self, v: usize, axes: &[usize]) -> Result<(), TilingError> {
        for &a in axes {
            if self.is_tiled_on(v, a) {
                return Err(TilingError::AlreadyTiled {
                    value: self.info.ids[v].clone(),
                    axis: self.info.axis_name(a).to_string(),
                });
            }
        }
        for &a in axes {
            self.atomic.insert((v, a));
        }
        Ok(())
    }

    /// Per-op loop signature: (axis, Some(result dim)) for tile loops,
    /// (axis, None) for sum loops.
    pub fn loop_signature(&self, op: usize) -> Vec<(usize, Option<usize>)> {
        self.nests[op].iter().map(|e| (e.axis, self.info.ops[op].rule.iter_dims[e.iter].result)).collect()
    }

    pub fn kind_of(&self, op: usize) -> &OpKind {
        &self.info.op(op).kind
    }
}

/// Checks loop invariants: declared axes, no same-axis nesting, typed slices.
pub fn validate_tiled(p: &Program) -> Result<(), IrError> {
    validate_and_infer(p).map(|_| ())
}

/// Tiles `value` on `dim` over `axis`, wrapping its consumers' use in a tile
/// loop. Consequences are not propagated.
pub fn apply_tile_action(p: &Program, value: &str, dim: usize, axis: &str) -> Result<Program, TilingError> {
    let mut state = TilingState::from_program(p)?;
    let v = state.info.value(value)?;
    let a = state.info.axis(axis)?;
    state.tile(v, dim, a)?;
    Ok(state.materialize())
}

/// Marks `value` as replicated on every mesh axis.
pub fn wrap_atomic(p: &Program, value: &str) -> Result<Program, TilingError> {
    let mut state = TilingState::from_program(p)?;
    let v = state.info.value(value)?;
    let axes: Vec<usize> = (0..p.mesh.axes().len()).collect();
    state.wrap_atomic(v, &axes)?;
    Ok(state.materialize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, print_program};
    use crate::propagation::propagate_state;

    const LINEAR: &str = r#"
mesh { "shard" = 2 }
func @linear(%x: f32[8,16], %w: f32[16,64], %b: f32[8,64]) -> f32[8,64] {
  %y = dot(%x, %w) {contract=[[1],[0]], batch=[[],[]]} : f32[8,64]
  %z = add(%y, %b) : f32[8,64]
  return %z
}
"#;

    fn linear() -> TilingState {
        TilingState::new(parse_program(LINEAR).unwrap()).unwrap()
    }

    #[test]
    fn untiled_state_materializes_to_base() {
        let s = linear();
        assert_eq!(s.materialize(), *s.base());
    }

    #[test]
    fn tile_arg_then_roundtrip() {
        let mut s = linear();
        s.tile(1, 1, 0).unwrap();
        let p = s.materialize();
        validate_tiled(&p).unwrap();
        let text = print_program(&p);
        assert!(text.contains("tile \"shard\" dim 1"), "{text}");
        assert!(text.contains("slice_axis(%w, dim=1"), "{text}");
        let back = TilingState::from_program(&parse_program(&text).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn propagated_linear_fuses_and_roundtrips() {
        let mut s = linear();
        s.tile(1, 1, 0).unwrap();
        let stuck = propagate_state(&mut s);
        assert!(stuck.is_empty());
        assert!(s.is_atomic(0, 0));
        assert!(s.is_tiled_on(4, 0));
        let p = s.materialize();
        let text = print_program(&p);
        assert!(text.contains("atomic { yield %x }"), "{text}");
        // dot and add share one loop.
        assert_eq!(text.matches("= tile ").count(), 2, "{text}");
        let back = TilingState::from_program(&parse_program(&text).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn illegal_tiles() {
        let mut s = linear();
        let three = Mesh::new([("shard", 3)]).unwrap();
        let mut p = s.base().clone();
        p.mesh = three;
        let mut s3 = TilingState::new(p).unwrap();
        assert!(matches!(s3.tile(1, 1, 0), Err(TilingError::Illegal { .. })));
        s.tile(1, 1, 0).unwrap();
        assert!(matches!(s.tile(1, 0, 0), Err(TilingError::AlreadyTiled { .. })));
        assert!(apply_tile_action(s.base(), "w", 1, "nope").is_err());
    }

    #[test]
    fn atomic_blocks_tiling() {
        let p = wrap_atomic(&parse_program(LINEAR).unwrap(), "x").unwrap();
        assert!(print_program(&p).contains("atomic"));
        assert!(matches!(apply_tile_action(&p, "x", 0, "shard"), Err(TilingError::Atomic(_))));
        let tiled = apply_tile_action(&parse_program(LINEAR).unwrap(), "x", 0, "shard").unwrap();
        assert!(wrap_atomic(&tiled, "x").is_err());
    }
}
