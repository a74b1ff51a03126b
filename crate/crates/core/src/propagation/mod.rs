//! Pushes tiling decisions through a program.
//!
//! Forward: an op with an operand tiled over axis `a` on a dim the op's rule
//! can iterate is pulled into a loop over `a`; its other operands are sliced.
//! Backward: an op whose every consumer slices its result the same way over
//! `a` is looped over `a` too. Both run to a fixpoint; ops that cannot follow
//! their operands are reported as [`StuckNode`]s.

pub mod rules;

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::ir::{OpKind, Program};
use crate::tiled::{NestEntry, TilingError, TilingState};

pub use rules::{lookup_rule, IterDim, PropagationRule};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PropagationError {
    #[error("no propagation rule for op kind `{0}`")]
    UnsupportedKind(String),
    #[error(transparent)]
    Tiling(#[from] TilingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StuckReason {
    /// A contraction has only some of its operands tiled.
    InsufficientOperands,
    /// An operand is tiled on a dim the op cannot iterate.
    BlockedDim,
    /// Operands disagree on which iteration dim an axis maps to.
    ConflictingAxes,
}

impl fmt::Display for StuckReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StuckReason::InsufficientOperands => "insufficient_operands",
            StuckReason::BlockedDim => "blocked_dim",
            StuckReason::ConflictingAxes => "conflicting_axes",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct StuckNode {
    pub op: String,
    pub axis: String,
    pub reason: StuckReason,
}

enum Forward {
    Apply(NestEntry),
    Stuck(StuckReason),
    Nothing,
}

fn forward_step(s: &TilingState, op: usize, axis: usize) -> Forward {
    let info = s.info();
    let rule = &info.ops[op].rule;
    let mut iters = BTreeSet::new();
    let mut hits = Vec::new();
    for (i, &v) in info.ops[op].operands.iter().enumerate() {
        if let Some(d) = s.value_dims(v).iter().position(|x| *x == Some(axis)) {
            hits.push((i, d));
            match rule.iter_of_operand(i, d) {
                Some(it) => {
                    iters.insert(it);
                }
                None => return Forward::Stuck(StuckReason::BlockedDim),
            }
        }
    }
    if hits.is_empty() {
        return Forward::Nothing;
    }
    if iters.len() > 1 {
        return Forward::Stuck(StuckReason::ConflictingAxes);
    }
    let it = *iters.iter().next().unwrap();
    if s.nest(op).iter().any(|e| e.iter == it) {
        return Forward::Stuck(StuckReason::ConflictingAxes);
    }
    let idim = &rule.iter_dims[it];
    let v = info.op_value(op);
    match idim.result {
        Some(r) => {
            if s.is_atomic(v, axis) || s.value_dims(v)[r].is_some() {
                return Forward::Stuck(StuckReason::ConflictingAxes);
            }
            // Operands mapped to the iteration dim must be free to slice.
            for (i, d) in idim.operands.iter().enumerate() {
                if let Some(d) = d {
                    let dims = s.value_dims(info.ops[op].operands[i]);
                    if dims[*d].is_some_and(|b| b != axis) {
                        return Forward::Stuck(StuckReason::ConflictingAxes);
                    }
                }
            }
        }
        None => {
            for (i, d) in idim.operands.iter().enumerate() {
                if let Some(d) = d {
                    if !hits.contains(&(i, *d)) {
                        return Forward::Stuck(StuckReason::InsufficientOperands);
                    }
                }
            }
        }
    }
    Forward::Apply(NestEntry { axis, iter: it })
}

fn backward_demand(s: &TilingState, op: usize, axis: usize) -> Option<usize> {
    let info = s.info();
    if matches!(info.op(op).kind, OpKind::Constant { .. }) {
        return None;
    }
    let v = info.op_value(op);
    let uses = &info.uses[v];
    if uses.is_empty() {
        return None;
    }
    let mut demand = None;
    for &(c, pos) in uses {
        let d = s.operand_requirement(c, pos)[..].iter().position(|x| *x == Some(axis))?;
        if demand.is_some_and(|x| x != d) {
            return None;
        }
        demand = Some(d);
    }
    if info.ops[op].operands.iter().any(|&o| s.is_tiled_on(o, axis)) {
        return None;
    }
    let d = demand?;
    s.tile_blocker(v, d, axis).is_none().then_some(d)
}

/// One forward and one backward sweep; returns whether anything changed and
/// the ops that were stuck during the forward sweep.
fn sweep(s: &mut TilingState) -> (bool, Vec<(usize, usize, StuckReason)>) {
    let n = s.info().ops.len();
    let axes = s.info().mesh().axes().len();
    let mut changed = false;
    let mut stuck = Vec::new();
    for op in 0..n {
        for a in 0..axes {
            if s.nest_axis(op, a).is_some() {
                continue;
            }
            match forward_step(s, op, a) {
                Forward::Apply(e) => {
                    s.add_nest(op, e);
                    changed = true;
                }
                Forward::Stuck(r) => stuck.push((op, a, r)),
                Forward::Nothing => {}
            }
        }
    }
    for op in (0..n).rev() {
        for a in 0..axes {
            if s.nest_axis(op, a).is_some() {
                continue;
            }
            if let Some(d) = backward_demand(s, op, a) {
                let v = s.info().op_value(op);
                s.tile(v, d, a).expect("checked by backward_demand");
                changed = true;
            }
        }
    }
    (changed, stuck)
}

/// Marks an untiled argument atomic on `axis` when every consumer loops over
/// the axis without slicing it.
fn auto_atomic(s: &mut TilingState) {
    let info = s.info().clone();
    for v in 0..info.num_args {
        for a in 0..info.mesh().axes().len() {
            if s.is_tiled_on(v, a) || s.is_atomic(v, a) || info.uses[v].is_empty() {
                continue;
            }
            let all = info.uses[v].iter().all(|&(c, pos)| {
                s.nest_axis(c, a).is_some() && s.operand_requirement(c, pos).iter().all(|x| *x != Some(a))
            });
            if all {
                s.mark_atomic(v, a);
            }
        }
    }
}

fn stuck_nodes(s: &TilingState, raw: Vec<(usize, usize, StuckReason)>) -> Vec<StuckNode> {
    let info = s.info();
    let set: BTreeSet<(usize, usize, StuckReason)> = raw.into_iter().collect();
    set.into_iter()
        .map(|(op, a, reason)| StuckNode {
            op: info.ids[info.op_value(op)].clone(),
            axis: info.axis_name(a).to_string(),
            reason,
        })
        .collect()
}

/// Runs propagation to a fixpoint in place.
pub fn propagate_state(s: &mut TilingState) -> Vec<StuckNode> {
    loop {
        let (changed, stuck) = sweep(s);
        if !changed {
            auto_atomic(s);
            return stuck_nodes(s, stuck);
        }
    }
}

/// Ops stuck in the current state, without changing it.
pub fn stuck_ops(s: &TilingState) -> Vec<StuckNode> {
    let mut raw = Vec::new();
    for op in 0..s.info().ops.len() {
        for a in 0..s.info().mesh().axes().len() {
            if s.nest_axis(op, a).is_none() {
                if let Forward::Stuck(r) = forward_step(s, op, a) {
                    raw.push((op, a, r));
                }
            }
        }
    }
    stuck_nodes(s, raw)
}

/// (dim, axis) tilings of argument `v` implied by how its uses are looped.
fn arg_candidates(s: &TilingState, v: usize) -> BTreeSet<(usize, usize)> {
    let info = s.info();
    let mut out = BTreeSet::new();
    for &(c, pos) in &info.uses[v] {
        let rule = &info.ops[c].rule;
        for a in 0..info.mesh().axes().len() {
            if s.is_tiled_on(v, a) || s.is_atomic(v, a) {
                continue;
            }
            let it = match s.nest_axis(c, a) {
                Some(e) => Some(e.iter),
                None => {
                    // A pending demand: other operands already tiled over `a`.
                    let iters: BTreeSet<Option<usize>> = info.ops[c]
                        .operands
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != pos)
                        .filter_map(|(i, &o)| {
                            s.value_dims(o).iter().position(|x| *x == Some(a)).map(|d| rule.iter_of_operand(i, d))
                        })
                        .collect();
                    match iters.iter().collect::<Vec<_>>().as_slice() {
                        [Some(it)] => Some(*it),
                        _ => None,
                    }
                }
            };
            if let Some(d) = it.and_then(|it| rule.iter_dims[it].operands[pos]) {
                if s.tile_blocker(v, d, a).is_none() {
                    out.insert((d, a));
                }
            }
        }
    }
    out
}

/// Tiles every argument whose tiling is uniquely implied by its uses,
/// re-propagating after each, until nothing changes.
pub fn infer_rest_state(s: &mut TilingState) -> Vec<StuckNode> {
    let mut stuck = propagate_state(s);
    loop {
        let mut applied = false;
        for v in 0..s.info().num_args {
            let cands = arg_candidates(s, v);
            let clean: Vec<(usize, usize)> =
                cands.iter().copied().filter(|&(d, a)| !cands.iter().any(|&(d2, a2)| (d2 == d) != (a2 == a))).collect();
            if let [(d, a)] = clean.as_slice() {
                if s.tile(v, *d, *a).is_ok() {
                    applied = true;
                    stuck = propagate_state(s);
                }
            }
        }
        if !applied {
            return stuck;
        }
    }
}

/// Propagates the tiling decisions present in `p`.
pub fn propagate(p: &Program) -> Result<(Program, Vec<StuckNode>), PropagationError> {
    let mut s = TilingState::from_program(p)?;
    let stuck = propagate_state(&mut s);
    Ok((s.materialize(), stuck))
}

/// Completes a partial tiling with every uniquely implied argument tiling.
pub fn infer_rest(p: &Program) -> Result<(Program, Vec<StuckNode>), PropagationError> {
    let mut s = TilingState::from_program(p)?;
    let stuck = infer_rest_state(&mut s);
    Ok((s.materialize(), stuck))
}
