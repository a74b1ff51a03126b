//! Conversion between [`TilingState`] and loop-form programs.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::{NestEntry, ProgramInfo, TilingError, TilingState};
use crate::ir::{AtomicRegion, LoopKind, LoopOp, OpKind, Operation, Program, SliceAxisOp, Stmt, TensorType, ValueId};
use crate::propagation::rules::lookup_rule;

struct Namer {
    used: HashSet<String>,
}

impl Namer {
    fn fresh(&mut self, base: String) -> String {
        if self.used.insert(base.clone()) {
            return base;
        }
        let mut k = 1;
        loop {
            let cand = format!("{}{}", base, k);
            if self.used.insert(cand.clone()) {
                return cand;
            }
            k += 1;
        }
    }
}

/// Rewrites shape-carrying attributes for a local result shape.
pub(crate) fn localize(kind: &OpKind, local: &[usize]) -> OpKind {
    match kind {
        OpKind::Reshape { .. } => OpKind::Reshape { shape: local.to_vec() },
        OpKind::BroadcastInDim { dims, .. } => OpKind::BroadcastInDim { shape: local.to_vec(), dims: dims.clone() },
        OpKind::Slice { start, .. } => {
            OpKind::Slice { start: start.clone(), limit: start.iter().zip(local).map(|(s, l)| s + l).collect() }
        }
        k => k.clone(),
    }
}

fn shard_shape(shape: &[usize], dims: &[Option<usize>], info: &ProgramInfo, upto: Option<&[usize]>) -> Vec<usize> {
    shape
        .iter()
        .zip(dims)
        .map(|(&s, d)| match d {
            Some(a) if upto.is_none_or(|axes| axes.contains(a)) => s / info.axis_size(*a),
            _ => s,
        })
        .collect()
}

/// Emits slices of `src` for each loop level whose axis appears in `dims`.
/// Returns the local name.
fn emit_slices(
    src: &str,
    shape: &[usize],
    dims: &[Option<usize>],
    levels: &[(usize, String)],
    stem: &str,
    info: &ProgramInfo,
    namer: &mut Namer,
    out: &mut Vec<Stmt>,
) -> String {
    let mut cur = src.to_string();
    let mut shape = shape.to_vec();
    for (axis, index) in levels {
        if let Some(d) = dims.iter().position(|x| *x == Some(*axis)) {
            shape[d] /= info.axis_size(*axis);
            let id = namer.fresh(format!("{}.s", stem));
            out.push(Stmt::SliceAxis(SliceAxisOp {
                id: id.clone(),
                operand: cur,
                dim: d,
                index: index.clone(),
                ty: TensorType::f32(shape.clone()),
            }));
            cur = id;
        }
    }
    cur
}

/// Wraps `inner` (the innermost body, yielding `yield_id`) in one loop per
/// level, outermost first.
fn wrap_loops(
    levels: &[(usize, String)],
    kinds: &[LoopKind],
    names: &[String],
    inner: Vec<Stmt>,
    yield_id: String,
    global: &[usize],
    dims: &[Option<usize>],
    info: &ProgramInfo,
) -> Stmt {
    let mut body = inner;
    let mut yv = yield_id;
    for j in (0..levels.len()).rev() {
        let outer: Vec<usize> = levels[..j].iter().map(|l| l.0).collect();
        let ty = TensorType::f32(shard_shape(global, dims, info, Some(&outer)));
        let l = LoopOp {
            id: names[j].clone(),
            kind: kinds[j],
            axis: info.axis_name(levels[j].0).to_string(),
            index_var: levels[j].1.clone(),
            body,
            yield_value: yv,
            ty,
        };
        yv = l.id.clone();
        body = vec![Stmt::Loop(l)];
    }
    body.pop().expect("at least one level")
}

pub(super) fn materialize(state: &TilingState) -> Program {
    let info = state.info();
    let base = &info.program;
    let mut namer = Namer { used: info.ids.iter().cloned().collect() };
    let mut cur: Vec<String> = info.ids.clone();
    let mut body = Vec::new();
    let mesh_axes = info.mesh().axes().len();

    let atomic_axes = |v: usize| -> Vec<usize> { (0..mesh_axes).filter(|&a| state.is_atomic(v, a)).collect() };
    let emit_atomic = |v: usize, cur: &mut Vec<String>, namer: &mut Namer, body: &mut Vec<Stmt>| {
        let axes = atomic_axes(v);
        if axes.is_empty() {
            return;
        }
        let id = namer.fresh(format!("{}.a", info.ids[v]));
        body.push(Stmt::Atomic(AtomicRegion {
            id: id.clone(),
            axes: axes.iter().map(|&a| info.axis_name(a).to_string()).collect(),
            value: cur[v].clone(),
        }));
        cur[v] = id;
    };

    for v in 0..info.num_args {
        let dims = state.value_dims(v);
        let mut axes: Vec<usize> = dims.iter().flatten().copied().collect();
        axes.sort();
        if !axes.is_empty() {
            let id = &info.ids[v];
            let levels: Vec<(usize, String)> = axes.iter().map(|&a| (a, namer.fresh(format!("{}.i", id)))).collect();
            let mut inner = Vec::new();
            let shape = &info.types[v].shape;
            let last = emit_slices(id, shape, &dims, &levels, id, info, &mut namer, &mut inner);
            let kinds: Vec<LoopKind> = axes
                .iter()
                .map(|a| LoopKind::Tile { dim: dims.iter().position(|d| *d == Some(*a)).unwrap() })
                .collect();
            let names: Vec<String> = axes.iter().map(|_| namer.fresh(format!("{}.t", id))).collect();
            body.push(wrap_loops(&levels, &kinds, &names, inner, last, shape, &dims, info));
            cur[v] = names[0].clone();
        }
        emit_atomic(v, &mut cur, &mut namer, &mut body);
    }

    // Group consecutive ops into fused chains sharing the same tile loops.
    let n = info.ops.len();
    let mut chains: Vec<Vec<usize>> = Vec::new();
    for o in 0..n {
        let fuse = o > 0 && {
            let p = o - 1;
            let pv = info.op_value(p);
            let sig_p = state.loop_signature(p);
            let sig_o = state.loop_signature(o);
            let chain_ok = chains.last().is_some_and(|c| *c.last().unwrap() == p);
            chain_ok
                && !sig_p.is_empty()
                && sig_p.iter().all(|s| s.1.is_some())
                && sig_o.iter().all(|s| s.1.is_some())
                && sig_p.iter().map(|s| s.0).eq(sig_o.iter().map(|s| s.0))
                && info.uses[pv].iter().all(|&(u, _)| u == o)
                && !info.uses[pv].is_empty()
                && pv != info.result
                && atomic_axes(pv).is_empty()
                && info.uses[pv].iter().all(|&(_, pos)| state.operand_requirement(o, pos) == state.value_dims(pv))
        };
        if fuse {
            chains.last_mut().unwrap().push(o);
        } else {
            chains.push(vec![o]);
        }
    }

    for chain in chains {
        let last = *chain.last().unwrap();
        let last_v = info.op_value(last);
        let sig = state.loop_signature(last);
        if sig.is_empty() {
            let op = info.op(last);
            body.push(Stmt::Op(Operation {
                id: op.id.clone(),
                kind: op.kind.clone(),
                operands: info.ops[last].operands.iter().map(|&o| cur[o].clone()).collect(),
                ty: op.ty.clone(),
                scope: op.scope.clone(),
            }));
            emit_atomic(last_v, &mut cur, &mut namer, &mut body);
            continue;
        }
        let last_id = &info.ids[last_v];
        let levels: Vec<(usize, String)> =
            sig.iter().map(|&(a, _)| (a, namer.fresh(format!("{}.i", last_id)))).collect();
        let mut inner = Vec::new();
        let members: HashSet<usize> = chain.iter().map(|&o| info.op_value(o)).collect();
        for &o in &chain {
            let op = info.op(o);
            let mut operands = Vec::new();
            for (pos, &src) in info.ops[o].operands.iter().enumerate() {
                if members.contains(&src) {
                    operands.push(info.ids[src].clone());
                } else {
                    let req = state.operand_requirement(o, pos);
                    let stem = format!("{}.{}", op.id, pos);
                    operands.push(emit_slices(
                        &cur[src],
                        &info.types[src].shape,
                        &req,
                        &levels,
                        &stem,
                        info,
                        &mut namer,
                        &mut inner,
                    ));
                }
            }
            let v = info.op_value(o);
            let local = shard_shape(&op.ty.shape, &state.value_dims(v), info, None);
            inner.push(Stmt::Op(Operation {
                id: op.id.clone(),
                kind: localize(&op.kind, &local),
                operands,
                ty: TensorType::f32(local),
                scope: op.scope.clone(),
            }));
        }
        let kinds: Vec<LoopKind> =
            sig.iter().map(|&(_, r)| r.map_or(LoopKind::Sum, |dim| LoopKind::Tile { dim })).collect();
        let names: Vec<String> = sig.iter().map(|_| namer.fresh(format!("{}.t", last_id))).collect();
        let dims = state.value_dims(last_v);
        body.push(wrap_loops(&levels, &kinds, &names, inner, last_id.clone(), &info.types[last_v].shape, &dims, info));
        cur[last_v] = names[0].clone();
        emit_atomic(last_v, &mut cur, &mut namer, &mut body);
    }

    Program {
        name: base.name.clone(),
        mesh: base.mesh.clone(),
        args: base.args.clone(),
        body,
        result: cur[info.result].clone(),
    }
}

#[derive(Clone, Debug)]
struct Binding {
    global: usize,
    sliced: Vec<(usize, usize)>,
    pending: Vec<usize>,
}

struct Ctx {
    axis: usize,
    index: String,
    sum: bool,
}

struct Extractor<'a> {
    p: &'a Program,
    ids: Vec<ValueId>,
    types: Vec<TensorType>,
    ops: Vec<Operation>,
    /// Per base op: (axis, iteration dim) of each enclosing loop it follows.
    witnesses: Vec<Vec<(usize, usize)>>,
    arg_dims: Vec<Vec<Option<usize>>>,
    atomic: Vec<(usize, usize)>,
}

impl<'a> Extractor<'a> {
    fn err(&self, at: &str, msg: impl Into<String>) -> TilingError {
        TilingError::NonCanonical { at: at.to_string(), msg: msg.into() }
    }

    fn axis(&self, name: &str) -> Result<usize, TilingError> {
        self.p.mesh.axis_index(name).ok_or_else(|| TilingError::UnknownAxis(name.to_string()))
    }

    fn axis_size(&self, a: usize) -> usize {
        self.p.mesh.axes()[a].1
    }

    fn local_shape(&self, b: &Binding) -> Vec<usize> {
        let mut s = self.types[b.global].shape.clone();
        for &(a, d) in &b.sliced {
            s[d] /= self.axis_size(a);
        }
        s
    }

    fn lookup(&self, env: &HashMap<String, Binding>, id: &str) -> Result<Binding, TilingError> {
        env.get(id).cloned().ok_or_else(|| TilingError::UnknownValue(id.to_string()))
    }

    fn block(
        &mut self,
        body: &[Stmt],
        env: &mut HashMap<String, Binding>,
        ctx: &mut Vec<Ctx>,
    ) -> Result<(), TilingError> {
        for stmt in body {
            match stmt {
                Stmt::Op(op) => self.op(op, env, ctx)?,
                Stmt::SliceAxis(s) => {
                    let mut b = self.lookup(env, &s.operand)?;
                    let c = ctx
                        .iter()
                        .find(|c| c.index == s.index)
                        .ok_or_else(|| self.err(&s.id, "slice index is not a loop variable"))?;
                    if !b.pending.is_empty() || b.sliced.iter().any(|x| x.0 == c.axis || x.1 == s.dim) {
                        return Err(self.err(&s.id, "value sliced twice on one axis or dim"));
                    }
                    b.sliced.push((c.axis, s.dim));
                    env.insert(s.id.clone(), b);
                }
                Stmt::Atomic(r) => {
                    let b = self.lookup(env, &r.value)?;
                    if !b.sliced.is_empty() || !b.pending.is_empty() {
                        return Err(self.err(&r.id, "atomic region around a local value"));
                    }
                    let axes: Vec<usize> = if r.axes.is_empty() {
                        (0..self.p.mesh.axes().len()).collect()
                    } else {
                        r.axes.iter().map(|a| self.axis(a)).collect::<Result<_, _>>()?
                    };
                    for a in axes {
                        self.atomic.push((b.global, a));
                    }
                    env.insert(r.id.clone(), b);
                }
                Stmt::Loop(l) => {
                    let axis = self.axis(&l.axis)?;
                    ctx.push(Ctx { axis, index: l.index_var.clone(), sum: l.kind == LoopKind::Sum });
                    let mut inner = env.clone();
                    self.block(&l.body, &mut inner, ctx)?;
                    ctx.pop();
                    let mut y = self.lookup(&inner, &l.yield_value)?;
                    match l.kind {
                        LoopKind::Tile { dim } => {
                            let k =
                                y.sliced.iter().position(|&x| x == (axis, dim)).ok_or_else(|| {
                                    self.err(&l.id, "tile loop yields a value not sliced on its axis")
                                })?;
                            y.sliced.remove(k);
                            if y.global < self.p.args.len() {
                                let slot = &mut self.arg_dims[y.global][dim];
                                if slot.is_some_and(|a| a != axis) {
                                    return Err(self.err(&l.id, "argument tiled inconsistently"));
                                }
                                *slot = Some(axis);
                            }
                        }
                        LoopKind::Sum => {
                            let k = y
                                .pending
                                .iter()
                                .position(|&x| x == axis)
                                .ok_or_else(|| self.err(&l.id, "sum loop yields a value without partial sums"))?;
                            y.pending.remove(k);
                        }
                    }
                    env.insert(l.id.clone(), y);
                }
            }
        }
        Ok(())
    }

    fn op(&mut self, op: &Operation, env: &mut HashMap<String, Binding>, ctx: &[Ctx]) -> Result<(), TilingError> {
        let bindings: Vec<Binding> = op.operands.iter().map(|o| self.lookup(env, o)).collect::<Result<_, _>>()?;
        if bindings.iter().any(|b| !b.pending.is_empty()) {
            return Err(self.err(&op.id, "operand holds unreduced partial sums"));
        }
        // (loop, [(operand, dim)]) for every enclosing loop some operand is sliced over.
        let hits: Vec<(&Ctx, Vec<(usize, usize)>)> = ctx
            .iter()
            .map(|c| {
                let h: Vec<(usize, usize)> = bindings
                    .iter()
                    .enumerate()
                    .flat_map(|(i, b)| b.sliced.iter().filter(|x| x.0 == c.axis).map(move |x| (i, x.1)))
                    .collect();
                (c, h)
            })
            .filter(|(_, h)| !h.is_empty())
            .collect();
        let global = self.global_result(op, &bindings, &hits)?;
        let kind = globalize(&op.kind, &global);
        let gshapes: Vec<&[usize]> = bindings.iter().map(|b| self.types[b.global].shape.as_slice()).collect();
        let rule = lookup_rule(&kind, &gshapes, &global).map_err(|e| self.err(&op.id, e.to_string()))?;
        let mut sliced = Vec::new();
        let mut pending = Vec::new();
        let mut wit = Vec::new();
        for (c, hits) in &hits {
            let iters: HashSet<Option<usize>> = hits.iter().map(|&(i, d)| rule.iter_of_operand(i, d)).collect();
            let it = match iters.into_iter().collect::<Vec<_>>().as_slice() {
                [Some(it)] => *it,
                _ => return Err(self.err(&op.id, "operands sliced on unrelated dims")),
            };
            let idim = &rule.iter_dims[it];
            for (i, d) in idim.operands.iter().enumerate() {
                if let Some(d) = d {
                    if !hits.contains(&(i, *d)) {
                        return Err(self.err(&op.id, "operand not sliced along a looped dim"));
                    }
                }
            }
            if idim.is_sum() != c.sum {
                return Err(self.err(&op.id, "loop kind does not match the op's iteration dim"));
            }
            match idim.result {
                Some(r) => sliced.push((c.axis, r)),
                None => pending.push(c.axis),
            }
            wit.push((c.axis, it));
        }
        let b = Binding { global: self.ids.len(), sliced, pending };
        self.types.push(TensorType::f32(global.clone()));
        if self.local_shape(&b) != op.ty.shape {
            return Err(self.err(&op.id, "local result shape does not match its loops"));
        }
        let operands = bindings.iter().map(|b| self.ids[b.global].clone()).collect();
        self.ids.push(op.id.clone());
        self.ops.push(Operation {
            id: op.id.clone(),
            kind,
            operands,
            ty: TensorType::f32(global),
            scope: op.scope.clone(),
        });
        self.witnesses.push(wit);
        env.insert(op.id.clone(), b);
        Ok(())
    }

    /// Global result shape of an op inside loops, from its operands' global
    /// shapes and, for shape-carrying ops, its local attributes.
    fn global_result(
        &self,
        op: &Operation,
        bindings: &[Binding],
        hits: &[(&Ctx, Vec<(usize, usize)>)],
    ) -> Result<Vec<usize>, TilingError> {
        let local = &op.ty.shape;
        let operand_sliced = |d: usize| bindings[0].sliced.iter().any(|x| x.1 == d);
        match &op.kind {
            OpKind::Constant { .. } => Ok(local.clone()),
            OpKind::BroadcastInDim { dims, .. } => {
                let mut g = local.clone();
                for (k, &j) in dims.iter().enumerate() {
                    if operand_sliced(k) {
                        g[j] = self.types[bindings[0].global].shape[k];
                    }
                }
                Ok(g)
            }
            OpKind::Slice { .. } => {
                let src = &self.types[bindings[0].global].shape;
                Ok((0..local.len()).map(|d| if operand_sliced(d) { src[d] } else { local[d] }).collect())
            }
            OpKind::Reshape { .. } => {
                let src = &self.types[bindings[0].global].shape;
                let n = local.len();
                let axes: Vec<(usize, usize)> = hits.iter().map(|(c, h)| (c.axis, h[0].1)).collect();
                let combos = n.pow(axes.len() as u32);
                for code in 0..combos {
                    let mut rs = Vec::new();
                    let mut x = code;
                    for _ in &axes {
                        rs.push(x % n);
                        x /= n;
                    }
                    if (1..rs.len()).any(|i| rs[..i].contains(&rs[i])) {
                        continue;
                    }
                    let mut g = local.clone();
                    for (&(a, _), &r) in axes.iter().zip(&rs) {
                        g[r] *= self.axis_size(a);
                    }
                    if g.iter().product::<usize>() != src.iter().product::<usize>() {
                        continue;
                    }
                    let Ok(rule) = lookup_rule(&OpKind::Reshape { shape: g.clone() }, &[src], &g) else { continue };
                    let fits = axes.iter().zip(&rs).all(|(&(_, d), &r)| {
                        rule.iter_of_operand(0, d).is_some_and(|it| rule.iter_dims[it].result == Some(r))
                    });
                    if fits {
                        return Ok(g);
                    }
                }
                Err(self.err(&op.id, "reshape inside loops does not preserve the sliced dims"))
            }
            kind => {
                let tys: Vec<&TensorType> = bindings.iter().map(|b| &self.types[b.global]).collect();
                crate::ir::infer_base_type(kind, &tys, &op.ty).map(|t| t.shape).map_err(|e| self.err(&op.id, e))
            }
        }
    }
}

fn globalize(kind: &OpKind, global: &[usize]) -> OpKind {
    match kind {
        OpKind::Reshape { .. } | OpKind::BroadcastInDim { .. } | OpKind::Slice { .. } => localize(kind, global),
        k => k.clone(),
    }
}

pub(super) fn extract(p: &Program) -> Result<TilingState, TilingError> {
    crate::ir::validate_and_infer(p)?;
    let mut ex = Extractor {
        p,
        ids: p.args.iter().map(|a| a.id.clone()).collect(),
        types: p.args.iter().map(|a| a.ty.clone()).collect(),
        ops: Vec::new(),
        witnesses: Vec::new(),
        arg_dims: p.args.iter().map(|a| vec![None; a.ty.rank()]).collect(),
        atomic: Vec::new(),
    };
    let mut env: HashMap<String, Binding> = p
        .args
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id.clone(), Binding { global: i, sliced: vec![], pending: vec![] }))
        .collect();
    ex.block(&p.body, &mut env, &mut Vec::new())?;
    let res = ex.lookup(&env, &p.result)?;
    if !res.sliced.is_empty() || !res.pending.is_empty() {
        return Err(ex.err(&p.result, "returned value is local to a loop"));
    }
    let base = Program {
        name: p.name.clone(),
        mesh: p.mesh.clone(),
        args: p.args.clone(),
        body: ex.ops.iter().cloned().map(Stmt::Op).collect(),
        result: ex.ids[res.global].clone(),
    };
    let info = Arc::new(ProgramInfo::new(base)?);
    let mut state = TilingState::from_info(info.clone());
    for (arg, dims) in ex.arg_dims.iter().enumerate() {
        for (d, a) in dims.iter().enumerate() {
            if let Some(a) = a {
                state.set_arg_dim(arg, d, *a);
            }
        }
    }
    for (op, wit) in ex.witnesses.iter().enumerate() {
        for &(axis, iter) in wit {
            state.add_nest(op, NestEntry { axis, iter });
        }
    }
    for (v, a) in ex.atomic {
        state.mark_atomic(v, a);
    }
    Ok(state)
}
