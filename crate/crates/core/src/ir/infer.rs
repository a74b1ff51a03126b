use std::collections::{HashMap, HashSet};

use super::{IrError, OpKind, Program, Stmt, TensorType};

fn fmt_shape(shape: &[usize]) -> String {
    format!("{:?}", shape)
}

fn dims_unique_in_rank(dims: &[usize], rank: usize) -> bool {
    let mut seen = HashSet::new();
    dims.iter().all(|&d| d < rank && seen.insert(d))
}

/// Infers the result type of a base op from its operand types. `declared`
/// is the annotated result type, consulted only by `constant`.
pub fn infer_base_type(kind: &OpKind, operands: &[&TensorType], declared: &TensorType) -> Result<TensorType, String> {
    if let Some(n) = kind.arity() {
        if operands.len() != n {
            return Err(format!("expected {} operands, got {}", n, operands.len()));
        }
    }
    let ty = match kind {
        OpKind::Constant { .. } => declared.clone(),
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Maximum => {
            if operands[0].shape != operands[1].shape {
                return Err(format!(
                    "operand shapes differ: {} vs {}",
                    fmt_shape(&operands[0].shape),
                    fmt_shape(&operands[1].shape)
                ));
            }
            operands[0].clone()
        }
        OpKind::Neg | OpKind::Exp | OpKind::Tanh | OpKind::Rsqrt => operands[0].clone(),
        OpKind::Dot(d) => {
            let (l, r) = (operands[0], operands[1]);
            if d.lhs_batch.len() != d.rhs_batch.len() || d.lhs_contract.len() != d.rhs_contract.len() {
                return Err("batch/contracting dim lists differ in length".into());
            }
            let lhs_all: Vec<usize> = d.lhs_batch.iter().chain(&d.lhs_contract).copied().collect();
            let rhs_all: Vec<usize> = d.rhs_batch.iter().chain(&d.rhs_contract).copied().collect();
            if !dims_unique_in_rank(&lhs_all, l.rank()) || !dims_unique_in_rank(&rhs_all, r.rank()) {
                return Err("batch/contracting dims out of range or repeated".into());
            }
            for (&a, &b) in lhs_all.iter().zip(&rhs_all) {
                if l.shape[a] != r.shape[b] {
                    return Err(format!(
                        "dot dims lhs {} (size {}) and rhs {} (size {}) differ",
                        a, l.shape[a], b, r.shape[b]
                    ));
                }
            }
            let mut shape: Vec<usize> = d.lhs_batch.iter().map(|&i| l.shape[i]).collect();
            shape.extend(d.lhs_free(l.rank()).into_iter().map(|i| l.shape[i]));
            shape.extend(d.rhs_free(r.rank()).into_iter().map(|i| r.shape[i]));
            TensorType::f32(shape)
        }
        OpKind::ReduceSum { dims } | OpKind::ReduceMax { dims } => {
            let x = operands[0];
            if !dims_unique_in_rank(dims, x.rank()) {
                return Err(format!("reduce dims {:?} invalid for rank {}", dims, x.rank()));
            }
            TensorType::f32((0..x.rank()).filter(|i| !dims.contains(i)).map(|i| x.shape[i]).collect::<Vec<_>>())
        }
        OpKind::Transpose { perm } => {
            let x = operands[0];
            if perm.len() != x.rank() || !dims_unique_in_rank(perm, x.rank()) {
                return Err(format!("permutation {:?} is not a bijection on rank {}", perm, x.rank()));
            }
            TensorType::f32(perm.iter().map(|&p| x.shape[p]).collect::<Vec<_>>())
        }
        OpKind::Reshape { shape } => {
            let n: usize = shape.iter().product();
            if n != operands[0].num_elements() {
                return Err(format!(
                    "reshape from {} to {} changes the element count",
                    fmt_shape(&operands[0].shape),
                    fmt_shape(shape)
                ));
            }
            TensorType::f32(shape.clone())
        }
        OpKind::BroadcastInDim { shape, dims } => {
            let x = operands[0];
            if dims.len() != x.rank() || !dims_unique_in_rank(dims, shape.len()) {
                return Err(format!("broadcast dims {:?} invalid", dims));
            }
            if dims.windows(2).any(|w| w[0] >= w[1]) {
                return Err("broadcast dims must be increasing".into());
            }
            for (i, &d) in dims.iter().enumerate() {
                if x.shape[i] != shape[d] && x.shape[i] != 1 {
                    return Err(format!(
                        "operand dim {} (size {}) cannot broadcast to size {}",
                        i, x.shape[i], shape[d]
                    ));
                }
            }
            TensorType::f32(shape.clone())
        }
        OpKind::Slice { start, limit } => {
            let x = operands[0];
            if start.len() != x.rank() || limit.len() != x.rank() {
                return Err("slice bounds do not match operand rank".into());
            }
            let mut shape = Vec::with_capacity(x.rank());
            for i in 0..x.rank() {
                if start[i] >= limit[i] || limit[i] > x.shape[i] {
                    return Err(format!(
                        "slice bounds [{}, {}) invalid for dim {} of size {}",
                        start[i], limit[i], i, x.shape[i]
                    ));
                }
                shape.push(limit[i] - start[i]);
            }
            TensorType::f32(shape)
        }
        OpKind::Concatenate { dim } => {
            if operands.is_empty() {
                return Err("concatenate needs at least one operand".into());
            }
            let first = operands[0];
            if *dim >= first.rank() {
                return Err(format!("concatenate dim {} out of range", dim));
            }
            let mut shape = first.shape.clone();
            for o in &operands[1..] {
                if o.rank() != first.rank() || (0..first.rank()).any(|i| i != *dim && o.shape[i] != first.shape[i]) {
                    return Err("concatenate operands disagree off the concatenation dim".into());
                }
                shape[*dim] += o.shape[*dim];
            }
            TensorType::f32(shape)
        }
    };
    ty.check().map_err(|e| e.to_string())?;
    Ok(ty)
}

struct Checker<'a> {
    program: &'a Program,
    defined: HashSet<String>,
}

impl<'a> Checker<'a> {
    fn define(&mut self, id: &str) -> Result<(), IrError> {
        if !self.defined.insert(id.to_string()) {
            return Err(IrError::Redefinition(id.to_string()));
        }
        Ok(())
    }

    fn block(
        &mut self,
        body: &[Stmt],
        env: &mut HashMap<String, TensorType>,
        loops: &mut Vec<(String, String, String)>,
    ) -> Result<(), IrError> {
        let mesh = &self.program.mesh;
        for stmt in body {
            match stmt {
                Stmt::Op(op) => {
                    let tys = op
                        .operands
                        .iter()
                        .map(|o| env.get(o).ok_or_else(|| IrError::UnknownValue(o.clone())))
                        .collect::<Result<Vec<_>, _>>()?;
                    if let Some(n) = op.kind.arity() {
                        if n != tys.len() {
                            return Err(IrError::Arity { op: op.id.clone(), expected: n, actual: tys.len() });
                        }
                    }
                    op.ty.check().map_err(|e| IrError::InvalidOp { op: op.id.clone(), msg: e.to_string() })?;
                    let inferred = infer_base_type(&op.kind, &tys, &op.ty)
                        .map_err(|msg| IrError::InvalidOp { op: op.id.clone(), msg })?;
                    if inferred != op.ty {
                        return Err(IrError::ShapeMismatch {
                            op: op.id.clone(),
                            expected: inferred.to_string(),
                            actual: op.ty.to_string(),
                        });
                    }
                    self.define(&op.id)?;
                    env.insert(op.id.clone(), op.ty.clone());
                }
                Stmt::SliceAxis(s) => {
                    let ty = env.get(&s.operand).ok_or_else(|| IrError::UnknownValue(s.operand.clone()))?;
                    let axis =
                        loops.iter().find(|(_, _, idx)| *idx == s.index).map(|(_, axis, _)| axis.clone()).ok_or_else(
                            || IrError::InvalidOp {
                                op: s.id.clone(),
                                msg: format!("%{} is not the index of an enclosing loop", s.index),
                            },
                        )?;
                    let size = mesh.axis_size(&axis).ok_or_else(|| IrError::UndeclaredAxis(axis.clone()))?;
                    if s.dim >= ty.rank() || ty.shape[s.dim] % size != 0 {
                        return Err(IrError::InvalidOp {
                            op: s.id.clone(),
                            msg: format!("dim {} of {} cannot be split over \"{}\" ({})", s.dim, ty, axis, size),
                        });
                    }
                    let mut expected = ty.clone();
                    expected.shape[s.dim] /= size;
                    if expected != s.ty {
                        return Err(IrError::ShapeMismatch {
                            op: s.id.clone(),
                            expected: expected.to_string(),
                            actual: s.ty.to_string(),
                        });
                    }
                    self.define(&s.id)?;
                    env.insert(s.id.clone(), s.ty.clone());
                }
                Stmt::Atomic(a) => {
                    for axis in &a.axes {
                        if !mesh.contains(axis) {
                            return Err(IrError::UndeclaredAxis(axis.clone()));
                        }
                    }
                    let ty = env.get(&a.value).ok_or_else(|| IrError::UnknownValue(a.value.clone()))?.clone();
                    self.define(&a.id)?;
                    env.insert(a.id.clone(), ty);
                }
                Stmt::Loop(l) => {
                    let size = mesh.axis_size(&l.axis).ok_or_else(|| IrError::UndeclaredAxis(l.axis.clone()))?;
                    if let Some((outer, _, _)) = loops.iter().find(|(_, axis, _)| *axis == l.axis) {
                        return Err(IrError::NestedAxis {
                            outer: outer.clone(),
                            inner: l.id.clone(),
                            axis: l.axis.clone(),
                        });
                    }
                    l.ty.check().map_err(|e| IrError::InvalidOp { op: l.id.clone(), msg: e.to_string() })?;
                    self.define(&l.index_var)?;
                    let mut inner = env.clone();
                    loops.push((l.id.clone(), l.axis.clone(), l.index_var.clone()));
                    self.block(&l.body, &mut inner, loops)?;
                    loops.pop();
                    let yielded =
                        inner.get(&l.yield_value).ok_or_else(|| IrError::UnknownValue(l.yield_value.clone()))?;
                    let mut expected = l.ty.clone();
                    if let super::LoopKind::Tile { dim } = l.kind {
                        if dim >= expected.rank() || expected.shape[dim] % size != 0 {
                            return Err(IrError::InvalidOp {
                                op: l.id.clone(),
                                msg: format!("tile dim {} of {} not divisible by \"{}\" ({})", dim, l.ty, l.axis, size),
                            });
                        }
                        expected.shape[dim] /= size;
                    }
                    if *yielded != expected {
                        return Err(IrError::ShapeMismatch {
                            op: l.id.clone(),
                            expected: expected.to_string(),
                            actual: yielded.to_string(),
                        });
                    }
                    self.define(&l.id)?;
                    env.insert(l.id.clone(), l.ty.clone());
                }
            }
        }
        Ok(())
    }
}

/// Checks every op's declared type against shape inference, SSA scoping and
/// the tiling-loop invariants. Returns the program unchanged on success.
pub fn validate_and_infer(p: &Program) -> Result<Program, IrError> {
    let mut checker = Checker { program: p, defined: HashSet::new() };
    let mut env = HashMap::new();
    for arg in &p.args {
        arg.ty.check()?;
        checker.define(&arg.id)?;
        env.insert(arg.id.clone(), arg.ty.clone());
    }
    checker.block(&p.body, &mut env, &mut Vec::new())?;
    if !env.contains_key(&p.result) {
        return Err(IrError::UnknownValue(p.result.clone()));
    }
    Ok(p.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::DotDims;

    #[test]
    fn dot_shapes() {
        let x = TensorType::f32([8, 16]);
        let w = TensorType::f32([16, 64]);
        let t = infer_base_type(&OpKind::Dot(DotDims::matmul()), &[&x, &w], &x).unwrap();
        assert_eq!(t.shape, vec![8, 64]);

        // batch dims first, then lhs free, then rhs free
        let q = TensorType::f32([2, 4, 2, 4]);
        let dims = DotDims::contract(&[3], &[3]).with_batch(&[0, 2], &[0, 2]);
        let t = infer_base_type(&OpKind::Dot(dims), &[&q, &q], &q).unwrap();
        assert_eq!(t.shape, vec![2, 2, 4, 4]);
    }

    #[test]
    fn reduce_and_reshape() {
        let x = TensorType::f32([8, 64]);
        let t = infer_base_type(&OpKind::ReduceSum { dims: vec![1] }, &[&x], &x).unwrap();
        assert_eq!(t.shape, vec![8]);
        let err = infer_base_type(&OpKind::Reshape { shape: vec![8, 65] }, &[&x], &x).unwrap_err();
        assert!(err.contains("element count"));
    }

    #[test]
    fn broadcast_and_transpose() {
        let x = TensorType::f32([2, 4]);
        let k = OpKind::BroadcastInDim { shape: vec![2, 4, 8], dims: vec![0, 1] };
        assert_eq!(infer_base_type(&k, &[&x], &x).unwrap().shape, vec![2, 4, 8]);
        let k = OpKind::Transpose { perm: vec![1, 0] };
        assert_eq!(infer_base_type(&k, &[&x], &x).unwrap().shape, vec![4, 2]);
        let k = OpKind::Transpose { perm: vec![0, 0] };
        assert!(infer_base_type(&k, &[&x], &x).is_err());
    }
}
