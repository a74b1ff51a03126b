//! Declarative per-op tiling behaviour.
//!
//! Every op is described by its iteration space: a list of [`IterDim`]s, each
//! tying together at most one result dim and at most one dim per operand.
//! Tiling an iteration dim over an axis slices every operand that carries it;
//! iteration dims with a result dim concatenate, those without one (dot
//! contractions, `reduce_sum` dims) produce partial sums over the axis.
//! Operand or result dims that appear in no iteration dim are blocked.

use crate::ir::OpKind;

use super::PropagationError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IterDim {
    /// Result dim, or `None` for a summed (contracting) dim.
    pub result: Option<usize>,
    /// Per operand: the operand dim bound to this iteration dim, if any.
    pub operands: Vec<Option<usize>>,
    pub extent: usize,
}

impl IterDim {
    pub fn is_sum(&self) -> bool {
        self.result.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropagationRule {
    pub kind: &'static str,
    pub iter_dims: Vec<IterDim>,
    /// (operand, dim) pairs tiling cannot pass through.
    pub blocked_operand_dims: Vec<(usize, usize)>,
    pub blocked_result_dims: Vec<usize>,
}

impl PropagationRule {
    fn new(kind: &'static str, iter_dims: Vec<IterDim>, operand_shapes: &[&[usize]], result_rank: usize) -> Self {
        let mut blocked_operand_dims = Vec::new();
        for (i, shape) in operand_shapes.iter().enumerate() {
            for d in 0..shape.len() {
                if !iter_dims.iter().any(|it| it.operands[i] == Some(d)) {
                    blocked_operand_dims.push((i, d));
                }
            }
        }
        let blocked_result_dims =
            (0..result_rank).filter(|r| !iter_dims.iter().any(|it| it.result == Some(*r))).collect();
        PropagationRule { kind, iter_dims, blocked_operand_dims, blocked_result_dims }
    }

    /// Iteration dim bound to `dim` of operand `operand`.
    pub fn iter_of_operand(&self, operand: usize, dim: usize) -> Option<usize> {
        self.iter_dims.iter().position(|it| it.operands[operand] == Some(dim))
    }

    pub fn iter_of_result(&self, dim: usize) -> Option<usize> {
        self.iter_dims.iter().position(|it| it.result == Some(dim))
    }
}

fn same_dims(n_operands: usize, rank: usize, shape: &[usize]) -> Vec<IterDim> {
    (0..rank).map(|i| IterDim { result: Some(i), operands: vec![Some(i); n_operands], extent: shape[i] }).collect()
}

/// Groups of dims between an input and output shape of a reshape that have
/// matching element counts; returns (operand dim, result dim) for every group
/// holding exactly one non-unit dim on each side of equal size.
fn reshape_passthrough(from: &[usize], to: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < from.len() || j < to.len() {
        let (gi, gj) = (i, j);
        let mut pa: usize = *from.get(i).unwrap_or(&1);
        let mut pb: usize = *to.get(j).unwrap_or(&1);
        i += 1;
        j += 1;
        while pa != pb {
            if pa < pb {
                if i >= from.len() {
                    return out;
                }
                pa *= from[i];
                i += 1;
            } else {
                if j >= to.len() {
                    return out;
                }
                pb *= to[j];
                j += 1;
            }
        }
        let a: Vec<usize> = (gi..i.min(from.len())).filter(|&k| from[k] != 1).collect();
        let b: Vec<usize> = (gj..j.min(to.len())).filter(|&k| to[k] != 1).collect();
        if a.len() == 1 && b.len() == 1 && from[a[0]] == to[b[0]] {
            out.push((a[0], b[0]));
        }
    }
    out
}

/// Looks up the tiling rule for an op instance. Shapes are needed because
/// reshape, broadcast and slice behaviour depends on them.
pub fn lookup_rule(
    kind: &OpKind,
    operand_shapes: &[&[usize]],
    result_shape: &[usize],
) -> Result<PropagationRule, PropagationError> {
    if let Some(n) = kind.arity() {
        if operand_shapes.len() != n {
            return Err(PropagationError::UnsupportedKind(format!(
                "{} with {} operands",
                kind.name(),
                operand_shapes.len()
            )));
        }
    }
    let rank = result_shape.len();
    let name = kind.name();
    let iter_dims = match kind {
        OpKind::Constant { .. } => Vec::new(),
        k if k.is_elementwise() => same_dims(operand_shapes.len(), rank, result_shape),
        OpKind::Dot(d) => {
            let lhs_rank = operand_shapes[0].len();
            let rhs_rank = operand_shapes[1].len();
            let mut out = Vec::new();
            for (&a, &b) in d.lhs_batch.iter().zip(&d.rhs_batch) {
                out.push(IterDim {
                    result: Some(out.len()),
                    operands: vec![Some(a), Some(b)],
                    extent: operand_shapes[0][a],
                });
            }
            for a in d.lhs_free(lhs_rank) {
                out.push(IterDim {
                    result: Some(out.len()),
                    operands: vec![Some(a), None],
                    extent: operand_shapes[0][a],
                });
            }
            for b in d.rhs_free(rhs_rank) {
                out.push(IterDim {
                    result: Some(out.len()),
                    operands: vec![None, Some(b)],
                    extent: operand_shapes[1][b],
                });
            }
            for (&a, &b) in d.lhs_contract.iter().zip(&d.rhs_contract) {
                out.push(IterDim { result: None, operands: vec![Some(a), Some(b)], extent: operand_shapes[0][a] });
            }
            out
        }
        OpKind::ReduceSum { dims } | OpKind::ReduceMax { dims } => {
            let in_shape = operand_shapes[0];
            let mut out = Vec::new();
            let mut r = 0;
            for d in 0..in_shape.len() {
                if dims.contains(&d) {
                    if matches!(kind, OpKind::ReduceSum { .. }) {
                        out.push(IterDim { result: None, operands: vec![Some(d)], extent: in_shape[d] });
                    }
                } else {
                    out.push(IterDim { result: Some(r), operands: vec![Some(d)], extent: in_shape[d] });
                    r += 1;
                }
            }
            out
        }
        OpKind::Transpose { perm } => perm
            .iter()
            .enumerate()
            .map(|(i, &p)| IterDim { result: Some(i), operands: vec![Some(p)], extent: result_shape[i] })
            .collect(),
        OpKind::Reshape { .. } => reshape_passthrough(operand_shapes[0], result_shape)
            .into_iter()
            .map(|(a, b)| IterDim { result: Some(b), operands: vec![Some(a)], extent: result_shape[b] })
            .collect(),
        OpKind::BroadcastInDim { dims, .. } => (0..rank)
            .map(|j| {
                let src = dims.iter().position(|&d| d == j).filter(|&k| operand_shapes[0][k] == result_shape[j]);
                IterDim { result: Some(j), operands: vec![src], extent: result_shape[j] }
            })
            .collect(),
        OpKind::Slice { start, limit } => (0..rank)
            .filter(|&d| start[d] == 0 && limit[d] == operand_shapes[0][d])
            .map(|d| IterDim { result: Some(d), operands: vec![Some(d)], extent: result_shape[d] })
            .collect(),
        OpKind::Concatenate { dim } => (0..rank)
            .filter(|d| d != dim)
            .map(|d| IterDim {
                result: Some(d),
                operands: vec![Some(d); operand_shapes.len()],
                extent: result_shape[d],
            })
            .collect(),
        _ => unreachable!("elementwise kinds handled above"),
    };
    Ok(PropagationRule::new(name, iter_dims, operand_shapes, rank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::DotDims;

    #[test]
    fn add_is_pointwise() {
        let r = lookup_rule(&OpKind::Add, &[&[8, 64], &[8, 64]], &[8, 64]).unwrap();
        for i in 0..2 {
            assert_eq!(r.iter_of_operand(0, i), r.iter_of_result(i));
            assert_eq!(r.iter_of_operand(1, i), r.iter_of_result(i));
        }
        assert!(r.blocked_operand_dims.is_empty());
    }

    #[test]
    fn matmul_rule() {
        let r = lookup_rule(&OpKind::Dot(DotDims::matmul()), &[&[8, 16], &[16, 64]], &[8, 64]).unwrap();
        assert_eq!(r.iter_of_operand(0, 0), r.iter_of_result(0));
        assert_eq!(r.iter_of_operand(1, 1), r.iter_of_result(1));
        let k = r.iter_of_operand(0, 1).unwrap();
        assert_eq!(r.iter_of_operand(1, 0), Some(k));
        assert!(r.iter_dims[k].is_sum());
    }

    #[test]
    fn reshape_blocks_merged_dims() {
        let r = lookup_rule(&OpKind::Reshape { shape: vec![512] }, &[&[8, 64]], &[512]).unwrap();
        assert!(r.iter_dims.is_empty());
        assert_eq!(r.blocked_operand_dims, vec![(0, 0), (0, 1)]);
        let r = lookup_rule(&OpKind::Reshape { shape: vec![8, 4, 16] }, &[&[8, 64]], &[8, 4, 16]).unwrap();
        assert_eq!(r.iter_of_operand(0, 0), r.iter_of_result(0));
        assert!(r.iter_of_operand(0, 1).is_none());
        let r = lookup_rule(&OpKind::Reshape { shape: vec![8, 1, 64] }, &[&[8, 64]], &[8, 1, 64]).unwrap();
        assert_eq!(r.iter_of_operand(0, 1), r.iter_of_result(2));
    }

    #[test]
    fn slice_and_concat_block_their_dim() {
        let r = lookup_rule(&OpKind::Slice { start: vec![0, 2], limit: vec![4, 6] }, &[&[4, 8]], &[4, 4]).unwrap();
        assert!(r.iter_of_operand(0, 0).is_some());
        assert!(r.iter_of_operand(0, 1).is_none());
        let r = lookup_rule(&OpKind::Concatenate { dim: 0 }, &[&[2, 4], &[2, 4]], &[4, 4]).unwrap();
        assert!(r.iter_of_result(0).is_none());
        assert!(r.iter_of_result(1).is_some());
    }

    #[test]
    fn reduce_kinds() {
        let r = lookup_rule(&OpKind::ReduceSum { dims: vec![1] }, &[&[8, 64]], &[8]).unwrap();
        assert!(r.iter_dims[r.iter_of_operand(0, 1).unwrap()].is_sum());
        let r = lookup_rule(&OpKind::ReduceMax { dims: vec![1] }, &[&[8, 64]], &[8]).unwrap();
        assert!(r.iter_of_operand(0, 1).is_none());
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        assert!(lookup_rule(&OpKind::Add, &[&[2]], &[2]).is_err());
    }

    #[test]
    fn registry_is_total() {
        use crate::ir::OP_NAMES;
        let kinds = vec![
            OpKind::Constant { value: 1.0 },
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Div,
            OpKind::Neg,
            OpKind::Exp,
            OpKind::Tanh,
            OpKind::Rsqrt,
            OpKind::Maximum,
            OpKind::Dot(DotDims::matmul()),
            OpKind::ReduceSum { dims: vec![0] },
            OpKind::ReduceMax { dims: vec![0] },
            OpKind::Transpose { perm: vec![1, 0] },
            OpKind::Reshape { shape: vec![4] },
            OpKind::BroadcastInDim { shape: vec![2, 2, 3], dims: vec![0, 1] },
            OpKind::Slice { start: vec![0, 0], limit: vec![2, 1] },
            OpKind::Concatenate { dim: 0 },
        ];
        assert_eq!(kinds.len(), OP_NAMES.len());
        for k in kinds {
            let shapes: Vec<&[usize]> = match k.arity() {
                Some(0) => vec![],
                Some(1) => vec![&[2, 2]],
                _ => vec![&[2, 2], &[2, 2]],
            };
            assert!(lookup_rule(&k, &shapes, &[2, 2]).is_ok() || k.name() == "reduce_sum", "{}", k.name());
        }
    }
}
