//! Base tensor dialect: statically shaped f32 arrays, an HLO-like op set, and
//! the tiling constructs (`tile`, `sum`, `atomic`, `slice_axis`) layered on top.

mod infer;
mod parse;
pub(crate) mod print;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::mesh::Mesh;

pub use infer::{infer_base_type, validate_and_infer};
pub use parse::parse_program;
pub use print::{print_program, print_type};

/// Maximum supported tensor rank.
pub const MAX_RANK: usize = 4;

/// SSA value name, stored without the leading `%`.
pub type ValueId = String;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
}

impl DType {
    pub fn byte_size(self) -> usize {
        match self {
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorType {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorType {
    pub fn f32(shape: impl Into<Vec<usize>>) -> Self {
        TensorType { dtype: DType::F32, shape: shape.into() }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_size(&self) -> usize {
        self.num_elements() * self.dtype.byte_size()
    }

    pub fn check(&self) -> Result<(), IrError> {
        if self.rank() > MAX_RANK {
            return Err(IrError::Type(format!("rank {} exceeds {}", self.rank(), MAX_RANK)));
        }
        if self.shape.contains(&0) {
            return Err(IrError::Type(format!("zero-sized dimension in {:?}", self.shape)));
        }
        Ok(())
    }
}

impl fmt::Display for TensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_type(self))
    }
}

/// Dimension numbers of a general contraction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DotDims {
    pub lhs_batch: Vec<usize>,
    pub rhs_batch: Vec<usize>,
    pub lhs_contract: Vec<usize>,
    pub rhs_contract: Vec<usize>,
}

impl DotDims {
    /// Plain matrix product contracting `lhs` dim 1 with `rhs` dim 0.
    pub fn matmul() -> Self {
        DotDims { lhs_contract: vec![1], rhs_contract: vec![0], ..Default::default() }
    }

    pub fn contract(lhs: &[usize], rhs: &[usize]) -> Self {
        DotDims { lhs_contract: lhs.to_vec(), rhs_contract: rhs.to_vec(), ..Default::default() }
    }

    pub fn with_batch(mut self, lhs: &[usize], rhs: &[usize]) -> Self {
        self.lhs_batch = lhs.to_vec();
        self.rhs_batch = rhs.to_vec();
        self
    }

    /// Free (non-batch, non-contracting) dims of an operand of the given rank.
    pub fn lhs_free(&self, rank: usize) -> Vec<usize> {
        (0..rank).filter(|d| !self.lhs_batch.contains(d) && !self.lhs_contract.contains(d)).collect()
    }

    pub fn rhs_free(&self, rank: usize) -> Vec<usize> {
        (0..rank).filter(|d| !self.rhs_batch.contains(d) && !self.rhs_contract.contains(d)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    /// Splat constant filling the result type.
    Constant {
        value: f32,
    },
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Tanh,
    Rsqrt,
    Maximum,
    Dot(DotDims),
    ReduceSum {
        dims: Vec<usize>,
    },
    ReduceMax {
        dims: Vec<usize>,
    },
    Transpose {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    BroadcastInDim {
        shape: Vec<usize>,
        dims: Vec<usize>,
    },
    Slice {
        start: Vec<usize>,
        limit: Vec<usize>,
    },
    Concatenate {
        dim: usize,
    },
}

/// All op mnemonics, in a fixed order used for one-hot featurisation.
pub const OP_NAMES: [&str; 18] = [
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "tanh",
    "rsqrt",
    "maximum",
    "dot",
    "reduce_sum",
    "reduce_max",
    "transpose",
    "reshape",
    "broadcast_in_dim",
    "slice",
    "concatenate",
];

impl OpKind {
    pub fn name(&self) -> &'static str {
        OP_NAMES[self.ordinal()]
    }

    pub fn ordinal(&self) -> usize {
        match self {
            OpKind::Constant { .. } => 0,
            OpKind::Add => 1,
            OpKind::Sub => 2,
            OpKind::Mul => 3,
            OpKind::Div => 4,
            OpKind::Neg => 5,
            OpKind::Exp => 6,
            OpKind::Tanh => 7,
            OpKind::Rsqrt => 8,
            OpKind::Maximum => 9,
            OpKind::Dot(_) => 10,
            OpKind::ReduceSum { .. } => 11,
            OpKind::ReduceMax { .. } => 12,
            OpKind::Transpose { .. } => 13,
            OpKind::Reshape { .. } => 14,
            OpKind::BroadcastInDim { .. } => 15,
            OpKind::Slice { .. } => 16,
            OpKind::Concatenate { .. } => 17,
        }
    }

    /// Number of operands the kind takes; `None` for variadic.
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Constant { .. } => Some(0),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Maximum => Some(2),
            OpKind::Dot(_) => Some(2),
            OpKind::Concatenate { .. } => None,
            _ => Some(1),
        }
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(
            self,
            OpKind::Add
                | OpKind::Sub
                | OpKind::Mul
                | OpKind::Div
                | OpKind::Neg
                | OpKind::Exp
                | OpKind::Tanh
                | OpKind::Rsqrt
                | OpKind::Maximum
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Operation {
    pub id: ValueId,
    pub kind: OpKind,
    pub operands: Vec<ValueId>,
    pub ty: TensorType,
    pub scope: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopKind {
    /// Per-index results are concatenated along `dim`.
    Tile { dim: usize },
    /// Per-index results are summed in ascending index order.
    Sum,
}

/// A tiling loop over one mesh axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopOp {
    pub id: ValueId,
    pub kind: LoopKind,
    pub axis: String,
    pub index_var: ValueId,
    pub body: Vec<Stmt>,
    pub yield_value: ValueId,
    /// Global result type.
    pub ty: TensorType,
}

/// Pass-through region marking `value` as replicated over `axes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicRegion {
    pub id: ValueId,
    pub axes: Vec<String>,
    pub value: ValueId,
}

/// Chunk `index` of `operand` along `dim`, where the chunk count is the size
/// of the axis bound to the loop owning `index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceAxisOp {
    pub id: ValueId,
    pub operand: ValueId,
    pub dim: usize,
    pub index: ValueId,
    pub ty: TensorType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stmt {
    Op(Operation),
    Loop(LoopOp),
    Atomic(AtomicRegion),
    SliceAxis(SliceAxisOp),
}

impl Stmt {
    pub fn id(&self) -> &str {
        match self {
            Stmt::Op(op) => &op.id,
            Stmt::Loop(l) => &l.id,
            Stmt::Atomic(a) => &a.id,
            Stmt::SliceAxis(s) => &s.id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arg {
    pub id: ValueId,
    pub ty: TensorType,
    pub scope: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub mesh: Mesh,
    pub args: Vec<Arg>,
    pub body: Vec<Stmt>,
    pub result: ValueId,
}

impl Program {
    /// True when the body holds only base ops.
    pub fn is_base(&self) -> bool {
        self.body.iter().all(|s| matches!(s, Stmt::Op(_)))
    }

    /// Base ops of a program without tiling constructs.
    pub fn base_ops(&self) -> impl Iterator<Item = &Operation> {
        self.body.iter().filter_map(|s| match s {
            Stmt::Op(op) => Some(op),
            _ => None,
        })
    }

    pub fn arg(&self, id: &str) -> Option<&Arg> {
        self.args.iter().find(|a| a.id == id)
    }

    /// Global type of a top-level value.
    pub fn value_type(&self, id: &str) -> Option<TensorType> {
        if let Some(a) = self.arg(id) {
            return Some(a.ty.clone());
        }
        self.body.iter().find_map(|s| match s {
            Stmt::Op(op) if op.id == id => Some(op.ty.clone()),
            Stmt::Loop(l) if l.id == id => Some(l.ty.clone()),
            Stmt::Atomic(a) if a.id == id => self.value_type(&a.value),
            Stmt::SliceAxis(s) if s.id == id => Some(s.ty.clone()),
            _ => None,
        })
    }

    pub fn result_type(&self) -> Option<TensorType> {
        self.value_type(&self.result)
    }

    pub fn num_ops(&self) -> usize {
        fn count(body: &[Stmt]) -> usize {
            body.iter()
                .map(|s| match s {
                    Stmt::Op(_) => 1,
                    Stmt::Loop(l) => count(&l.body),
                    _ => 0,
                })
                .sum()
        }
        count(&self.body)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IrError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("op %{op}: expected {expected} operands, got {actual}")]
    Arity { op: String, expected: usize, actual: usize },
    #[error("op %{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch { op: String, expected: String, actual: String },
    #[error("op %{op}: {msg}")]
    InvalidOp { op: String, msg: String },
    #[error("use of undefined value %{0}")]
    UnknownValue(String),
    #[error("value %{0} defined more than once")]
    Redefinition(String),
    #[error("invalid type: {0}")]
    Type(String),
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("loop %{inner} over axis \"{axis}\" nested inside loop %{outer} over the same axis")]
    NestedAxis { outer: String, inner: String, axis: String },
    #[error("axis \"{0}\" is not declared in the mesh")]
    UndeclaredAxis(String),
}
