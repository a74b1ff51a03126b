//! Deterministic builders for test programs.

mod mlp;
mod random;
mod transformer;

use std::collections::{HashMap, HashSet};

pub use mlp::{build_mlp, MlpConfig};
pub use random::random_program;
pub use transformer::{build_transformer, TransformerConfig};

use crate::ir::{infer_base_type, parse_program, Arg, OpKind, Operation, Program, Stmt, TensorType, ValueId};
use crate::mesh::Mesh;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelgenError {
    #[error("invalid config: {0}")]
    Config(String),
}

/// The two-layer golden program: `dot(x, w) + b` on a one-axis mesh.
pub const LINEAR_PIR: &str = r#"mesh { "shard" = 2 }
func @linear(%x: f32[8,16], %w: f32[16,64], %b: f32[8,64]) -> f32[8,64] {
  %y = dot(%x, %w) {contract=[[1],[0]], batch=[[],[]]} : f32[8,64]
  %z = add(%y, %b) : f32[8,64]
  return %z
}
"#;

pub fn linear() -> Program {
    parse_program(LINEAR_PIR).expect("golden program parses")
}

/// Incremental program construction with shape inference.
pub(crate) struct Builder {
    name: String,
    mesh: Mesh,
    args: Vec<Arg>,
    body: Vec<Stmt>,
    types: HashMap<ValueId, TensorType>,
    used: HashSet<ValueId>,
}

impl Builder {
    pub fn new(name: &str, mesh: Mesh) -> Self {
        Builder {
            name: name.to_string(),
            mesh,
            args: Vec::new(),
            body: Vec::new(),
            types: HashMap::new(),
            used: HashSet::new(),
        }
    }

    fn fresh(&mut self, hint: &str) -> ValueId {
        let mut id = hint.to_string();
        let mut k = 1;
        while !self.used.insert(id.clone()) {
            id = format!("{}_{}", hint, k);
            k += 1;
        }
        id
    }

    pub fn shape(&self, v: &str) -> Vec<usize> {
        self.types[v].shape.clone()
    }

    pub fn arg(&mut self, hint: &str, shape: &[usize], scope: Option<&str>) -> ValueId {
        let id = self.fresh(hint);
        let ty = TensorType::f32(shape.to_vec());
        self.types.insert(id.clone(), ty.clone());
        self.args.push(Arg { id: id.clone(), ty, scope: scope.map(str::to_string) });
        id
    }

    pub fn op(&mut self, hint: &str, kind: OpKind, operands: &[&str], scope: Option<&str>) -> ValueId {
        self.try_op(hint, kind, operands, scope, None).expect("builder produces well-typed ops")
    }

    pub fn constant(&mut self, hint: &str, value: f32, shape: &[usize], scope: Option<&str>) -> ValueId {
        let ty = TensorType::f32(shape.to_vec());
        self.try_op(hint, OpKind::Constant { value }, &[], scope, Some(ty)).unwrap()
    }

    pub fn try_op(
        &mut self,
        hint: &str,
        kind: OpKind,
        operands: &[&str],
        scope: Option<&str>,
        declared: Option<TensorType>,
    ) -> Result<ValueId, String> {
        let tys: Vec<&TensorType> = operands.iter().map(|o| &self.types[*o]).collect();
        let declared = declared.unwrap_or_else(|| TensorType::f32(vec![]));
        let ty = infer_base_type(&kind, &tys, &declared)?;
        let id = self.fresh(hint);
        self.types.insert(id.clone(), ty.clone());
        self.body.push(Stmt::Op(Operation {
            id: id.clone(),
            kind,
            operands: operands.iter().map(|o| o.to_string()).collect(),
            ty,
            scope: scope.map(str::to_string),
        }));
        Ok(id)
    }

    pub fn num_ops(&self) -> usize {
        self.body.len()
    }

    pub fn finish(self, result: &str) -> Program {
        Program { name: self.name, mesh: self.mesh, args: self.args, body: self.body, result: result.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{print_program, validate_and_infer};

    #[test]
    fn linear_parses() {
        let p = linear();
        assert_eq!(p.num_ops(), 2);
        assert_eq!(parse_program(&print_program(&p)).unwrap(), p);
        validate_and_infer(&p).unwrap();
    }
}
