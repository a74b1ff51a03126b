use std::fmt::Write;

use super::{LoopKind, OpKind, Operation, Program, Stmt, TensorType};
use crate::mesh::Mesh;

pub fn print_type(t: &TensorType) -> String {
    let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
    format!("f32[{}]", dims.join(","))
}

fn list(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(|d| d.to_string()).collect();
    format!("[{}]", items.join(","))
}

pub(crate) fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub(crate) fn op_attrs(kind: &OpKind) -> Vec<String> {
    match kind {
        OpKind::Constant { value } => vec![format!("value={:?}", value)],
        OpKind::Dot(d) => vec![
            format!("contract=[{},{}]", list(&d.lhs_contract), list(&d.rhs_contract)),
            format!("batch=[{},{}]", list(&d.lhs_batch), list(&d.rhs_batch)),
        ],
        OpKind::ReduceSum { dims } | OpKind::ReduceMax { dims } => vec![format!("dims={}", list(dims))],
        OpKind::Transpose { perm } => vec![format!("perm={}", list(perm))],
        OpKind::Reshape { shape } => vec![format!("shape={}", list(shape))],
        OpKind::BroadcastInDim { shape, dims } => {
            vec![format!("shape={}", list(shape)), format!("dims={}", list(dims))]
        }
        OpKind::Slice { start, limit } => vec![format!("start={}", list(start)), format!("limit={}", list(limit))],
        OpKind::Concatenate { dim } => vec![format!("dim={}", dim)],
        _ => vec![],
    }
}

/// `name(%a, %b) {attrs}` without result or type; shared with the SPMD printer.
pub(crate) fn op_call(kind: &OpKind, operands: &[String], scope: Option<&str>) -> String {
    let ops: Vec<String> = operands.iter().map(|o| format!("%{}", o)).collect();
    let mut attrs = op_attrs(kind);
    if let Some(s) = scope {
        attrs.push(format!("scope={}", quote(s)));
    }
    let mut out = format!("{}({})", kind.name(), ops.join(", "));
    if !attrs.is_empty() {
        write!(out, " {{{}}}", attrs.join(", ")).unwrap();
    }
    out
}

fn print_op(op: &Operation) -> String {
    format!("%{} = {} : {}", op.id, op_call(&op.kind, &op.operands, op.scope.as_deref()), print_type(&op.ty))
}

pub(crate) fn print_mesh(mesh: &Mesh) -> String {
    let axes: Vec<String> = mesh.axes().iter().map(|(n, s)| format!("{} = {}", quote(n), s)).collect();
    format!("mesh {{ {} }}", axes.join(", "))
}

fn print_block(body: &[Stmt], mesh: &Mesh, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    for stmt in body {
        match stmt {
            Stmt::Op(op) => writeln!(out, "{}{}", pad, print_op(op)).unwrap(),
            Stmt::SliceAxis(s) => writeln!(
                out,
                "{}%{} = slice_axis(%{}, dim={}, %{}) : {}",
                pad,
                s.id,
                s.operand,
                s.dim,
                s.index,
                print_type(&s.ty)
            )
            .unwrap(),
            Stmt::Atomic(a) => {
                let all = a.axes.len() == mesh.axes().len() && mesh.axis_names().all(|n| a.axes.iter().any(|x| x == n));
                let axes = if all {
                    String::new()
                } else {
                    let q: Vec<String> = a.axes.iter().map(|x| quote(x)).collect();
                    format!("{} ", q.join(", "))
                };
                writeln!(out, "{}%{} = atomic {}{{ yield %{} }}", pad, a.id, axes, a.value).unwrap()
            }
            Stmt::Loop(l) => {
                let head = match l.kind {
                    LoopKind::Tile { dim } => format!("tile {} dim {}", quote(&l.axis), dim),
                    LoopKind::Sum => format!("sum {}", quote(&l.axis)),
                };
                writeln!(out, "{}%{} = {} (%{}) {{", pad, l.id, head, l.index_var).unwrap();
                print_block(&l.body, mesh, indent + 1, out);
                writeln!(out, "{}  yield %{}", pad, l.yield_value).unwrap();
                writeln!(out, "{}}} : {}", pad, print_type(&l.ty)).unwrap();
            }
        }
    }
}

/// Canonical text of a program; `parse_program` inverts it.
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    if !p.mesh.is_empty() {
        writeln!(out, "{}", print_mesh(&p.mesh)).unwrap();
    }
    let args: Vec<String> = p
        .args
        .iter()
        .map(|a| {
            let mut s = format!("%{}: {}", a.id, print_type(&a.ty));
            if let Some(scope) = &a.scope {
                write!(s, " {{scope={}}}", quote(scope)).unwrap();
            }
            s
        })
        .collect();
    let ret = p.result_type().map(|t| print_type(&t)).unwrap_or_else(|| "?".into());
    write!(out, "func @{}({}) -> {} {{", p.name, args.join(", "), ret).unwrap();
    if p.body.is_empty() {
        writeln!(out, " return %{} }}", p.result).unwrap();
    } else {
        out.push('\n');
        print_block(&p.body, &p.mesh, 1, &mut out);
        writeln!(out, "  return %{}", p.result).unwrap();
        out.push_str("}\n");
    }
    out
}
