use std::collections::BTreeMap;

use super::{
    validate_and_infer, Arg, AtomicRegion, DotDims, IrError, LoopKind, LoopOp, OpKind, Operation, Program, SliceAxisOp,
    Stmt, TensorType,
};
use crate::mesh::Mesh;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Value(String),
    Func(String),
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Punct(&'static str),
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<Token>, IrError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    let err = |line, col, msg: String| IrError::Syntax { line, col, msg };
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let advance = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            advance(1, &mut i, &mut col);
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let tok = if c == '%' || c == '@' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && is_name_char(chars[j]) {
                j += 1;
            }
            if j == start {
                return Err(err(tl, tc, format!("expected a name after '{}'", c)));
            }
            let name: String = chars[start..j].iter().collect();
            advance(j - i, &mut i, &mut col);
            if c == '%' {
                Tok::Value(name)
            } else {
                Tok::Func(name)
            }
        } else if c == '"' {
            let mut s = String::new();
            let mut j = i + 1;
            loop {
                match chars.get(j) {
                    None | Some('\n') => return Err(err(tl, tc, "unterminated string".into())),
                    Some('"') => break,
                    Some('\\') => {
                        if let Some(&n) = chars.get(j + 1) {
                            s.push(n);
                        }
                        j += 2;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        j += 1;
                    }
                }
            }
            advance(j + 1 - i, &mut i, &mut col);
            Tok::Str(s)
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())) {
            let mut j = i + 1;
            let mut is_float = false;
            while j < chars.len() {
                let ch = chars[j];
                if ch.is_ascii_digit() {
                    j += 1;
                } else if ch == '.' || ch == 'e' || ch == 'E' {
                    is_float = true;
                    j += 1;
                } else if (ch == '-' || ch == '+') && matches!(chars[j - 1], 'e' | 'E') {
                    j += 1;
                } else {
                    break;
                }
            }
            let s: String = chars[i..j].iter().collect();
            advance(j - i, &mut i, &mut col);
            if is_float {
                Tok::Float(s.parse().map_err(|_| err(tl, tc, format!("bad number '{}'", s)))?)
            } else {
                Tok::Int(s.parse().map_err(|_| err(tl, tc, format!("bad integer '{}'", s)))?)
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let s: String = chars[i..j].iter().collect();
            advance(j - i, &mut i, &mut col);
            Tok::Ident(s)
        } else if c == '-' && chars.get(i + 1) == Some(&'>') {
            advance(2, &mut i, &mut col);
            Tok::Punct("->")
        } else {
            let p = match c {
                '(' => "(",
                ')' => ")",
                '{' => "{",
                '}' => "}",
                '[' => "[",
                ']' => "]",
                ',' => ",",
                ':' => ":",
                '=' => "=",
                _ => return Err(err(tl, tc, format!("unexpected character '{}'", c))),
            };
            advance(1, &mut i, &mut col);
            Tok::Punct(p)
        };
        out.push(Token { tok, line: tl, col: tc });
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

#[derive(Clone, Debug)]
enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<AttrValue>),
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, IrError> {
        let t = &self.toks[self.pos];
        Err(IrError::Syntax { line: t.line, col: t.col, msg: msg.into() })
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_ident(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Ident(q) if q == s)
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), IrError> {
        if self.is_punct(p) {
            self.next();
            Ok(())
        } else {
            self.error(format!("expected '{}', found {:?}", p, self.peek()))
        }
    }

    fn expect_ident(&mut self, s: &str) -> Result<(), IrError> {
        if self.is_ident(s) {
            self.next();
            Ok(())
        } else {
            self.error(format!("expected '{}', found {:?}", s, self.peek()))
        }
    }

    fn value(&mut self) -> Result<String, IrError> {
        match self.peek().clone() {
            Tok::Value(v) => {
                self.next();
                Ok(v)
            }
            t => self.error(format!("expected a %value, found {:?}", t)),
        }
    }

    fn string(&mut self) -> Result<String, IrError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.next();
                Ok(s)
            }
            t => self.error(format!("expected a string, found {:?}", t)),
        }
    }

    fn uint(&mut self) -> Result<usize, IrError> {
        match self.peek().clone() {
            Tok::Int(n) if n >= 0 => {
                self.next();
                Ok(n as usize)
            }
            t => self.error(format!("expected a non-negative integer, found {:?}", t)),
        }
    }

    fn ty(&mut self) -> Result<TensorType, IrError> {
        self.expect_ident("f32")?;
        self.expect_punct("[")?;
        let mut shape = Vec::new();
        if !self.is_punct("]") {
            loop {
                shape.push(self.uint()?);
                if self.is_punct(",") {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect_punct("]")?;
        Ok(TensorType::f32(shape))
    }

    fn attr_value(&mut self) -> Result<AttrValue, IrError> {
        match self.next() {
            Tok::Int(n) => Ok(AttrValue::Int(n)),
            Tok::Float(f) => Ok(AttrValue::Float(f)),
            Tok::Str(s) => Ok(AttrValue::Str(s)),
            Tok::Punct("[") => {
                let mut items = Vec::new();
                if !self.is_punct("]") {
                    loop {
                        items.push(self.attr_value()?);
                        if self.is_punct(",") {
                            self.next();
                        } else {
                            break;
                        }
                    }
                }
                self.expect_punct("]")?;
                Ok(AttrValue::List(items))
            }
            t => {
                self.pos -= 1;
                self.error(format!("expected an attribute value, found {:?}", t))
            }
        }
    }

    fn attrs(&mut self) -> Result<BTreeMap<String, (AttrValue, usize)>, IrError> {
        let mut out = BTreeMap::new();
        if !self.is_punct("{") {
            return Ok(out);
        }
        self.next();
        if !self.is_punct("}") {
            loop {
                let at = self.pos;
                let key = match self.next() {
                    Tok::Ident(k) => k,
                    t => {
                        self.pos -= 1;
                        return self.error(format!("expected an attribute name, found {:?}", t));
                    }
                };
                self.expect_punct("=")?;
                let v = self.attr_value()?;
                out.insert(key, (v, at));
                if self.is_punct(",") {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect_punct("}")?;
        Ok(out)
    }

    fn mesh(&mut self) -> Result<Mesh, IrError> {
        if !self.is_ident("mesh") {
            return Ok(Mesh::empty());
        }
        self.next();
        self.expect_punct("{")?;
        let mut axes = Vec::new();
        if !self.is_punct("}") {
            loop {
                let name = self.string()?;
                self.expect_punct("=")?;
                axes.push((name, self.uint()?));
                if self.is_punct(",") {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect_punct("}")?;
        Mesh::new(axes).map_err(|e| IrError::Mesh(e.to_string()))
    }

    /// Statements up to (not including) a `yield` or `return` keyword.
    fn block(&mut self) -> Result<Vec<Stmt>, IrError> {
        let mut body = Vec::new();
        while !self.is_ident("yield") && !self.is_ident("return") {
            body.push(self.stmt()?);
        }
        Ok(body)
    }

    fn stmt(&mut self) -> Result<Stmt, IrError> {
        let id = self.value()?;
        self.expect_punct("=")?;
        let head_pos = self.pos;
        let name = match self.next() {
            Tok::Ident(n) => n,
            t => {
                self.pos = head_pos;
                return self.error(format!("expected an operation, found {:?}", t));
            }
        };
        match name.as_str() {
            "tile" | "sum" => {
                let axis = self.string()?;
                let kind = if name == "tile" {
                    self.expect_ident("dim")?;
                    LoopKind::Tile { dim: self.uint()? }
                } else {
                    LoopKind::Sum
                };
                self.expect_punct("(")?;
                let index_var = self.value()?;
                self.expect_punct(")")?;
                self.expect_punct("{")?;
                let body = self.block()?;
                self.expect_ident("yield")?;
                let yield_value = self.value()?;
                self.expect_punct("}")?;
                self.expect_punct(":")?;
                let ty = self.ty()?;
                Ok(Stmt::Loop(LoopOp { id, kind, axis, index_var, body, yield_value, ty }))
            }
            "atomic" => {
                let mut axes = Vec::new();
                while let Tok::Str(_) = self.peek() {
                    axes.push(self.string()?);
                    if self.is_punct(",") {
                        self.next();
                    }
                }
                self.expect_punct("{")?;
                self.expect_ident("yield")?;
                let value = self.value()?;
                self.expect_punct("}")?;
                Ok(Stmt::Atomic(AtomicRegion { id, axes, value }))
            }
            "slice_axis" => {
                self.expect_punct("(")?;
                let operand = self.value()?;
                self.expect_punct(",")?;
                self.expect_ident("dim")?;
                self.expect_punct("=")?;
                let dim = self.uint()?;
                self.expect_punct(",")?;
                let index = self.value()?;
                self.expect_punct(")")?;
                self.expect_punct(":")?;
                let ty = self.ty()?;
                Ok(Stmt::SliceAxis(SliceAxisOp { id, operand, dim, index, ty }))
            }
            _ => self.base_op(id, name, head_pos).map(Stmt::Op),
        }
    }

    fn base_op(&mut self, id: String, name: String, head_pos: usize) -> Result<Operation, IrError> {
        self.expect_punct("(")?;
        let mut operands = Vec::new();
        if !self.is_punct(")") {
            loop {
                operands.push(self.value()?);
                if self.is_punct(",") {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        let attr_pos = self.pos;
        let mut attrs = self.attrs()?;
        self.expect_punct(":")?;
        let ty = self.ty()?;
        let scope = match attrs.remove("scope") {
            Some((AttrValue::Str(s), _)) => Some(s),
            Some((_, at)) => {
                self.pos = at;
                return self.error("scope must be a string");
            }
            None => None,
        };
        let here = self.pos;
        self.pos = attr_pos;
        let kind = self.kind(&name, &mut attrs, &ty, head_pos)?;
        if let Some((key, (_, at))) = attrs.into_iter().next() {
            self.pos = at;
            return self.error(format!("unknown attribute '{}' for {}", key, name));
        }
        self.pos = here;
        if let Some(n) = kind.arity() {
            if operands.len() != n {
                return Err(IrError::Arity { op: id, expected: n, actual: operands.len() });
            }
        }
        Ok(Operation { id, kind, operands, ty, scope })
    }

    fn kind(
        &mut self,
        name: &str,
        attrs: &mut BTreeMap<String, (AttrValue, usize)>,
        ty: &TensorType,
        head_pos: usize,
    ) -> Result<OpKind, IrError> {
        fn take_attr(
            p: &Parser,
            attrs: &mut BTreeMap<String, (AttrValue, usize)>,
            name: &str,
            key: &str,
        ) -> Result<AttrValue, IrError> {
            match attrs.remove(key) {
                Some((v, _)) => Ok(v),
                None => p.error(format!("{} requires attribute '{}'", name, key)),
            }
        }
        macro_rules! take {
            ($key:expr) => {
                take_attr(self, attrs, name, $key)?
            };
        }
        fn ints(p: &Parser, v: &AttrValue) -> Result<Vec<usize>, IrError> {
            match v {
                AttrValue::List(items) => items
                    .iter()
                    .map(|i| match i {
                        AttrValue::Int(n) if *n >= 0 => Ok(*n as usize),
                        _ => p.error("expected a list of non-negative integers"),
                    })
                    .collect(),
                _ => p.error("expected a list"),
            }
        }
        fn pair(p: &Parser, v: &AttrValue) -> Result<(Vec<usize>, Vec<usize>), IrError> {
            match v {
                AttrValue::List(items) if items.len() == 2 => Ok((ints(p, &items[0])?, ints(p, &items[1])?)),
                _ => p.error("expected a pair of integer lists"),
            }
        }
        let kind = match name {
            "constant" => {
                let value = match take!("value") {
                    AttrValue::Float(f) => f as f32,
                    AttrValue::Int(n) => n as f32,
                    _ => return self.error("constant value must be a number"),
                };
                OpKind::Constant { value }
            }
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "div" => OpKind::Div,
            "neg" => OpKind::Neg,
            "exp" => OpKind::Exp,
            "tanh" => OpKind::Tanh,
            "rsqrt" => OpKind::Rsqrt,
            "maximum" => OpKind::Maximum,
            "dot" => {
                let (lhs_contract, rhs_contract) = pair(self, &take!("contract"))?;
                let (lhs_batch, rhs_batch) = match attrs.remove("batch") {
                    Some((v, _)) => pair(self, &v)?,
                    None => (vec![], vec![]),
                };
                OpKind::Dot(DotDims { lhs_batch, rhs_batch, lhs_contract, rhs_contract })
            }
            "reduce_sum" => OpKind::ReduceSum { dims: ints(self, &take!("dims"))? },
            "reduce_max" => OpKind::ReduceMax { dims: ints(self, &take!("dims"))? },
            "transpose" => OpKind::Transpose { perm: ints(self, &take!("perm"))? },
            "reshape" => match attrs.remove("shape") {
                Some((v, _)) => OpKind::Reshape { shape: ints(self, &v)? },
                None => OpKind::Reshape { shape: ty.shape.clone() },
            },
            "broadcast_in_dim" => {
                let dims = ints(self, &take!("dims"))?;
                let shape = match attrs.remove("shape") {
                    Some((v, _)) => ints(self, &v)?,
                    None => ty.shape.clone(),
                };
                OpKind::BroadcastInDim { shape, dims }
            }
            "slice" => OpKind::Slice { start: ints(self, &take!("start"))?, limit: ints(self, &take!("limit"))? },
            "concatenate" => match take!("dim") {
                AttrValue::Int(n) if n >= 0 => OpKind::Concatenate { dim: n as usize },
                _ => return self.error("concatenate dim must be a non-negative integer"),
            },
            other => {
                self.pos = head_pos;
                return self.error(format!("unknown operation '{}'", other));
            }
        };
        Ok(kind)
    }

    fn program(&mut self) -> Result<Program, IrError> {
        let mesh = self.mesh()?;
        self.expect_ident("func")?;
        let name = match self.next() {
            Tok::Func(n) => n,
            t => {
                self.pos -= 1;
                return self.error(format!("expected @name, found {:?}", t));
            }
        };
        self.expect_punct("(")?;
        let mut args = Vec::new();
        if !self.is_punct(")") {
            loop {
                let id = self.value()?;
                self.expect_punct(":")?;
                let ty = self.ty()?;
                let mut attrs = self.attrs()?;
                let scope = match attrs.remove("scope") {
                    Some((AttrValue::Str(s), _)) => Some(s),
                    Some(_) => return self.error("scope must be a string"),
                    None => None,
                };
                if let Some((key, _)) = attrs.into_iter().next() {
                    return self.error(format!("unknown argument attribute '{}'", key));
                }
                args.push(Arg { id, ty, scope });
                if self.is_punct(",") {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        self.expect_punct("->")?;
        let ret_pos = self.pos;
        let ret = self.ty()?;
        self.expect_punct("{")?;
        let body = self.block()?;
        self.expect_ident("return")?;
        let result = self.value()?;
        self.expect_punct("}")?;
        if *self.peek() != Tok::Eof {
            return self.error("trailing input after function");
        }
        let p = Program { name, mesh, args, body, result };
        let p = validate_and_infer(&p)?;
        if p.result_type().as_ref() != Some(&ret) {
            self.pos = ret_pos;
            return self.error(format!("declared return type {} does not match %{}", ret, p.result));
        }
        Ok(p)
    }
}

/// Parses and validates a program in the textual IR.
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0 };
    p.program()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::print_program;

    const LINEAR: &str = r#"
mesh { "batch" = 2, "model" = 4 }
func @linear(%x: f32[8,16], %w: f32[16,64] {scope="mlp/w"}, %b: f32[8,64]) -> f32[8,64] {
  %0 = dot(%x, %w) {contract=[[1],[0]], batch=[[],[]]} : f32[8,64]
  %1 = add(%0, %b) : f32[8,64]
  return %1
}
"#;

    #[test]
    fn parses_linear() {
        let p = parse_program(LINEAR).unwrap();
        assert_eq!(p.args.len(), 3);
        assert_eq!(p.num_ops(), 2);
        assert_eq!(p.result_type().unwrap().shape, vec![8, 64]);
        assert_eq!(p.args[1].scope.as_deref(), Some("mlp/w"));
        assert_eq!(p.mesh.device_count(), 8);
    }

    #[test]
    fn round_trips() {
        let p = parse_program(LINEAR).unwrap();
        let text = print_program(&p);
        assert_eq!(parse_program(&text).unwrap(), p);
        assert_eq!(print_program(&parse_program(&text).unwrap()), text);
    }

    #[test]
    fn identity_one_line() {
        let p = parse_program("func @id(%x: f32[4]) -> f32[4] { return %x }").unwrap();
        assert_eq!(p.num_ops(), 0);
        assert_eq!(print_program(&p), "func @id(%x: f32[4]) -> f32[4] { return %x }\n");
    }

    #[test]
    fn arity_error() {
        let text =
            "func @f(%x: f32[4,4]) -> f32[4,4] {\n  %0 = dot(%x) {contract=[[1],[0]]} : f32[4,4]\n  return %0\n}";
        let err = parse_program(text).unwrap_err();
        assert!(matches!(err, IrError::Arity { expected: 2, actual: 1, .. }), "{err}");
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_program("func @f(%x: f32[4]) -> f32[4] {\n  %0 = neg(%x) : f32[4\n  return %0\n}").unwrap_err();
        match err {
            IrError::Syntax { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn validation_errors_name_the_op() {
        let text =
            "func @f(%x: f32[8,64]) -> f32[8,65] {\n  %r = reshape(%x) {shape=[8,65]} : f32[8,65]\n  return %r\n}";
        let err = parse_program(text).unwrap_err();
        assert!(err.to_string().contains("%r"), "{err}");
        let text = "func @f(%x: f32[8,64]) -> f32[8] {\n  %r = reduce_sum(%x) {dims=[1]} : f32[64]\n  return %r\n}";
        assert!(matches!(parse_program(text).unwrap_err(), IrError::ShapeMismatch { .. }));
        let text = "func @f(%x: f32[8]) -> f32[8] {\n  %r = neg(%y) : f32[8]\n  return %r\n}";
        assert!(matches!(parse_program(text).unwrap_err(), IrError::UnknownValue(_)));
    }

    #[test]
    fn parses_tiled_constructs() {
        let text = r#"
mesh { "shard" = 2 }
func @linear(%x: f32[8,16], %w: f32[16,64], %b: f32[8,64]) -> f32[8,64] {
  %w.t = tile "shard" dim 1 (%i) {
    %w.s = slice_axis(%w, dim=1, %i) : f32[16,32]
    yield %w.s
  } : f32[16,64]
  %x.a = atomic { yield %x }
  %0 = dot(%x.a, %w.t) {contract=[[1],[0]], batch=[[],[]]} : f32[8,64]
  %1 = add(%0, %b) : f32[8,64]
  return %1
}
"#;
        let p = parse_program(text).unwrap();
        assert!(!p.is_base());
        assert_eq!(parse_program(&print_program(&p)).unwrap(), p);
    }
}
