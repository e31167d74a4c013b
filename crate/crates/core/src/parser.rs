//! Parser for the `.slc` kernel dialect.
//!
//! The dialect is a small C subset: one or more `void` functions per file
//! (the last one is the entry kernel, earlier ones are helpers), scalar types
//! `u1/u8/u32/u64/u128`, array parameters `u64 a[4]` (`const` marks inputs;
//! otherwise direction is inferred from use), scalar parameters with a
//! declared maximum `u32 n <= 8`, local scalar declarations
//! `u64 x0 = expr;`, local scratch arrays `u64 t[8];`, element stores
//! `o[0] = expr;`, counted loops `L0: for (i64 v = 0; v < 8; v += 1) { ... }`,
//! and two-result builtins in tuple form `(hi, lo) = mulwide_u64(a, b);`.
//! `#pragma` lines and comments are ignored.
//!
//! Literal widths are resolved from context (assignment target, sibling
//! operand, cast, or builtin suffix); the parsed program is validated before
//! it is returned.

use crate::ir::*;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseError {
    /// Syntax or resolution failure at a source position.
    At { line: usize, col: usize, msg: String },
    /// The program parsed but violates a well-formedness rule.
    Invalid(ValidateError),
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::At { line, col, msg } => write!(f, "{line}:{col}: {msg}"),
            ParseError::Invalid(e) => write!(f, "invalid program: {e}"),
        }
    }
}

impl std::error::Error for ParseError {}

impl From<ValidateError> for ParseError {
    fn from(e: ValidateError) -> Self {
        ParseError::Invalid(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Id(String),
    Int(u128),
    Sym(&'static str),
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    let (mut line, mut col) = (1usize, 1usize);
    let bump = |c: u8, line: &mut usize, col: &mut usize| {
        if c == b'\n' {
            *line += 1;
            *col = 1;
        } else {
            *col += 1;
        }
    };
    while i < bytes.len() {
        let c = bytes[i];
        let (tline, tcol) = (line, col);
        if c.is_ascii_whitespace() {
            bump(c, &mut line, &mut col);
            i += 1;
            continue;
        }
        if c == b'#' {
            // Directive lines (`#pragma ...`) carry no IR content.
            while i < bytes.len() && bytes[i] != b'\n' {
                bump(bytes[i], &mut line, &mut col);
                i += 1;
            }
            continue;
        }
        if c == b'/' && i + 1 < bytes.len() && bytes[i + 1] == b'/' {
            while i < bytes.len() && bytes[i] != b'\n' {
                bump(bytes[i], &mut line, &mut col);
                i += 1;
            }
            continue;
        }
        if c == b'/' && i + 1 < bytes.len() && bytes[i + 1] == b'*' {
            i += 2;
            col += 2;
            while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                bump(bytes[i], &mut line, &mut col);
                i += 1;
            }
            if i + 1 >= bytes.len() {
                return Err(ParseError::At {
                    line: tline,
                    col: tcol,
                    msg: "unterminated comment".into(),
                });
            }
            i += 2;
            col += 2;
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
                col += 1;
            }
            out.push(Spanned {
                tok: Tok::Id(src[start..i].to_string()),
                line: tline,
                col: tcol,
            });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            let hex = c == b'0' && i + 1 < bytes.len() && (bytes[i + 1] | 0x20) == b'x';
            if hex {
                i += 2;
                col += 2;
            }
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric()) {
                i += 1;
                col += 1;
            }
            let text = &src[start..i];
            let digits = if hex { &text[2..] } else { text };
            let digits = digits.trim_end_matches(['u', 'U', 'l', 'L']);
            let value = if hex {
                u128::from_str_radix(digits, 16)
            } else {
                digits.parse::<u128>()
            }
            .map_err(|_| ParseError::At {
                line: tline,
                col: tcol,
                msg: format!("bad integer literal `{text}`"),
            })?;
            out.push(Spanned { tok: Tok::Int(value), line: tline, col: tcol });
            continue;
        }
        let two = if i + 1 < bytes.len() { &src[i..i + 2] } else { "" };
        let sym = match two {
            "<<" => Some("<<"),
            ">>" => Some(">>"),
            "<=" => Some("<="),
            "+=" => Some("+="),
            "++" => Some("++"),
            _ => None,
        };
        if let Some(s) = sym {
            out.push(Spanned { tok: Tok::Sym(s), line: tline, col: tcol });
            i += 2;
            col += 2;
            continue;
        }
        let one = match c {
            b'(' => "(",
            b')' => ")",
            b'{' => "{",
            b'}' => "}",
            b'[' => "[",
            b']' => "]",
            b',' => ",",
            b';' => ";",
            b':' => ":",
            b'=' => "=",
            b'+' => "+",
            b'-' => "-",
            b'*' => "*",
            b'~' => "~",
            b'&' => "&",
            b'|' => "|",
            b'^' => "^",
            b'<' => "<",
            b'>' => ">",
            _ => {
                return Err(ParseError::At {
                    line: tline,
                    col: tcol,
                    msg: format!("unexpected character `{}`", c as char),
                })
            }
        };
        out.push(Spanned { tok: Tok::Sym(one), line: tline, col: tcol });
        i += 1;
        col += 1;
    }
    Ok(out)
}

fn scalar_type_name(s: &str) -> Option<ScalarType> {
    match s {
        "u1" => Some(ScalarType::U1),
        "u8" => Some(ScalarType::U8),
        "u32" => Some(ScalarType::U32),
        "u64" => Some(ScalarType::U64),
        "u128" => Some(ScalarType::U128),
        _ => None,
    }
}

/// `base_uW` builtin name split into base and width.
fn builtin_name(s: &str) -> Option<(&str, ScalarType)> {
    let (base, suffix) = s.rsplit_once('_')?;
    let ty = scalar_type_name(suffix)?;
    match base {
        "addcarry" | "subborrow" | "mulwide" | "cmovznz" => Some((base, ty)),
        _ => None,
    }
}

struct FnHeader {
    name: String,
    /// `(name, kind, explicit_in)`; direction resolved after the body parse.
    params: Vec<(String, ParamKind, bool)>,
}

struct ParsedFn {
    header: FnHeader,
    locals: Vec<(String, ScalarType)>,
    local_arrays: Vec<LocalArray>,
    body: Vec<Node>,
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    /// Scalar names in scope (params and locals) with widths.
    scalars: std::collections::BTreeMap<String, ScalarType>,
    arrays: std::collections::BTreeMap<String, ScalarType>,
    counters: Vec<String>,
    /// Helpers parsed so far: name -> resolved parameter directions.
    helpers: std::collections::BTreeMap<String, Vec<Direction>>,
}

impl Parser {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        let (line, col) = self
            .toks
            .get(self.pos.min(self.toks.len().saturating_sub(1)))
            .map(|s| (s.line, s.col))
            .unwrap_or((0, 0));
        Err(ParseError::At { line, col, msg: msg.into() })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn peek_at(&self, off: usize) -> Option<&Tok> {
        self.toks.get(self.pos + off).map(|s| &s.tok)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|s| s.tok.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eat_sym(&mut self, s: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Sym(t)) if *t == s => {
                self.pos += 1;
                Ok(())
            }
            other => self.err(format!("expected `{s}`, found {other:?}")),
        }
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(t)) if *t == s)
    }

    fn eat_ident(&mut self) -> Result<String, ParseError> {
        match self.peek().cloned() {
            Some(Tok::Id(name)) => {
                self.pos += 1;
                Ok(name)
            }
            other => self.err(format!("expected identifier, found {other:?}")),
        }
    }

    fn eat_int(&mut self) -> Result<u128, ParseError> {
        match self.peek().cloned() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(v)
            }
            other => self.err(format!("expected integer, found {other:?}")),
        }
    }

    fn eat_signed_int(&mut self) -> Result<i64, ParseError> {
        let neg = self.at_sym("-");
        if neg {
            self.pos += 1;
        }
        let v = self.eat_int()?;
        let v = i64::try_from(v).map_err(|_| ParseError::At {
            line: 0,
            col: 0,
            msg: "integer out of range".into(),
        })?;
        Ok(if neg { -v } else { v })
    }

    fn eat_type(&mut self) -> Result<ScalarType, ParseError> {
        let name = self.eat_ident()?;
        scalar_type_name(&name).ok_or(ParseError::At {
            line: 0,
            col: 0,
            msg: format!("unknown type `{name}`"),
        })
    }

    fn peek_type(&self) -> Option<ScalarType> {
        match self.peek() {
            Some(Tok::Id(name)) => scalar_type_name(name),
            _ => None,
        }
    }

    // ---- expressions -------------------------------------------------

    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        self.parse_bin(0)
    }

    fn parse_bin(&mut self, level: usize) -> Result<Expr, ParseError> {
        const LEVELS: [&[(&str, BinOp)]; 6] = [
            &[("|", BinOp::Or)],
            &[("^", BinOp::Xor)],
            &[("&", BinOp::And)],
            &[("<<", BinOp::Shl), (">>", BinOp::Shr)],
            &[("+", BinOp::Add), ("-", BinOp::Sub)],
            &[("*", BinOp::Mul)],
        ];
        if level == LEVELS.len() {
            return self.parse_unary();
        }
        let mut lhs = self.parse_bin(level + 1)?;
        loop {
            let mut matched = None;
            for (sym, op) in LEVELS[level] {
                if self.at_sym(sym) {
                    matched = Some(*op);
                    break;
                }
            }
            let Some(op) = matched else { return Ok(lhs) };
            self.pos += 1;
            let rhs = self.parse_bin(level + 1)?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if self.at_sym("~") {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.parse_unary()?)));
        }
        // A parenthesized type name is a cast; smaller target truncates,
        // larger target zero-extends, equal width is a no-op.
        if self.at_sym("(") {
            if let Some(Tok::Id(name)) = self.peek_at(1) {
                if let Some(to) = scalar_type_name(name) {
                    if matches!(self.peek_at(2), Some(Tok::Sym(")"))) {
                        self.pos += 3;
                        let arg = self.parse_unary()?;
                        return Ok(self.build_cast(to, arg));
                    }
                }
            }
        }
        self.parse_primary()
    }

    fn build_cast(&self, to: ScalarType, arg: Expr) -> Expr {
        let from = self.known_width(&arg);
        match from {
            Some(f) if f == to => arg,
            Some(f) if to.bits() < f.bits() => Expr::Trunc { to, arg: Box::new(arg) },
            Some(_) => Expr::Zext { to, arg: Box::new(arg) },
            // Width of the operand unresolved (pure literal); widen later in
            // resolution. Zext of a literal is normalized to a plain literal.
            None => Expr::Zext { to, arg: Box::new(arg) },
        }
    }

    fn parse_primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().cloned() {
            Some(Tok::Int(value)) => {
                self.pos += 1;
                // Width resolved later from context.
                Ok(Expr::Lit { value, ty: ScalarType::U64 })
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.parse_expr()?;
                self.eat_sym(")")?;
                Ok(e)
            }
            Some(Tok::Id(name)) => {
                self.pos += 1;
                if let Some((base, ty)) = builtin_name(&name) {
                    if base != "cmovznz" {
                        return self.err(format!(
                            "two-result builtin `{name}` must be used as `(a, b) = {name}(...)`"
                        ));
                    }
                    self.eat_sym("(")?;
                    let flag = self.parse_expr()?;
                    self.eat_sym(",")?;
                    let if_zero = self.parse_expr()?;
                    self.eat_sym(",")?;
                    let if_nonzero = self.parse_expr()?;
                    self.eat_sym(")")?;
                    return Ok(Expr::Cmov {
                        ty,
                        flag: Box::new(flag),
                        if_zero: Box::new(if_zero),
                        if_nonzero: Box::new(if_nonzero),
                    });
                }
                if self.at_sym("[") {
                    self.pos += 1;
                    let index = self.parse_expr()?;
                    self.eat_sym("]")?;
                    if !self.arrays.contains_key(&name) {
                        return self.err(format!("unknown array `{name}`"));
                    }
                    return Ok(Expr::Read { array: name, index: Box::new(index) });
                }
                if self.counters.contains(&name) {
                    return Ok(Expr::LoopVar { name, ty: ScalarType::U64 });
                }
                if self.scalars.contains_key(&name) {
                    return Ok(Expr::Var { name });
                }
                self.err(format!("unknown name `{name}`"))
            }
            other => self.err(format!("expected expression, found {other:?}")),
        }
    }

    /// Bottom-up width of an expression, `None` while it rests only on
    /// unresolved literals or counters.
    fn known_width(&self, e: &Expr) -> Option<ScalarType> {
        match e {
            Expr::Lit { .. } | Expr::LoopVar { .. } => None,
            Expr::Var { name } => self.scalars.get(name).copied(),
            Expr::Read { array, .. } => self.arrays.get(array).copied(),
            Expr::Not(a) => self.known_width(a),
            Expr::Trunc { to, .. } | Expr::Zext { to, .. } => Some(*to),
            Expr::Bin { op: BinOp::Shl | BinOp::Shr, lhs, .. } => self.known_width(lhs),
            Expr::Bin { lhs, rhs, .. } => self.known_width(lhs).or_else(|| self.known_width(rhs)),
            Expr::Cmov { ty, .. } => Some(*ty),
        }
    }

    /// Assigns widths to literals and value-position counters, top-down.
    fn resolve(&self, e: &mut Expr, expected: Option<ScalarType>) -> Result<(), ParseError> {
        match e {
            Expr::Lit { ty, value } => {
                if let Some(w) = expected {
                    if *value > w.mask() {
                        return Err(ParseError::At {
                            line: 0,
                            col: 0,
                            msg: format!("literal {value} does not fit in {w}"),
                        });
                    }
                    *ty = w;
                    Ok(())
                } else {
                    Err(ParseError::At {
                        line: 0,
                        col: 0,
                        msg: format!("cannot infer width of literal {value}"),
                    })
                }
            }
            Expr::LoopVar { ty, .. } => {
                if let Some(w) = expected {
                    *ty = w;
                }
                Ok(())
            }
            Expr::Var { .. } => Ok(()),
            Expr::Read { index, .. } => self.resolve_index(index),
            Expr::Not(a) => self.resolve(a, expected),
            Expr::Trunc { arg, .. } => {
                let w = self.known_width(arg);
                self.resolve(arg, w)
            }
            Expr::Zext { to, arg } => {
                let inner = self.known_width(arg);
                match inner {
                    Some(w) => self.resolve(arg, Some(w)),
                    None => {
                        // `(u64)5`: collapse to a literal of the cast width.
                        self.resolve(arg, Some(*to))?;
                        let replacement = (**arg).clone();
                        *e = replacement;
                        Ok(())
                    }
                }
            }
            Expr::Bin { op: BinOp::Shl | BinOp::Shr, lhs, rhs } => {
                let w = self.known_width(lhs).or(expected);
                self.resolve(lhs, w)?;
                self.resolve_index(rhs)
            }
            Expr::Bin { lhs, rhs, .. } => {
                let w = self
                    .known_width(lhs)
                    .or_else(|| self.known_width(rhs))
                    .or(expected);
                self.resolve(lhs, w)?;
                self.resolve(rhs, w)
            }
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => {
                let fw = self.known_width(flag).or(Some(ScalarType::U1));
                self.resolve(flag, fw)?;
                self.resolve(if_zero, Some(*ty))?;
                self.resolve(if_nonzero, Some(*ty))
            }
        }
    }

    /// Index-position literals keep a nominal u64 width; only shape matters.
    fn resolve_index(&self, e: &mut Expr) -> Result<(), ParseError> {
        match e {
            Expr::Lit { .. } | Expr::LoopVar { .. } => Ok(()),
            Expr::Bin { lhs, rhs, .. } => {
                self.resolve_index(lhs)?;
                self.resolve_index(rhs)
            }
            _ => Ok(()),
        }
    }

    // ---- statements & items -------------------------------------------

    fn parse_function(&mut self) -> Result<ParsedFn, ParseError> {
        match self.next() {
            Some(Tok::Id(kw)) if kw == "void" => {}
            other => return self.err(format!("expected `void`, found {other:?}")),
        }
        let name = self.eat_ident()?;
        self.eat_sym("(")?;
        let mut params = Vec::new();
        if !self.at_sym(")") {
            loop {
                let explicit_in = matches!(self.peek(), Some(Tok::Id(k)) if k == "const");
                if explicit_in {
                    self.pos += 1;
                }
                let ty = self.eat_type()?;
                let pname = self.eat_ident()?;
                if self.at_sym("[") {
                    self.pos += 1;
                    let len = self.eat_int()? as usize;
                    self.eat_sym("]")?;
                    params.push((pname, ParamKind::Array { elem: ty, len }, explicit_in));
                } else if self.at_sym("<=") {
                    self.pos += 1;
                    let max = self.eat_int()?;
                    params.push((pname, ParamKind::Scalar { ty, max }, true));
                } else {
                    return self.err("expected `[len]` or `<= max` after parameter name");
                }
                if self.at_sym(",") {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.eat_sym(")")?;

        self.scalars.clear();
        self.arrays.clear();
        self.counters.clear();
        for (pname, kind, _) in &params {
            match kind {
                ParamKind::Array { elem, .. } => {
                    self.arrays.insert(pname.clone(), *elem);
                }
                ParamKind::Scalar { ty, .. } => {
                    self.scalars.insert(pname.clone(), *ty);
                }
            }
        }

        let mut locals = Vec::new();
        let mut local_arrays = Vec::new();
        self.eat_sym("{")?;
        let body = self.parse_block(&mut locals, &mut local_arrays)?;
        Ok(ParsedFn { header: FnHeader { name, params }, locals, local_arrays, body })
    }

    fn parse_block(
        &mut self,
        locals: &mut Vec<(String, ScalarType)>,
        local_arrays: &mut Vec<LocalArray>,
    ) -> Result<Vec<Node>, ParseError> {
        let mut nodes = Vec::new();
        loop {
            if self.at_sym("}") {
                self.pos += 1;
                return Ok(nodes);
            }
            if self.peek().is_none() {
                return self.err("unexpected end of input in block");
            }
            // Label?
            if let (Some(Tok::Id(label)), Some(Tok::Sym(":"))) = (self.peek(), self.peek_at(1)) {
                let label = label.clone();
                if matches!(self.peek_at(2), Some(Tok::Id(k)) if k == "for") {
                    self.pos += 2;
                    nodes.push(Node::For(self.parse_for(Some(label), locals, local_arrays)?));
                    continue;
                }
            }
            if matches!(self.peek(), Some(Tok::Id(k)) if k == "for") {
                nodes.push(Node::For(self.parse_for(None, locals, local_arrays)?));
                continue;
            }
            if self.at_sym("(") {
                nodes.push(Node::Stmt(self.parse_wide_stmt(locals)?));
                continue;
            }
            if let Some(ty) = self.peek_type() {
                // `ty name = expr;` or `ty name[len];`
                self.pos += 1;
                let name = self.eat_ident()?;
                if self.at_sym("[") {
                    self.pos += 1;
                    let len = self.eat_int()? as usize;
                    self.eat_sym("]")?;
                    if self.at_sym("=") {
                        // Optional `= {0}` zero-initializer; scratch arrays
                        // are zero-initialized either way.
                        self.pos += 1;
                        self.eat_sym("{")?;
                        self.eat_int()?;
                        self.eat_sym("}")?;
                    }
                    self.eat_sym(";")?;
                    self.arrays.insert(name.clone(), ty);
                    local_arrays.push(LocalArray { name, elem: ty, len });
                    continue;
                }
                if self.at_sym(";") {
                    // Forward declaration; the value arrives later, usually
                    // from a two-result builtin.
                    self.pos += 1;
                    self.scalars.insert(name.clone(), ty);
                    locals.push((name, ty));
                    continue;
                }
                self.eat_sym("=")?;
                let mut rhs = self.parse_expr()?;
                self.eat_sym(";")?;
                self.resolve(&mut rhs, Some(ty))?;
                self.scalars.insert(name.clone(), ty);
                locals.push((name.clone(), ty));
                nodes.push(Node::Stmt(Statement::assign(Lvalue::local(name.as_str()), rhs)));
                continue;
            }
            // `name = expr;`, `name[i] = expr;`, or `name(args);`
            let name = self.eat_ident()?;
            if self.at_sym("=") {
                self.pos += 1;
                let Some(&ty) = self.scalars.get(&name) else {
                    return self.err(format!("assignment to undeclared `{name}`"));
                };
                let mut rhs = self.parse_expr()?;
                self.eat_sym(";")?;
                self.resolve(&mut rhs, Some(ty))?;
                nodes.push(Node::Stmt(Statement::assign(Lvalue::local(&name), rhs)));
                continue;
            }
            if self.at_sym("[") {
                self.pos += 1;
                let mut index = self.parse_expr()?;
                self.eat_sym("]")?;
                self.eat_sym("=")?;
                let elem = *self
                    .arrays
                    .get(&name)
                    .ok_or_else(|| ParseError::Invalid(ValidateError::UnknownName(name.clone())))?;
                let mut rhs = self.parse_expr()?;
                self.eat_sym(";")?;
                self.resolve_index(&mut index)?;
                self.resolve(&mut rhs, Some(elem))?;
                nodes.push(Node::Stmt(Statement::assign(Lvalue::elem(&name, index), rhs)));
                continue;
            }
            if self.at_sym("(") {
                self.pos += 1;
                let mut args = Vec::new();
                if !self.at_sym(")") {
                    loop {
                        args.push(self.eat_ident()?);
                        if self.at_sym(",") {
                            self.pos += 1;
                        } else {
                            break;
                        }
                    }
                }
                self.eat_sym(")")?;
                self.eat_sym(";")?;
                if !self.helpers.contains_key(&name) {
                    return self.err(format!("call to undefined function `{name}`"));
                }
                nodes.push(Node::Call { callee: name, args });
                continue;
            }
            return self.err(format!("cannot parse statement starting at `{name}`"));
        }
    }

    fn parse_for(
        &mut self,
        label: Option<String>,
        locals: &mut Vec<(String, ScalarType)>,
        local_arrays: &mut Vec<LocalArray>,
    ) -> Result<ForLoop, ParseError> {
        // A missing label is filled in by a whole-program relabel afterwards.
        let label = label.unwrap_or_default();
        self.eat_ident()?; // `for`
        self.eat_sym("(")?;
        // Counter declarations accept a few C integer spellings.
        match self.peek() {
            Some(Tok::Id(k)) if matches!(k.as_str(), "i64" | "i32" | "u32" | "u64" | "int") => {
                self.pos += 1;
            }
            _ => return self.err("expected counter type in loop header"),
        }
        let var = self.eat_ident()?;
        self.eat_sym("=")?;
        let start = self.eat_signed_int()?;
        self.eat_sym(";")?;
        let v2 = self.eat_ident()?;
        if v2 != var {
            return self.err("loop condition must test the loop counter");
        }
        let descending = if self.at_sym("<") {
            self.pos += 1;
            false
        } else if self.at_sym(">") {
            self.pos += 1;
            true
        } else {
            return self.err("expected `<` or `>` in loop condition");
        };
        let stop = match self.peek().cloned() {
            Some(Tok::Id(param)) => {
                self.pos += 1;
                if !self.scalars.contains_key(&param) {
                    return self.err(format!("unknown bound `{param}`"));
                }
                Bound::Var { param }
            }
            _ => Bound::Const(self.eat_signed_int()?),
        };
        self.eat_sym(";")?;
        let v3 = self.eat_ident()?;
        if v3 != var {
            return self.err("loop increment must update the loop counter");
        }
        let step = if self.at_sym("++") {
            self.pos += 1;
            1
        } else {
            self.eat_sym("+=")?;
            self.eat_signed_int()?
        };
        if step == 0 || (step > 0) == descending {
            return self.err("loop step direction does not match its condition");
        }
        self.eat_sym(")")?;
        self.eat_sym("{")?;
        self.counters.push(var.clone());
        let body = self.parse_block(locals, local_arrays)?;
        self.counters.pop();
        Ok(ForLoop { label, var, start, stop, step, body })
    }

    fn parse_wide_stmt(
        &mut self,
        locals: &mut Vec<(String, ScalarType)>,
    ) -> Result<Statement, ParseError> {
        self.eat_sym("(")?;
        let raw0 = self.parse_wide_target()?;
        self.eat_sym(",")?;
        let raw1 = self.parse_wide_target()?;
        self.eat_sym(")")?;
        self.eat_sym("=")?;
        let callee = self.eat_ident()?;
        let Some((base, ty)) = builtin_name(&callee) else {
            return self.err(format!("unknown builtin `{callee}`"));
        };
        let op = match base {
            "addcarry" => WideOp::AddCarry,
            "subborrow" => WideOp::SubBorrow,
            "mulwide" => WideOp::MulWide,
            _ => return self.err(format!("`{callee}` does not produce two results")),
        };
        self.eat_sym("(")?;
        let mut args = Vec::new();
        loop {
            args.push(self.parse_expr()?);
            if self.at_sym(",") {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.eat_sym(")")?;
        self.eat_sym(";")?;
        for (i, a) in args.iter_mut().enumerate() {
            let is_carry_in = matches!(op, WideOp::AddCarry | WideOp::SubBorrow) && i == 0;
            if is_carry_in {
                let w = self.known_width(a).or(Some(ScalarType::U1));
                self.resolve(a, w)?;
            } else {
                self.resolve(a, Some(ty))?;
            }
        }
        let (t0, t1) = op.result_types(ty);
        let target0 = self.finish_wide_target(raw0, t0, locals)?;
        let target1 = self.finish_wide_target(raw1, t1, locals)?;
        Ok(Statement { targets: vec![target0, target1], rhs: Rhs::Wide { op, ty, args } })
    }

    fn parse_wide_target(&mut self) -> Result<RawTarget, ParseError> {
        if let Some(ty) = self.peek_type() {
            self.pos += 1;
            let name = self.eat_ident()?;
            return Ok(RawTarget::Typed(name, ty));
        }
        let name = self.eat_ident()?;
        if self.at_sym("[") {
            self.pos += 1;
            let mut index = self.parse_expr()?;
            self.eat_sym("]")?;
            self.resolve_index(&mut index)?;
            return Ok(RawTarget::Elem(name, index));
        }
        Ok(RawTarget::Bare(name))
    }

    fn finish_wide_target(
        &mut self,
        raw: RawTarget,
        implied: ScalarType,
        locals: &mut Vec<(String, ScalarType)>,
    ) -> Result<Lvalue, ParseError> {
        match raw {
            RawTarget::Elem(array, index) => Ok(Lvalue::elem(&array, index)),
            RawTarget::Typed(name, ty) => {
                self.scalars.insert(name.clone(), ty);
                locals.push((name.clone(), ty));
                Ok(Lvalue::local(&name))
            }
            RawTarget::Bare(name) => {
                if self.arrays.contains_key(&name) {
                    return self.err(format!("array `{name}` used as a scalar target"));
                }
                if !self.scalars.contains_key(&name) {
                    // Fresh local; width implied by the builtin.
                    self.scalars.insert(name.clone(), implied);
                    locals.push((name.clone(), implied));
                }
                Ok(Lvalue::local(&name))
            }
        }
    }
}

enum RawTarget {
    Bare(String),
    Typed(String, ScalarType),
    Elem(String, Expr),
}

/// Arrays written anywhere in `nodes` (stores plus out-arguments of calls).
fn written_arrays(
    nodes: &[Node],
    helper_dirs: &std::collections::BTreeMap<String, Vec<Direction>>,
) -> std::collections::BTreeSet<String> {
    let mut written = std::collections::BTreeSet::new();
    fn go(
        nodes: &[Node],
        helper_dirs: &std::collections::BTreeMap<String, Vec<Direction>>,
        written: &mut std::collections::BTreeSet<String>,
    ) {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    for t in &s.targets {
                        if let Lvalue::Elem { array, .. } = t {
                            written.insert(array.clone());
                        }
                    }
                }
                Node::For(l) => go(&l.body, helper_dirs, written),
                Node::Call { callee, args } => {
                    if let Some(dirs) = helper_dirs.get(callee) {
                        for (dir, arg) in dirs.iter().zip(args) {
                            if *dir == Direction::Out {
                                written.insert(arg.clone());
                            }
                        }
                    }
                }
            }
        }
    }
    go(nodes, helper_dirs, &mut written);
    written
}

fn resolve_params(
    parsed: &ParsedFn,
    helper_dirs: &std::collections::BTreeMap<String, Vec<Direction>>,
) -> Vec<Param> {
    let written = written_arrays(&parsed.body, helper_dirs);
    parsed
        .header
        .params
        .iter()
        .map(|(name, kind, explicit_in)| {
            let dir = match kind {
                ParamKind::Scalar { .. } => Direction::In,
                ParamKind::Array { .. } => {
                    if *explicit_in {
                        Direction::In
                    } else if written.contains(name) {
                        Direction::Out
                    } else {
                        Direction::In
                    }
                }
            };
            Param { name: name.clone(), dir, kind: kind.clone() }
        })
        .collect()
}

/// Parses `.slc` source into a validated structured program. The last
/// function in the file is the entry kernel; earlier functions become
/// callable helpers.
pub fn parse_str(src: &str) -> Result<StructuredProgram, ParseError> {
    let toks = lex(src)?;
    if toks.is_empty() {
        return Err(ParseError::At { line: 1, col: 1, msg: "empty input".into() });
    }
    let mut parser = Parser {
        toks,
        pos: 0,
        scalars: Default::default(),
        arrays: Default::default(),
        counters: Vec::new(),
        helpers: Default::default(),
    };
    let mut fns = Vec::new();
    while parser.peek().is_some() {
        let f = parser.parse_function()?;
        let params = resolve_params(&f, &parser.helpers);
        parser
            .helpers
            .insert(f.header.name.clone(), params.iter().map(|p| p.dir).collect());
        fns.push((f, params));
    }
    let (entry, entry_params) = fns.pop().expect("at least one function");
    let functions = fns
        .into_iter()
        .map(|(f, params)| {
            if !f.locals.is_empty() || !f.local_arrays.is_empty() {
                return Err(ParseError::At {
                    line: 0,
                    col: 0,
                    msg: format!("helper `{}` may not declare locals", f.header.name),
                });
            }
            Ok(DefinedFunction { name: f.header.name, params, body: f.body })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut program = StructuredProgram {
        name: entry.header.name,
        params: entry_params,
        locals: entry.locals,
        local_arrays: entry.local_arrays,
        functions,
        body: entry.body,
    };
    if program.loops().iter().any(|(l, _)| l.label.is_empty()) {
        program.relabel_loops();
    }
    {
        let mut seen = std::collections::BTreeSet::new();
        for (l, _) in program.loops() {
            if !seen.insert(l.label.clone()) {
                return Err(ParseError::At {
                    line: 0,
                    col: 0,
                    msg: format!("duplicate loop label `{}`", l.label),
                });
            }
        }
    }
    validate_structured(&program)?;
    Ok(program)
}

/// Parses source that must be straight-line (no loops, no helpers).
pub fn parse_straight_line(src: &str) -> Result<Program, ParseError> {
    let sp = parse_str(src)?;
    into_straight_line(sp)
}

/// Converts a loop-free structured program into the straight-line form.
pub fn into_straight_line(sp: StructuredProgram) -> Result<Program, ParseError> {
    if !sp.functions.is_empty() {
        return Err(ParseError::At {
            line: 0,
            col: 0,
            msg: "straight-line form cannot contain helper functions".into(),
        });
    }
    let mut body = Vec::with_capacity(sp.body.len());
    for n in sp.body {
        match n {
            Node::Stmt(s) => body.push(s),
            Node::For(l) => {
                return Err(ParseError::At {
                    line: 0,
                    col: 0,
                    msg: format!("straight-line form cannot contain loop `{}`", l.label),
                })
            }
            Node::Call { callee, .. } => {
                return Err(ParseError::At {
                    line: 0,
                    col: 0,
                    msg: format!("straight-line form cannot contain call to `{callee}`"),
                })
            }
        }
    }
    let p = Program {
        name: sp.name,
        params: sp.params,
        locals: sp.locals,
        local_arrays: sp.local_arrays,
        body,
    };
    validate_straight_line(&p)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_kernel_parses() {
        let p = parse_straight_line(
            "void f(u64 a[2], u64 o[1]) { u64 x0 = a[0]*a[1]; o[0] = x0; }",
        )
        .unwrap();
        assert_eq!(p.name, "f");
        assert_eq!(p.params.len(), 2);
        assert_eq!(p.params[0].dir, Direction::In);
        assert_eq!(p.params[1].dir, Direction::Out);
        assert_eq!(p.locals, vec![("x0".to_string(), ScalarType::U64)]);
        assert_eq!(p.body.len(), 2);
    }

    #[test]
    fn reassignment_is_an_error() {
        let err = parse_straight_line(
            "void f(u64 a[1], u64 o[1]) { u64 x = a[0]; u64 x = a[0]; o[0] = x; }",
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::Invalid(ValidateError::DuplicateName(_))));
    }

    #[test]
    fn tuple_assignment_declares_implied_locals() {
        let p = parse_straight_line(
            "void f(u64 a[2], u64 o[2]) {\
               (hi, lo) = mulwide_u64(a[0], a[1]);\
               (u64 s, u1 c) = addcarry_u64(0, hi, lo);\
               o[0] = s;\
               o[1] = cmovznz_u64(c, lo, hi);\
             }",
        )
        .unwrap();
        assert_eq!(
            p.locals,
            vec![
                ("hi".to_string(), ScalarType::U64),
                ("lo".to_string(), ScalarType::U64),
                ("s".to_string(), ScalarType::U64),
                ("c".to_string(), ScalarType::U1),
            ]
        );
    }

    #[test]
    fn literal_widths_come_from_context() {
        let p = parse_straight_line(
            "void f(u32 a[1], u32 o[1]) { u32 x = a[0] & 0x3ffffff; o[0] = x + 1; }",
        )
        .unwrap();
        let Rhs::Plain(Expr::Bin { rhs, .. }) = &p.body[0].rhs else { panic!() };
        assert_eq!(**rhs, Expr::lit(0x3ffffff, ScalarType::U32));
    }

    #[test]
    fn loops_parse_with_labels_steps_and_bounds() {
        let sp = parse_str(
            "void f(const u64 a[8], u64 t[8], u32 n <= 8) {\
               L0: for (i64 v = 0; v < 8; v += 2) { t[v] = a[v] << 3; }\
               for (i64 w = 6; w > 0; w += -2) { t[w] = a[w]; }\
               L2: for (i64 u = 0; u < n; u += 1) { t[u] = a[u]; }\
             }",
        )
        .unwrap();
        let loops = sp.loops();
        assert_eq!(loops.len(), 3);
        assert_eq!(loops[0].0.const_trip_count(), Some(4));
        assert_eq!(loops[1].0.iter_values(), vec![6, 4, 2]);
        assert_eq!(loops[1].0.label, "L1");
        assert_eq!(loops[2].0.stop, Bound::Var { param: "n".into() });
        assert_eq!(loops[2].0.const_trip_count(), None);
    }

    #[test]
    fn pragmas_and_comments_are_ignored() {
        let sp = parse_str(
            "// entry\n\
             void f(const u64 a[4], u64 t[4]) {\n\
               L0: for (i64 v = 0; v < 4; v += 1) {\n\
                 #pragma HLS pipeline II=1\n\
                 t[v] = a[v] /* elementwise */ * a[v];\n\
               }\n\
             }",
        )
        .unwrap();
        assert_eq!(sp.loops().len(), 1);
    }

    #[test]
    fn helper_functions_parse_and_calls_resolve() {
        let sp = parse_str(
            "void scale(const u64 src[4], u64 dst[4]) {\
               for (i64 v = 0; v < 4; v += 1) { dst[v] = src[v] * 3; }\
             }\
             void f(const u64 a[4], u64 o[4]) {\
               scale(a, o);\
             }",
        )
        .unwrap();
        assert_eq!(sp.functions.len(), 1);
        assert_eq!(sp.functions[0].params[0].dir, Direction::In);
        assert_eq!(sp.functions[0].params[1].dir, Direction::Out);
        assert!(matches!(sp.body[0], Node::Call { .. }));
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = parse_str("void f(u64 a[1], u64 o[1]) {\n  o[0] = ;\n}").unwrap_err();
        match err {
            ParseError::At { line, .. } => assert_eq!(line, 2),
            other => panic!("expected positioned error, got {other:?}"),
        }
    }

    #[test]
    fn data_dependent_shift_rejected() {
        let err = parse_str(
            "void f(u64 a[2], u64 o[1]) { o[0] = a[0] << 70; }",
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::Invalid(ValidateError::ShiftOutOfRange { .. })));
    }

    #[test]
    fn casts_build_trunc_and_zext() {
        let p = parse_straight_line(
            "void f(u64 a[1], u32 o[1]) { u32 lo = (u32)a[0]; u64 w = (u64)lo; o[0] = lo + (u32)w; }",
        )
        .unwrap();
        assert!(matches!(&p.body[0].rhs, Rhs::Plain(Expr::Trunc { to: ScalarType::U32, .. })));
        assert!(matches!(&p.body[1].rhs, Rhs::Plain(Expr::Zext { to: ScalarType::U64, .. })));
    }
}
