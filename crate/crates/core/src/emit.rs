//! Deterministic C-like emission for structured kernels.
//!
//! The emitted text is the same dialect [`crate::parser`] accepts, so
//! `parse(emit(p))` reproduces `p`. Synthesis directives are rendered as
//! byte-exact `#pragma HLS ...` lines: loop-level directives (pipeline,
//! unroll, dependence) as the first lines of the loop body, array partition
//! directives directly after the scratch-array declarations.

use crate::ir::*;
use std::collections::BTreeMap;
use std::fmt::Write;

/// One rendered synthesis directive, anchored to a loop label or an array.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum PragmaLine {
    Pipeline { loop_label: String, ii: u32 },
    Unroll { loop_label: String, factor: u32 },
    ArrayPartition { variable: String, factor: u32 },
    Dependence { loop_label: String, variable: String },
}

impl PragmaLine {
    pub fn render(&self) -> String {
        match self {
            PragmaLine::Pipeline { ii, .. } => format!("#pragma HLS pipeline II={ii}"),
            PragmaLine::Unroll { factor, .. } => format!("#pragma HLS unroll factor={factor}"),
            PragmaLine::ArrayPartition { variable, factor } => {
                format!("#pragma HLS array_partition variable={variable} type=cyclic factor={factor}")
            }
            PragmaLine::Dependence { variable, .. } => {
                format!("#pragma HLS dependence variable={variable} type=inter false")
            }
        }
    }
}

fn fmt_value_lit(value: u128) -> String {
    if value < 16 {
        format!("{value}")
    } else {
        format!("0x{value:x}")
    }
}

/// Operator precedence, mirroring the parser's levels.
fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin { op, .. } => match op {
            BinOp::Or => 1,
            BinOp::Xor => 2,
            BinOp::And => 3,
            BinOp::Shl | BinOp::Shr => 4,
            BinOp::Add | BinOp::Sub => 5,
            BinOp::Mul => 6,
        },
        Expr::Not(_) | Expr::Trunc { .. } | Expr::Zext { .. } => 7,
        _ => 8,
    }
}

struct Emitter {
    out: String,
    /// Local scalar name -> declared type; consulted to print declarations.
    local_tys: BTreeMap<String, ScalarType>,
    declared: std::collections::BTreeSet<String>,
    pragmas: Vec<PragmaLine>,
}

impl Emitter {
    fn value_expr(&self, e: &Expr, buf: &mut String) {
        match e {
            Expr::Lit { value, .. } => buf.push_str(&fmt_value_lit(*value)),
            Expr::Var { name } => buf.push_str(name),
            Expr::LoopVar { name, .. } => buf.push_str(name),
            Expr::Read { array, index } => {
                buf.push_str(array);
                buf.push('[');
                self.index_expr(index, buf);
                buf.push(']');
            }
            Expr::Not(a) => {
                buf.push('~');
                self.child(a, 7, buf);
            }
            Expr::Trunc { to, arg } | Expr::Zext { to, arg } => {
                let _ = write!(buf, "({to})");
                self.child(arg, 7, buf);
            }
            Expr::Bin { op, lhs, rhs } => {
                self.child(lhs, prec(e), buf);
                let _ = write!(buf, " {} ", op.symbol());
                if matches!(op, BinOp::Shl | BinOp::Shr) {
                    let mut amount = String::new();
                    self.index_expr(rhs, &mut amount);
                    if prec(rhs) <= prec(e) && !matches!(**rhs, Expr::Lit { .. } | Expr::LoopVar { .. })
                    {
                        let _ = write!(buf, "({amount})");
                    } else {
                        buf.push_str(&amount);
                    }
                } else {
                    // Right operand of equal precedence keeps its grouping.
                    if prec(rhs) <= prec(e) {
                        buf.push('(');
                        self.value_expr(rhs, buf);
                        buf.push(')');
                    } else {
                        self.value_expr(rhs, buf);
                    }
                }
            }
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => {
                let _ = write!(buf, "cmovznz_{ty}(");
                self.value_expr(flag, buf);
                buf.push_str(", ");
                self.value_expr(if_zero, buf);
                buf.push_str(", ");
                self.value_expr(if_nonzero, buf);
                buf.push(')');
            }
        }
    }

    fn child(&self, e: &Expr, parent_prec: u8, buf: &mut String) {
        if prec(e) < parent_prec {
            buf.push('(');
            self.value_expr(e, buf);
            buf.push(')');
        } else {
            self.value_expr(e, buf);
        }
    }

    /// Index-domain printing: literals are signed, affine forms are printed
    /// canonically so negative strides stay parseable (`6 - v * 2`).
    fn index_expr(&self, e: &Expr, buf: &mut String) {
        if let Some(a) = as_affine(e) {
            match a.var {
                None => {
                    let _ = write!(buf, "{}", a.base);
                }
                Some(v) => {
                    let (scale, base) = (a.scale, a.base);
                    if scale >= 0 {
                        match scale {
                            1 => buf.push_str(&v),
                            s => {
                                let _ = write!(buf, "{v} * {s}");
                            }
                        }
                        if base > 0 {
                            let _ = write!(buf, " + {base}");
                        } else if base < 0 {
                            let _ = write!(buf, " - {}", -base);
                        }
                    } else {
                        let _ = write!(buf, "{base} - ");
                        match -scale {
                            1 => buf.push_str(&v),
                            s => {
                                let _ = write!(buf, "{v} * {s}");
                            }
                        }
                    }
                }
            }
            return;
        }
        match e {
            Expr::Lit { value, .. } => {
                let signed = *value as u64 as i64;
                if signed < 0 {
                    let _ = write!(buf, "(0 - {})", -signed);
                } else {
                    let _ = write!(buf, "{signed}");
                }
            }
            Expr::LoopVar { name, .. } => buf.push_str(name),
            Expr::Bin { op, lhs, rhs } => {
                let p = prec(e);
                if prec(lhs) < p {
                    buf.push('(');
                    self.index_expr(lhs, buf);
                    buf.push(')');
                } else {
                    self.index_expr(lhs, buf);
                }
                let _ = write!(buf, " {} ", op.symbol());
                if prec(rhs) <= p {
                    buf.push('(');
                    self.index_expr(rhs, buf);
                    buf.push(')');
                } else {
                    self.index_expr(rhs, buf);
                }
            }
            other => {
                // Index expressions are counter-only by construction.
                let mut s = String::new();
                self.value_expr(other, &mut s);
                buf.push_str(&s);
            }
        }
    }

    fn indent(&mut self, depth: usize) {
        for _ in 0..depth {
            self.out.push_str("  ");
        }
    }

    fn statement(&mut self, s: &Statement, depth: usize) {
        self.indent(depth);
        match &s.rhs {
            Rhs::Plain(e) => {
                let target = &s.targets[0];
                match target {
                    Lvalue::Local { name } => {
                        if self.declared.insert(name.clone()) {
                            if let Some(ty) = self.local_tys.get(name) {
                                let _ = write!(self.out, "{ty} ");
                            }
                        }
                        self.out.push_str(name);
                    }
                    Lvalue::Elem { array, index } => {
                        let mut idx = String::new();
                        self.index_expr(index, &mut idx);
                        let _ = write!(self.out, "{array}[{idx}]");
                    }
                }
                self.out.push_str(" = ");
                let mut rhs = String::new();
                self.value_expr(e, &mut rhs);
                self.out.push_str(&rhs);
                self.out.push_str(";\n");
            }
            Rhs::Wide { op, ty, args } => {
                self.out.push('(');
                for (i, t) in s.targets.iter().enumerate() {
                    if i > 0 {
                        self.out.push_str(", ");
                    }
                    match t {
                        Lvalue::Local { name } => {
                            // Types are implied by the builtin on re-parse.
                            self.declared.insert(name.clone());
                            self.out.push_str(name);
                        }
                        Lvalue::Elem { array, index } => {
                            let mut idx = String::new();
                            self.index_expr(index, &mut idx);
                            let _ = write!(self.out, "{array}[{idx}]");
                        }
                    }
                }
                let _ = write!(self.out, ") = {}_{}(", op.base_name(), ty);
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        self.out.push_str(", ");
                    }
                    let mut arg = String::new();
                    self.value_expr(a, &mut arg);
                    self.out.push_str(&arg);
                }
                self.out.push_str(");\n");
            }
        }
    }

    fn loop_pragmas(&mut self, label: &str, depth: usize) {
        // Canonical order inside a loop: pipeline, unroll, dependence.
        let mut lines: Vec<(u8, String)> = Vec::new();
        for p in &self.pragmas {
            let rank = match p {
                PragmaLine::Pipeline { loop_label, .. } if loop_label == label => 0,
                PragmaLine::Unroll { loop_label, .. } if loop_label == label => 1,
                PragmaLine::Dependence { loop_label, .. } if loop_label == label => 2,
                _ => continue,
            };
            lines.push((rank, p.render()));
        }
        lines.sort();
        for (_, line) in lines {
            self.indent(depth);
            self.out.push_str(&line);
            self.out.push('\n');
        }
    }

    fn node(&mut self, n: &Node, depth: usize) {
        match n {
            Node::Stmt(s) => self.statement(s, depth),
            Node::For(l) => {
                self.indent(depth);
                let stop = match &l.stop {
                    Bound::Const(c) => c.to_string(),
                    Bound::Var { param } => param.clone(),
                };
                let cmp = if l.step > 0 { "<" } else { ">" };
                let _ = write!(
                    self.out,
                    "{}: for (i64 {} = {}; {} {} {}; {} += {}) {{\n",
                    l.label, l.var, l.start, l.var, cmp, stop, l.var, l.step
                );
                self.loop_pragmas(&l.label, depth + 1);
                for inner in &l.body {
                    self.node(inner, depth + 1);
                }
                self.indent(depth);
                self.out.push_str("}\n");
            }
            Node::Call { callee, args } => {
                self.indent(depth);
                let _ = write!(self.out, "{callee}({});\n", args.join(", "));
            }
        }
    }

    fn signature(&mut self, name: &str, params: &[Param]) {
        let _ = write!(self.out, "void {name}(");
        for (i, p) in params.iter().enumerate() {
            if i > 0 {
                self.out.push_str(", ");
            }
            match &p.kind {
                ParamKind::Array { elem, len } => {
                    if p.dir == Direction::In {
                        self.out.push_str("const ");
                    }
                    let _ = write!(self.out, "{elem} {}[{len}]", p.name);
                }
                ParamKind::Scalar { ty, max } => {
                    let _ = write!(self.out, "{ty} {} <= {max}", p.name);
                }
            }
        }
        self.out.push_str(") {\n");
    }
}

/// Renders a structured kernel (helpers first, then the entry function) with
/// the given directive set.
pub fn emit_c(p: &StructuredProgram, pragmas: &[PragmaLine]) -> String {
    let mut em = Emitter {
        out: String::new(),
        local_tys: p.locals.iter().cloned().collect(),
        declared: Default::default(),
        pragmas: pragmas.to_vec(),
    };
    for f in &p.functions {
        em.signature(&f.name, &f.params);
        for n in &f.body {
            em.node(n, 1);
        }
        em.out.push_str("}\n\n");
    }
    em.signature(&p.name, &p.params);
    for a in &p.local_arrays {
        em.indent(1);
        let _ = write!(em.out, "{} {}[{}] = {{0}};\n", a.elem, a.name, a.len);
    }
    let mut partitions: Vec<&PragmaLine> = pragmas
        .iter()
        .filter(|p| matches!(p, PragmaLine::ArrayPartition { .. }))
        .collect();
    partitions.sort();
    for p in partitions {
        em.indent(1);
        em.out.push_str(&p.render());
        em.out.push('\n');
    }
    for n in &p.body {
        em.node(n, 1);
    }
    em.out.push_str("}\n");
    em.out
}

/// Renders a straight-line kernel.
pub fn emit_straight_line(p: &Program) -> String {
    emit_c(&StructuredProgram::from(p.clone()), &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_str;

    #[test]
    fn empty_body_emits_skeleton() {
        let p = StructuredProgram {
            name: "f".into(),
            params: vec![Param::array("o", Direction::Out, ScalarType::U64, 1)],
            locals: vec![],
            local_arrays: vec![],
            functions: vec![],
            body: vec![],
        };
        assert_eq!(emit_c(&p, &[]), "void f(u64 o[1]) {\n}\n");
    }

    #[test]
    fn pipeline_pragma_is_first_line_of_loop_body() {
        let src = "void f(const u64 a[4], u64 t[4]) {\
                     L0: for (i64 v = 0; v < 4; v += 1) { t[v] = a[v] * a[v]; }\
                   }";
        let p = parse_str(src).unwrap();
        let text = emit_c(
            &p,
            &[PragmaLine::Pipeline { loop_label: "L0".into(), ii: 1 }],
        );
        let lines: Vec<&str> = text.lines().collect();
        let loop_at = lines.iter().position(|l| l.contains("for (")).unwrap();
        assert_eq!(lines[loop_at + 1].trim(), "#pragma HLS pipeline II=1");
    }

    #[test]
    fn directive_lines_are_byte_exact() {
        assert_eq!(
            PragmaLine::Pipeline { loop_label: "L0".into(), ii: 2 }.render(),
            "#pragma HLS pipeline II=2"
        );
        assert_eq!(
            PragmaLine::Unroll { loop_label: "L0".into(), factor: 4 }.render(),
            "#pragma HLS unroll factor=4"
        );
        assert_eq!(
            PragmaLine::ArrayPartition { variable: "t64".into(), factor: 2 }.render(),
            "#pragma HLS array_partition variable=t64 type=cyclic factor=2"
        );
        assert_eq!(
            PragmaLine::Dependence { loop_label: "L0".into(), variable: "t64".into() }.render(),
            "#pragma HLS dependence variable=t64 type=inter false"
        );
    }

    #[test]
    fn emitted_text_reparses_to_same_program() {
        let src = "void mac(const u64 a[8], const u64 b[8], u64 o[1]) {\
                     u64 t64[8] = {0};\
                     L0: for (i64 v = 0; v < 8; v += 1) { t64[v] = a[v] * b[v]; }\
                     L1: for (i64 w = 6; w > 0; w += -2) { t64[w] = t64[w] + t64[w + 1]; }\
                     (s, c) = addcarry_u64(0, t64[0], t64[1]);\
                     o[0] = cmovznz_u64(c, s, t64[2]);\
                   }";
        let p = parse_str(src).unwrap();
        let text = emit_c(&p, &[]);
        let back = parse_str(&text).unwrap();
        assert_eq!(p, back, "round-trip changed the program:\n{text}");
    }

    #[test]
    fn negative_stride_affine_index_round_trips() {
        let src = "void f(const u64 a[8], u64 t[8]) {\
                     L0: for (i64 v = 0; v < 4; v += 1) { t[6 - v * 2] = a[v] << v + 1; }\
                   }";
        let p = parse_str(src).unwrap();
        let text = emit_c(&p, &[]);
        assert!(text.contains("t[6 - v * 2]"), "{text}");
        let back = parse_str(&text).unwrap();
        assert_eq!(p, back);
    }
}
