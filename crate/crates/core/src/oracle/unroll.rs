//! Loop expansion.
//!
//! Rewrites a structured kernel into the equivalent straight-line program:
//! every loop body is copied once per iteration with the counter replaced by
//! its value, helper calls are inlined, and locals assigned inside a loop get
//! a per-iteration suffix so the copies stay independent. Counter-free
//! literal arithmetic left behind by substitution folds to plain literals,
//! so the output looks like hand-written flat code rather than `a[3 * 1 + 0]`.

use crate::ir::*;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UnrollError {
    #[error("loop `{0}` has a variable bound and no constant trip count")]
    VariableBound(String),
    #[error("call to undefined function `{0}`")]
    UndefinedFunction(String),
    #[error("expanded program fails validation: {0}")]
    Invalid(#[from] ValidateError),
}

struct Expander<'p> {
    program: &'p StructuredProgram,
    /// Counter -> current value, innermost last.
    env: Vec<(String, i64)>,
    /// Local rename map for the current iteration scope.
    renames: Vec<(String, String)>,
    out: Vec<Statement>,
    locals: Vec<(String, ScalarType)>,
    local_tys: BTreeMap<String, ScalarType>,
}

impl<'p> Expander<'p> {
    fn rename(&self, name: &str) -> Option<&str> {
        self.renames.iter().rev().find(|(from, _)| from == name).map(|(_, to)| to.as_str())
    }

    fn counter(&self, name: &str) -> Option<i64> {
        self.env.iter().rev().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn subst(&self, e: &Expr) -> Expr {
        let r = match e {
            Expr::LoopVar { name, ty } => match self.counter(name) {
                Some(v) => Expr::Lit { value: (v as i128 as u128) & ty.mask(), ty: *ty },
                None => e.clone(),
            },
            Expr::Var { name } => Expr::Var {
                name: self.rename(name).map(str::to_string).unwrap_or_else(|| name.clone()),
            },
            Expr::Read { array, index } => {
                Expr::Read { array: array.clone(), index: Box::new(self.subst_index(index)) }
            }
            Expr::Not(a) => Expr::Not(Box::new(self.subst(a))),
            Expr::Trunc { to, arg } => Expr::Trunc { to: *to, arg: Box::new(self.subst(arg)) },
            Expr::Zext { to, arg } => Expr::Zext { to: *to, arg: Box::new(self.subst(arg)) },
            Expr::Bin { op: op @ (BinOp::Shl | BinOp::Shr), lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(self.subst(lhs)),
                rhs: Box::new(self.subst_index(rhs)),
            },
            Expr::Bin { op, lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(self.subst(lhs)),
                rhs: Box::new(self.subst(rhs)),
            },
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
                ty: *ty,
                flag: Box::new(self.subst(flag)),
                if_zero: Box::new(self.subst(if_zero)),
                if_nonzero: Box::new(self.subst(if_nonzero)),
            },
            Expr::Lit { .. } => e.clone(),
        };
        fold(r)
    }

    /// Index and shift-amount positions: substitute and collapse to a single
    /// literal (integer semantics, no width wrapping).
    fn subst_index(&self, e: &Expr) -> Expr {
        let env: BTreeMap<String, i64> =
            self.env.iter().rev().map(|(n, v)| (n.clone(), *v)).collect();
        match eval_index(e, &env) {
            Some(v) => Expr::index_lit(v),
            None => self.subst(e),
        }
    }

    fn subst_statement(&mut self, s: &Statement) -> Statement {
        let targets = s
            .targets
            .iter()
            .map(|t| match t {
                Lvalue::Local { name } => {
                    let name = self.rename(name).map(str::to_string).unwrap_or_else(|| name.clone());
                    Lvalue::Local { name }
                }
                Lvalue::Elem { array, index } => Lvalue::Elem {
                    array: array.clone(),
                    index: Box::new(self.subst_index(index)),
                },
            })
            .collect();
        let rhs = match &s.rhs {
            Rhs::Plain(e) => Rhs::Plain(self.subst(e)),
            Rhs::Wide { op, ty, args } => Rhs::Wide {
                op: *op,
                ty: *ty,
                args: args.iter().map(|a| self.subst(a)).collect(),
            },
        };
        Statement { targets, rhs }
    }

    fn record_locals(&mut self, s: &Statement) {
        for t in &s.targets {
            if let Lvalue::Local { name } = t {
                if let Some(&ty) = self.local_tys.get(name) {
                    if !self.locals.iter().any(|(n, _)| n == name) {
                        self.locals.push((name.clone(), ty));
                    }
                }
            }
        }
    }

    fn expand(&mut self, nodes: &[Node], suffix: &str) -> Result<(), UnrollError> {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    // Locals first assigned inside a loop get the iteration
                    // suffix; top-level locals keep their names.
                    for t in &s.targets {
                        if let Lvalue::Local { name } = t {
                            if !suffix.is_empty() && self.rename(name).is_none() {
                                let fresh = format!("{name}{suffix}");
                                if let Some(&ty) = self.local_tys.get(name) {
                                    self.local_tys.insert(fresh.clone(), ty);
                                }
                                self.renames.push((name.clone(), fresh));
                            }
                        }
                    }
                    let s = self.subst_statement(s);
                    self.record_locals(&s);
                    self.out.push(s);
                }
                Node::For(l) => {
                    let stop = match &l.stop {
                        Bound::Const(c) => *c,
                        Bound::Var { .. } => {
                            return Err(UnrollError::VariableBound(l.label.clone()))
                        }
                    };
                    for (k, value) in l.iter_values_to(stop).into_iter().enumerate() {
                        let depth = self.env.len();
                        let rdepth = self.renames.len();
                        self.env.push((l.var.clone(), value));
                        let child = format!("{suffix}_{k}");
                        self.expand(&l.body, &child)?;
                        self.env.truncate(depth);
                        self.renames.truncate(rdepth);
                    }
                }
                Node::Call { callee, args } => {
                    let f = self
                        .program
                        .function(callee)
                        .ok_or_else(|| UnrollError::UndefinedFunction(callee.clone()))?;
                    let map: BTreeMap<&str, &str> = f
                        .params
                        .iter()
                        .map(|p| p.name.as_str())
                        .zip(args.iter().map(|a| a.as_str()))
                        .collect();
                    let body: Vec<Node> = f
                        .body
                        .iter()
                        .map(|n| super::interp::rename_arrays_node(n, &map))
                        .collect();
                    self.expand(&body, suffix)?;
                }
            }
        }
        Ok(())
    }
}

/// Folds pure-literal arithmetic to a single literal. Children are assumed
/// already folded; width semantics match the interpreter.
fn fold(e: Expr) -> Expr {
    fn lit(e: &Expr) -> Option<(u128, ScalarType)> {
        match e {
            Expr::Lit { value, ty } => Some((*value, *ty)),
            _ => None,
        }
    }
    match &e {
        Expr::Not(a) => {
            if let Some((v, ty)) = lit(a) {
                return Expr::Lit { value: !v & ty.mask(), ty };
            }
        }
        Expr::Trunc { to, arg } | Expr::Zext { to, arg } => {
            if let Some((v, _)) = lit(arg) {
                return Expr::Lit { value: v & to.mask(), ty: *to };
            }
        }
        Expr::Bin { op, lhs, rhs } => {
            if let (Some((a, ty)), Some((b, _))) = (lit(lhs), lit(rhs)) {
                let m = ty.mask();
                let v = match op {
                    BinOp::Add => a.wrapping_add(b) & m,
                    BinOp::Sub => a.wrapping_sub(b) & m,
                    BinOp::Mul => a.wrapping_mul(b) & m,
                    BinOp::And => a & b,
                    BinOp::Or => a | b,
                    BinOp::Xor => a ^ b,
                    BinOp::Shl if b < ty.bits() as u128 => (a << b) & m,
                    BinOp::Shr if b < ty.bits() as u128 => a >> b,
                    _ => return e,
                };
                return Expr::Lit { value: v, ty };
            }
        }
        Expr::Cmov { ty, flag, if_zero, if_nonzero } => {
            if let (Some((f, _)), Some((z, _)), Some((nz, _))) =
                (lit(flag), lit(if_zero), lit(if_nonzero))
            {
                return Expr::Lit { value: if f != 0 { nz } else { z } & ty.mask(), ty: *ty };
            }
        }
        _ => {}
    }
    e
}

impl ForLoop {
    /// Iteration values against an explicit stop (used once the bound is
    /// known to be constant).
    fn iter_values_to(&self, stop: i64) -> Vec<i64> {
        let n = trip_count(self.start, stop, self.step);
        (0..n).map(|i| self.start + i * self.step).collect()
    }
}

/// Expands every loop and call in `p` into flat straight-line code. Fails if
/// any loop bound is still variable (staticize bounds first) and validates
/// the result before returning it.
pub fn unroll(p: &StructuredProgram) -> Result<Program, UnrollError> {
    let mut ex = Expander {
        program: p,
        env: Vec::new(),
        renames: Vec::new(),
        out: Vec::new(),
        locals: Vec::new(),
        local_tys: p.locals.iter().cloned().collect(),
    };
    ex.expand(&p.body, "")?;
    let flat = Program {
        name: p.name.clone(),
        params: p.params.clone(),
        locals: ex.locals,
        local_arrays: p.local_arrays.clone(),
        body: ex.out,
    };
    validate_straight_line(&flat)?;
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::interp::{eval, eval_straight_line, InputVector};
    use crate::parser::parse_str;

    fn expand(src: &str) -> Program {
        unroll(&parse_str(src).unwrap()).unwrap()
    }

    #[test]
    fn counter_values_become_literal_indices() {
        let p = expand(
            "void f(const u64 a[4], u64 o[4]) {\
               L0: for (i64 v = 0; v < 4; v += 1) { o[v] = a[3 - v]; }\
             }",
        );
        assert_eq!(p.body.len(), 4);
        let text = crate::emit::emit_straight_line(&p);
        assert!(text.contains("o[0] = a[3];"));
        assert!(text.contains("o[3] = a[0];"));
    }

    #[test]
    fn masks_fold_to_plain_literals() {
        let p = expand(
            "void f(const u64 a[4], u64 o[4]) {\
               L0: for (i64 v = 0; v < 4; v += 1) { o[v] = a[v] << v + 1; }\
             }",
        );
        let text = crate::emit::emit_straight_line(&p);
        assert!(text.contains("o[2] = a[2] << 3;"), "{text}");
    }

    #[test]
    fn loop_locals_get_per_iteration_names() {
        let p = expand(
            "void f(const u64 a[2], const u64 b[2], u64 o[2]) {\
               L0: for (i64 v = 0; v < 2; v += 1) {\
                 u64 t = a[v] * b[v];\
                 o[v] = t + t;\
               }\
             }",
        );
        let names: Vec<&str> = p.locals.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["t_0", "t_1"]);
    }

    #[test]
    fn nested_loops_expand_in_row_major_order() {
        let p = expand(
            "void f(const u64 a[6], u64 o[6]) {\
               L0: for (i64 i = 0; i < 2; i += 1) {\
                 L1: for (i64 j = 0; j < 3; j += 1) { o[i * 3 + j] = a[i * 3 + j]; }\
               }\
             }",
        );
        assert_eq!(p.body.len(), 6);
        let text = crate::emit::emit_straight_line(&p);
        let first = text.find("o[0]").unwrap();
        let last = text.find("o[5]").unwrap();
        assert!(first < last);
    }

    #[test]
    fn variable_bounds_are_rejected() {
        let p = parse_str(
            "void f(u64 o[8], u32 n <= 8) { L0: for (i64 v = 0; v < n; v += 1) { o[v] = 1; } }",
        )
        .unwrap();
        assert!(matches!(unroll(&p), Err(UnrollError::VariableBound(_))));
    }

    #[test]
    fn expansion_preserves_semantics() {
        let src = "void f(const u64 a[4], const u64 b[4], u64 o[4]) {\
               u64 acc = 0;\
               o[0] = acc;\
               L0: for (i64 v = 3; v > -1; v += -1) {\
                 u64 hi;\
                 u64 lo;\
                 (hi, lo) = mulwide_u64(a[v], b[v]);\
                 o[v] = hi ^ lo;\
               }\
             }";
        let sp = parse_str(src).unwrap();
        let flat = unroll(&sp).unwrap();
        let input = InputVector {
            arrays: [
                ("a".to_string(), vec![u64::MAX as u128, 7, 1 << 40, 3]),
                ("b".to_string(), vec![u64::MAX as u128, 9, 1 << 30, 5]),
            ]
            .into_iter()
            .collect(),
            scalars: Default::default(),
        };
        assert_eq!(eval(&sp, &input).unwrap(), eval_straight_line(&flat, &input).unwrap());
    }
}
