//! Reference interpreter.
//!
//! Defines the ground-truth semantics every transformation is checked
//! against: all arithmetic wraps modulo the operand width, output and
//! scratch arrays start zeroed, helper calls pass arrays by reference, and
//! loops iterate exactly per the `ForLoop` rule. Evaluation is total on
//! validated programs; the error cases exist to fail loudly on malformed
//! inputs rather than to guess.

use crate::ir::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Concrete input binding: one value list per input array, one value per
/// scalar parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct InputVector {
    pub arrays: BTreeMap<String, Vec<u128>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scalars: BTreeMap<String, u128>,
}

/// Values of the output arrays after a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outputs {
    pub arrays: BTreeMap<String, Vec<u128>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("missing input for `{0}`")]
    MissingInput(String),
    #[error("input `{name}` has {found} elements, expected {expected}")]
    ShapeMismatch { name: String, expected: usize, found: usize },
    #[error("input `{name}` value {value} exceeds width {ty}")]
    ValueTooWide { name: String, value: u128, ty: ScalarType },
    #[error("scalar `{name}` value {value} exceeds declared maximum {max}")]
    BoundExceeded { name: String, value: u128, max: u128 },
    #[error("unknown name `{0}` at runtime")]
    UnknownName(String),
    #[error("index {index} out of bounds for `{array}`")]
    IndexOutOfBounds { array: String, index: i64 },
    #[error("index expression did not evaluate to a constant")]
    NonConstIndex,
    #[error("shift amount {0} out of range")]
    ShiftOutOfRange(i64),
    #[error("call to undefined function `{0}`")]
    UndefinedFunction(String),
}

/// 128x128 -> 256 bit product, returned as (hi, lo).
pub fn widening_mul_128(a: u128, b: u128) -> (u128, u128) {
    const LO: u128 = u64::MAX as u128;
    let (a0, a1) = (a & LO, a >> 64);
    let (b0, b1) = (b & LO, b >> 64);
    let p00 = a0 * b0;
    let p01 = a0 * b1;
    let p10 = a1 * b0;
    let p11 = a1 * b1;
    let mid = (p00 >> 64) + (p01 & LO) + (p10 & LO);
    let lo = (mid << 64) | (p00 & LO);
    let hi = p11 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
    (hi, lo)
}

/// `(hi, lo)` of `a * b` at width `ty`.
pub fn mulwide(a: u128, b: u128, ty: ScalarType) -> (u128, u128) {
    if ty == ScalarType::U128 {
        widening_mul_128(a, b)
    } else {
        let p = a * b;
        ((p >> ty.bits()) & ty.mask(), p & ty.mask())
    }
}

/// `(sum, carry)` of `a + b + (c != 0)` at width `ty`.
pub fn addcarry(c: u128, a: u128, b: u128, ty: ScalarType) -> (u128, u128) {
    let cin = (c != 0) as u128;
    let (s1, o1) = a.overflowing_add(b);
    let (s2, o2) = s1.overflowing_add(cin);
    if ty == ScalarType::U128 {
        (s2, (o1 | o2) as u128)
    } else {
        let sum = s2; // no u128 overflow possible below width 128
        (sum & ty.mask(), sum >> ty.bits())
    }
}

/// `(diff, borrow)` of `a - b - (c != 0)` at width `ty`.
pub fn subborrow(c: u128, a: u128, b: u128, ty: ScalarType) -> (u128, u128) {
    let bin = (c != 0) as u128;
    let (d1, o1) = a.overflowing_sub(b);
    let (d2, o2) = d1.overflowing_sub(bin);
    (d2 & ty.mask(), (o1 | o2) as u128)
}

struct Machine<'p> {
    arrays: BTreeMap<String, Vec<u128>>,
    array_tys: BTreeMap<String, ScalarType>,
    scalars: BTreeMap<String, (u128, ScalarType)>,
    counters: Vec<(String, i64)>,
    program: &'p StructuredProgram,
}

impl<'p> Machine<'p> {
    fn counter(&self, name: &str) -> Option<i64> {
        self.counters.iter().rev().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn index_value(&self, e: &Expr) -> Result<i64, EvalError> {
        let env: BTreeMap<String, i64> =
            self.counters.iter().rev().map(|(n, v)| (n.clone(), *v)).collect();
        eval_index(e, &env).ok_or(EvalError::NonConstIndex)
    }

    fn read_array(&self, array: &str, index: &Expr) -> Result<u128, EvalError> {
        let i = self.index_value(index)?;
        let data = self
            .arrays
            .get(array)
            .ok_or_else(|| EvalError::UnknownName(array.to_string()))?;
        if i < 0 || i as usize >= data.len() {
            return Err(EvalError::IndexOutOfBounds { array: array.to_string(), index: i });
        }
        Ok(data[i as usize])
    }

    fn eval(&self, e: &Expr) -> Result<(u128, ScalarType), EvalError> {
        match e {
            Expr::Lit { value, ty } => Ok((*value & ty.mask(), *ty)),
            Expr::Var { name } => self
                .scalars
                .get(name)
                .copied()
                .ok_or_else(|| EvalError::UnknownName(name.clone())),
            Expr::LoopVar { name, ty } => {
                let v = self
                    .counter(name)
                    .ok_or_else(|| EvalError::UnknownName(name.clone()))?;
                Ok(((v as i128 as u128) & ty.mask(), *ty))
            }
            Expr::Read { array, index } => {
                let ty = *self
                    .array_tys
                    .get(array)
                    .ok_or_else(|| EvalError::UnknownName(array.clone()))?;
                Ok((self.read_array(array, index)?, ty))
            }
            Expr::Not(a) => {
                let (v, ty) = self.eval(a)?;
                Ok((!v & ty.mask(), ty))
            }
            Expr::Trunc { to, arg } | Expr::Zext { to, arg } => {
                let (v, _) = self.eval(arg)?;
                Ok((v & to.mask(), *to))
            }
            Expr::Bin { op, lhs, rhs } => {
                let (a, ty) = self.eval(lhs)?;
                let m = ty.mask();
                match op {
                    BinOp::Shl | BinOp::Shr => {
                        let amt = self.index_value(rhs)?;
                        if amt < 0 || amt >= ty.bits() as i64 {
                            return Err(EvalError::ShiftOutOfRange(amt));
                        }
                        let v = match op {
                            BinOp::Shl => (a << amt) & m,
                            _ => a >> amt,
                        };
                        Ok((v, ty))
                    }
                    _ => {
                        let (b, _) = self.eval(rhs)?;
                        let v = match op {
                            BinOp::Add => a.wrapping_add(b) & m,
                            BinOp::Sub => a.wrapping_sub(b) & m,
                            BinOp::Mul => a.wrapping_mul(b) & m,
                            BinOp::And => a & b,
                            BinOp::Or => a | b,
                            BinOp::Xor => a ^ b,
                            BinOp::Shl | BinOp::Shr => unreachable!(),
                        };
                        Ok((v, ty))
                    }
                }
            }
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => {
                let (f, _) = self.eval(flag)?;
                let (v, _) = if f != 0 { self.eval(if_nonzero)? } else { self.eval(if_zero)? };
                Ok((v & ty.mask(), *ty))
            }
        }
    }

    fn write(&mut self, target: &Lvalue, value: u128, ty: ScalarType) -> Result<(), EvalError> {
        match target {
            Lvalue::Local { name } => {
                self.scalars.insert(name.clone(), (value & ty.mask(), ty));
                Ok(())
            }
            Lvalue::Elem { array, index } => {
                let i = self.index_value(index)?;
                let data = self
                    .arrays
                    .get_mut(array)
                    .ok_or_else(|| EvalError::UnknownName(array.clone()))?;
                if i < 0 || i as usize >= data.len() {
                    return Err(EvalError::IndexOutOfBounds { array: array.clone(), index: i });
                }
                data[i as usize] = value & ty.mask();
                Ok(())
            }
        }
    }

    fn run_statement(&mut self, s: &Statement) -> Result<(), EvalError> {
        match &s.rhs {
            Rhs::Plain(e) => {
                let (v, ty) = self.eval(e)?;
                self.write(&s.targets[0], v, ty)
            }
            Rhs::Wide { op, ty, args } => {
                let vals: Vec<u128> =
                    args.iter().map(|a| self.eval(a).map(|(v, _)| v)).collect::<Result<_, _>>()?;
                let (r0, r1) = match op {
                    WideOp::AddCarry => addcarry(vals[0], vals[1], vals[2], *ty),
                    WideOp::SubBorrow => subborrow(vals[0], vals[1], vals[2], *ty),
                    WideOp::MulWide => mulwide(vals[0], vals[1], *ty),
                };
                let (t0, t1) = op.result_types(*ty);
                self.write(&s.targets[0], r0, t0)?;
                self.write(&s.targets[1], r1, t1)
            }
        }
    }

    fn run_nodes(&mut self, nodes: &[Node]) -> Result<(), EvalError> {
        for n in nodes {
            match n {
                Node::Stmt(s) => self.run_statement(s)?,
                Node::For(l) => {
                    let stop = match &l.stop {
                        Bound::Const(c) => *c,
                        Bound::Var { param } => {
                            let (v, _) = self
                                .scalars
                                .get(param)
                                .copied()
                                .ok_or_else(|| EvalError::UnknownName(param.clone()))?;
                            v as i64
                        }
                    };
                    let n_iters = trip_count(l.start, stop, l.step);
                    for i in 0..n_iters {
                        self.counters.push((l.var.clone(), l.start + i * l.step));
                        self.run_nodes(&l.body)?;
                        self.counters.pop();
                    }
                }
                Node::Call { callee, args } => {
                    let f = self
                        .program
                        .function(callee)
                        .ok_or_else(|| EvalError::UndefinedFunction(callee.clone()))?;
                    // Arrays pass by reference: rename formals to actuals and
                    // run the body in the caller's state.
                    let map: BTreeMap<&str, &str> = f
                        .params
                        .iter()
                        .map(|p| p.name.as_str())
                        .zip(args.iter().map(|a| a.as_str()))
                        .collect();
                    let body: Vec<Node> =
                        f.body.iter().map(|n| rename_arrays_node(n, &map)).collect();
                    self.run_nodes(&body)?;
                }
            }
        }
        Ok(())
    }
}

fn rename_arrays_expr(e: &Expr, map: &BTreeMap<&str, &str>) -> Expr {
    match e {
        Expr::Read { array, index } => Expr::Read {
            array: map.get(array.as_str()).map(|s| s.to_string()).unwrap_or_else(|| array.clone()),
            index: Box::new(rename_arrays_expr(index, map)),
        },
        Expr::Not(a) => Expr::Not(Box::new(rename_arrays_expr(a, map))),
        Expr::Trunc { to, arg } => {
            Expr::Trunc { to: *to, arg: Box::new(rename_arrays_expr(arg, map)) }
        }
        Expr::Zext { to, arg } => {
            Expr::Zext { to: *to, arg: Box::new(rename_arrays_expr(arg, map)) }
        }
        Expr::Bin { op, lhs, rhs } => Expr::Bin {
            op: *op,
            lhs: Box::new(rename_arrays_expr(lhs, map)),
            rhs: Box::new(rename_arrays_expr(rhs, map)),
        },
        Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
            ty: *ty,
            flag: Box::new(rename_arrays_expr(flag, map)),
            if_zero: Box::new(rename_arrays_expr(if_zero, map)),
            if_nonzero: Box::new(rename_arrays_expr(if_nonzero, map)),
        },
        other => other.clone(),
    }
}

/// Renames array references through a formal->actual map (used for calls).
pub fn rename_arrays_node(n: &Node, map: &BTreeMap<&str, &str>) -> Node {
    match n {
        Node::Stmt(s) => {
            let targets = s
                .targets
                .iter()
                .map(|t| match t {
                    Lvalue::Local { name } => Lvalue::Local { name: name.clone() },
                    Lvalue::Elem { array, index } => Lvalue::Elem {
                        array: map
                            .get(array.as_str())
                            .map(|s| s.to_string())
                            .unwrap_or_else(|| array.clone()),
                        index: Box::new(rename_arrays_expr(index, map)),
                    },
                })
                .collect();
            let rhs = match &s.rhs {
                Rhs::Plain(e) => Rhs::Plain(rename_arrays_expr(e, map)),
                Rhs::Wide { op, ty, args } => Rhs::Wide {
                    op: *op,
                    ty: *ty,
                    args: args.iter().map(|a| rename_arrays_expr(a, map)).collect(),
                },
            };
            Node::Stmt(Statement { targets, rhs })
        }
        Node::For(l) => Node::For(ForLoop {
            label: l.label.clone(),
            var: l.var.clone(),
            start: l.start,
            stop: l.stop.clone(),
            step: l.step,
            body: l.body.iter().map(|b| rename_arrays_node(b, map)).collect(),
        }),
        Node::Call { callee, args } => Node::Call {
            callee: callee.clone(),
            args: args
                .iter()
                .map(|a| map.get(a.as_str()).map(|s| s.to_string()).unwrap_or_else(|| a.clone()))
                .collect(),
        },
    }
}

/// Runs a structured kernel on one input. Output and scratch arrays start
/// zeroed; the returned map holds the output arrays.
pub fn eval(p: &StructuredProgram, input: &InputVector) -> Result<Outputs, EvalError> {
    let mut arrays = BTreeMap::new();
    let mut array_tys = BTreeMap::new();
    let mut scalars = BTreeMap::new();
    for param in &p.params {
        match param.kind {
            ParamKind::Array { elem, len } => {
                array_tys.insert(param.name.clone(), elem);
                if param.dir == Direction::In {
                    let data = input
                        .arrays
                        .get(&param.name)
                        .ok_or_else(|| EvalError::MissingInput(param.name.clone()))?;
                    if data.len() != len {
                        return Err(EvalError::ShapeMismatch {
                            name: param.name.clone(),
                            expected: len,
                            found: data.len(),
                        });
                    }
                    for &v in data {
                        if v > elem.mask() {
                            return Err(EvalError::ValueTooWide {
                                name: param.name.clone(),
                                value: v,
                                ty: elem,
                            });
                        }
                    }
                    arrays.insert(param.name.clone(), data.clone());
                } else {
                    arrays.insert(param.name.clone(), vec![0; len]);
                }
            }
            ParamKind::Scalar { ty, max } => {
                let v = *input
                    .scalars
                    .get(&param.name)
                    .ok_or_else(|| EvalError::MissingInput(param.name.clone()))?;
                if v > max {
                    return Err(EvalError::BoundExceeded {
                        name: param.name.clone(),
                        value: v,
                        max,
                    });
                }
                scalars.insert(param.name.clone(), (v & ty.mask(), ty));
            }
        }
    }
    for a in &p.local_arrays {
        array_tys.insert(a.name.clone(), a.elem);
        arrays.insert(a.name.clone(), vec![0; a.len]);
    }
    let mut m = Machine { arrays, array_tys, scalars, counters: Vec::new(), program: p };
    m.run_nodes(&p.body)?;
    let outputs = p
        .params
        .iter()
        .filter(|param| {
            param.dir == Direction::Out && matches!(param.kind, ParamKind::Array { .. })
        })
        .map(|param| (param.name.clone(), m.arrays.remove(&param.name).unwrap()))
        .collect();
    Ok(Outputs { arrays: outputs })
}

/// Runs a straight-line kernel on one input.
pub fn eval_straight_line(p: &Program, input: &InputVector) -> Result<Outputs, EvalError> {
    eval(&StructuredProgram::from(p.clone()), input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_str, parse_straight_line};

    fn run1(src: &str, arrays: &[(&str, Vec<u128>)]) -> Outputs {
        let p = parse_str(src).unwrap();
        let input = InputVector {
            arrays: arrays.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
            scalars: BTreeMap::new(),
        };
        eval(&p, &input).unwrap()
    }

    #[test]
    fn mulwide_splits_high_and_low() {
        assert_eq!(mulwide(1 << 63, 2, ScalarType::U64), (1, 0));
        assert_eq!(mulwide(u64::MAX as u128, u64::MAX as u128, ScalarType::U64), {
            let p = (u64::MAX as u128) * (u64::MAX as u128);
            (p >> 64, p & u64::MAX as u128)
        });
    }

    #[test]
    fn addcarry_wraps_and_carries() {
        assert_eq!(addcarry(1, u64::MAX as u128, 0, ScalarType::U64), (0, 1));
        assert_eq!(addcarry(0, 3, 4, ScalarType::U64), (7, 0));
        // Carry-in is a flag: any nonzero value contributes exactly one.
        assert_eq!(addcarry(7, 0, 0, ScalarType::U64), (1, 0));
    }

    #[test]
    fn subborrow_borrows_below_zero() {
        assert_eq!(subborrow(0, 5, 7, ScalarType::U64), ((5u128.wrapping_sub(7)) & u64::MAX as u128, 1));
        assert_eq!(subborrow(1, 5, 5, ScalarType::U64), (u64::MAX as u128, 1));
        assert_eq!(subborrow(0, 9, 2, ScalarType::U8), (7, 0));
    }

    #[test]
    fn widening_mul_128_matches_shifted_identity() {
        let a = 0x0123_4567_89ab_cdef_fedc_ba98_7654_3210u128;
        let b = 0xdead_beef_dead_beef_dead_beef_dead_beefu128;
        let (hi, lo) = widening_mul_128(a, b);
        // Verify with mod-2^128 arithmetic: lo must equal the wrapping product.
        assert_eq!(lo, a.wrapping_mul(b));
        // And hi via two partial products.
        let (hi2, _) = widening_mul_128(b, a);
        assert_eq!(hi, hi2);
    }

    #[test]
    fn wrapping_arithmetic_is_mod_width() {
        let out = run1(
            "void f(const u8 a[1], u8 o[2]) { o[0] = a[0] + a[0]; o[1] = a[0] * a[0]; }",
            &[("a", vec![200])],
        );
        assert_eq!(out.arrays["o"], vec![(200 + 200) % 256, (200 * 200) % 256]);
    }

    #[test]
    fn out_and_scratch_arrays_start_zeroed() {
        let out = run1(
            "void f(const u64 a[1], u64 o[2]) { u64 t[2]; o[0] = t[1] + a[0]; o[1] = o[1]; }",
            &[("a", vec![5])],
        );
        assert_eq!(out.arrays["o"], vec![5, 0]);
    }

    #[test]
    fn loops_descend_with_negative_step() {
        let out = run1(
            "void f(const u64 a[4], u64 o[4]) {\
               L0: for (i64 v = 3; v > -1; v += -1) { o[v] = a[3 - v]; }\
             }",
            &[("a", vec![10, 11, 12, 13])],
        );
        assert_eq!(out.arrays["o"], vec![13, 12, 11, 10]);
    }

    #[test]
    fn cmovznz_selects_on_nonzero() {
        let p = parse_straight_line(
            "void f(const u64 a[2], const u64 f0[1], u64 o[1]) { o[0] = cmovznz_u64(f0[0], a[0], a[1]); }",
        )
        .unwrap();
        let mk = |flag: u128| InputVector {
            arrays: [
                ("a".to_string(), vec![77, 88]),
                ("f0".to_string(), vec![flag]),
            ]
            .into_iter()
            .collect(),
            scalars: BTreeMap::new(),
        };
        assert_eq!(eval_straight_line(&p, &mk(0)).unwrap().arrays["o"], vec![77]);
        assert_eq!(eval_straight_line(&p, &mk(3)).unwrap().arrays["o"], vec![88]);
    }

    #[test]
    fn scalar_bound_is_enforced() {
        let p = parse_str(
            "void f(u64 o[8], u32 n <= 8) { L0: for (i64 v = 0; v < n; v += 1) { o[v] = 1; } }",
        )
        .unwrap();
        let mk = |n: u128| InputVector {
            arrays: BTreeMap::new(),
            scalars: [("n".to_string(), n)].into_iter().collect(),
        };
        let out = eval(&p, &mk(3)).unwrap();
        assert_eq!(out.arrays["o"], vec![1, 1, 1, 0, 0, 0, 0, 0]);
        assert!(matches!(eval(&p, &mk(9)), Err(EvalError::BoundExceeded { .. })));
    }

    #[test]
    fn helper_calls_write_through_references() {
        let p = parse_str(
            "void fill(u64 dst[2]) { dst[0] = 1; dst[1] = 2; }\
             void f(u64 o[2]) { fill(o); }",
        )
        .unwrap();
        let out = eval(&p, &InputVector::default()).unwrap();
        assert_eq!(out.arrays["o"], vec![1, 2]);
    }
}
