//! Statement shapes.
//!
//! Consecutive statements that compute the same formula differ only in a
//! handful of integers: array indices, shift amounts, sometimes a mask.
//! This module canonicalizes each statement (commutative operands in a fixed
//! order, no value rewriting), replaces those integers with numbered holes,
//! and groups maximal runs of equal shapes into abstract sequences — the
//! input language of the saturation stage.
//!
//! Hole policy: indices and shift amounts are always holes. Other literals
//! become holes only when the surrounding run has at least two statements,
//! so a lone `o[0] = a[0] & 0x3f` keeps its mask concrete instead of
//! spawning a pointless degree of freedom.

use crate::ir::*;
use serde::Serialize;
use std::collections::BTreeMap;

/// What a hole stands for; decides how a constant is materialized back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HoleKind {
    /// Array index (target or read).
    Index,
    /// Shift amount.
    Shift,
    /// General literal of the given width.
    Value(ScalarType),
}

/// A statement with its variable integers replaced by holes `·h0..·hk`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Template {
    pub id: usize,
    pub shape: Statement,
    pub holes: Vec<HoleKind>,
}

/// One concrete statement: which line it was, and the integers that fill
/// the holes of its template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instance {
    pub line_no: usize,
    pub consts: Vec<i128>,
}

/// A maximal run of consecutive statements sharing one template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AbstractSequence {
    pub template_id: usize,
    pub instances: Vec<Instance>,
    /// Set by target selection: too short to be worth a loop. Excluded
    /// sequences stay straight-line through the whole pipeline.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Abstraction {
    pub templates: Vec<Template>,
    pub sequences: Vec<AbstractSequence>,
}

impl Abstraction {
    pub fn template(&self, id: usize) -> &Template {
        &self.templates[id]
    }
}

fn hole_marker(k: usize) -> Expr {
    // The middle dot cannot appear in parsed identifiers, so markers never
    // collide with program names.
    Expr::Var { name: format!("·h{k}") }
}

fn marker_index(e: &Expr) -> Option<usize> {
    match e {
        Expr::Var { name } => name.strip_prefix("·h").and_then(|s| s.parse().ok()),
        _ => None,
    }
}

/// Orders commutative operands by structural key. No folding, no
/// reassociation — value semantics are untouched.
pub fn canonicalize(s: &Statement) -> Statement {
    fn canon(e: &Expr) -> Expr {
        match e {
            Expr::Read { array, index } => {
                Expr::Read { array: array.clone(), index: Box::new(canon(index)) }
            }
            Expr::Not(a) => Expr::Not(Box::new(canon(a))),
            Expr::Trunc { to, arg } => Expr::Trunc { to: *to, arg: Box::new(canon(arg)) },
            Expr::Zext { to, arg } => Expr::Zext { to: *to, arg: Box::new(canon(arg)) },
            Expr::Bin { op, lhs, rhs } => {
                let mut l = canon(lhs);
                let mut r = canon(rhs);
                // Literals rank last so `2 * a[0]` normalizes to `a[0] * 2`.
                let key = |e: &Expr| (matches!(e, Expr::Lit { .. }), e.clone());
                if op.is_commutative() && key(&r) < key(&l) {
                    std::mem::swap(&mut l, &mut r);
                }
                Expr::Bin { op: *op, lhs: Box::new(l), rhs: Box::new(r) }
            }
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
                ty: *ty,
                flag: Box::new(canon(flag)),
                if_zero: Box::new(canon(if_zero)),
                if_nonzero: Box::new(canon(if_nonzero)),
            },
            other => other.clone(),
        }
    }
    Statement {
        targets: s.targets.clone(),
        rhs: match &s.rhs {
            Rhs::Plain(e) => Rhs::Plain(canon(e)),
            Rhs::Wide { op, ty, args } => {
                Rhs::Wide { op: *op, ty: *ty, args: args.iter().map(canon).collect() }
            }
        },
    }
}

struct Holer {
    promote_literals: bool,
    kinds: Vec<HoleKind>,
    consts: Vec<i128>,
    /// Set when an index or shift amount is not a plain constant; such a
    /// statement cannot be rolled and is forced into a singleton sequence.
    opaque: bool,
}

impl Holer {
    fn hole(&mut self, kind: HoleKind, value: i128) -> Expr {
        let k = self.kinds.len();
        self.kinds.push(kind);
        self.consts.push(value);
        hole_marker(k)
    }

    fn index_expr(&mut self, e: &Expr) -> Expr {
        match eval_index(e, &BTreeMap::new()) {
            Some(k) => self.hole(HoleKind::Index, k as i128),
            None => {
                self.opaque = true;
                e.clone()
            }
        }
    }

    fn shift_expr(&mut self, e: &Expr) -> Expr {
        match eval_index(e, &BTreeMap::new()) {
            Some(k) => self.hole(HoleKind::Shift, k as i128),
            None => {
                self.opaque = true;
                e.clone()
            }
        }
    }

    fn value_expr(&mut self, e: &Expr) -> Expr {
        match e {
            Expr::Lit { value, ty } => {
                // Literals a signed 128-bit constant cannot hold stay part
                // of the shape.
                if self.promote_literals && *value <= i128::MAX as u128 {
                    self.hole(HoleKind::Value(*ty), *value as i128)
                } else {
                    e.clone()
                }
            }
            Expr::Read { array, index } => {
                Expr::Read { array: array.clone(), index: Box::new(self.index_expr(index)) }
            }
            Expr::Not(a) => Expr::Not(Box::new(self.value_expr(a))),
            Expr::Trunc { to, arg } => {
                Expr::Trunc { to: *to, arg: Box::new(self.value_expr(arg)) }
            }
            Expr::Zext { to, arg } => Expr::Zext { to: *to, arg: Box::new(self.value_expr(arg)) },
            Expr::Bin { op: op @ (BinOp::Shl | BinOp::Shr), lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(self.value_expr(lhs)),
                rhs: Box::new(self.shift_expr(rhs)),
            },
            Expr::Bin { op, lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(self.value_expr(lhs)),
                rhs: Box::new(self.value_expr(rhs)),
            },
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
                ty: *ty,
                flag: Box::new(self.value_expr(flag)),
                if_zero: Box::new(self.value_expr(if_zero)),
                if_nonzero: Box::new(self.value_expr(if_nonzero)),
            },
            other => other.clone(),
        }
    }

    fn statement(&mut self, s: &Statement) -> Statement {
        // Holes are numbered targets-first, then rhs operands in pre-order.
        let targets = s
            .targets
            .iter()
            .map(|t| match t {
                Lvalue::Local { name } => Lvalue::Local { name: name.clone() },
                Lvalue::Elem { array, index } => Lvalue::Elem {
                    array: array.clone(),
                    index: Box::new(self.index_expr(index)),
                },
            })
            .collect();
        let rhs = match &s.rhs {
            Rhs::Plain(e) => Rhs::Plain(self.value_expr(e)),
            Rhs::Wide { op, ty, args } => Rhs::Wide {
                op: *op,
                ty: *ty,
                args: args.iter().map(|a| self.value_expr(a)).collect(),
            },
        };
        Statement { targets, rhs }
    }
}

fn abstract_statement(
    canonical: &Statement,
    promote_literals: bool,
) -> (Statement, Vec<HoleKind>, Vec<i128>, bool) {
    let mut h =
        Holer { promote_literals, kinds: Vec::new(), consts: Vec::new(), opaque: false };
    let shape = h.statement(canonical);
    (shape, h.kinds, h.consts, h.opaque)
}

/// Groups the statements of a flat program into abstract sequences: maximal
/// runs of consecutive statements whose shapes match. Pure and
/// order-preserving; every statement lands in exactly one sequence.
pub fn abstract_program(p: &Program) -> Abstraction {
    // First pass: full abstraction (literals promoted) decides the runs.
    let full: Vec<(Statement, Vec<HoleKind>, Vec<i128>, bool)> = p
        .body
        .iter()
        .map(|s| abstract_statement(&canonicalize(s), true))
        .collect();

    let mut runs: Vec<(usize, usize)> = Vec::new(); // [start, end)
    let mut i = 0;
    while i < full.len() {
        let mut j = i + 1;
        if !full[i].3 {
            while j < full.len()
                && !full[j].3
                && full[j].0 == full[i].0
                && full[j].1 == full[i].1
            {
                j += 1;
            }
        }
        runs.push((i, j));
        i = j;
    }

    let mut templates: Vec<Template> = Vec::new();
    let mut by_shape: BTreeMap<(Statement, Vec<HoleKind>), usize> = BTreeMap::new();
    let mut sequences = Vec::new();
    for (start, end) in runs {
        // Singleton runs re-abstract with literals kept concrete.
        let run: Vec<(Statement, Vec<HoleKind>, Vec<i128>, bool)> = if end - start >= 2 {
            full[start..end].to_vec()
        } else {
            vec![abstract_statement(&canonicalize(&p.body[start]), false)]
        };
        let key = (run[0].0.clone(), run[0].1.clone());
        let template_id = *by_shape.entry(key).or_insert_with(|| {
            let id = templates.len();
            templates.push(Template { id, shape: run[0].0.clone(), holes: run[0].1.clone() });
            id
        });
        sequences.push(AbstractSequence {
            template_id,
            instances: run
                .into_iter()
                .enumerate()
                .map(|(k, (_, _, consts, _))| Instance { line_no: start + k, consts })
                .collect(),
            excluded: false,
        });
    }
    Abstraction { templates, sequences }
}

/// Fills a template's holes with concrete integers, reproducing a canonical
/// statement exactly.
pub fn substitute(t: &Template, consts: &[i128]) -> Statement {
    assert_eq!(consts.len(), t.holes.len(), "const vector must fill every hole");
    fill_statement(&t.shape, &t.holes, &mut |k| match t.holes[k] {
        HoleKind::Index | HoleKind::Shift => Expr::index_lit(consts[k] as i64),
        HoleKind::Value(ty) => Expr::Lit { value: consts[k] as u128 & ty.mask(), ty },
    })
}

/// Fills holes via an arbitrary materializer — the loop-lowering stage
/// passes affine counter expressions here instead of plain literals.
pub fn fill_statement(
    shape: &Statement,
    holes: &[HoleKind],
    materialize: &mut impl FnMut(usize) -> Expr,
) -> Statement {
    fn fill(e: &Expr, m: &mut impl FnMut(usize) -> Expr) -> Expr {
        if let Some(k) = marker_index(e) {
            return m(k);
        }
        match e {
            Expr::Read { array, index } => {
                Expr::Read { array: array.clone(), index: Box::new(fill(index, m)) }
            }
            Expr::Not(a) => Expr::Not(Box::new(fill(a, m))),
            Expr::Trunc { to, arg } => Expr::Trunc { to: *to, arg: Box::new(fill(arg, m)) },
            Expr::Zext { to, arg } => Expr::Zext { to: *to, arg: Box::new(fill(arg, m)) },
            Expr::Bin { op, lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(fill(lhs, m)),
                rhs: Box::new(fill(rhs, m)),
            },
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
                ty: *ty,
                flag: Box::new(fill(flag, m)),
                if_zero: Box::new(fill(if_zero, m)),
                if_nonzero: Box::new(fill(if_nonzero, m)),
            },
            other => other.clone(),
        }
    }
    let _ = holes;
    Statement {
        targets: shape
            .targets
            .iter()
            .map(|t| match t {
                Lvalue::Local { name } => Lvalue::Local { name: name.clone() },
                Lvalue::Elem { array, index } => Lvalue::Elem {
                    array: array.clone(),
                    index: Box::new(fill(index, materialize)),
                },
            })
            .collect(),
        rhs: match &shape.rhs {
            Rhs::Plain(e) => Rhs::Plain(fill(e, materialize)),
            Rhs::Wide { op, ty, args } => Rhs::Wide {
                op: *op,
                ty: *ty,
                args: args.iter().map(|a| fill(a, materialize)).collect(),
            },
        },
    }
}
