//! Loop-level rewrites behind hard legality gates.
//!
//! Every transform either returns a rewritten program that validates, or a
//! rejection explaining which gate failed. Gates are deliberately
//! conservative: an access pattern the distance test cannot enumerate
//! exactly blocks reordering transforms rather than risking a semantics
//! change. Callers re-certify every accepted result against the reference
//! interpreter anyway; the gates exist so that rejections carry a reason
//! instead of surfacing as equivalence failures.

use super::analyze::{self, bit_twiddled, loop_shape, Staticizer, StaticizeError};
use crate::ir::*;
use crate::oracle::interp::rename_arrays_node;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Swap a perfectly nested loop pair.
    Interchange { outer: String, inner: String },
    /// Grow a loop's trip count; the added iterations are predicated off.
    Pad { label: String, new_trip: i64 },
    /// Merge two adjacent loops over the same iteration space.
    Fuse { first: String, second: String },
    /// Sink statements surrounding an inner loop into it, predicated on the
    /// first/last inner iteration, leaving a perfect nest.
    Perfectize { label: String },
    /// Replace a data-dependent loop bound with its declared maximum and
    /// predicated writes.
    BranchEliminate { label: String },
    /// Rewrite multiplies by power-of-two literals into shifts within one
    /// statement (flattened pre-order position).
    StrengthReduce { stmt: usize },
    /// Split a loop into a stride loop over tiles and an intra-tile loop.
    Tile { label: String, factor: i64 },
    /// Replace isomorphic top-level loops with calls to one shared function.
    Outline { group: Vec<String> },
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Transform::Interchange { outer, inner } => write!(f, "interchange({outer},{inner})"),
            Transform::Pad { label, new_trip } => write!(f, "pad({label},{new_trip})"),
            Transform::Fuse { first, second } => write!(f, "fuse({first},{second})"),
            Transform::Perfectize { label } => write!(f, "perfectize({label})"),
            Transform::BranchEliminate { label } => write!(f, "branch_eliminate({label})"),
            Transform::StrengthReduce { stmt } => write!(f, "strength_reduce(#{stmt})"),
            Transform::Tile { label, factor } => write!(f, "tile({label},{factor})"),
            Transform::Outline { group } => write!(f, "outline({})", group.join("+")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("no loop labeled `{0}`")]
    UnknownLoop(String),
    #[error("no statement at position {0}")]
    UnknownStmt(usize),
    #[error("{transform} rejected: {reason}")]
    Illegal { transform: String, reason: String },
    #[error(transparent)]
    Staticize(#[from] StaticizeError),
    #[error(transparent)]
    Invalid(#[from] ValidateError),
}

fn illegal(t: &Transform, reason: impl Into<String>) -> TransformError {
    TransformError::Illegal { transform: t.to_string(), reason: reason.into() }
}

/// Applies one transform, validating the result. The input program is never
/// modified on failure.
pub fn apply_transform(
    s: &StructuredProgram,
    t: &Transform,
) -> Result<StructuredProgram, TransformError> {
    let mut out = s.clone();
    match t {
        Transform::Interchange { outer, inner } => interchange(&mut out, t, outer, inner)?,
        Transform::Pad { label, new_trip } => pad(&mut out, t, label, *new_trip)?,
        Transform::Fuse { first, second } => fuse(&mut out, t, first, second)?,
        Transform::Perfectize { label } => perfectize(&mut out, t, label)?,
        Transform::BranchEliminate { label } => branch_eliminate(&mut out, t, label)?,
        Transform::StrengthReduce { stmt } => strength_reduce(&mut out, *stmt)?,
        Transform::Tile { label, factor } => tile(&mut out, t, label, *factor)?,
        Transform::Outline { group } => outline(&mut out, t, group)?,
    }
    validate_structured(&out)?;
    Ok(out)
}

// ---------------------------------------------------------------- plumbing

/// Calls `f` on every body vector (program body and loop bodies, pre-order)
/// until it returns `Some`.
fn with_body_mut<R>(
    nodes: &mut Vec<Node>,
    f: &mut impl FnMut(&mut Vec<Node>) -> Option<R>,
) -> Option<R> {
    if let Some(r) = f(nodes) {
        return Some(r);
    }
    for n in nodes {
        if let Node::For(l) = n {
            if let Some(r) = with_body_mut(&mut l.body, f) {
                return Some(r);
            }
        }
    }
    None
}

fn find_loop<'a>(nodes: &'a [Node], label: &str) -> Option<&'a ForLoop> {
    for n in nodes {
        if let Node::For(l) = n {
            if l.label == label {
                return Some(l);
            }
            if let Some(hit) = find_loop(&l.body, label) {
                return Some(hit);
            }
        }
    }
    None
}

/// Every identifier already claimed in the program, for fresh-name picks.
fn used_names(s: &StructuredProgram) -> BTreeSet<String> {
    let mut names: BTreeSet<String> = BTreeSet::new();
    for p in &s.params {
        names.insert(p.name.clone());
    }
    for (n, _) in &s.locals {
        names.insert(n.clone());
    }
    for a in &s.local_arrays {
        names.insert(a.name.clone());
    }
    for f in &s.functions {
        names.insert(f.name.clone());
    }
    fn walk(nodes: &[Node], names: &mut BTreeSet<String>) {
        for n in nodes {
            if let Node::For(l) = n {
                names.insert(l.label.clone());
                names.insert(l.var.clone());
                walk(&l.body, names);
            }
        }
    }
    walk(&s.body, &mut names);
    for f in &s.functions {
        walk(&f.body, &mut names);
    }
    names
}

fn uniq_name(base: &str, used: &mut BTreeSet<String>) -> String {
    let mut candidate = base.to_string();
    let mut k = 0;
    while used.contains(&candidate) {
        candidate = format!("{base}{k}");
        k += 1;
    }
    used.insert(candidate.clone());
    candidate
}

/// Replaces counter `from` throughout a node. The replacement closure sees
/// the occurrence's declared width and whether it sits in index position
/// (array subscripts, shift amounts), where widths are nominal.
fn subst_counter_node(
    n: &Node,
    from: &str,
    to: &dyn Fn(ScalarType, bool) -> Expr,
) -> Node {
    fn subst(e: &Expr, from: &str, to: &dyn Fn(ScalarType, bool) -> Expr, idx: bool) -> Expr {
        match e {
            Expr::LoopVar { name, ty } if name == from => to(*ty, idx),
            Expr::Lit { .. } | Expr::Var { .. } | Expr::LoopVar { .. } => e.clone(),
            Expr::Read { array, index } => Expr::Read {
                array: array.clone(),
                index: Box::new(subst(index, from, to, true)),
            },
            Expr::Not(a) => Expr::Not(Box::new(subst(a, from, to, idx))),
            Expr::Trunc { to: ty, arg } => {
                Expr::Trunc { to: *ty, arg: Box::new(subst(arg, from, to, idx)) }
            }
            Expr::Zext { to: ty, arg } => {
                Expr::Zext { to: *ty, arg: Box::new(subst(arg, from, to, idx)) }
            }
            Expr::Bin { op: op @ (BinOp::Shl | BinOp::Shr), lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(subst(lhs, from, to, idx)),
                rhs: Box::new(subst(rhs, from, to, true)),
            },
            Expr::Bin { op, lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(subst(lhs, from, to, idx)),
                rhs: Box::new(subst(rhs, from, to, idx)),
            },
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
                ty: *ty,
                flag: Box::new(subst(flag, from, to, idx)),
                if_zero: Box::new(subst(if_zero, from, to, idx)),
                if_nonzero: Box::new(subst(if_nonzero, from, to, idx)),
            },
        }
    }
    match n {
        Node::Stmt(s) => {
            let targets = s
                .targets
                .iter()
                .map(|t| match t {
                    Lvalue::Local { name } => Lvalue::local(name),
                    Lvalue::Elem { array, index } => Lvalue::Elem {
                        array: array.clone(),
                        index: Box::new(subst(index, from, to, true)),
                    },
                })
                .collect();
            let rhs = match &s.rhs {
                Rhs::Plain(e) => Rhs::Plain(subst(e, from, to, false)),
                Rhs::Wide { op, ty, args } => Rhs::Wide {
                    op: *op,
                    ty: *ty,
                    args: args.iter().map(|a| subst(a, from, to, false)).collect(),
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
            body: l.body.iter().map(|b| subst_counter_node(b, from, to)).collect(),
        }),
        Node::Call { .. } => n.clone(),
    }
}

// ---------------------------------------------------------- dependence data

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Access {
    Read,
    Write,
}

/// Array accesses of a flat statement list with their index expressions.
fn body_accesses(nodes: &[Node]) -> Vec<(String, Expr, Access)> {
    let mut out = Vec::new();
    for n in nodes {
        let Node::Stmt(s) = n else { continue };
        for e in s.operand_exprs() {
            e.walk(&mut |sub| {
                if let Expr::Read { array, index } = sub {
                    out.push((array.clone(), (**index).clone(), Access::Read));
                }
            });
        }
        for t in &s.targets {
            if let Lvalue::Elem { array, index } = t {
                out.push((array.clone(), (**index).clone(), Access::Write));
            }
        }
    }
    out
}

/// True when the index only involves the given counters (and is bit-op free)
/// so exhaustive evaluation over their values is exact.
fn index_enumerable(e: &Expr, counters: &[&str]) -> bool {
    if bit_twiddled(e) {
        return false;
    }
    let mut ok = true;
    e.walk(&mut |sub| match sub {
        Expr::Var { .. } => ok = false,
        Expr::LoopVar { name, .. } if !counters.contains(&name.as_str()) => ok = false,
        _ => {}
    });
    ok
}

// --------------------------------------------------------------- transforms

fn interchange(
    out: &mut StructuredProgram,
    t: &Transform,
    outer: &str,
    inner: &str,
) -> Result<(), TransformError> {
    // Gate checks run against the found nest before any mutation.
    let outer_loop = find_loop(&out.body, outer)
        .ok_or_else(|| TransformError::UnknownLoop(outer.into()))?;
    let [Node::For(inner_loop)] = &outer_loop.body[..] else {
        return Err(illegal(t, "not a perfect two-level nest"));
    };
    if inner_loop.label != inner {
        return Err(TransformError::UnknownLoop(inner.into()));
    }
    if !inner_loop.body.iter().all(|n| matches!(n, Node::Stmt(_))) {
        return Err(illegal(t, "nest is deeper than two levels"));
    }
    let (Some(_), Some(_)) = (outer_loop.const_trip_count(), inner_loop.const_trip_count())
    else {
        return Err(illegal(t, "variable bound; eliminate branches first"));
    };
    let oi = outer_loop.iter_values();
    let ij = inner_loop.iter_values();
    if oi.len() * ij.len() > 4096 {
        return Err(illegal(t, "iteration space too large to certify"));
    }

    // A dependence from (i1,j1) to a later (i2,j2) with j2 < j1 would run
    // backwards after the swap.
    let accesses = body_accesses(&inner_loop.body);
    let counters = [outer_loop.var.as_str(), inner_loop.var.as_str()];
    let mut cells: BTreeMap<(String, i64), Vec<(i64, i64, Access)>> = BTreeMap::new();
    for (array, index, kind) in &accesses {
        if !index_enumerable(index, &counters) {
            if *kind == Access::Write {
                return Err(illegal(t, format!("write to `{array}` is not exactly analyzable")));
            }
            // Reads of unanalyzable cells cannot conflict with any write we
            // admit (all admitted writes are enumerated), so conservatively
            // reject when such a write exists on the same array.
            if accesses.iter().any(|(a2, _, k2)| a2 == array && *k2 == Access::Write) {
                return Err(illegal(t, format!("access to `{array}` is not exactly analyzable")));
            }
            continue;
        }
        for &i in &oi {
            for &j in &ij {
                let env: IndexEnv = [
                    (outer_loop.var.clone(), i),
                    (inner_loop.var.clone(), j),
                ]
                .into_iter()
                .collect();
                let Some(v) = eval_index(index, &env) else {
                    return Err(illegal(t, format!("index into `{array}` does not evaluate")));
                };
                cells.entry((array.clone(), v)).or_default().push((i, j, *kind));
            }
        }
    }
    for points in cells.values() {
        for (a_idx, &(i1, j1, k1)) in points.iter().enumerate() {
            for &(i2, j2, k2) in &points[a_idx + 1..] {
                if k1 == Access::Read && k2 == Access::Read {
                    continue;
                }
                // Order the pair by original execution order.
                let ((fi, fj), (si, sj)) =
                    if (i1, j1) <= (i2, j2) { ((i1, j1), (i2, j2)) } else { ((i2, j2), (i1, j1)) };
                if si > fi && sj < fj {
                    return Err(illegal(t, "dependence direction would reverse"));
                }
            }
        }
    }

    // Swap headers, keeping each label attached to its header.
    with_body_mut(&mut out.body, &mut |nodes| {
        let pos = nodes.iter().position(
            |n| matches!(n, Node::For(l) if l.label == outer),
        )?;
        let Node::For(mut o) = nodes.remove(pos) else { unreachable!() };
        let Node::For(mut i) = o.body.pop().unwrap() else { unreachable!() };
        o.body = std::mem::take(&mut i.body);
        i.body = vec![Node::For(o)];
        nodes.insert(pos, Node::For(i));
        Some(())
    })
    .ok_or_else(|| TransformError::UnknownLoop(outer.into()))?;
    Ok(())
}

fn pad(
    out: &mut StructuredProgram,
    t: &Transform,
    label: &str,
    new_trip: i64,
) -> Result<(), TransformError> {
    let l = find_loop(&out.body, label)
        .ok_or_else(|| TransformError::UnknownLoop(label.into()))?;
    let Some(trip) = l.const_trip_count() else {
        return Err(illegal(t, "variable bound; eliminate branches first"));
    };
    if l.step <= 0 || l.start < 0 {
        return Err(illegal(t, "descending or negative-origin loop"));
    }
    if new_trip <= trip {
        return Err(illegal(t, format!("new trip {new_trip} does not grow trip {trip}")));
    }
    let old_stop = match l.stop {
        Bound::Const(c) => c,
        Bound::Var { .. } => unreachable!(),
    };

    let mut st = Staticizer::new(&out.params, &out.locals);
    let empty = BTreeSet::new();
    let new_stop = l.start + new_trip * l.step;
    let mut outcome: Result<(), TransformError> = Err(TransformError::UnknownLoop(label.into()));
    with_body_mut(&mut out.body, &mut |nodes| {
        let pos = nodes.iter().position(
            |n| matches!(n, Node::For(l) if l.label == label),
        )?;
        let predicated = {
            let Node::For(l) = &mut nodes[pos] else { unreachable!() };
            l.stop = Bound::Const(new_stop);
            st.predicate_loop(
                l,
                Expr::lit(old_stop as u128, ScalarType::U64),
                ScalarType::U64,
                &empty,
                &empty,
            )
        };
        match predicated {
            Ok(inits) => {
                // Guarded locals read their previous value on padded
                // iterations, so give them one.
                let mut at = pos;
                let mut seen = BTreeSet::new();
                for (name, ty) in inits {
                    if !seen.insert(name.clone()) {
                        continue;
                    }
                    nodes.insert(
                        at,
                        Node::Stmt(Statement::assign(Lvalue::local(&name), Expr::lit(0, ty))),
                    );
                    at += 1;
                }
                outcome = Ok(());
            }
            Err(e) => outcome = Err(e.into()),
        }
        Some(())
    });
    outcome?;
    out.locals.extend(st.new_locals);
    Ok(())
}

fn fuse(
    out: &mut StructuredProgram,
    t: &Transform,
    first: &str,
    second: &str,
) -> Result<(), TransformError> {
    let l1 = find_loop(&out.body, first)
        .ok_or_else(|| TransformError::UnknownLoop(first.into()))?;
    let l2 = find_loop(&out.body, second)
        .ok_or_else(|| TransformError::UnknownLoop(second.into()))?;
    let (Some(_), Some(_)) = (l1.const_trip_count(), l2.const_trip_count()) else {
        return Err(illegal(t, "variable bound; eliminate branches first"));
    };
    if (l1.start, &l1.stop, l1.step) != (l2.start, &l2.stop, l2.step) {
        return Err(illegal(t, "iteration spaces differ (pad first)"));
    }
    let values = l1.iter_values();
    if values.len() > 512 {
        return Err(illegal(t, "iteration space too large to certify"));
    }

    // After fusion, first-loop iteration i and second-loop iteration j share
    // hardware order i <= j only; any conflicting pair with i > j flips.
    let acc1 = body_accesses(&l1.body);
    let acc2_raw = body_accesses(&l2.body);
    let c1 = [l1.var.as_str()];
    let c2 = [l2.var.as_str()];
    let arrays2: BTreeSet<&String> = acc2_raw.iter().map(|(a, _, _)| a).collect();
    for (array, index, kind) in &acc1 {
        if !arrays2.contains(array) {
            continue;
        }
        let writes_anywhere = *kind == Access::Write
            || acc2_raw.iter().any(|(a, _, k)| a == array && *k == Access::Write);
        if !writes_anywhere {
            continue;
        }
        if !index_enumerable(index, &c1) {
            return Err(illegal(t, format!("access to `{array}` is not exactly analyzable")));
        }
        for (array2, index2, kind2) in &acc2_raw {
            if array2 != array || (*kind == Access::Read && *kind2 == Access::Read) {
                continue;
            }
            if !index_enumerable(index2, &c2) {
                return Err(illegal(t, format!("access to `{array}` is not exactly analyzable")));
            }
            for &i in &values {
                for &j in &values {
                    if i <= j {
                        continue;
                    }
                    let e1: IndexEnv = [(l1.var.clone(), i)].into_iter().collect();
                    let e2: IndexEnv = [(l2.var.clone(), j)].into_iter().collect();
                    if eval_index(index, &e1) == eval_index(index2, &e2) {
                        return Err(illegal(
                            t,
                            format!("dependence on `{array}` crosses the fusion point backwards"),
                        ));
                    }
                }
            }
        }
    }

    // Rename second-body locals that collide with first-body locals, then
    // splice.
    let written = |nodes: &[Node]| -> BTreeSet<String> {
        let mut w = BTreeSet::new();
        for n in nodes {
            if let Node::Stmt(s) = n {
                for tg in &s.targets {
                    if let Lvalue::Local { name } = tg {
                        w.insert(name.clone());
                    }
                }
            }
        }
        w
    };
    let collisions: Vec<String> =
        written(&l1.body).intersection(&written(&l2.body)).cloned().collect();
    let var1 = l1.var.clone();
    let var2 = l2.var.clone();

    let mut used = used_names(out);
    let mut local_types: BTreeMap<String, ScalarType> = out.locals.iter().cloned().collect();
    let mut renames: BTreeMap<String, String> = BTreeMap::new();
    for name in collisions {
        let fresh = uniq_name(&format!("{name}_f"), &mut used);
        if let Some(ty) = local_types.get(&name).copied() {
            out.locals.push((fresh.clone(), ty));
            local_types.insert(fresh.clone(), ty);
        }
        renames.insert(name, fresh);
    }

    let spliced = with_body_mut(&mut out.body, &mut |nodes| {
        let p1 = nodes.iter().position(|n| matches!(n, Node::For(l) if l.label == first))?;
        let p2 = nodes.iter().position(|n| matches!(n, Node::For(l) if l.label == second))?;
        if p2 != p1 + 1 {
            return Some(Err(illegal(t, "loops are not adjacent")));
        }
        let Node::For(mut l2) = nodes.remove(p2) else { unreachable!() };
        let Node::For(l1) = &mut nodes[p1] else { unreachable!() };
        let counter = |ty: ScalarType, _: bool| Expr::LoopVar { name: var1.clone(), ty };
        for n in std::mem::take(&mut l2.body) {
            let mut n = subst_counter_node(&n, &var2, &counter);
            n = rename_locals_node(&n, &renames);
            l1.body.push(n);
        }
        Some(Ok(()))
    });
    match spliced {
        Some(r) => r,
        // Both labels exist but in different bodies.
        None => Err(illegal(t, "loops are not adjacent")),
    }
}

fn rename_locals_node(n: &Node, renames: &BTreeMap<String, String>) -> Node {
    fn fix_expr(e: &Expr, renames: &BTreeMap<String, String>) -> Expr {
        match e {
            Expr::Var { name } => match renames.get(name) {
                Some(r) => Expr::var(r),
                None => e.clone(),
            },
            Expr::Lit { .. } | Expr::LoopVar { .. } => e.clone(),
            Expr::Read { array, index } => Expr::Read {
                array: array.clone(),
                index: Box::new(fix_expr(index, renames)),
            },
            Expr::Not(a) => Expr::Not(Box::new(fix_expr(a, renames))),
            Expr::Trunc { to, arg } => {
                Expr::Trunc { to: *to, arg: Box::new(fix_expr(arg, renames)) }
            }
            Expr::Zext { to, arg } => {
                Expr::Zext { to: *to, arg: Box::new(fix_expr(arg, renames)) }
            }
            Expr::Bin { op, lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(fix_expr(lhs, renames)),
                rhs: Box::new(fix_expr(rhs, renames)),
            },
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
                ty: *ty,
                flag: Box::new(fix_expr(flag, renames)),
                if_zero: Box::new(fix_expr(if_zero, renames)),
                if_nonzero: Box::new(fix_expr(if_nonzero, renames)),
            },
        }
    }
    match n {
        Node::Stmt(s) => {
            let targets = s
                .targets
                .iter()
                .map(|tg| match tg {
                    Lvalue::Local { name } => {
                        Lvalue::local(renames.get(name).map(String::as_str).unwrap_or(name))
                    }
                    Lvalue::Elem { array, index } => Lvalue::Elem {
                        array: array.clone(),
                        index: Box::new(fix_expr(index, renames)),
                    },
                })
                .collect();
            let rhs = match &s.rhs {
                Rhs::Plain(e) => Rhs::Plain(fix_expr(e, renames)),
                Rhs::Wide { op, ty, args } => Rhs::Wide {
                    op: *op,
                    ty: *ty,
                    args: args.iter().map(|a| fix_expr(a, renames)).collect(),
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
            body: l.body.iter().map(|b| rename_locals_node(b, renames)).collect(),
        }),
        Node::Call { .. } => n.clone(),
    }
}

fn perfectize(
    out: &mut StructuredProgram,
    t: &Transform,
    label: &str,
) -> Result<(), TransformError> {
    let l = find_loop(&out.body, label)
        .ok_or_else(|| TransformError::UnknownLoop(label.into()))?;
    let fors: Vec<usize> = l
        .body
        .iter()
        .enumerate()
        .filter_map(|(k, n)| matches!(n, Node::For(_)).then_some(k))
        .collect();
    let [at] = fors[..] else {
        return Err(illegal(t, "body does not contain exactly one inner loop"));
    };
    if l.body.len() == 1 {
        return Err(illegal(t, "nest is already perfect"));
    }
    let Node::For(inner) = &l.body[at] else { unreachable!() };
    if !inner.body.iter().all(|n| matches!(n, Node::Stmt(_))) {
        return Err(illegal(t, "nest is deeper than two levels"));
    }
    let Some(trip) = inner.const_trip_count() else {
        return Err(illegal(t, "variable bound; eliminate branches first"));
    };
    if inner.step <= 0 || inner.start < 0 {
        return Err(illegal(t, "descending or negative-origin inner loop"));
    }
    for (k, n) in l.body.iter().enumerate() {
        if k == at {
            continue;
        }
        let Node::Stmt(s) = n else { unreachable!() };
        let plain_elem = matches!(s.rhs, Rhs::Plain(_))
            && s.targets.len() == 1
            && matches!(s.targets[0], Lvalue::Elem { .. });
        if !plain_elem {
            return Err(illegal(t, "surrounding statement does not write a single array cell"));
        }
    }

    // Sink: writes before the loop fire only on the first inner iteration,
    // writes after it only on the last. The selects read and discard their
    // values on every other iteration, which is side-effect free.
    let first_stop = inner.start + inner.step;
    let last_value = inner.start + (trip - 1) * inner.step;
    let inner_var = inner.var.clone();

    let mut st = Staticizer::new(&out.params, &out.locals);
    // Each pair is (borrow flag, discarded difference).
    let is_first = (
        st.fresh_local("first", ScalarType::U1),
        st.fresh_local("pad", ScalarType::U64),
    );
    let is_before_last = (
        st.fresh_local("notlast", ScalarType::U1),
        st.fresh_local("pad", ScalarType::U64),
    );
    let guards = |var: &str| {
        let counter = || Expr::LoopVar { name: var.into(), ty: ScalarType::U64 };
        vec![
            Node::Stmt(Statement::wide(
                Lvalue::local(&is_first.1),
                Lvalue::local(&is_first.0),
                WideOp::SubBorrow,
                ScalarType::U64,
                vec![
                    Expr::lit(0, ScalarType::U1),
                    counter(),
                    Expr::lit(first_stop as u128, ScalarType::U64),
                ],
            )),
            Node::Stmt(Statement::wide(
                Lvalue::local(&is_before_last.1),
                Lvalue::local(&is_before_last.0),
                WideOp::SubBorrow,
                ScalarType::U64,
                vec![
                    Expr::lit(0, ScalarType::U1),
                    counter(),
                    Expr::lit(last_value as u128, ScalarType::U64),
                ],
            )),
        ]
    };

    let predicated = |s: &Statement, env: &TypeEnv, sunk_from_before: bool| {
        let Lvalue::Elem { array, index } = &s.targets[0] else { unreachable!() };
        let Rhs::Plain(rhs) = &s.rhs else { unreachable!() };
        let old = Expr::read(array, (**index).clone());
        let ty = expr_width(rhs, env).unwrap_or(ScalarType::U64);
        let sel = if sunk_from_before {
            Expr::Cmov {
                ty,
                flag: Box::new(Expr::var(&is_first.0)),
                if_zero: Box::new(old),
                if_nonzero: Box::new(rhs.clone()),
            }
        } else {
            Expr::Cmov {
                ty,
                flag: Box::new(Expr::var(&is_before_last.0)),
                if_zero: Box::new(rhs.clone()),
                if_nonzero: Box::new(old),
            }
        };
        Node::Stmt(Statement::assign(s.targets[0].clone(), sel))
    };

    let env = out.type_env();
    let mut found = false;
    with_body_mut(&mut out.body, &mut |nodes| {
        for n in nodes.iter_mut() {
            let Node::For(outer) = n else { continue };
            if outer.label != label {
                continue;
            }
            let body = std::mem::take(&mut outer.body);
            let mut pre: Vec<Node> = Vec::new();
            let mut post: Vec<Node> = Vec::new();
            let mut inner_loop = None;
            for (k, node) in body.into_iter().enumerate() {
                match node {
                    Node::For(f) => inner_loop = Some(f),
                    stmt => {
                        let Node::Stmt(s) = &stmt else { unreachable!() };
                        let sunk = predicated(s, &env, k < at);
                        if k < at {
                            pre.push(sunk);
                        } else {
                            post.push(sunk);
                        }
                    }
                }
            }
            let mut inner_loop = inner_loop.unwrap();
            let mut new_body = guards(&inner_var);
            new_body.extend(pre);
            new_body.append(&mut inner_loop.body);
            new_body.extend(post);
            inner_loop.body = new_body;
            outer.body = vec![Node::For(inner_loop)];
            found = true;
            return Some(());
        }
        None
    });
    if !found {
        return Err(TransformError::UnknownLoop(label.into()));
    }
    out.locals.extend(st.new_locals);
    Ok(())
}

fn branch_eliminate(
    out: &mut StructuredProgram,
    t: &Transform,
    label: &str,
) -> Result<(), TransformError> {
    let l = find_loop(&out.body, label)
        .ok_or_else(|| TransformError::UnknownLoop(label.into()))?;
    if matches!(l.stop, Bound::Const(_)) {
        return Err(illegal(t, "loop bound is already constant"));
    }
    *out = analyze::staticize_bounds(out)?;
    Ok(())
}

fn strength_reduce(out: &mut StructuredProgram, stmt: usize) -> Result<(), TransformError> {
    fn reduce(e: &Expr, changed: &mut bool) -> Expr {
        match e {
            // Index positions keep their arithmetic form so downstream
            // analyses still see affine expressions.
            Expr::Read { .. } | Expr::Lit { .. } | Expr::Var { .. } | Expr::LoopVar { .. } => {
                e.clone()
            }
            Expr::Not(a) => Expr::Not(Box::new(reduce(a, changed))),
            Expr::Trunc { to, arg } => {
                Expr::Trunc { to: *to, arg: Box::new(reduce(arg, changed)) }
            }
            Expr::Zext { to, arg } => Expr::Zext { to: *to, arg: Box::new(reduce(arg, changed)) },
            Expr::Bin { op: op @ (BinOp::Shl | BinOp::Shr), lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(reduce(lhs, changed)),
                rhs: rhs.clone(),
            },
            Expr::Bin { op: BinOp::Mul, lhs, rhs } => {
                let l = reduce(lhs, changed);
                let r = reduce(rhs, changed);
                let shift_of = |v: u128| v.is_power_of_two().then(|| v.trailing_zeros() as i64);
                if let Expr::Lit { value, .. } = &r {
                    if let Some(sh) = shift_of(*value) {
                        *changed = true;
                        return shifted(l, sh);
                    }
                }
                if let Expr::Lit { value, .. } = &l {
                    if let Some(sh) = shift_of(*value) {
                        *changed = true;
                        return shifted(r, sh);
                    }
                }
                Expr::Bin { op: BinOp::Mul, lhs: Box::new(l), rhs: Box::new(r) }
            }
            Expr::Bin { op, lhs, rhs } => Expr::Bin {
                op: *op,
                lhs: Box::new(reduce(lhs, changed)),
                rhs: Box::new(reduce(rhs, changed)),
            },
            Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
                ty: *ty,
                flag: Box::new(reduce(flag, changed)),
                if_zero: Box::new(reduce(if_zero, changed)),
                if_nonzero: Box::new(reduce(if_nonzero, changed)),
            },
        }
    }
    fn shifted(operand: Expr, amount: i64) -> Expr {
        if amount == 0 {
            operand
        } else {
            Expr::bin(BinOp::Shl, operand, Expr::index_lit(amount))
        }
    }

    fn visit(nodes: &mut [Node], pos: &mut usize, target: usize) -> Option<Result<(), String>> {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    if *pos == target {
                        let mut changed = false;
                        let rhs = match &s.rhs {
                            Rhs::Plain(e) => Rhs::Plain(reduce(e, &mut changed)),
                            Rhs::Wide { op, ty, args } => Rhs::Wide {
                                op: *op,
                                ty: *ty,
                                args: args.iter().map(|a| reduce(a, &mut changed)).collect(),
                            },
                        };
                        if !changed {
                            return Some(Err("no power-of-two multiply to reduce".into()));
                        }
                        s.rhs = rhs;
                        return Some(Ok(()));
                    }
                    *pos += 1;
                }
                Node::For(l) => {
                    if let Some(r) = visit(&mut l.body, pos, target) {
                        return Some(r);
                    }
                }
                Node::Call { .. } => {
                    if *pos == target {
                        return Some(Err("position names a call, not a statement".into()));
                    }
                    *pos += 1;
                }
            }
        }
        None
    }

    let mut pos = 0;
    match visit(&mut out.body, &mut pos, stmt) {
        Some(Ok(())) => Ok(()),
        Some(Err(reason)) => {
            Err(illegal(&Transform::StrengthReduce { stmt }, reason))
        }
        None => Err(TransformError::UnknownStmt(stmt)),
    }
}

fn tile(
    out: &mut StructuredProgram,
    t: &Transform,
    label: &str,
    factor: i64,
) -> Result<(), TransformError> {
    let l = find_loop(&out.body, label)
        .ok_or_else(|| TransformError::UnknownLoop(label.into()))?;
    let Some(trip) = l.const_trip_count() else {
        return Err(illegal(t, "variable bound; eliminate branches first"));
    };
    if factor < 2 || factor >= trip {
        return Err(illegal(t, format!("factor {factor} outside 2..trip")));
    }
    if trip % factor != 0 {
        return Err(illegal(t, format!("factor {factor} does not divide trip {trip}")));
    }

    let mut used = used_names(out);
    let lo = uniq_name(&format!("{label}o"), &mut used);
    let li = uniq_name(&format!("{label}i"), &mut used);
    let vo = uniq_name(&format!("{}o", l.var), &mut used);
    let vi = uniq_name(&format!("{}i", l.var), &mut used);

    with_body_mut(&mut out.body, &mut |nodes| {
        let pos = nodes.iter().position(
            |n| matches!(n, Node::For(l) if l.label == label),
        )?;
        let Node::For(old) = nodes.remove(pos) else { unreachable!() };
        // v = start + step*(vo*factor + vi), enumerating the same sequence.
        let flat = Expr::bin(
            BinOp::Add,
            Expr::bin(
                BinOp::Mul,
                Expr::LoopVar { name: vo.clone(), ty: ScalarType::U64 },
                Expr::index_lit(factor),
            ),
            Expr::LoopVar { name: vi.clone(), ty: ScalarType::U64 },
        );
        let v_expr = if old.start == 0 && old.step == 1 {
            flat
        } else {
            Expr::bin(
                BinOp::Add,
                Expr::index_lit(old.start),
                Expr::bin(BinOp::Mul, flat, Expr::index_lit(old.step)),
            )
        };
        let replacement = |ty: ScalarType, in_index: bool| {
            if in_index || ty == ScalarType::U64 {
                v_expr.clone()
            } else {
                Expr::Trunc { to: ty, arg: Box::new(v_expr.clone()) }
            }
        };
        let body: Vec<Node> =
            old.body.iter().map(|n| subst_counter_node(n, &old.var, &replacement)).collect();
        let inner = ForLoop {
            label: li.clone(),
            var: vi.clone(),
            start: 0,
            stop: Bound::Const(factor),
            step: 1,
            body,
        };
        let outer = ForLoop {
            label: lo.clone(),
            var: vo.clone(),
            start: 0,
            stop: Bound::Const(trip / factor),
            step: 1,
            body: vec![Node::For(inner)],
        };
        nodes.insert(pos, Node::For(outer));
        Some(())
    })
    .ok_or_else(|| TransformError::UnknownLoop(label.into()))?;
    Ok(())
}

fn outline(
    out: &mut StructuredProgram,
    t: &Transform,
    group: &[String],
) -> Result<(), TransformError> {
    if group.len() < 2 {
        return Err(illegal(t, "group needs at least two loops"));
    }
    let mut members = Vec::new();
    for label in group {
        let pos = out
            .body
            .iter()
            .position(|n| matches!(n, Node::For(l) if &l.label == label))
            .ok_or_else(|| illegal(t, format!("`{label}` is not a top-level loop")))?;
        let Node::For(l) = &out.body[pos] else { unreachable!() };
        members.push((pos, l.clone()));
    }
    let shape = loop_shape(&members[0].1);
    if members.iter().any(|(_, l)| loop_shape(l) != shape) {
        return Err(illegal(t, "loops are not isomorphic"));
    }

    // Functions close over nothing: bodies may touch only their array
    // formals and counters.
    let mut uses_scalar = false;
    fn scan(nodes: &[Node], uses_scalar: &mut bool) {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    for e in s.operand_exprs() {
                        e.walk(&mut |sub| {
                            if matches!(sub, Expr::Var { .. }) {
                                *uses_scalar = true;
                            }
                        });
                    }
                    for tg in &s.targets {
                        if matches!(tg, Lvalue::Local { .. }) {
                            *uses_scalar = true;
                        }
                    }
                }
                Node::For(l) => scan(&l.body, uses_scalar),
                Node::Call { .. } => *uses_scalar = true,
            }
        }
    }
    scan(&members[0].1.body, &mut uses_scalar);
    if uses_scalar {
        return Err(illegal(t, "loop body references kernel scalars or calls"));
    }

    // Formal slots come from first-use array order; every member must bind
    // arrays of identical shape.
    let env = out.type_env();
    let slots = analyze::loop_array_order(&members[0].1);
    let arg_lists: Vec<Vec<String>> =
        members.iter().map(|(_, l)| analyze::loop_array_order(l)).collect();
    let shapes: Vec<(ScalarType, usize)> = slots
        .iter()
        .map(|a| env.arrays.get(a).copied().ok_or_else(|| illegal(t, format!("unknown array `{a}`"))))
        .collect::<Result<_, _>>()?;
    for args in &arg_lists {
        for (k, a) in args.iter().enumerate() {
            if env.arrays.get(a).copied() != Some(shapes[k]) {
                return Err(illegal(t, format!("array `{a}` shape differs across the group")));
            }
        }
    }

    let mut used = used_names(out);
    let fname = uniq_name(&format!("shared_{}", group[0].to_lowercase()), &mut used);
    let mut written: BTreeSet<String> = BTreeSet::new();
    fn scan_writes(nodes: &[Node], w: &mut BTreeSet<String>) {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    for tg in &s.targets {
                        if let Lvalue::Elem { array, .. } = tg {
                            w.insert(array.clone());
                        }
                    }
                }
                Node::For(l) => scan_writes(&l.body, w),
                Node::Call { .. } => {}
            }
        }
    }
    scan_writes(&members[0].1.body, &mut written);

    let formals: Vec<Param> = slots
        .iter()
        .enumerate()
        .map(|(k, actual)| {
            let dir = if written.contains(actual) { Direction::Out } else { Direction::In };
            let (elem, len) = shapes[k];
            Param::array(&format!("p{k}"), dir, elem, len)
        })
        .collect();
    let rename: BTreeMap<&str, &str> = slots
        .iter()
        .enumerate()
        .map(|(k, actual)| (actual.as_str(), formals[k].name.as_str()))
        .collect();
    // Leak-free trick: rename wants &str keys borrowed from formals, which we
    // move next — build the body first.
    let canon_body = Node::For(members[0].1.clone());
    let fn_body = vec![rename_arrays_node(&canon_body, &rename)];
    out.functions.push(DefinedFunction { name: fname.clone(), params: formals, body: fn_body });

    for ((pos, _), args) in members.iter().zip(arg_lists) {
        out.body[*pos] = Node::Call { callee: fname.clone(), args };
    }
    Ok(())
}
