//! Value flow over flat code, and the rewrite of scalar temporaries into
//! scratch-array elements.
//!
//! Flat kernels name every intermediate value (`x17 = ...`). To recover
//! loops those names must become indexed reads and writes, so this module
//! builds the def/use graph, classifies single-use temporaries, and packs
//! each local into a per-type scratch array slot. Slot choice follows the
//! input access pattern where possible — a local defined by a statement that
//! reads `a[k]` lands at index `k` — which is what lines the indices up into
//! arithmetic progressions later stages can roll.

use crate::ir::*;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// One definition: a statement target, scalar or array element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DefNode {
    pub stmt: usize,
    pub target_pos: usize,
    pub target: Lvalue,
    pub use_count: usize,
}

/// One use of a defined value: `(def index, consuming statement, operand
/// position in that statement's deterministic operand walk)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UseEdge {
    pub def: usize,
    pub stmt: usize,
    pub operand_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ddg {
    pub defs: Vec<DefNode>,
    pub uses: Vec<UseEdge>,
}

impl Ddg {
    pub fn def_of_local(&self, name: &str) -> Option<&DefNode> {
        self.defs
            .iter()
            .find(|d| matches!(&d.target, Lvalue::Local { name: n } if n == name))
    }

    /// Statement index of the last use of a def, or its own statement when
    /// the value is never read.
    pub fn last_use(&self, def: usize) -> usize {
        self.uses
            .iter()
            .filter(|u| u.def == def)
            .map(|u| u.stmt)
            .max()
            .unwrap_or(self.defs[def].stmt)
    }

    /// DOT rendering for inspection (`--dump-ddg`).
    pub fn to_dot(&self, p: &Program) -> String {
        let mut out = String::from("digraph ddg {\n  node [shape=box];\n");
        for (i, d) in self.defs.iter().enumerate() {
            let label = match &d.target {
                Lvalue::Local { name } => name.clone(),
                Lvalue::Elem { array, index } => match eval_index(index, &BTreeMap::new()) {
                    Some(k) => format!("{array}[{k}]"),
                    None => format!("{array}[..]"),
                },
            };
            out.push_str(&format!(
                "  d{i} [label=\"{label}\\ns{} uses={}\"];\n",
                d.stmt, d.use_count
            ));
        }
        for u in &self.uses {
            out.push_str(&format!("  d{} -> s{} [label=\"p{}\"];\n", u.def, u.stmt, u.operand_pos));
        }
        for i in 0..p.body.len() {
            out.push_str(&format!("  s{i} [shape=ellipse, label=\"stmt {i}\"];\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Pre-order walk of every value read in a statement (operand exprs of the
/// rhs plus index exprs of element targets), yielding `(position, expr)` for
/// each `Var` or `Read` leaf.
fn reads_in_statement(s: &Statement) -> Vec<Expr> {
    let mut out = Vec::new();
    for e in s.operand_exprs() {
        e.walk(&mut |x| {
            if matches!(x, Expr::Var { .. } | Expr::Read { .. }) {
                out.push(x.clone());
            }
        });
    }
    out
}

fn const_index(e: &Expr) -> Option<i64> {
    eval_index(e, &BTreeMap::new())
}

/// Builds the def/use graph of a validated flat program.
pub fn build_ddg(p: &Program) -> Ddg {
    let mut defs = Vec::new();
    let mut uses = Vec::new();
    // (name -> def idx) for scalars; ((array, index) -> def idx) for elems.
    let mut scalar_def: BTreeMap<String, usize> = BTreeMap::new();
    let mut elem_def: BTreeMap<(String, i64), usize> = BTreeMap::new();

    for (si, s) in p.body.iter().enumerate() {
        for (pos, read) in reads_in_statement(s).iter().enumerate() {
            let def = match read {
                Expr::Var { name } => scalar_def.get(name).copied(),
                Expr::Read { array, index } => const_index(index)
                    .and_then(|k| elem_def.get(&(array.clone(), k)).copied()),
                _ => None,
            };
            if let Some(def) = def {
                uses.push(UseEdge { def, stmt: si, operand_pos: pos });
            }
        }
        for (tp, t) in s.targets.iter().enumerate() {
            let idx = defs.len();
            defs.push(DefNode { stmt: si, target_pos: tp, target: t.clone(), use_count: 0 });
            match t {
                Lvalue::Local { name } => {
                    scalar_def.insert(name.clone(), idx);
                }
                Lvalue::Elem { array, index } => {
                    if let Some(k) = const_index(index) {
                        elem_def.insert((array.clone(), k), idx);
                    }
                }
            }
        }
    }
    for u in &uses {
        defs[u.def].use_count += 1;
    }
    Ddg { defs, uses }
}

/// Locals whose value is consumed exactly once.
pub fn single_use_locals(g: &Ddg) -> BTreeSet<String> {
    g.defs
        .iter()
        .filter(|d| d.use_count == 1)
        .filter_map(|d| match &d.target {
            Lvalue::Local { name } => Some(name.clone()),
            _ => None,
        })
        .collect()
}

/// Where each local ended up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
pub struct ArrayAssignment {
    /// local name -> (array, index)
    pub groups: BTreeMap<String, (String, usize)>,
    /// (array, element type, length)
    pub synthesized_arrays: Vec<(String, ScalarType, usize)>,
}

/// Picks a scratch-array name for a type that collides with nothing in `p`.
fn scratch_name(ty: ScalarType, taken: &BTreeSet<String>) -> String {
    let base = format!("t{}", ty.bits());
    if !taken.contains(&base) {
        return base;
    }
    (2..).map(|k| format!("{base}_{k}")).find(|n| !taken.contains(n)).unwrap()
}

struct Slot {
    /// Live interval of the current occupant, `def..=last_use`.
    busy_until: usize,
    /// Whether every occupant so far has been single-use (sharing is only
    /// legal among single-use locals of one type).
    shareable: bool,
}

/// Replaces every scalar local with an element of a synthesized per-type
/// scratch array. Single-use locals may share a slot once the previous
/// occupant is dead; anything else gets an exclusive slot. Returns the
/// rewritten program (no scalar locals left) and the mapping.
pub fn assign_arrays(p: &Program, g: &Ddg) -> (Program, ArrayAssignment) {
    let single = single_use_locals(g);
    let mut taken: BTreeSet<String> = p.params.iter().map(|x| x.name.clone()).collect();
    taken.extend(p.local_arrays.iter().map(|a| a.name.clone()));
    taken.extend(p.locals.iter().map(|(n, _)| n.clone()));

    let in_arrays: BTreeSet<&str> = p
        .params
        .iter()
        .filter(|x| x.dir == Direction::In && matches!(x.kind, ParamKind::Array { .. }))
        .map(|x| x.name.as_str())
        .collect();
    let local_ty: BTreeMap<&str, ScalarType> =
        p.locals.iter().map(|(n, t)| (n.as_str(), *t)).collect();

    let mut arrays: BTreeMap<ScalarType, (String, Vec<Slot>)> = BTreeMap::new();
    let mut groups: BTreeMap<String, (String, usize)> = BTreeMap::new();

    for (si, s) in p.body.iter().enumerate() {
        // The index an input-array read suggests for this statement.
        let preferred = reads_in_statement(s).iter().find_map(|r| match r {
            Expr::Read { array, index } if in_arrays.contains(array.as_str()) => {
                const_index(index).filter(|k| *k >= 0).map(|k| k as usize)
            }
            _ => None,
        });
        for t in &s.targets {
            let Lvalue::Local { name } = t else { continue };
            if groups.contains_key(name) {
                continue; // single assignment guarantees this never fires
            }
            let ty = local_ty[name.as_str()];
            let def = g.def_of_local(name).expect("ddg matches program");
            let def_idx = g
                .defs
                .iter()
                .position(|d| std::ptr::eq(d, def))
                .unwrap();
            let last = g.last_use(def_idx);
            let is_single = single.contains(name);

            let (arr_name, slots) = arrays
                .entry(ty)
                .or_insert_with(|| (scratch_name(ty, &taken), Vec::new()));
            taken.insert(arr_name.clone());

            let fits = |slot: &Slot| slot.shareable && is_single && slot.busy_until < si;
            let chosen = match preferred.filter(|_| is_single) {
                Some(k) if k >= slots.len() || fits(&slots[k]) => k,
                _ => (0..slots.len())
                    .find(|&i| fits(&slots[i]))
                    .unwrap_or(slots.len()),
            };
            while slots.len() <= chosen {
                slots.push(Slot { busy_until: 0, shareable: true });
            }
            slots[chosen].busy_until = last;
            slots[chosen].shareable &= is_single;
            groups.insert(name.clone(), (arr_name.clone(), chosen));
        }
    }

    let rewrite = |e: &Expr| -> Expr {
        map_expr(e, &|x| match x {
            Expr::Var { name } => match groups.get(name) {
                Some((arr, k)) => Expr::read_at(arr, *k as i64),
                None => x.clone(),
            },
            other => other.clone(),
        })
    };
    let body = p
        .body
        .iter()
        .map(|s| Statement {
            targets: s
                .targets
                .iter()
                .map(|t| match t {
                    Lvalue::Local { name } => {
                        let (arr, k) = &groups[name];
                        Lvalue::elem_at(arr, *k as i64)
                    }
                    Lvalue::Elem { array, index } => Lvalue::Elem {
                        array: array.clone(),
                        index: Box::new(rewrite(index)),
                    },
                })
                .collect(),
            rhs: match &s.rhs {
                Rhs::Plain(e) => Rhs::Plain(rewrite(e)),
                Rhs::Wide { op, ty, args } => Rhs::Wide {
                    op: *op,
                    ty: *ty,
                    args: args.iter().map(&rewrite).collect(),
                },
            },
        })
        .collect();

    let mut local_arrays = p.local_arrays.clone();
    let mut synthesized = Vec::new();
    for (ty, (name, slots)) in &arrays {
        local_arrays.push(LocalArray { name: name.clone(), elem: *ty, len: slots.len() });
        synthesized.push((name.clone(), *ty, slots.len()));
    }
    let out = Program {
        name: p.name.clone(),
        params: p.params.clone(),
        locals: Vec::new(),
        local_arrays,
        body,
    };
    (out, ArrayAssignment { groups, synthesized_arrays: synthesized })
}

/// Structure-preserving expression map; `f` sees each rebuilt node
/// bottom-up.
pub fn map_expr(e: &Expr, f: &dyn Fn(&Expr) -> Expr) -> Expr {
    let rebuilt = match e {
        Expr::Read { array, index } => {
            Expr::Read { array: array.clone(), index: Box::new(map_expr(index, f)) }
        }
        Expr::Not(a) => Expr::Not(Box::new(map_expr(a, f))),
        Expr::Trunc { to, arg } => Expr::Trunc { to: *to, arg: Box::new(map_expr(arg, f)) },
        Expr::Zext { to, arg } => Expr::Zext { to: *to, arg: Box::new(map_expr(arg, f)) },
        Expr::Bin { op, lhs, rhs } => Expr::Bin {
            op: *op,
            lhs: Box::new(map_expr(lhs, f)),
            rhs: Box::new(map_expr(rhs, f)),
        },
        Expr::Cmov { ty, flag, if_zero, if_nonzero } => Expr::Cmov {
            ty: *ty,
            flag: Box::new(map_expr(flag, f)),
            if_zero: Box::new(map_expr(if_zero, f)),
            if_nonzero: Box::new(map_expr(if_nonzero, f)),
        },
        other => other.clone(),
    };
    f(&rebuilt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{check_equiv_flat, EquivConfig};
    use crate::parser::parse_straight_line;

    fn flat(src: &str) -> Program {
        parse_straight_line(src).unwrap()
    }

    #[test]
    fn use_counts_are_per_operand_position() {
        let p = flat("void f(const u64 a[2], u64 o[1]) { u64 x0 = a[0] * a[1]; o[0] = x0; }");
        let g = build_ddg(&p);
        assert_eq!(g.def_of_local("x0").unwrap().use_count, 1);

        let p = flat("void f(const u64 a[1], u64 o[1]) { u64 x0 = a[0]; u64 x1 = x0 + x0; o[0] = x1; }");
        let g = build_ddg(&p);
        assert_eq!(g.def_of_local("x0").unwrap().use_count, 2);
        assert_eq!(single_use_locals(&g), ["x1".to_string()].into_iter().collect());
    }

    #[test]
    fn counts_match_textual_recount() {
        // Independent oracle: count identifier occurrences in the emitted
        // text; occurrences minus the one definition equals the use count.
        let src = "void f(const u64 a[4], const u64 b[4], u64 o[1]) {\
            u64 x0 = a[0] * b[0];\
            u64 x1 = a[1] * b[1];\
            u64 x2 = a[2] * b[2];\
            u64 x3 = a[3] * b[3];\
            u64 s0 = x0 + x1;\
            u64 s1 = s0 + x2;\
            u64 s2 = s1 + x3;\
            o[0] = s2;\
        }";
        let p = flat(src);
        let g = build_ddg(&p);
        let text = crate::emit::emit_straight_line(&p);
        let occurrences = |name: &str| {
            text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
                .filter(|w| *w == name)
                .count()
        };
        for (name, _) in &p.locals {
            let d = g.def_of_local(name).unwrap();
            assert_eq!(d.use_count, occurrences(name) - 1, "local {name}");
        }
    }

    #[test]
    fn element_defs_link_to_element_reads() {
        let p = flat("void f(const u64 a[1], u64 o[2]) { o[0] = a[0]; o[1] = o[0] + a[0]; }");
        let g = build_ddg(&p);
        assert_eq!(g.defs[0].use_count, 1);
        assert_eq!(g.uses.iter().filter(|u| u.def == 0).count(), 1);
    }

    #[test]
    fn input_index_preference_places_locals() {
        let p = flat(
            "void f(const u64 a[2], u64 o[2]) {\
               u64 x0 = a[0] << 1;\
               u64 x1 = a[1] << 1;\
               o[0] = x0;\
               o[1] = x1;\
             }",
        );
        let g = build_ddg(&p);
        let (q, asg) = assign_arrays(&p, &g);
        assert_eq!(asg.groups["x0"], ("t64".to_string(), 0));
        assert_eq!(asg.groups["x1"], ("t64".to_string(), 1));
        assert_eq!(asg.synthesized_arrays, vec![("t64".to_string(), ScalarType::U64, 2)]);
        assert!(q.locals.is_empty());
        let text = crate::emit::emit_straight_line(&q);
        assert!(text.contains("t64[0] = a[0] << 1;"), "{text}");
        assert!(text.contains("o[1] = t64[1];"), "{text}");
    }

    #[test]
    fn no_locals_means_identity() {
        let p = flat("void f(const u64 a[2], u64 o[1]) { o[0] = a[0] ^ a[1]; }");
        let g = build_ddg(&p);
        let (q, asg) = assign_arrays(&p, &g);
        assert_eq!(q, p);
        assert!(asg.groups.is_empty());
        assert!(asg.synthesized_arrays.is_empty());
    }

    #[test]
    fn multi_use_locals_never_share_slots() {
        let p = flat(
            "void f(const u64 a[4], u64 o[4]) {\
               u64 k = a[0] * a[1];\
               u64 x0 = a[0] + k;\
               o[0] = x0;\
               u64 x1 = a[1] + k;\
               o[1] = x1;\
               o[2] = k;\
               o[3] = k;\
             }",
        );
        let g = build_ddg(&p);
        let (q, asg) = assign_arrays(&p, &g);
        let k_slot = asg.groups["k"].clone();
        for (name, slot) in &asg.groups {
            if name != "k" {
                assert_ne!(*slot, k_slot, "{name} shares the multi-use slot");
            }
        }
        let verdict = check_equiv_flat(
            &p,
            &StructuredProgram::from(q),
            &EquivConfig { n_vectors: 300, seed: 3 },
        )
        .unwrap();
        assert!(verdict.is_equivalent());
    }

    #[test]
    fn shared_slots_have_disjoint_live_ranges() {
        // Long chain of single-use temporaries: sharing must kick in, and the
        // occupants of any shared slot must have disjoint [def, last_use].
        let p = flat(
            "void f(const u64 a[2], u64 o[4]) {\
               u64 x0 = a[0] + a[1]; o[0] = x0;\
               u64 x1 = a[0] ^ a[1]; o[1] = x1;\
               u64 x2 = a[0] & a[1]; o[2] = x2;\
               u64 x3 = a[0] | a[1]; o[3] = x3;\
             }",
        );
        let g = build_ddg(&p);
        let (q, asg) = assign_arrays(&p, &g);
        let mut by_slot: BTreeMap<(String, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (name, slot) in &asg.groups {
            let def = g.def_of_local(name).unwrap();
            let di = g.defs.iter().position(|d| std::ptr::eq(d, def)).unwrap();
            by_slot.entry(slot.clone()).or_default().push((def.stmt, g.last_use(di)));
        }
        for (_, mut ranges) in by_slot {
            ranges.sort();
            for w in ranges.windows(2) {
                assert!(w[0].1 < w[1].0, "overlapping occupants {ranges:?}");
            }
        }
        let verdict = check_equiv_flat(
            &p,
            &StructuredProgram::from(q),
            &EquivConfig { n_vectors: 300, seed: 5 },
        )
        .unwrap();
        assert!(verdict.is_equivalent());
    }

    #[test]
    fn wide_targets_split_across_typed_arrays() {
        let p = flat(
            "void f(const u64 a[2], const u64 b[2], u64 o[3]) {\
               u64 s0; u1 c0; (s0, c0) = addcarry_u64(0, a[0], b[0]);\
               u64 s1; u1 c1; (s1, c1) = addcarry_u64(c0, a[1], b[1]);\
               o[0] = s0; o[1] = s1; o[2] = (u64)c1;\
             }",
        );
        let g = build_ddg(&p);
        let (q, asg) = assign_arrays(&p, &g);
        assert_eq!(asg.groups["s0"].0, "t64");
        assert_eq!(asg.groups["c0"].0, "t1");
        assert_eq!(asg.groups["s0"].1, 0);
        assert_eq!(asg.groups["s1"].1, 1);
        let verdict = check_equiv_flat(
            &p,
            &StructuredProgram::from(q),
            &EquivConfig { n_vectors: 300, seed: 7 },
        )
        .unwrap();
        assert!(verdict.is_equivalent());
    }

    #[test]
    fn scratch_name_avoids_collisions() {
        let p = flat(
            "void f(const u64 t64[1], u64 o[1]) { u64 x0 = t64[0] + 1; o[0] = x0; }",
        );
        let g = build_ddg(&p);
        let (_, asg) = assign_arrays(&p, &g);
        assert_eq!(asg.groups["x0"].0, "t64_2");
    }

    #[test]
    fn dot_output_names_defs_and_positions() {
        let p = flat("void f(const u64 a[1], u64 o[1]) { u64 x0 = a[0]; o[0] = x0; }");
        let g = build_ddg(&p);
        let dot = g.to_dot(&p);
        assert!(dot.starts_with("digraph ddg {"));
        assert!(dot.contains("x0"));
        assert!(dot.contains("->"));
    }
}
