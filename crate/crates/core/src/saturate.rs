//! Equality saturation over statement runs, and lowering back to loops.
//!
//! The term language is tiny: a `Seq` of `Op`s, one per statement, each
//! carrying the constants that fill its template's holes. Three rewrites
//! grow an e-graph of alternative segmentations:
//!
//! * R1 turns two adjacent same-template ops into one op whose differing
//!   argument positions become ranges of trip count 2;
//! * R2 absorbs the next op into a ranged op when every argument continues
//!   the progression;
//! * R3 does the same at the front.
//!
//! Extraction then picks the cheapest term under a fixed cost model — a
//! range costs 3 no matter how many statements it covers, so rolled forms
//! win exactly when a loop actually shortens the description. Lowering
//! turns each ranged op into a counted `for` with affine hole expressions.
//!
//! Every rewrite firing is checked in debug builds by expanding both sides
//! back to their statement lists; the e-graph can therefore never learn an
//! unsound equality silently.

use crate::ir::*;
use crate::template::{
    fill_statement, AbstractSequence, Abstraction, HoleKind, Template,
};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

/// Term over statement templates. `Op(t, args)` is one statement of
/// template `t` when every arg is `Const`, or a run of statements when args
/// carry `Range`s (all ranges within one op share a trip count).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum RTerm {
    Const(i128),
    Range { start: i128, stop: i128, step: i128 },
    Op { template: usize, args: Vec<RTerm> },
    Seq(Vec<RTerm>),
}

impl RTerm {
    pub fn op(template: usize, consts: &[i128]) -> RTerm {
        RTerm::Op { template, args: consts.iter().map(|&c| RTerm::Const(c)).collect() }
    }

    /// Description-length cost: constants are cheap, a range costs a flat 3
    /// (start/stop/step), ops and seqs pay one plus their children.
    pub fn cost(&self) -> u64 {
        match self {
            RTerm::Const(_) => 1,
            RTerm::Range { .. } => 3,
            RTerm::Op { args, .. } => 1 + args.iter().map(RTerm::cost).sum::<u64>(),
            RTerm::Seq(children) => 1 + children.iter().map(RTerm::cost).sum::<u64>(),
        }
    }

    fn trip(&self) -> Option<i128> {
        match self {
            RTerm::Range { start, stop, step } => Some((stop - start) / step + 1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SaturationConfig {
    pub max_iterations: usize,
    pub max_enodes: usize,
    /// Sequences with fewer instances than this are left straight-line.
    pub min_sequence_ops: usize,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        SaturationConfig { max_iterations: 64, max_enodes: 50_000, min_sequence_ops: 2 }
    }
}

pub type ClassId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
enum ENode {
    Const(i128),
    Range { start: i128, stop: i128, step: i128 },
    Op { template: usize, args: Vec<ClassId> },
    Seq(Vec<ClassId>),
}

impl ENode {
    fn children(&self) -> &[ClassId] {
        match self {
            ENode::Op { args, .. } => args,
            ENode::Seq(children) => children,
            _ => &[],
        }
    }

    fn map_children(&self, f: &mut impl FnMut(ClassId) -> ClassId) -> ENode {
        match self {
            ENode::Op { template, args } => {
                ENode::Op { template: *template, args: args.iter().map(|&c| f(c)).collect() }
            }
            ENode::Seq(children) => ENode::Seq(children.iter().map(|&c| f(c)).collect()),
            other => other.clone(),
        }
    }
}

/// Hash-consed e-graph. Equal terms share a class; rewrites add nodes and
/// merge classes, and a rebuild pass restores congruence after merges.
#[derive(Debug, Clone, Serialize)]
pub struct EGraph {
    classes: Vec<Vec<ENode>>,
    #[serde(skip)]
    memo: HashMap<ENode, ClassId>,
    #[serde(skip)]
    parents: Vec<ClassId>,
    pub root: ClassId,
    pub n_nodes: usize,
    /// Set when a resource limit stopped saturation early.
    pub truncated: bool,
}

impl EGraph {
    fn new() -> Self {
        EGraph {
            classes: Vec::new(),
            memo: HashMap::new(),
            parents: Vec::new(),
            root: 0,
            n_nodes: 0,
            truncated: false,
        }
    }

    fn find(&self, mut id: ClassId) -> ClassId {
        while self.parents[id] != id {
            id = self.parents[id];
        }
        id
    }

    fn canon(&self, n: &ENode) -> ENode {
        n.map_children(&mut |c| self.find(c))
    }

    fn add(&mut self, n: ENode) -> ClassId {
        let n = self.canon(&n);
        if let Some(&id) = self.memo.get(&n) {
            return self.find(id);
        }
        let id = self.classes.len();
        self.classes.push(vec![n.clone()]);
        self.parents.push(id);
        self.memo.insert(n, id);
        self.n_nodes += 1;
        id
    }

    /// Adds `n` into an existing class. Returns true when the node is new.
    fn add_to(&mut self, class: ClassId, n: ENode) -> bool {
        let n = self.canon(&n);
        let class = self.find(class);
        match self.memo.get(&n) {
            Some(&existing) => {
                let existing = self.find(existing);
                if existing != class {
                    self.union(class, existing);
                }
                false
            }
            None => {
                self.classes[class].push(n.clone());
                self.memo.insert(n, class);
                self.n_nodes += 1;
                true
            }
        }
    }

    fn union(&mut self, a: ClassId, b: ClassId) {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        self.parents[b] = a;
        let moved = std::mem::take(&mut self.classes[b]);
        self.classes[a].extend(moved);
        self.rebuild();
    }

    /// Restores the hashcons invariant after a merge: re-canonicalize every
    /// node, unioning classes whose nodes collide, until stable.
    fn rebuild(&mut self) {
        loop {
            let mut pending: Option<(ClassId, ClassId)> = None;
            let mut memo: HashMap<ENode, ClassId> = HashMap::new();
            for id in 0..self.classes.len() {
                if self.find(id) != id {
                    continue;
                }
                for n in &self.classes[id] {
                    let cn = self.canon(n);
                    match memo.get(&cn) {
                        Some(&other) if other != id => {
                            pending = Some((other, id));
                            break;
                        }
                        _ => {
                            memo.insert(cn, id);
                        }
                    }
                }
                if pending.is_some() {
                    break;
                }
            }
            match pending {
                Some((a, b)) => {
                    let (a, b) = (self.find(a), self.find(b));
                    if a != b {
                        self.parents[b] = a;
                        let moved = std::mem::take(&mut self.classes[b]);
                        self.classes[a].extend(moved);
                    }
                }
                None => {
                    // Deduplicate within classes and refresh the memo.
                    for id in 0..self.classes.len() {
                        if self.find(id) != id {
                            continue;
                        }
                        let mut seen = Vec::new();
                        for n in std::mem::take(&mut self.classes[id]) {
                            let cn = self.canon(&n);
                            if !seen.contains(&cn) {
                                seen.push(cn);
                            }
                        }
                        self.classes[id] = seen;
                    }
                    self.memo = memo;
                    self.n_nodes = self.classes.iter().map(Vec::len).sum();
                    return;
                }
            }
        }
    }

    fn nodes(&self, class: ClassId) -> &[ENode] {
        &self.classes[self.find(class)]
    }

    /// The single op signature of a class, if it holds one. Op classes stay
    /// singletons here: distinct ranges mean distinct statement lists.
    fn as_op(&self, class: ClassId) -> Option<&ENode> {
        self.nodes(class).iter().find(|n| matches!(n, ENode::Op { .. }))
    }

    /// Class count (canonical classes only); handy for size assertions.
    pub fn n_classes(&self) -> usize {
        (0..self.classes.len()).filter(|&i| self.find(i) == i).count()
    }
}

/// Converts abstract sequences into the initial term: one op per statement
/// instance, in program order. Instances of excluded sequences get fresh
/// synthetic template ids (counting up from the real template count), which
/// makes them unmergeable — R1 requires matching templates — without any
/// special casing inside the saturator.
pub fn to_term(seqs: &[AbstractSequence], n_templates: usize) -> RTerm {
    let mut next_synthetic = n_templates;
    let mut ops = Vec::new();
    for seq in seqs {
        for inst in &seq.instances {
            let id = if seq.excluded {
                let id = next_synthetic;
                next_synthetic += 1;
                id
            } else {
                seq.template_id
            };
            ops.push(RTerm::op(id, &inst.consts));
        }
    }
    RTerm::Seq(ops)
}

/// Template lookup that resolves synthetic (frozen) ids back to the real
/// template they shadow. Built from the same sequence list `to_term` saw.
pub struct TemplateTable<'a> {
    abs: &'a Abstraction,
    synthetic: BTreeMap<usize, usize>,
}

impl<'a> TemplateTable<'a> {
    pub fn new(abs: &'a Abstraction, seqs: &[AbstractSequence]) -> Self {
        let mut synthetic = BTreeMap::new();
        let mut next = abs.templates.len();
        for seq in seqs {
            if seq.excluded {
                for _ in &seq.instances {
                    synthetic.insert(next, seq.template_id);
                    next += 1;
                }
            }
        }
        TemplateTable { abs, synthetic }
    }

    pub fn get(&self, id: usize) -> &Template {
        let real = self.synthetic.get(&id).copied().unwrap_or(id);
        self.abs.template(real)
    }
}

/// Marks sequences shorter than `cfg.min_sequence_ops` as excluded.
pub fn select_targets(
    mut seqs: Vec<AbstractSequence>,
    cfg: &SaturationConfig,
) -> Vec<AbstractSequence> {
    for s in &mut seqs {
        s.excluded = s.instances.len() < cfg.min_sequence_ops;
    }
    seqs
}

/// Statement list denoted by an op node: one const vector per iteration.
/// This is the semantic ground truth the debug-mode rewrite check compares.
fn expand_op(op: &RTerm) -> Vec<Vec<i128>> {
    let RTerm::Op { args, .. } = op else { panic!("expand_op on non-op") };
    let trip = args.iter().find_map(RTerm::trip).unwrap_or(1);
    (0..trip)
        .map(|k| {
            args.iter()
                .map(|a| match a {
                    RTerm::Const(c) => *c,
                    RTerm::Range { start, step, .. } => start + k * step,
                    _ => panic!("nested structure in op args"),
                })
                .collect()
        })
        .collect()
}

#[cfg(debug_assertions)]
fn check_rewrite(merged: &RTerm, parts: &[&RTerm]) {
    let mut want = Vec::new();
    for p in parts {
        want.extend(expand_op(p));
    }
    assert_eq!(expand_op(merged), want, "rewrite changed the statement list");
}

struct Saturator {
    g: EGraph,
    cfg: SaturationConfig,
    /// Op classes are immutable singletons, so their terms memoize safely.
    op_terms: HashMap<ClassId, RTerm>,
    /// Merge outcome per adjacent class pair. At most one of R1/R2/R3 can
    /// apply to a pair (they partition on which side carries ranges), and
    /// the result depends only on the two classes — so each distinct pair
    /// is analyzed (and soundness-checked) once, however many segmentations
    /// rediscover it.
    merges: HashMap<(ClassId, ClassId), Option<ClassId>>,
}

impl Saturator {
    fn term_of_op(&mut self, class: ClassId) -> Option<RTerm> {
        if let Some(t) = self.op_terms.get(&class) {
            return Some(t.clone());
        }
        let ENode::Op { template, args } = self.g.as_op(class)? else { unreachable!() };
        let args = args
            .iter()
            .map(|&a| {
                self.g.nodes(a).iter().find_map(|n| match n {
                    ENode::Const(c) => Some(RTerm::Const(*c)),
                    ENode::Range { start, stop, step } => {
                        Some(RTerm::Range { start: *start, stop: *stop, step: *step })
                    }
                    _ => None,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        let t = RTerm::Op { template: *template, args };
        self.op_terms.insert(class, t.clone());
        Some(t)
    }

    fn add_term(&mut self, t: &RTerm) -> ClassId {
        let node = match t {
            RTerm::Const(c) => ENode::Const(*c),
            RTerm::Range { start, stop, step } => {
                ENode::Range { start: *start, stop: *stop, step: *step }
            }
            RTerm::Op { template, args } => ENode::Op {
                template: *template,
                args: args.iter().map(|a| self.add_term(a)).collect(),
            },
            RTerm::Seq(children) => {
                ENode::Seq(children.iter().map(|c| self.add_term(c)).collect())
            }
        };
        self.g.add(node)
    }

    /// R1: merge two adjacent all-const ops of one template. Each differing
    /// position becomes a trip-2 range; at least one must differ.
    fn merge_pair(&mut self, a: &RTerm, b: &RTerm) -> Option<RTerm> {
        let (RTerm::Op { template: ta, args: aa }, RTerm::Op { template: tb, args: ab }) = (a, b)
        else {
            return None;
        };
        if ta != tb || aa.len() != ab.len() {
            return None;
        }
        let mut merged = Vec::with_capacity(aa.len());
        let mut differs = false;
        for (x, y) in aa.iter().zip(ab) {
            match (x, y) {
                (RTerm::Const(c), RTerm::Const(d)) if c == d => merged.push(RTerm::Const(*c)),
                (RTerm::Const(c), RTerm::Const(d)) => {
                    differs = true;
                    merged.push(RTerm::Range { start: *c, stop: *d, step: *d - *c });
                }
                _ => return None, // ranged ops extend via R2/R3 instead
            }
        }
        differs.then_some(RTerm::Op { template: *ta, args: merged })
    }

    /// R2 (`after` = true): extend a ranged op by the op that follows it.
    /// R3 (`after` = false): extend backwards by the op before it.
    fn absorb(&mut self, ranged: &RTerm, next: &RTerm, after: bool) -> Option<RTerm> {
        let (RTerm::Op { template: tr, args: ra }, RTerm::Op { template: tn, args: na }) =
            (ranged, next)
        else {
            return None;
        };
        if tr != tn || ra.len() != na.len() || !ra.iter().any(|a| a.trip().is_some()) {
            return None;
        }
        let mut merged = Vec::with_capacity(ra.len());
        for (r, n) in ra.iter().zip(na) {
            let RTerm::Const(e) = n else { return None };
            match r {
                RTerm::Const(c) if c == e => merged.push(RTerm::Const(*c)),
                RTerm::Range { start, stop, step } => {
                    if after && *e == stop + step {
                        merged.push(RTerm::Range { start: *start, stop: *e, step: *step });
                    } else if !after && *e == start - step {
                        merged.push(RTerm::Range { start: *e, stop: *stop, step: *step });
                    } else {
                        return None;
                    }
                }
                _ => return None,
            }
        }
        Some(RTerm::Op { template: *tr, args: merged })
    }

    /// Tries R1/R2/R3 on an adjacent class pair; returns the merged op's
    /// class when one applies.
    fn merge_classes(&mut self, left: ClassId, right: ClassId) -> Option<ClassId> {
        let a = self.term_of_op(left)?;
        let b = self.term_of_op(right)?;
        let merged = self
            .merge_pair(&a, &b)
            .or_else(|| self.absorb(&a, &b, true))
            .or_else(|| self.absorb(&b, &a, false))?;
        #[cfg(debug_assertions)]
        check_rewrite(&merged, &[&a, &b]);
        Some(self.add_term(&merged))
    }

    fn run(&mut self, root: ClassId) {
        // Worklist of seq nodes not yet scanned for rewrite opportunities.
        let mut pending: Vec<Vec<ClassId>> = self
            .g
            .nodes(root)
            .iter()
            .filter_map(|n| match n {
                ENode::Seq(c) => Some(c.clone()),
                _ => None,
            })
            .collect();
        for _ in 0..self.cfg.max_iterations {
            if pending.is_empty() {
                return;
            }
            let batch = std::mem::take(&mut pending);
            for children in batch {
                for i in 0..children.len().saturating_sub(1) {
                    let key = (children[i], children[i + 1]);
                    let merged_class = match self.merges.get(&key) {
                        Some(&m) => m,
                        None => {
                            let m = self.merge_classes(key.0, key.1);
                            self.merges.insert(key, m);
                            m
                        }
                    };
                    let Some(m) = merged_class else { continue };
                    if self.g.n_nodes >= self.cfg.max_enodes {
                        self.g.truncated = true;
                        return;
                    }
                    let mut seq = Vec::with_capacity(children.len() - 1);
                    seq.extend_from_slice(&children[..i]);
                    seq.push(m);
                    seq.extend_from_slice(&children[i + 2..]);
                    if self.g.add_to(root, ENode::Seq(seq.clone())) {
                        pending.push(seq);
                    }
                }
            }
        }
        if !pending.is_empty() {
            self.g.truncated = true;
        }
    }
}

/// Saturates the term under R1/R2/R3 up to the configured limits.
pub fn saturate(t: &RTerm, cfg: &SaturationConfig) -> EGraph {
    let mut s = Saturator {
        g: EGraph::new(),
        cfg: *cfg,
        op_terms: HashMap::new(),
        merges: HashMap::new(),
    };
    let root = s.add_term(t);
    s.g.root = root;
    s.run(root);
    s.g.root = s.g.find(root);
    s.g
}

/// Extracts the minimal-cost term (ties: fewer seq children, then smallest
/// term in the derived order).
pub fn extract_best(g: &EGraph) -> RTerm {
    fn best(
        g: &EGraph,
        class: ClassId,
        memo: &mut BTreeMap<ClassId, Option<(u64, usize, RTerm)>>,
    ) -> Option<(u64, usize, RTerm)> {
        let class = g.find(class);
        if let Some(cached) = memo.get(&class) {
            return cached.clone();
        }
        memo.insert(class, None); // cycle guard
        let mut best_entry: Option<(u64, usize, RTerm)> = None;
        for n in g.nodes(class) {
            let children: Option<Vec<RTerm>> = n
                .children()
                .iter()
                .map(|&c| best(g, c, memo).map(|(_, _, t)| t))
                .collect();
            let Some(children) = children else { continue };
            let term = match n {
                ENode::Const(c) => RTerm::Const(*c),
                ENode::Range { start, stop, step } => {
                    RTerm::Range { start: *start, stop: *stop, step: *step }
                }
                ENode::Op { template, .. } => {
                    RTerm::Op { template: *template, args: children }
                }
                ENode::Seq(_) => RTerm::Seq(children),
            };
            let width = match &term {
                RTerm::Seq(c) => c.len(),
                _ => 0,
            };
            let entry = (term.cost(), width, term);
            if best_entry.as_ref().map_or(true, |b| entry < *b) {
                best_entry = Some(entry);
            }
        }
        memo.insert(class, best_entry.clone());
        best_entry
    }
    let mut memo = BTreeMap::new();
    best(g, g.root, &mut memo).expect("root class is extractable").2
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LowerError {
    #[error("op argument ranges disagree on trip count")]
    MixedTripCounts,
    #[error("unknown template id {0}")]
    UnknownTemplate(usize),
    #[error("lowered program fails validation: {0}")]
    Invalid(#[from] ValidateError),
}

/// Value-domain affine expression `start + v*step` at width `ty`, written
/// with a subtraction when the step descends so emitted code has no
/// negative literals.
fn value_affine(var: &str, ty: ScalarType, start: i128, step: i128) -> Expr {
    let v = Expr::LoopVar { name: var.into(), ty };
    let lit = |x: i128| Expr::Lit { value: (x as u128) & ty.mask(), ty };
    let scaled = |s: i128| {
        if s == 1 {
            v.clone()
        } else {
            Expr::bin(BinOp::Mul, v.clone(), lit(s))
        }
    };
    if step >= 0 {
        let term = scaled(step);
        if start == 0 {
            term
        } else {
            Expr::bin(BinOp::Add, term, lit(start))
        }
    } else {
        Expr::bin(BinOp::Sub, lit(start), scaled(-step))
    }
}

/// Materializes the extracted term against `base`'s signature: constant ops
/// become statements, ranged ops become counted loops with affine holes.
pub fn lower_to_loops(
    t: &RTerm,
    base: &Program,
    table: &TemplateTable,
) -> Result<StructuredProgram, LowerError> {
    let ops: Vec<&RTerm> = match t {
        RTerm::Seq(children) => children.iter().collect(),
        other => vec![other],
    };
    let taken: std::collections::BTreeSet<&str> =
        base.params.iter().map(|p| p.name.as_str()).collect();
    let mut next_var = 0;
    let mut fresh_var = || loop {
        let name = format!("v{next_var}");
        next_var += 1;
        if !taken.contains(name.as_str()) {
            return name;
        }
    };

    let mut body = Vec::new();
    for op in &ops {
        let RTerm::Op { template, args } = op else {
            return Err(LowerError::MixedTripCounts);
        };
        let tpl = table.get(*template);
        let trips: Vec<i128> = args.iter().filter_map(RTerm::trip).collect();
        if trips.is_empty() {
            let consts: Vec<i128> = args
                .iter()
                .map(|a| match a {
                    RTerm::Const(c) => *c,
                    _ => unreachable!("trip-free op has only consts"),
                })
                .collect();
            body.push(Node::Stmt(crate::template::substitute(tpl, &consts)));
            continue;
        }
        if trips.iter().any(|&n| n != trips[0]) || trips[0] < 2 {
            return Err(LowerError::MixedTripCounts);
        }
        let n = trips[0] as i64;
        let var = fresh_var();
        let stmt = fill_statement(&tpl.shape, &tpl.holes, &mut |k| match (&args[k], tpl.holes[k]) {
            (RTerm::Const(c), HoleKind::Index | HoleKind::Shift) => Expr::index_lit(*c as i64),
            (RTerm::Const(c), HoleKind::Value(ty)) => {
                Expr::Lit { value: *c as u128 & ty.mask(), ty }
            }
            (RTerm::Range { start, step, .. }, HoleKind::Index | HoleKind::Shift) => {
                Expr::affine(&var, *step as i64, *start as i64)
            }
            (RTerm::Range { start, step, .. }, HoleKind::Value(ty)) => {
                value_affine(&var, ty, *start, *step)
            }
            _ => unreachable!("op args are consts or ranges"),
        });
        body.push(Node::For(ForLoop {
            label: String::new(),
            var,
            start: 0,
            stop: Bound::Const(n),
            step: 1,
            body: vec![Node::Stmt(stmt)],
        }));
    }

    let mut out = StructuredProgram {
        name: base.name.clone(),
        params: base.params.clone(),
        locals: base.locals.clone(),
        local_arrays: base.local_arrays.clone(),
        functions: Vec::new(),
        body,
    };
    out.relabel_loops();
    validate_structured(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::Instance;

    fn seq_of(template: usize, consts: &[&[i128]]) -> RTerm {
        RTerm::Seq(consts.iter().map(|c| RTerm::op(template, c)).collect())
    }

    fn range(start: i128, stop: i128, step: i128) -> RTerm {
        RTerm::Range { start, stop, step }
    }

    /// Every term the e-graph can produce for a class, for brute-force
    /// optimality checks on small graphs.
    fn all_terms(g: &EGraph, class: ClassId, depth: usize) -> Vec<RTerm> {
        assert!(depth < 64, "unexpected structural depth");
        let mut out = Vec::new();
        for n in g.nodes(class) {
            let child_sets: Vec<Vec<RTerm>> =
                n.children().iter().map(|&c| all_terms(g, c, depth + 1)).collect();
            let mut combos: Vec<Vec<RTerm>> = vec![Vec::new()];
            for set in &child_sets {
                combos = combos
                    .iter()
                    .flat_map(|prefix| {
                        set.iter().map(move |t| {
                            let mut p = prefix.clone();
                            p.push(t.clone());
                            p
                        })
                    })
                    .collect();
            }
            for children in combos {
                out.push(match n {
                    ENode::Const(c) => RTerm::Const(*c),
                    ENode::Range { start, stop, step } => {
                        RTerm::Range { start: *start, stop: *stop, step: *step }
                    }
                    ENode::Op { template, .. } => {
                        RTerm::Op { template: *template, args: children }
                    }
                    ENode::Seq(_) => RTerm::Seq(children),
                });
            }
        }
        out
    }

    #[test]
    fn pair_merges_into_a_trip_two_range() {
        let g = saturate(&seq_of(0, &[&[0], &[1]]), &SaturationConfig::default());
        let best = extract_best(&g);
        assert_eq!(best, RTerm::Seq(vec![RTerm::Op { template: 0, args: vec![range(0, 1, 1)] }]));
        assert!(!g.truncated);
    }

    #[test]
    fn variable_steps_roll_and_extend() {
        let g = saturate(&seq_of(0, &[&[0], &[2], &[4]]), &SaturationConfig::default());
        let best = extract_best(&g);
        assert_eq!(best, RTerm::Seq(vec![RTerm::Op { template: 0, args: vec![range(0, 4, 2)] }]));
    }

    #[test]
    fn step_mismatch_never_forms_a_three_way_range() {
        let g = saturate(&seq_of(0, &[&[0], &[5], &[6]]), &SaturationConfig::default());
        // Exhaustive: no class anywhere contains a trip-3 range.
        for class in 0..g.classes.len() {
            for n in g.nodes(class) {
                if let ENode::Range { start, stop, step } = n {
                    assert!(
                        (stop - start) / step + 1 == 2,
                        "unexpected trip count in Range({start},{stop},{step})"
                    );
                }
            }
        }
        // Flat costs 1+3*2 = 7; one pair merge also costs 1+2+4 = 7, and the
        // tie goes to fewer seq children, then the lexicographically smaller
        // term — which keeps Op(0) whole and rolls the (5,6) pair.
        let best = extract_best(&g);
        assert_eq!(
            best,
            RTerm::Seq(vec![
                RTerm::op(0, &[0]),
                RTerm::Op { template: 0, args: vec![range(5, 6, 1)] },
            ])
        );
    }

    #[test]
    fn descending_and_multi_hole_arguments_merge_positionwise() {
        let g = saturate(
            &seq_of(3, &[&[0, 6], &[1, 4], &[2, 2]]),
            &SaturationConfig::default(),
        );
        let best = extract_best(&g);
        assert_eq!(
            best,
            RTerm::Seq(vec![RTerm::Op { template: 3, args: vec![range(0, 2, 1), range(6, 2, -2)] }])
        );
    }

    #[test]
    fn equal_positions_stay_constant() {
        let g = saturate(
            &seq_of(1, &[&[0, 7], &[1, 7], &[2, 7]]),
            &SaturationConfig::default(),
        );
        let best = extract_best(&g);
        assert_eq!(
            best,
            RTerm::Seq(vec![RTerm::Op { template: 1, args: vec![range(0, 2, 1), RTerm::Const(7)] }])
        );
    }

    #[test]
    fn identical_ops_do_not_merge() {
        // No differing position: R1 must not fire.
        let g = saturate(&seq_of(0, &[&[5], &[5]]), &SaturationConfig::default());
        assert_eq!(extract_best(&g), seq_of(0, &[&[5], &[5]]));
    }

    #[test]
    fn different_templates_do_not_merge() {
        let t = RTerm::Seq(vec![RTerm::op(0, &[0]), RTerm::op(1, &[1])]);
        let g = saturate(&t, &SaturationConfig::default());
        assert_eq!(extract_best(&g), t);
    }

    #[test]
    fn extraction_never_costs_more_than_the_input() {
        let fixtures: Vec<RTerm> = vec![
            seq_of(0, &[&[0], &[1], &[2], &[3], &[4]]),
            seq_of(0, &[&[0], &[1], &[5], &[6]]),
            seq_of(2, &[&[0, 0], &[1, 2], &[2, 4], &[9, 9]]),
            seq_of(0, &[&[3]]),
            RTerm::Seq(vec![]),
        ];
        for t in fixtures {
            let g = saturate(&t, &SaturationConfig::default());
            assert!(extract_best(&g).cost() <= t.cost(), "regressed on {t:?}");
        }
    }

    #[test]
    fn extraction_is_optimal_by_brute_force() {
        // Small graphs: compare against exhaustive enumeration of every
        // representable term.
        let fixtures: Vec<RTerm> = vec![
            seq_of(0, &[&[0], &[1], &[2], &[3]]),
            seq_of(0, &[&[0], &[2], &[4], &[5]]),
            seq_of(1, &[&[0, 1], &[1, 1], &[2, 1]]),
            seq_of(0, &[&[0], &[5], &[6]]),
        ];
        for t in fixtures {
            let g = saturate(&t, &SaturationConfig::default());
            let brute = all_terms(&g, g.root, 0)
                .into_iter()
                .map(|t| (t.cost(), t))
                .min()
                .unwrap();
            let best = extract_best(&g);
            assert_eq!(best.cost(), brute.0, "cost not optimal for {t:?}");
        }
    }

    #[test]
    fn node_cap_truncates_gracefully() {
        let consts: Vec<Vec<i128>> = (0..12).map(|i| vec![i]).collect();
        let refs: Vec<&[i128]> = consts.iter().map(|v| v.as_slice()).collect();
        let t = seq_of(0, &refs);
        let g = saturate(&t, &SaturationConfig { max_enodes: 40, ..Default::default() });
        assert!(g.truncated);
        // Still extractable, never worse than the input.
        assert!(extract_best(&g).cost() <= t.cost());
    }

    #[test]
    fn long_uniform_run_rolls_to_one_loop() {
        let consts: Vec<Vec<i128>> = (0..16).map(|i| vec![i, 16 - i]).collect();
        let refs: Vec<&[i128]> = consts.iter().map(|v| v.as_slice()).collect();
        let g = saturate(&seq_of(0, &refs), &SaturationConfig::default());
        assert!(!g.truncated);
        let best = extract_best(&g);
        assert_eq!(
            best,
            RTerm::Seq(vec![RTerm::Op {
                template: 0,
                args: vec![range(0, 15, 1), range(16, 1, -1)]
            }])
        );
    }

    #[test]
    fn excluded_sequences_freeze_into_singletons() {
        let seqs = vec![AbstractSequence {
            template_id: 0,
            instances: (0..3).map(|i| Instance { line_no: i, consts: vec![i as i128] }).collect(),
            excluded: true,
        }];
        let t = to_term(&seqs, 1);
        let g = saturate(&t, &SaturationConfig::default());
        assert_eq!(extract_best(&g), t, "frozen ops must not merge");

        let live = select_targets(seqs, &SaturationConfig { min_sequence_ops: 2, ..Default::default() });
        assert!(!live[0].excluded);
        let t = to_term(&live, 1);
        let g = saturate(&t, &SaturationConfig::default());
        assert!(extract_best(&g).cost() < t.cost());
    }

    #[test]
    fn select_targets_thresholds_on_instance_count() {
        let mk = |n: usize| AbstractSequence {
            template_id: 0,
            instances: (0..n).map(|i| Instance { line_no: i, consts: vec![i as i128] }).collect(),
            excluded: false,
        };
        let out = select_targets(
            vec![mk(1), mk(3), mk(8)],
            &SaturationConfig { min_sequence_ops: 4, ..Default::default() },
        );
        assert_eq!(out.iter().map(|s| s.excluded).collect::<Vec<_>>(), vec![true, true, false]);
    }
}
