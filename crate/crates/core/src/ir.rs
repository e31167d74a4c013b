//! Core IR for straight-line and loop-structured kernels.
//!
//! Two program forms share one expression language:
//!
//! * [`Program`] — straight-line, single-assignment, constant array indices.
//!   This is the form field-arithmetic generators emit and the form the
//!   re-roller consumes.
//! * [`StructuredProgram`] — adds counted `for` loops (constant or
//!   max-bounded trip counts), outlined helper functions, and loop-affine
//!   index/operand expressions.
//!
//! Neither form can represent a data-dependent branch: there is no branch
//! node, loop bounds are compile-time constants (or carry a declared
//! compile-time maximum), and selection is expressed with `cmovznz`.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Bit width of a scalar value. `U1` is only used for carry/borrow flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScalarType {
    #[serde(rename = "u1")]
    U1,
    #[serde(rename = "u8")]
    U8,
    #[serde(rename = "u32")]
    U32,
    #[serde(rename = "u64")]
    U64,
    #[serde(rename = "u128")]
    U128,
}

impl ScalarType {
    pub const ALL: [ScalarType; 5] = [
        ScalarType::U1,
        ScalarType::U8,
        ScalarType::U32,
        ScalarType::U64,
        ScalarType::U128,
    ];

    pub fn bits(self) -> u32 {
        match self {
            ScalarType::U1 => 1,
            ScalarType::U8 => 8,
            ScalarType::U32 => 32,
            ScalarType::U64 => 64,
            ScalarType::U128 => 128,
        }
    }

    /// All-ones value of this width.
    pub fn mask(self) -> u128 {
        match self {
            ScalarType::U128 => u128::MAX,
            t => (1u128 << t.bits()) - 1,
        }
    }

    pub fn from_bits(bits: u32) -> Option<ScalarType> {
        Self::ALL.iter().copied().find(|t| t.bits() == bits)
    }

    /// Surface syntax name (`u64`, ...).
    pub fn name(self) -> &'static str {
        match self {
            ScalarType::U1 => "u1",
            ScalarType::U8 => "u8",
            ScalarType::U32 => "u32",
            ScalarType::U64 => "u64",
            ScalarType::U128 => "u128",
        }
    }
}

impl fmt::Display for ScalarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "in")]
    In,
    #[serde(rename = "out")]
    Out,
}

/// Formal parameter: an array of scalars or a scalar with a declared
/// compile-time maximum (used only as a loop bound or predication operand).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamKind {
    Array { elem: ScalarType, len: usize },
    Scalar { ty: ScalarType, max: u128 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub dir: Direction,
    #[serde(flatten)]
    pub kind: ParamKind,
}

impl Param {
    pub fn array(name: &str, dir: Direction, elem: ScalarType, len: usize) -> Param {
        Param { name: name.into(), dir, kind: ParamKind::Array { elem, len } }
    }

    pub fn scalar(name: &str, ty: ScalarType, max: u128) -> Param {
        Param { name: name.into(), dir: Direction::In, kind: ParamKind::Scalar { ty, max } }
    }
}

/// Function-local scratch array (synthesized when locals are grouped into
/// indexable storage).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalArray {
    pub name: String,
    pub elem: ScalarType,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Shl,
    Shr,
    And,
    Or,
    Xor,
}

impl BinOp {
    pub fn is_commutative(self) -> bool {
        matches!(self, BinOp::Add | BinOp::Mul | BinOp::And | BinOp::Or | BinOp::Xor)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::And => "&",
            BinOp::Or => "|",
            BinOp::Xor => "^",
        }
    }
}

/// Expression over declared-width scalars. All arithmetic wraps modulo the
/// operand width. Shift amounts are index-domain expressions (literal in
/// straight-line code, loop-affine in structured code), never runtime data.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expr {
    Lit { value: u128, ty: ScalarType },
    /// Scalar local or scalar parameter read.
    Var { name: String },
    /// Current loop counter used as a value of width `ty`.
    LoopVar { name: String, ty: ScalarType },
    Read { array: String, index: Box<Expr> },
    Not(Box<Expr>),
    Trunc { to: ScalarType, arg: Box<Expr> },
    Zext { to: ScalarType, arg: Box<Expr> },
    Bin { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    /// `cmovznz(flag, if_zero, if_nonzero)`: selects `if_nonzero` when
    /// `flag != 0`. The only data-dependent selection primitive.
    Cmov { ty: ScalarType, flag: Box<Expr>, if_zero: Box<Expr>, if_nonzero: Box<Expr> },
}

impl Expr {
    pub fn lit(value: u128, ty: ScalarType) -> Expr {
        Expr::Lit { value, ty }
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var { name: name.into() }
    }

    pub fn read(array: &str, index: Expr) -> Expr {
        Expr::Read { array: array.into(), index: Box::new(index) }
    }

    pub fn read_at(array: &str, index: i64) -> Expr {
        Expr::read(array, Expr::index_lit(index))
    }

    /// Literal in index position; width is irrelevant there.
    pub fn index_lit(value: i64) -> Expr {
        Expr::Lit { value: value as u128 & u64::MAX as u128, ty: ScalarType::U64 }
    }

    pub fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Bin { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
    }

    /// `base + var*scale` in index position, simplified when degenerate.
    pub fn affine(var: &str, scale: i64, base: i64) -> Expr {
        let v = Expr::LoopVar { name: var.into(), ty: ScalarType::U64 };
        let scaled = match scale {
            0 => return Expr::index_lit(base),
            1 => v,
            s => Expr::bin(BinOp::Mul, v, Expr::index_lit(s)),
        };
        match base {
            0 => scaled,
            b => Expr::bin(BinOp::Add, scaled, Expr::index_lit(b)),
        }
    }

    /// Walks the expression tree in pre-order.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Lit { .. } | Expr::Var { .. } | Expr::LoopVar { .. } => {}
            Expr::Read { index, .. } => index.walk(f),
            Expr::Not(a) | Expr::Trunc { arg: a, .. } | Expr::Zext { arg: a, .. } => a.walk(f),
            Expr::Bin { lhs, rhs, .. } => {
                lhs.walk(f);
                rhs.walk(f);
            }
            Expr::Cmov { flag, if_zero, if_nonzero, .. } => {
                flag.walk(f);
                if_zero.walk(f);
                if_nonzero.walk(f);
            }
        }
    }
}

/// Assignment target: a scalar local or an array element.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lvalue {
    Local { name: String },
    Elem { array: String, index: Box<Expr> },
}

impl Lvalue {
    pub fn local(name: &str) -> Lvalue {
        Lvalue::Local { name: name.into() }
    }

    pub fn elem(array: &str, index: Expr) -> Lvalue {
        Lvalue::Elem { array: array.into(), index: Box::new(index) }
    }

    pub fn elem_at(array: &str, index: i64) -> Lvalue {
        Lvalue::elem(array, Expr::index_lit(index))
    }
}

/// Two-result primitives. `AddCarry`/`SubBorrow` take `(carry_in, a, b)` and
/// produce `(result, flag)`; `MulWide` takes `(a, b)` and produces `(hi, lo)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WideOp {
    AddCarry,
    SubBorrow,
    MulWide,
}

impl WideOp {
    pub fn base_name(self) -> &'static str {
        match self {
            WideOp::AddCarry => "addcarry",
            WideOp::SubBorrow => "subborrow",
            WideOp::MulWide => "mulwide",
        }
    }

    pub fn arg_count(self) -> usize {
        match self {
            WideOp::AddCarry | WideOp::SubBorrow => 3,
            WideOp::MulWide => 2,
        }
    }

    /// Result widths `(first, second)` at operand width `ty`.
    pub fn result_types(self, ty: ScalarType) -> (ScalarType, ScalarType) {
        match self {
            WideOp::AddCarry | WideOp::SubBorrow => (ty, ScalarType::U1),
            WideOp::MulWide => (ty, ty),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rhs {
    Plain(Expr),
    Wide { op: WideOp, ty: ScalarType, args: Vec<Expr> },
}

/// One assignment. `targets` holds one lvalue, or two for a `Wide` rhs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Statement {
    pub targets: Vec<Lvalue>,
    pub rhs: Rhs,
}

impl Statement {
    pub fn assign(target: Lvalue, rhs: Expr) -> Statement {
        Statement { targets: vec![target], rhs: Rhs::Plain(rhs) }
    }

    pub fn wide(t0: Lvalue, t1: Lvalue, op: WideOp, ty: ScalarType, args: Vec<Expr>) -> Statement {
        Statement { targets: vec![t0, t1], rhs: Rhs::Wide { op, ty, args } }
    }

    /// All expressions read by this statement (rhs plus index expressions of
    /// element targets).
    pub fn operand_exprs(&self) -> Vec<&Expr> {
        let mut out = Vec::new();
        match &self.rhs {
            Rhs::Plain(e) => out.push(e),
            Rhs::Wide { args, .. } => out.extend(args.iter()),
        }
        for t in &self.targets {
            if let Lvalue::Elem { index, .. } = t {
                out.push(index);
            }
        }
        out
    }
}

/// Straight-line single-assignment kernel. Array indices are literal
/// constants; every local is assigned exactly once before any use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub params: Vec<Param>,
    pub locals: Vec<(String, ScalarType)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub local_arrays: Vec<LocalArray>,
    pub body: Vec<Statement>,
}

/// Loop bound: a constant, or a scalar parameter with a declared maximum.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Const(i64),
    Var { param: String },
}

/// Counted loop `for (var = start; var </> stop; var += step)`.
/// `step > 0` iterates while `var < stop`; `step < 0` while `var > stop`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForLoop {
    pub label: String,
    pub var: String,
    pub start: i64,
    pub stop: Bound,
    pub step: i64,
    pub body: Vec<Node>,
}

impl ForLoop {
    /// Trip count when the stop bound is a constant.
    pub fn const_trip_count(&self) -> Option<i64> {
        match self.stop {
            Bound::Const(stop) => Some(trip_count(self.start, stop, self.step)),
            Bound::Var { .. } => None,
        }
    }

    /// Counter values in iteration order (constant bound only).
    pub fn iter_values(&self) -> Vec<i64> {
        let n = self.const_trip_count().unwrap_or(0);
        (0..n).map(|i| self.start + i * self.step).collect()
    }
}

/// Iterations executed by `(start, stop, step)` under the `ForLoop` rule.
pub fn trip_count(start: i64, stop: i64, step: i64) -> i64 {
    if step > 0 {
        if stop <= start {
            0
        } else {
            (stop - start + step - 1) / step
        }
    } else if step < 0 {
        if stop >= start {
            0
        } else {
            (start - stop + (-step) - 1) / (-step)
        }
    } else {
        0
    }
}

/// Structured body element. There is deliberately no branch node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Stmt(Statement),
    For(ForLoop),
    /// Call to a defined helper function; arguments are array names.
    Call { callee: String, args: Vec<String> },
}

/// Outlined helper: a reusable loop or statement block over array parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinedFunction {
    pub name: String,
    pub params: Vec<Param>,
    pub body: Vec<Node>,
}

/// Kernel with counted loops and optional helper functions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredProgram {
    pub name: String,
    pub params: Vec<Param>,
    pub locals: Vec<(String, ScalarType)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub local_arrays: Vec<LocalArray>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub functions: Vec<DefinedFunction>,
    pub body: Vec<Node>,
}

impl From<Program> for StructuredProgram {
    fn from(p: Program) -> StructuredProgram {
        StructuredProgram {
            name: p.name,
            params: p.params,
            locals: p.locals,
            local_arrays: p.local_arrays,
            functions: Vec::new(),
            body: p.body.into_iter().map(Node::Stmt).collect(),
        }
    }
}

/// Name resolution context shared by validation, evaluation, and emission.
#[derive(Debug, Clone, Default)]
pub struct TypeEnv {
    pub scalars: BTreeMap<String, ScalarType>,
    pub scalar_maxima: BTreeMap<String, u128>,
    pub arrays: BTreeMap<String, (ScalarType, usize)>,
}

impl TypeEnv {
    pub fn add_param(&mut self, p: &Param) {
        match p.kind {
            ParamKind::Array { elem, len } => {
                self.arrays.insert(p.name.clone(), (elem, len));
            }
            ParamKind::Scalar { ty, max } => {
                self.scalars.insert(p.name.clone(), ty);
                self.scalar_maxima.insert(p.name.clone(), max);
            }
        }
    }
}

fn base_env(params: &[Param], locals: &[(String, ScalarType)], arrays: &[LocalArray]) -> TypeEnv {
    let mut env = TypeEnv::default();
    for p in params {
        env.add_param(p);
    }
    for (name, ty) in locals {
        env.scalars.insert(name.clone(), *ty);
    }
    for a in arrays {
        env.arrays.insert(a.name.clone(), (a.elem, a.len));
    }
    env
}

impl Program {
    pub fn type_env(&self) -> TypeEnv {
        base_env(&self.params, &self.locals, &self.local_arrays)
    }

    pub fn input_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.dir == Direction::In)
    }

    pub fn output_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.dir == Direction::Out)
    }
}

impl StructuredProgram {
    pub fn type_env(&self) -> TypeEnv {
        base_env(&self.params, &self.locals, &self.local_arrays)
    }

    pub fn function(&self, name: &str) -> Option<&DefinedFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// All loops in pre-order, paired with nesting depth (outermost = 0).
    pub fn loops(&self) -> Vec<(&ForLoop, usize)> {
        fn go<'a>(nodes: &'a [Node], depth: usize, out: &mut Vec<(&'a ForLoop, usize)>) {
            for n in nodes {
                if let Node::For(l) = n {
                    out.push((l, depth));
                    go(&l.body, depth + 1, out);
                }
            }
        }
        let mut out = Vec::new();
        go(&self.body, 0, &mut out);
        out
    }

    /// Re-labels all loops `L0, L1, ...` in pre-order.
    pub fn relabel_loops(&mut self) {
        fn go(nodes: &mut [Node], next: &mut usize) {
            for n in nodes {
                if let Node::For(l) = n {
                    l.label = format!("L{next}");
                    *next += 1;
                    go(&mut l.body, next);
                }
            }
        }
        let mut next = 0;
        go(&mut self.body, &mut next);
        for f in &mut self.functions {
            go(&mut f.body, &mut next);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidateError {
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("local `{0}` assigned more than once")]
    Reassigned(String),
    #[error("local `{0}` read before assignment")]
    UseBeforeAssign(String),
    #[error("write to input parameter `{0}`")]
    WriteToInput(String),
    #[error("width mismatch in {context}: expected {expected}, found {found}")]
    WidthMismatch { context: String, expected: ScalarType, found: ScalarType },
    #[error("array index for `{0}` is not a compile-time constant here")]
    NonConstIndex(String),
    #[error("index {index} out of bounds for `{array}` (len {len})")]
    IndexOutOfBounds { array: String, index: i64, len: usize },
    #[error("shift amount {amount} out of range for width {ty}")]
    ShiftOutOfRange { amount: i64, ty: ScalarType },
    #[error("shift amount must not depend on runtime data")]
    DataDependentShift,
    #[error("array index must not depend on runtime data")]
    DataDependentIndex,
    #[error("statement has {0} targets")]
    BadTargetCount(usize),
    #[error("two-result builtin `{op}` expects {expected} arguments, found {found}")]
    BadArity { op: String, expected: usize, found: usize },
    #[error("loop `{label}`: {msg}")]
    BadLoop { label: String, msg: String },
    #[error("call to `{callee}`: {msg}")]
    BadCall { callee: String, msg: String },
    #[error("scalar parameter `{0}` used outside index/predicate position")]
    ScalarParamMisuse(String),
}

/// Index-domain evaluation environment: loop counters in scope with their
/// constant iteration values, used when checking bounds exhaustively.
pub type IndexEnv = BTreeMap<String, i64>;

/// Evaluates an index-position expression over integer semantics.
/// Returns `None` if the expression references anything but literals and
/// in-scope loop counters.
pub fn eval_index(e: &Expr, env: &IndexEnv) -> Option<i64> {
    match e {
        Expr::Lit { value, .. } => {
            // Index literals are stored as the two's-complement image of an
            // i64 inside a u128.
            Some(*value as u64 as i64)
        }
        Expr::LoopVar { name, .. } => env.get(name).copied(),
        Expr::Bin { op, lhs, rhs } => {
            let a = eval_index(lhs, env)?;
            let b = eval_index(rhs, env)?;
            match op {
                BinOp::Add => a.checked_add(b),
                BinOp::Sub => a.checked_sub(b),
                BinOp::Mul => a.checked_mul(b),
                BinOp::And => Some(a & b),
                BinOp::Or => Some(a | b),
                BinOp::Xor => Some(a ^ b),
                BinOp::Shl => a.checked_shl(u32::try_from(b).ok()?),
                BinOp::Shr => a.checked_shr(u32::try_from(b).ok()?),
            }
        }
        _ => None,
    }
}

/// True when `e` is a pure function of literals and loop counters.
pub fn is_counter_expr(e: &Expr) -> bool {
    match e {
        Expr::Lit { .. } | Expr::LoopVar { .. } => true,
        Expr::Bin { lhs, rhs, .. } => is_counter_expr(lhs) && is_counter_expr(rhs),
        _ => false,
    }
}

/// Extracts `scale * var + base` when `e` is affine in a single loop counter.
/// Literal-only expressions report `var = None`.
pub fn as_affine(e: &Expr) -> Option<AffineIndex> {
    match e {
        Expr::Lit { value, .. } => {
            Some(AffineIndex { var: None, scale: 0, base: *value as u64 as i64 })
        }
        Expr::LoopVar { name, .. } => {
            Some(AffineIndex { var: Some(name.clone()), scale: 1, base: 0 })
        }
        Expr::Bin { op, lhs, rhs } => {
            let a = as_affine(lhs)?;
            let b = as_affine(rhs)?;
            match op {
                BinOp::Add => a.combine(&b, 1),
                BinOp::Sub => a.combine(&b, -1),
                BinOp::Mul => {
                    if a.var.is_none() {
                        Some(AffineIndex {
                            var: b.var.clone(),
                            scale: b.scale.checked_mul(a.base)?,
                            base: b.base.checked_mul(a.base)?,
                        })
                    } else if b.var.is_none() {
                        Some(AffineIndex {
                            var: a.var.clone(),
                            scale: a.scale.checked_mul(b.base)?,
                            base: a.base.checked_mul(b.base)?,
                        })
                    } else {
                        None
                    }
                }
                _ => None,
            }
        }
        _ => None,
    }
}

/// Affine form `scale * var + base` of an index expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffineIndex {
    pub var: Option<String>,
    pub scale: i64,
    pub base: i64,
}

impl AffineIndex {
    fn combine(&self, other: &AffineIndex, sign: i64) -> Option<AffineIndex> {
        let var = match (&self.var, &other.var) {
            (Some(a), Some(b)) if a == b => Some(a.clone()),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => None,
            _ => return None,
        };
        Some(AffineIndex {
            var,
            scale: self.scale.checked_add(other.scale.checked_mul(sign)?)?,
            base: self.base.checked_add(other.base.checked_mul(sign)?)?,
        })
    }
}

/// Computes the width of a value-position expression bottom-up, checking
/// operand agreement along the way.
pub fn expr_width(e: &Expr, env: &TypeEnv) -> Result<ScalarType, ValidateError> {
    match e {
        Expr::Lit { ty, .. } => Ok(*ty),
        Expr::Var { name } => env
            .scalars
            .get(name)
            .copied()
            .ok_or_else(|| ValidateError::UnknownName(name.clone())),
        Expr::LoopVar { ty, .. } => Ok(*ty),
        Expr::Read { array, .. } => env
            .arrays
            .get(array)
            .map(|(t, _)| *t)
            .ok_or_else(|| ValidateError::UnknownName(array.clone())),
        Expr::Not(a) => expr_width(a, env),
        Expr::Trunc { to, arg } | Expr::Zext { to, arg } => {
            expr_width(arg, env)?;
            Ok(*to)
        }
        Expr::Bin { op, lhs, rhs } => {
            let lw = expr_width(lhs, env)?;
            if matches!(op, BinOp::Shl | BinOp::Shr) {
                // Amount lives in the index domain; its nominal width is ignored.
                return Ok(lw);
            }
            let rw = expr_width(rhs, env)?;
            if lw != rw {
                return Err(ValidateError::WidthMismatch {
                    context: format!("operands of `{}`", op.symbol()),
                    expected: lw,
                    found: rw,
                });
            }
            Ok(lw)
        }
        Expr::Cmov { ty, flag, if_zero, if_nonzero } => {
            expr_width(flag, env)?;
            for (side, arm) in [("if_zero", if_zero), ("if_nonzero", if_nonzero)] {
                let w = expr_width(arm, env)?;
                if w != *ty {
                    return Err(ValidateError::WidthMismatch {
                        context: format!("cmovznz {side} arm"),
                        expected: *ty,
                        found: w,
                    });
                }
            }
            Ok(*ty)
        }
    }
}

struct Validator<'p> {
    env: TypeEnv,
    /// Locals assigned so far, in straight-line order.
    assigned: BTreeSet<String>,
    /// Loop counters in scope mapped to their possible values.
    counters: Vec<(String, Vec<i64>)>,
    params: &'p [Param],
    require_const_indices: bool,
}

impl<'p> Validator<'p> {
    fn counter_envs(&self) -> Vec<IndexEnv> {
        // Cartesian product of in-scope counter values; used to check index
        // bounds and shift ranges exhaustively. Trip counts are compile-time
        // constants, so this is finite.
        let mut envs: Vec<IndexEnv> = vec![IndexEnv::new()];
        for (name, values) in &self.counters {
            let mut next = Vec::with_capacity(envs.len() * values.len().max(1));
            for env in &envs {
                for v in values {
                    let mut e = env.clone();
                    e.insert(name.clone(), *v);
                    next.push(e);
                }
            }
            envs = next;
        }
        envs
    }

    fn check_index(&self, array: &str, index: &Expr) -> Result<(), ValidateError> {
        let (_, len) = *self
            .env
            .arrays
            .get(array)
            .ok_or_else(|| ValidateError::UnknownName(array.to_string()))?;
        if !is_counter_expr(index) {
            return Err(ValidateError::DataDependentIndex);
        }
        if self.require_const_indices && !matches!(index, Expr::Lit { .. }) {
            return Err(ValidateError::NonConstIndex(array.to_string()));
        }
        for env in self.counter_envs() {
            let v = eval_index(index, &env).ok_or(ValidateError::DataDependentIndex)?;
            if v < 0 || v as usize >= len {
                return Err(ValidateError::IndexOutOfBounds {
                    array: array.to_string(),
                    index: v,
                    len,
                });
            }
        }
        Ok(())
    }

    fn check_shift_amount(&self, amount: &Expr, ty: ScalarType) -> Result<(), ValidateError> {
        if !is_counter_expr(amount) {
            return Err(ValidateError::DataDependentShift);
        }
        for env in self.counter_envs() {
            let v = eval_index(amount, &env).ok_or(ValidateError::DataDependentShift)?;
            if v < 0 || v >= ty.bits() as i64 {
                return Err(ValidateError::ShiftOutOfRange { amount: v, ty });
            }
        }
        Ok(())
    }

    fn check_expr(&self, e: &Expr) -> Result<(), ValidateError> {
        match e {
            Expr::Lit { .. } => Ok(()),
            Expr::Var { name } => {
                if self.env.scalar_maxima.contains_key(name) {
                    // Scalar parameter read as a plain value: allowed, it is a
                    // compile-time-bounded quantity.
                    return Ok(());
                }
                if !self.env.scalars.contains_key(name) {
                    return Err(ValidateError::UnknownName(name.clone()));
                }
                if !self.assigned.contains(name) {
                    return Err(ValidateError::UseBeforeAssign(name.clone()));
                }
                Ok(())
            }
            Expr::LoopVar { name, .. } => {
                if self.counters.iter().any(|(n, _)| n == name) {
                    Ok(())
                } else {
                    Err(ValidateError::UnknownName(name.clone()))
                }
            }
            Expr::Read { array, index } => self.check_index(array, index),
            Expr::Not(a) | Expr::Trunc { arg: a, .. } | Expr::Zext { arg: a, .. } => {
                self.check_expr(a)
            }
            Expr::Bin { op, lhs, rhs } => {
                self.check_expr(lhs)?;
                if matches!(op, BinOp::Shl | BinOp::Shr) {
                    let ty = expr_width(lhs, &self.env)?;
                    self.check_shift_amount(rhs, ty)
                } else {
                    self.check_expr(rhs)
                }
            }
            Expr::Cmov { flag, if_zero, if_nonzero, .. } => {
                self.check_expr(flag)?;
                self.check_expr(if_zero)?;
                self.check_expr(if_nonzero)
            }
        }
    }

    fn check_target(&mut self, t: &Lvalue, ty: ScalarType) -> Result<(), ValidateError> {
        match t {
            Lvalue::Local { name } => {
                let declared = self
                    .env
                    .scalars
                    .get(name)
                    .copied()
                    .ok_or_else(|| ValidateError::UnknownName(name.clone()))?;
                if declared != ty {
                    return Err(ValidateError::WidthMismatch {
                        context: format!("assignment to `{name}`"),
                        expected: declared,
                        found: ty,
                    });
                }
                if !self.assigned.insert(name.clone()) {
                    return Err(ValidateError::Reassigned(name.clone()));
                }
                Ok(())
            }
            Lvalue::Elem { array, index } => {
                if let Some(p) = self.params.iter().find(|p| &p.name == array) {
                    if p.dir == Direction::In {
                        return Err(ValidateError::WriteToInput(array.clone()));
                    }
                }
                let elem = self
                    .env
                    .arrays
                    .get(array)
                    .map(|(t, _)| *t)
                    .ok_or_else(|| ValidateError::UnknownName(array.clone()))?;
                if elem != ty {
                    return Err(ValidateError::WidthMismatch {
                        context: format!("store to `{array}`"),
                        expected: elem,
                        found: ty,
                    });
                }
                self.check_index(array, index)
            }
        }
    }

    fn check_statement(&mut self, s: &Statement) -> Result<(), ValidateError> {
        match &s.rhs {
            Rhs::Plain(e) => {
                if s.targets.len() != 1 {
                    return Err(ValidateError::BadTargetCount(s.targets.len()));
                }
                self.check_expr(e)?;
                let ty = expr_width(e, &self.env)?;
                self.check_target(&s.targets[0].clone(), ty)
            }
            Rhs::Wide { op, ty, args } => {
                if s.targets.len() != 2 {
                    return Err(ValidateError::BadTargetCount(s.targets.len()));
                }
                if args.len() != op.arg_count() {
                    return Err(ValidateError::BadArity {
                        op: format!("{}_{}", op.base_name(), ty),
                        expected: op.arg_count(),
                        found: args.len(),
                    });
                }
                for (i, a) in args.iter().enumerate() {
                    self.check_expr(a)?;
                    let w = expr_width(a, &self.env)?;
                    // Carry-in of addcarry/subborrow may be any width; the
                    // value operands must match the builtin width.
                    let is_carry_in = matches!(op, WideOp::AddCarry | WideOp::SubBorrow) && i == 0;
                    if !is_carry_in && w != *ty {
                        return Err(ValidateError::WidthMismatch {
                            context: format!("argument {i} of {}_{}", op.base_name(), ty),
                            expected: *ty,
                            found: w,
                        });
                    }
                }
                let (t0, t1) = op.result_types(*ty);
                self.check_target(&s.targets[0].clone(), t0)?;
                self.check_target(&s.targets[1].clone(), t1)
            }
        }
    }

    fn check_nodes(&mut self, nodes: &[Node], sp: &StructuredProgram) -> Result<(), ValidateError> {
        for n in nodes {
            match n {
                Node::Stmt(s) => self.check_statement(s)?,
                Node::For(l) => {
                    if l.step == 0 {
                        return Err(ValidateError::BadLoop {
                            label: l.label.clone(),
                            msg: "zero step".into(),
                        });
                    }
                    let values = match &l.stop {
                        Bound::Const(_) => l.iter_values(),
                        Bound::Var { param } => {
                            let max =
                                *self.env.scalar_maxima.get(param).ok_or_else(|| {
                                    ValidateError::UnknownName(param.clone())
                                })?;
                            if l.step != 1 || l.start != 0 {
                                return Err(ValidateError::BadLoop {
                                    label: l.label.clone(),
                                    msg: "variable-bound loop must count 0..bound by 1".into(),
                                });
                            }
                            (0..max as i64).collect()
                        }
                    };
                    if self.counters.iter().any(|(n, _)| n == &l.var) {
                        return Err(ValidateError::DuplicateName(l.var.clone()));
                    }
                    self.counters.push((l.var.clone(), values));
                    let before = self.assigned.clone();
                    self.check_nodes(&l.body, sp)?;
                    // Scalar locals assigned inside a loop body are
                    // per-iteration values; they do not escape the loop.
                    self.assigned = before;
                    self.counters.pop();
                }
                Node::Call { callee, args } => {
                    let f = sp.function(callee).ok_or_else(|| ValidateError::BadCall {
                        callee: callee.clone(),
                        msg: "no such function".into(),
                    })?;
                    if f.params.len() != args.len() {
                        return Err(ValidateError::BadCall {
                            callee: callee.clone(),
                            msg: format!(
                                "expected {} arguments, found {}",
                                f.params.len(),
                                args.len()
                            ),
                        });
                    }
                    for (formal, actual) in f.params.iter().zip(args) {
                        let (elem, len) = self
                            .env
                            .arrays
                            .get(actual)
                            .ok_or_else(|| ValidateError::UnknownName(actual.clone()))?;
                        match formal.kind {
                            ParamKind::Array { elem: fe, len: fl } => {
                                if fe != *elem || fl != *len {
                                    return Err(ValidateError::BadCall {
                                        callee: callee.clone(),
                                        msg: format!("argument `{actual}` shape mismatch"),
                                    });
                                }
                            }
                            ParamKind::Scalar { .. } => {
                                return Err(ValidateError::BadCall {
                                    callee: callee.clone(),
                                    msg: "scalar parameters are not supported in calls".into(),
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_unique_names(
    params: &[Param],
    locals: &[(String, ScalarType)],
    arrays: &[LocalArray],
) -> Result<(), ValidateError> {
    let mut seen = BTreeSet::new();
    for name in params
        .iter()
        .map(|p| &p.name)
        .chain(locals.iter().map(|(n, _)| n))
        .chain(arrays.iter().map(|a| &a.name))
    {
        if !seen.insert(name.clone()) {
            return Err(ValidateError::DuplicateName(name.clone()));
        }
    }
    Ok(())
}

/// Checks the straight-line well-formedness rules: unique names, single
/// assignment, def-before-use, literal in-bounds indices, literal in-range
/// shift amounts, width agreement.
pub fn validate_straight_line(p: &Program) -> Result<(), ValidateError> {
    check_unique_names(&p.params, &p.locals, &p.local_arrays)?;
    let mut v = Validator {
        env: p.type_env(),
        assigned: BTreeSet::new(),
        counters: Vec::new(),
        params: &p.params,
        require_const_indices: true,
    };
    for s in &p.body {
        v.check_statement(s)?;
    }
    Ok(())
}

/// Checks a structured kernel: straight-line rules inside each iteration
/// scope, loop-counter-only index and shift expressions (verified in bounds
/// over every iteration), well-formed loops and calls.
pub fn validate_structured(p: &StructuredProgram) -> Result<(), ValidateError> {
    check_unique_names(&p.params, &p.locals, &p.local_arrays)?;
    let mut v = Validator {
        env: p.type_env(),
        assigned: BTreeSet::new(),
        counters: Vec::new(),
        params: &p.params,
        require_const_indices: false,
    };
    v.check_nodes(&p.body, p)?;
    for f in &p.functions {
        let locals = Vec::new();
        let arrays = Vec::new();
        check_unique_names(&f.params, &locals, &arrays)?;
        let mut fv = Validator {
            env: base_env(&f.params, &locals, &arrays),
            assigned: BTreeSet::new(),
            counters: Vec::new(),
            params: &f.params,
            require_const_indices: false,
        };
        fv.check_nodes(&f.body, p)?;
    }
    Ok(())
}

/// Scans emitted structured code for timing-unsafe constructs. The node set
/// has no branch form, so the scan reports the two representable hazards:
/// non-constant loop bounds and runtime-data-dependent index or shift
/// expressions. An empty result means constant-time control flow.
pub fn side_channel_scan(p: &StructuredProgram) -> Vec<String> {
    let mut findings = Vec::new();
    fn scan_expr(e: &Expr, at: &str, findings: &mut Vec<String>) {
        e.walk(&mut |sub| match sub {
            Expr::Read { array, index } if !is_counter_expr(index) => {
                findings.push(format!("{at}: data-dependent index into `{array}`"));
            }
            Expr::Bin { op: BinOp::Shl | BinOp::Shr, rhs, .. } if !is_counter_expr(rhs) => {
                findings.push(format!("{at}: data-dependent shift amount"));
            }
            _ => {}
        });
    }
    fn scan_nodes(nodes: &[Node], at: &str, findings: &mut Vec<String>) {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    for e in s.operand_exprs() {
                        scan_expr(e, at, findings);
                    }
                    for t in &s.targets {
                        if let Lvalue::Elem { array, index } = t {
                            if !is_counter_expr(index) {
                                findings
                                    .push(format!("{at}: data-dependent store index into `{array}`"));
                            }
                        }
                    }
                }
                Node::For(l) => {
                    if let Bound::Var { param } = &l.stop {
                        findings.push(format!(
                            "loop `{}`: runtime-variable bound `{param}`",
                            l.label
                        ));
                    }
                    scan_nodes(&l.body, &format!("{at}/{}", l.label), findings);
                }
                Node::Call { .. } => {}
            }
        }
    }
    scan_nodes(&p.body, "body", &mut findings);
    for f in &p.functions {
        scan_nodes(&f.body, &f.name, &mut findings);
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_mul() -> Program {
        Program {
            name: "two_mul".into(),
            params: vec![
                Param::array("a", Direction::In, ScalarType::U64, 2),
                Param::array("o", Direction::Out, ScalarType::U64, 1),
            ],
            locals: vec![("x0".into(), ScalarType::U64)],
            local_arrays: vec![],
            body: vec![
                Statement::assign(
                    Lvalue::local("x0"),
                    Expr::bin(BinOp::Mul, Expr::read_at("a", 0), Expr::read_at("a", 1)),
                ),
                Statement::assign(Lvalue::elem_at("o", 0), Expr::var("x0")),
            ],
        }
    }

    #[test]
    fn valid_straight_line_accepted() {
        validate_straight_line(&two_mul()).unwrap();
    }

    #[test]
    fn reassignment_rejected() {
        let mut p = two_mul();
        p.body.push(Statement::assign(Lvalue::local("x0"), Expr::read_at("a", 0)));
        assert_eq!(validate_straight_line(&p), Err(ValidateError::Reassigned("x0".into())));
    }

    #[test]
    fn use_before_assign_rejected() {
        let mut p = two_mul();
        p.body.swap(0, 1);
        assert_eq!(validate_straight_line(&p), Err(ValidateError::UseBeforeAssign("x0".into())));
    }

    #[test]
    fn out_of_bounds_index_rejected() {
        let mut p = two_mul();
        p.body[0] = Statement::assign(Lvalue::local("x0"), Expr::read_at("a", 2));
        assert!(matches!(
            validate_straight_line(&p),
            Err(ValidateError::IndexOutOfBounds { index: 2, .. })
        ));
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut p = two_mul();
        p.body[0] = Statement::assign(
            Lvalue::local("x0"),
            Expr::bin(BinOp::Add, Expr::read_at("a", 0), Expr::lit(1, ScalarType::U32)),
        );
        assert!(matches!(validate_straight_line(&p), Err(ValidateError::WidthMismatch { .. })));
    }

    #[test]
    fn write_to_input_rejected() {
        let mut p = two_mul();
        p.body[1] = Statement::assign(Lvalue::elem_at("a", 0), Expr::var("x0"));
        assert_eq!(validate_straight_line(&p), Err(ValidateError::WriteToInput("a".into())));
    }

    #[test]
    fn variable_index_rejected_in_straight_line() {
        let mut p = two_mul();
        p.body[0] = Statement::assign(
            Lvalue::local("x0"),
            Expr::read("a", Expr::LoopVar { name: "v".into(), ty: ScalarType::U64 }),
        );
        assert!(validate_straight_line(&p).is_err());
    }

    #[test]
    fn trip_counts() {
        assert_eq!(trip_count(0, 8, 1), 8);
        assert_eq!(trip_count(0, 8, 2), 4);
        assert_eq!(trip_count(0, 7, 2), 4);
        assert_eq!(trip_count(8, 0, -2), 4);
        assert_eq!(trip_count(3, 3, 1), 0);
        assert_eq!(trip_count(0, 16, 3), 6);
    }

    #[test]
    fn loop_iter_values_follow_sign_of_step() {
        let l = ForLoop {
            label: "L0".into(),
            var: "v".into(),
            start: 6,
            stop: Bound::Const(0),
            step: -2,
            body: vec![],
        };
        assert_eq!(l.iter_values(), vec![6, 4, 2]);
    }

    #[test]
    fn affine_extraction() {
        let e = Expr::affine("v", 2, 3);
        let a = as_affine(&e).unwrap();
        assert_eq!(a.var.as_deref(), Some("v"));
        assert_eq!((a.scale, a.base), (2, 3));

        let masked = Expr::bin(
            BinOp::And,
            Expr::LoopVar { name: "v".into(), ty: ScalarType::U64 },
            Expr::index_lit(5),
        );
        assert!(as_affine(&masked).is_none());
        assert!(is_counter_expr(&masked));
    }

    #[test]
    fn structured_loop_validates_per_iteration_bounds() {
        // t[v + 6] walks out of bounds at the last iteration.
        let p = StructuredProgram {
            name: "walk".into(),
            params: vec![
                Param::array("a", Direction::In, ScalarType::U64, 8),
                Param::array("t", Direction::Out, ScalarType::U64, 8),
            ],
            locals: vec![],
            local_arrays: vec![],
            functions: vec![],
            body: vec![Node::For(ForLoop {
                label: "L0".into(),
                var: "v".into(),
                start: 0,
                stop: Bound::Const(3),
                step: 1,
                body: vec![Node::Stmt(Statement::assign(
                    Lvalue::elem("t", Expr::affine("v", 1, 6)),
                    Expr::read("a", Expr::affine("v", 1, 0)),
                ))],
            })],
        };
        assert!(matches!(
            validate_structured(&p),
            Err(ValidateError::IndexOutOfBounds { index: 8, .. })
        ));
    }

    #[test]
    fn side_channel_scan_flags_variable_bound() {
        let p = StructuredProgram {
            name: "varbound".into(),
            params: vec![
                Param::array("t", Direction::Out, ScalarType::U64, 8),
                Param::scalar("n", ScalarType::U32, 8),
            ],
            locals: vec![],
            local_arrays: vec![],
            functions: vec![],
            body: vec![Node::For(ForLoop {
                label: "L0".into(),
                var: "v".into(),
                start: 0,
                stop: Bound::Var { param: "n".into() },
                step: 1,
                body: vec![Node::Stmt(Statement::assign(
                    Lvalue::elem("t", Expr::affine("v", 1, 0)),
                    Expr::lit(0, ScalarType::U64),
                ))],
            })],
        };
        let findings = side_channel_scan(&p);
        assert_eq!(findings.len(), 1);
        assert!(findings[0].contains("runtime-variable bound"));
    }

    #[test]
    fn json_round_trip_keeps_program_identical() {
        let p = two_mul();
        let json = serde_json::to_string(&p).unwrap();
        // Top-level schema keys.
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["name", "params", "locals", "body"] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        let back: Program = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }
}
