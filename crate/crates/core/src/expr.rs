//! 32-bit bitvector expressions.
//!
//! Expressions are immutable, reference-counted trees. The smart
//! constructors fold constants and apply local identities as nodes are
//! built, so most concrete computation never allocates more than one node.
//! Comparison nodes evaluate to 0 or 1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Origin {
    /// Peripheral status register snapshot.
    Sr,
    /// Peripheral data register input.
    Dr,
    /// Value of a global variable.
    Global,
}

/// A symbolic 32-bit variable.
///
/// `Global` variables whose id lies in RAM (see [`Var::old_value`]) denote
/// the value a global held before an interrupt ran; every other id comes
/// from a fresh-variable counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Var {
    pub origin: Origin,
    pub id: u32,
}

const OLD_VALUE_BASE: u32 = 0x2000_0000;

impl Var {
    pub fn new(origin: Origin, id: u32) -> Var {
        Var { origin, id }
    }

    /// The pre-interrupt value of the global at `addr`.
    pub fn old_value(addr: u32) -> Var {
        Var { origin: Origin::Global, id: addr }
    }

    pub fn old_value_addr(&self) -> Option<u32> {
        (self.origin == Origin::Global && self.id >= OLD_VALUE_BASE).then_some(self.id)
    }

    pub fn name(&self) -> String {
        match (self.origin, self.old_value_addr()) {
            (_, Some(addr)) => format!("old_{addr:08x}"),
            (Origin::Sr, _) => format!("sr{}", self.id),
            (Origin::Dr, _) => format!("dr{}", self.id),
            (Origin::Global, _) => format!("g{}", self.id),
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Ult,
    Slt,
}

impl BinOp {
    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ne | BinOp::Ult | BinOp::Slt)
    }

    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a << (b & 31),
            BinOp::Shr => a >> (b & 31),
            BinOp::Eq => u32::from(a == b),
            BinOp::Ne => u32::from(a != b),
            BinOp::Ult => u32::from(a < b),
            BinOp::Slt => u32::from((a as i32) < (b as i32)),
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
            BinOp::Ult => "ult",
            BinOp::Slt => "slt",
        }
    }
}

#[derive(Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Const(u32),
    Var(Var),
    Bin(BinOp, Expr, Expr),
    Ite(Expr, Expr, Expr),
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expr(Arc<Node>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("variable {0} is not bound by the model")]
    UnboundVariable(Var),
}

/// Variable assignment produced by the solver.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub assignments: BTreeMap<Var, u32>,
}

impl Model {
    pub fn get(&self, var: Var) -> Option<u32> {
        self.assignments.get(&var).copied()
    }

    pub fn insert(&mut self, var: Var, value: u32) {
        self.assignments.insert(var, value);
    }
}

impl FromIterator<(Var, u32)> for Model {
    fn from_iter<I: IntoIterator<Item = (Var, u32)>>(iter: I) -> Self {
        Model { assignments: iter.into_iter().collect() }
    }
}

fn is_bool(e: &Expr) -> bool {
    match e.node() {
        Node::Const(c) => *c <= 1,
        Node::Bin(op, _, _) => op.is_comparison(),
        Node::Ite(_, a, b) => is_bool(a) && is_bool(b),
        Node::Var(_) => false,
    }
}

impl Expr {
    fn mk(node: Node) -> Expr {
        Expr(Arc::new(node))
    }

    pub fn node(&self) -> &Node {
        &self.0
    }

    pub fn constant(value: u32) -> Expr {
        Expr::mk(Node::Const(value))
    }

    pub fn var(var: Var) -> Expr {
        Expr::mk(Node::Var(var))
    }

    pub fn as_const(&self) -> Option<u32> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_var(&self) -> Option<Var> {
        match self.node() {
            Node::Var(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_const(&self) -> bool {
        self.as_const().is_some()
    }

    pub fn ptr_eq(&self, other: &Expr) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        match op {
            BinOp::Add => Expr::add(a, b),
            BinOp::Sub => Expr::sub(a, b),
            BinOp::And => Expr::and(a, b),
            BinOp::Or => Expr::or(a, b),
            BinOp::Xor => Expr::xor(a, b),
            BinOp::Shl => Expr::shl(a, b),
            BinOp::Shr => Expr::shr(a, b),
            BinOp::Eq => Expr::eq(a, b),
            BinOp::Ne => Expr::ne(a, b),
            BinOp::Ult => Expr::ult(a, b),
            BinOp::Slt => Expr::slt(a, b),
        }
    }

    fn fold(op: BinOp, a: &Expr, b: &Expr) -> Option<Expr> {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Some(Expr::constant(op.apply(x, y))),
            _ => None,
        }
    }

    /// Puts a constant operand of a commutative operator on the right.
    fn commute(a: Expr, b: Expr) -> (Expr, Expr) {
        if a.is_const() && !b.is_const() {
            (b, a)
        } else {
            (a, b)
        }
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Add, &a, &b) {
            return e;
        }
        let (a, b) = Expr::commute(a, b);
        if b.as_const() == Some(0) {
            return a;
        }
        if let (Node::Bin(BinOp::Add, x, c1), Some(c2)) = (a.node(), b.as_const()) {
            if let Some(c1) = c1.as_const() {
                return Expr::add(x.clone(), Expr::constant(c1.wrapping_add(c2)));
            }
        }
        Expr::mk(Node::Bin(BinOp::Add, a, b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Sub, &a, &b) {
            return e;
        }
        if a == b {
            return Expr::constant(0);
        }
        if let Some(c) = b.as_const() {
            return Expr::add(a, Expr::constant(c.wrapping_neg()));
        }
        Expr::mk(Node::Bin(BinOp::Sub, a, b))
    }

    pub fn and(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::And, &a, &b) {
            return e;
        }
        let (a, b) = Expr::commute(a, b);
        match b.as_const() {
            Some(0) => return Expr::constant(0),
            Some(u32::MAX) => return a,
            Some(1) if is_bool(&a) => return a,
            Some(c2) => {
                if let Node::Bin(BinOp::And, x, c1) = a.node() {
                    if let Some(c1) = c1.as_const() {
                        return Expr::and(x.clone(), Expr::constant(c1 & c2));
                    }
                }
            }
            None => {}
        }
        if a == b {
            return a;
        }
        Expr::mk(Node::Bin(BinOp::And, a, b))
    }

    pub fn or(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Or, &a, &b) {
            return e;
        }
        let (a, b) = Expr::commute(a, b);
        match b.as_const() {
            Some(0) => return a,
            Some(u32::MAX) => return b,
            _ => {}
        }
        if a == b {
            return a;
        }
        Expr::mk(Node::Bin(BinOp::Or, a, b))
    }

    pub fn xor(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Xor, &a, &b) {
            return e;
        }
        let (a, b) = Expr::commute(a, b);
        if b.as_const() == Some(0) {
            return a;
        }
        if a == b {
            return Expr::constant(0);
        }
        Expr::mk(Node::Bin(BinOp::Xor, a, b))
    }

    pub fn not(a: Expr) -> Expr {
        Expr::xor(a, Expr::constant(u32::MAX))
    }

    pub fn shl(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Shl, &a, &b) {
            return e;
        }
        match b.as_const() {
            Some(c) if c & 31 == 0 => return a,
            Some(c) if c >= 32 => return Expr::shl(a, Expr::constant(c & 31)),
            _ => {}
        }
        if a.as_const() == Some(0) {
            return a;
        }
        Expr::mk(Node::Bin(BinOp::Shl, a, b))
    }

    pub fn shr(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Shr, &a, &b) {
            return e;
        }
        match b.as_const() {
            Some(c) if c & 31 == 0 => return a,
            Some(c) if c >= 32 => return Expr::shr(a, Expr::constant(c & 31)),
            _ => {}
        }
        if a.as_const() == Some(0) {
            return a;
        }
        Expr::mk(Node::Bin(BinOp::Shr, a, b))
    }

    /// Logical negation of a 0/1-valued expression.
    fn negate_bool(e: &Expr) -> Option<Expr> {
        match e.node() {
            Node::Bin(BinOp::Eq, x, y) => Some(Expr::mk(Node::Bin(BinOp::Ne, x.clone(), y.clone()))),
            Node::Bin(BinOp::Ne, x, y) => Some(Expr::mk(Node::Bin(BinOp::Eq, x.clone(), y.clone()))),
            _ => None,
        }
    }

    pub fn eq(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Eq, &a, &b) {
            return e;
        }
        if a == b {
            return Expr::constant(1);
        }
        let (a, b) = Expr::commute(a, b);
        if let Some(c) = b.as_const() {
            if is_bool(&a) {
                match c {
                    0 => {
                        if let Some(neg) = Expr::negate_bool(&a) {
                            return neg;
                        }
                    }
                    1 => return a,
                    _ => return Expr::constant(0),
                }
            }
            if let Node::Bin(BinOp::Add, x, c1) = a.node() {
                if let Some(c1) = c1.as_const() {
                    return Expr::eq(x.clone(), Expr::constant(c.wrapping_sub(c1)));
                }
            }
            if let Node::Bin(BinOp::Xor, x, c1) = a.node() {
                if let Some(c1) = c1.as_const() {
                    return Expr::eq(x.clone(), Expr::constant(c ^ c1));
                }
            }
        }
        Expr::mk(Node::Bin(BinOp::Eq, a, b))
    }

    pub fn ne(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Ne, &a, &b) {
            return e;
        }
        if a == b {
            return Expr::constant(0);
        }
        let (a, b) = Expr::commute(a, b);
        if let Some(c) = b.as_const() {
            if is_bool(&a) {
                match c {
                    0 => return a,
                    1 => {
                        if let Some(neg) = Expr::negate_bool(&a) {
                            return neg;
                        }
                    }
                    _ => return Expr::constant(1),
                }
            }
            if let Node::Bin(BinOp::Add, x, c1) = a.node() {
                if let Some(c1) = c1.as_const() {
                    return Expr::ne(x.clone(), Expr::constant(c.wrapping_sub(c1)));
                }
            }
        }
        Expr::mk(Node::Bin(BinOp::Ne, a, b))
    }

    pub fn ult(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Ult, &a, &b) {
            return e;
        }
        if a == b || b.as_const() == Some(0) || a.as_const() == Some(u32::MAX) {
            return Expr::constant(0);
        }
        Expr::mk(Node::Bin(BinOp::Ult, a, b))
    }

    pub fn slt(a: Expr, b: Expr) -> Expr {
        if let Some(e) = Expr::fold(BinOp::Slt, &a, &b) {
            return e;
        }
        if a == b {
            return Expr::constant(0);
        }
        Expr::mk(Node::Bin(BinOp::Slt, a, b))
    }

    pub fn ule(a: Expr, b: Expr) -> Expr {
        Expr::eq(Expr::ult(b, a), Expr::constant(0))
    }

    pub fn uge(a: Expr, b: Expr) -> Expr {
        Expr::eq(Expr::ult(a, b), Expr::constant(0))
    }

    pub fn ite(c: Expr, a: Expr, b: Expr) -> Expr {
        if let Some(c) = c.as_const() {
            return if c != 0 { a } else { b };
        }
        if a == b {
            return a;
        }
        if is_bool(&c) && a.as_const() == Some(1) && b.as_const() == Some(0) {
            return c;
        }
        Expr::mk(Node::Ite(c, a, b))
    }

    /// Boolean truth of the expression as a 0/1 value.
    pub fn truth(e: Expr) -> Expr {
        if is_bool(&e) {
            e
        } else {
            Expr::ne(e, Expr::constant(0))
        }
    }

    /// Boolean negation (`e == 0`).
    pub fn falsity(e: Expr) -> Expr {
        Expr::eq(e, Expr::constant(0))
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        let mut seen = HashMap::new();
        self.collect_vars(&mut out, &mut seen);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>, seen: &mut HashMap<usize, ()>) {
        if seen.insert(self.key(), ()).is_some() {
            return;
        }
        match self.node() {
            Node::Const(_) => {}
            Node::Var(v) => {
                out.insert(*v);
            }
            Node::Bin(_, a, b) => {
                a.collect_vars(out, seen);
                b.collect_vars(out, seen);
            }
            Node::Ite(c, a, b) => {
                c.collect_vars(out, seen);
                a.collect_vars(out, seen);
                b.collect_vars(out, seen);
            }
        }
    }

    pub fn mentions(&self, pred: impl Fn(&Var) -> bool) -> bool {
        self.vars().iter().any(pred)
    }

    pub fn eval(&self, model: &Model) -> Result<u32, ExprError> {
        let mut memo = HashMap::new();
        self.eval_memo(model, &mut memo)
    }

    fn eval_memo(&self, model: &Model, memo: &mut HashMap<usize, u32>) -> Result<u32, ExprError> {
        if let Some(v) = memo.get(&self.key()) {
            return Ok(*v);
        }
        let value = match self.node() {
            Node::Const(c) => *c,
            Node::Var(v) => model.get(*v).ok_or(ExprError::UnboundVariable(*v))?,
            Node::Bin(op, a, b) => op.apply(a.eval_memo(model, memo)?, b.eval_memo(model, memo)?),
            Node::Ite(c, a, b) => {
                if c.eval_memo(model, memo)? != 0 {
                    a.eval_memo(model, memo)?
                } else {
                    b.eval_memo(model, memo)?
                }
            }
        };
        memo.insert(self.key(), value);
        Ok(value)
    }

    /// Replaces variables according to `f`; variables mapped to `None` stay.
    pub fn substitute_with(&self, f: &dyn Fn(&Var) -> Option<Expr>) -> Expr {
        let mut memo = HashMap::new();
        self.subst_memo(f, &mut memo)
    }

    pub fn substitute(&self, map: &BTreeMap<Var, Expr>) -> Expr {
        self.substitute_with(&|v| map.get(v).cloned())
    }

    fn subst_memo(&self, f: &dyn Fn(&Var) -> Option<Expr>, memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(e) = memo.get(&self.key()) {
            return e.clone();
        }
        let out = match self.node() {
            Node::Const(_) => self.clone(),
            Node::Var(v) => f(v).unwrap_or_else(|| self.clone()),
            Node::Bin(op, a, b) => {
                let (na, nb) = (a.subst_memo(f, memo), b.subst_memo(f, memo));
                if na.ptr_eq(a) && nb.ptr_eq(b) {
                    self.clone()
                } else {
                    Expr::bin(*op, na, nb)
                }
            }
            Node::Ite(c, a, b) => {
                let (nc, na, nb) = (c.subst_memo(f, memo), a.subst_memo(f, memo), b.subst_memo(f, memo));
                if nc.ptr_eq(c) && na.ptr_eq(a) && nb.ptr_eq(b) {
                    self.clone()
                } else {
                    Expr::ite(nc, na, nb)
                }
            }
        };
        memo.insert(self.key(), out.clone());
        out
    }

    /// Number of distinct nodes.
    pub fn size(&self) -> usize {
        fn walk(e: &Expr, seen: &mut HashMap<usize, ()>) {
            if seen.insert(e.key(), ()).is_some() {
                return;
            }
            match e.node() {
                Node::Bin(_, a, b) => {
                    walk(a, seen);
                    walk(b, seen);
                }
                Node::Ite(c, a, b) => {
                    walk(c, seen);
                    walk(a, seen);
                    walk(b, seen);
                }
                _ => {}
            }
        }
        let mut seen = HashMap::new();
        walk(self, &mut seen);
        seen.len()
    }
}

/// Rebuilds `e` bottom-up through the folding constructors.
pub fn simplify(e: &Expr) -> Expr {
    fn go(e: &Expr, memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(s) = memo.get(&e.key()) {
            return s.clone();
        }
        let out = match e.node() {
            Node::Const(_) | Node::Var(_) => e.clone(),
            Node::Bin(op, a, b) => Expr::bin(*op, go(a, memo), go(b, memo)),
            Node::Ite(c, a, b) => Expr::ite(go(c, memo), go(a, memo), go(b, memo)),
        };
        memo.insert(e.key(), out.clone());
        out
    }
    go(e, &mut HashMap::new())
}

impl From<u32> for Expr {
    fn from(value: u32) -> Self {
        Expr::constant(value)
    }
}

impl From<Var> for Expr {
    fn from(var: Var) -> Self {
        Expr::var(var)
    }
}

/// Prefix rendering, e.g. `(add old_20000000 0x1)`.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(c) => write!(f, "0x{c:x}"),
            Node::Var(v) => write!(f, "{v}"),
            Node::Bin(op, a, b) => write!(f, "({} {a} {b})", op.name()),
            Node::Ite(c, a, b) => write!(f, "(ite {c} {a} {b})"),
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// SMT-LIB2 (QF_BV) rendering of a constraint set, each constraint asserted
/// to be nonzero.
pub fn emit_smtlib(constraints: &[Expr]) -> String {
    fn bv(e: &Expr, out: &mut String) {
        match e.node() {
            Node::Const(c) => out.push_str(&format!("#x{c:08x}")),
            Node::Var(v) => out.push_str(&v.name()),
            Node::Bin(op, _, _) if op.is_comparison() => {
                out.push_str("(ite ");
                boolean(e, out);
                out.push_str(" #x00000001 #x00000000)");
            }
            Node::Bin(op, a, b) => {
                let name = match op {
                    BinOp::Add => "bvadd",
                    BinOp::Sub => "bvsub",
                    BinOp::And => "bvand",
                    BinOp::Or => "bvor",
                    BinOp::Xor => "bvxor",
                    BinOp::Shl => "bvshl",
                    BinOp::Shr => "bvlshr",
                    _ => unreachable!(),
                };
                out.push('(');
                out.push_str(name);
                out.push(' ');
                bv(a, out);
                out.push(' ');
                if matches!(op, BinOp::Shl | BinOp::Shr) && !b.is_const() {
                    out.push_str("(bvand ");
                    bv(b, out);
                    out.push_str(" #x0000001f)");
                } else if let (BinOp::Shl | BinOp::Shr, Some(c)) = (op, b.as_const()) {
                    out.push_str(&format!("#x{:08x}", c & 31));
                } else {
                    bv(b, out);
                }
                out.push(')');
            }
            Node::Ite(c, a, b) => {
                out.push_str("(ite ");
                boolean(c, out);
                out.push(' ');
                bv(a, out);
                out.push(' ');
                bv(b, out);
                out.push(')');
            }
        }
    }
    fn boolean(e: &Expr, out: &mut String) {
        if let Node::Bin(op, a, b) = e.node() {
            let name = match op {
                BinOp::Eq => Some("="),
                BinOp::Ne => Some("distinct"),
                BinOp::Ult => Some("bvult"),
                BinOp::Slt => Some("bvslt"),
                _ => None,
            };
            if let Some(name) = name {
                out.push('(');
                out.push_str(name);
                out.push(' ');
                bv(a, out);
                out.push(' ');
                bv(b, out);
                out.push(')');
                return;
            }
        }
        out.push_str("(distinct ");
        bv(e, out);
        out.push_str(" #x00000000)");
    }

    let mut vars = BTreeSet::new();
    for c in constraints {
        vars.extend(c.vars());
    }
    let mut out = String::from("(set-logic QF_BV)\n");
    for v in &vars {
        out.push_str(&format!("(declare-const {} (_ BitVec 32))\n", v.name()));
    }
    for c in constraints {
        out.push_str("(assert ");
        boolean(c, &mut out);
        out.push_str(")\n");
    }
    out.push_str("(check-sat)\n");
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub fn v(id: u32) -> Expr {
        Expr::var(Var::new(Origin::Sr, id))
    }

    pub fn c(value: u32) -> Expr {
        Expr::constant(value)
    }

    #[test]
    fn folds_constant_and() {
        assert_eq!(simplify(&Expr::and(c(0xFF), c(0x20))), c(0x20));
    }

    #[test]
    fn xor_self_is_zero() {
        assert_eq!(Expr::xor(v(0), v(0)), c(0));
    }

    #[test]
    fn add_zero_is_identity() {
        assert_eq!(Expr::add(v(0), c(0)), v(0));
        assert_eq!(Expr::or(v(0), c(0)), v(0));
        assert_eq!(Expr::and(v(0), c(0)), c(0));
    }

    #[test]
    fn eval_wraps() {
        let m = Model::default();
        assert_eq!(Expr::mk(Node::Bin(BinOp::Add, c(u32::MAX), c(1))).eval(&m).unwrap(), 0);
    }

    #[test]
    fn eval_masks_status_bits() {
        let sr = Var::new(Origin::Sr, 0);
        let m: Model = [(sr, 0x25)].into_iter().collect();
        assert_eq!(Expr::and(Expr::var(sr), c(0x20)).eval(&m).unwrap(), 0x20);
    }

    #[test]
    fn eval_reports_unbound() {
        let g = Var::new(Origin::Global, 1);
        assert_eq!(Expr::var(g).eval(&Model::default()), Err(ExprError::UnboundVariable(g)));
    }

    #[test]
    fn shifts_take_amount_mod_32() {
        let m = Model::default();
        let e = Expr::mk(Node::Bin(BinOp::Shl, c(1), c(33)));
        assert_eq!(e.eval(&m).unwrap(), 2);
        assert_eq!(simplify(&e), c(2));
    }

    #[test]
    fn reassociates_constant_additions() {
        let e = Expr::add(Expr::add(v(0), c(1)), c(2));
        assert_eq!(e, Expr::add(v(0), c(3)));
        assert_eq!(Expr::eq(e, c(3)), Expr::eq(v(0), c(0)));
    }

    #[test]
    fn boolean_negation_normalizes() {
        let cond = Expr::ne(Expr::and(v(0), c(1)), c(0));
        assert_eq!(Expr::falsity(cond.clone()), Expr::eq(Expr::and(v(0), c(1)), c(0)));
        assert_eq!(Expr::truth(cond.clone()), cond);
    }

    #[test]
    fn smtlib_transliterates_mask_test() {
        let sr = Var::new(Origin::Sr, 0);
        let cons = Expr::ne(Expr::and(Expr::var(sr), c(1)), c(0));
        let text = emit_smtlib(&[cons]);
        assert!(text.contains("(assert (distinct (bvand sr0 #x00000001) #x00000000))"), "{text}");
        assert_eq!(text.matches("declare-const").count(), 1);
    }

    #[test]
    fn smtlib_empty_set() {
        let text = emit_smtlib(&[]);
        assert!(!text.contains("declare-const"));
        assert!(!text.contains("assert"));
        assert!(text.ends_with("(check-sat)\n"));
    }

    #[test]
    fn smtlib_declares_each_variable_once() {
        let e = Expr::ult(Expr::add(v(0), v(1)), Expr::xor(v(1), v(0)));
        let text = emit_smtlib(&[e]);
        assert_eq!(text.matches("declare-const").count(), 2);
    }

    #[test]
    fn old_value_vars_are_distinguished() {
        assert_eq!(Var::old_value(0x2000_0010).old_value_addr(), Some(0x2000_0010));
        assert_eq!(Var::new(Origin::Global, 3).old_value_addr(), None);
        assert_eq!(Var::old_value(0x2000_0010).name(), "old_20000010");
    }

    /// Builds raw trees without going through the folding constructors.
    pub fn arb_raw_expr(nvars: u32) -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            prop_oneof![Just(0u32), Just(1), Just(31), Just(u32::MAX), any::<u32>()].prop_map(Expr::constant),
            (0..nvars).prop_map(v),
        ];
        leaf.prop_recursive(6, 64, 3, |inner| {
            prop_oneof![
                (
                    prop::sample::select(vec![
                        BinOp::Add,
                        BinOp::Sub,
                        BinOp::And,
                        BinOp::Or,
                        BinOp::Xor,
                        BinOp::Shl,
                        BinOp::Shr,
                        BinOp::Eq,
                        BinOp::Ne,
                        BinOp::Ult,
                        BinOp::Slt,
                    ]),
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::mk(Node::Bin(op, a, b))),
                (inner.clone(), inner.clone(), inner).prop_map(|(c, a, b)| Expr::mk(Node::Ite(c, a, b))),
            ]
        })
    }

    proptest! {
        #[test]
        fn simplify_preserves_semantics(e in arb_raw_expr(3), vals in prop::collection::vec(any::<u32>(), 3)) {
            let model: Model = vals.iter().enumerate().map(|(i, x)| (Var::new(Origin::Sr, i as u32), *x)).collect();
            prop_assert_eq!(simplify(&e).eval(&model).unwrap(), e.eval(&model).unwrap());
        }
    }
}
