//! Decision procedure for conjunctions of bitvector constraints.
//!
//! Constraints are simplified, bit-blasted into CNF through Tseitin gates
//! (ripple-carry adders, barrel shifters over the low five amount bits,
//! borrow-chain comparators), and decided by a small CDCL search with
//! watched literals, first-UIP learning, activity-ordered decisions and
//! Luby restarts. The procedure is complete for the expression language;
//! the only non-answer is running out of the per-query step budget.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::expr::{BinOp, Expr, Model, Node, Var};

pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolverError {
    #[error("solver budget of {0} search steps exhausted")]
    SolverBudgetExhausted(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveResult {
    Sat(Model),
    Unsat,
}

impl SolveResult {
    pub fn is_sat(&self) -> bool {
        matches!(self, SolveResult::Sat(_))
    }

    pub fn model(self) -> Option<Model> {
        match self {
            SolveResult::Sat(m) => Some(m),
            SolveResult::Unsat => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Solver {
    pub budget: u64,
}

impl Default for Solver {
    fn default() -> Self {
        Solver { budget: DEFAULT_BUDGET }
    }
}

impl Solver {
    pub fn new(budget: u64) -> Self {
        Solver { budget }
    }

    /// Decides the conjunction of `constraints`, each read as "nonzero".
    /// A returned model assigns every free variable of the query.
    pub fn solve(&self, constraints: &[Expr]) -> Result<SolveResult, SolverError> {
        let mut pending = Vec::new();
        let mut all_vars = BTreeSet::new();
        for c in constraints {
            all_vars.extend(c.vars());
            let t = Expr::truth(c.clone());
            match t.as_const() {
                Some(0) => return Ok(SolveResult::Unsat),
                Some(_) => {}
                None => pending.push(t),
            }
        }
        if pending.is_empty() {
            return Ok(SolveResult::Sat(all_vars.into_iter().map(|v| (v, 0)).collect()));
        }
        let mut blaster = Blaster::default();
        for c in &pending {
            let bits = blaster.blast(c);
            let any = blaster.or_reduce(&bits);
            match any {
                Bit::Const(false) => return Ok(SolveResult::Unsat),
                Bit::Const(true) => {}
                Bit::Lit(l) => blaster.cnf.add_clause(vec![l]),
            }
        }
        let Blaster { mut cnf, var_bits, .. } = blaster;
        match cnf.search(self.budget)? {
            false => Ok(SolveResult::Unsat),
            true => {
                let mut model = Model::default();
                for v in all_vars {
                    let value = match var_bits.get(&v) {
                        Some(bits) => bits.iter().enumerate().fold(0u32, |acc, (i, b)| {
                            let set = match b {
                                Bit::Const(x) => *x,
                                Bit::Lit(l) => cnf.lit_value(*l),
                            };
                            acc | (u32::from(set) << i)
                        }),
                        None => 0,
                    };
                    model.insert(v, value);
                }
                debug_assert!(pending.iter().all(|c| c.eval(&model).map(|x| x != 0).unwrap_or(false)));
                Ok(SolveResult::Sat(model))
            }
        }
    }

    pub fn is_sat(&self, constraints: &[Expr]) -> Result<bool, SolverError> {
        Ok(self.solve(constraints)?.is_sat())
    }
}

/// Literal: variable index times two, low bit set for negation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Lit(u32);

impl Lit {
    fn pos(var: u32) -> Lit {
        Lit(var << 1)
    }
    fn var(self) -> usize {
        (self.0 >> 1) as usize
    }
    fn neg(self) -> Lit {
        Lit(self.0 ^ 1)
    }
    fn is_neg(self) -> bool {
        self.0 & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Bit {
    Const(bool),
    Lit(Lit),
}

impl Bit {
    fn not(self) -> Bit {
        match self {
            Bit::Const(b) => Bit::Const(!b),
            Bit::Lit(l) => Bit::Lit(l.neg()),
        }
    }
}

#[derive(Default)]
struct Blaster {
    cnf: Cnf,
    var_bits: BTreeMap<Var, Vec<Bit>>,
    memo: HashMap<*const Node, Vec<Bit>>,
    gates: HashMap<(u8, Lit, Lit), Lit>,
}

impl Blaster {
    fn fresh(&mut self) -> Lit {
        Lit::pos(self.cnf.new_var())
    }

    fn and2(&mut self, a: Bit, b: Bit) -> Bit {
        match (a, b) {
            (Bit::Const(false), _) | (_, Bit::Const(false)) => Bit::Const(false),
            (Bit::Const(true), x) | (x, Bit::Const(true)) => x,
            (Bit::Lit(x), Bit::Lit(y)) => {
                if x == y {
                    return a;
                }
                if x == y.neg() {
                    return Bit::Const(false);
                }
                let key = (0, x.min(y), x.max(y));
                if let Some(l) = self.gates.get(&key) {
                    return Bit::Lit(*l);
                }
                let o = self.fresh();
                self.cnf.add_clause(vec![o.neg(), x]);
                self.cnf.add_clause(vec![o.neg(), y]);
                self.cnf.add_clause(vec![o, x.neg(), y.neg()]);
                self.gates.insert(key, o);
                Bit::Lit(o)
            }
        }
    }

    fn or2(&mut self, a: Bit, b: Bit) -> Bit {
        self.and2(a.not(), b.not()).not()
    }

    fn xor2(&mut self, a: Bit, b: Bit) -> Bit {
        match (a, b) {
            (Bit::Const(false), x) | (x, Bit::Const(false)) => x,
            (Bit::Const(true), x) | (x, Bit::Const(true)) => x.not(),
            (Bit::Lit(x), Bit::Lit(y)) => {
                if x == y {
                    return Bit::Const(false);
                }
                if x == y.neg() {
                    return Bit::Const(true);
                }
                // Normalize polarity so that x^y and !x^!y share a gate.
                let (px, py) = (Lit(x.0 & !1), Lit(y.0 & !1));
                let flip = x.is_neg() ^ y.is_neg();
                let key = (1, px.min(py), px.max(py));
                let o = match self.gates.get(&key) {
                    Some(l) => *l,
                    None => {
                        let o = self.fresh();
                        self.cnf.add_clause(vec![o.neg(), px, py]);
                        self.cnf.add_clause(vec![o.neg(), px.neg(), py.neg()]);
                        self.cnf.add_clause(vec![o, px.neg(), py]);
                        self.cnf.add_clause(vec![o, px, py.neg()]);
                        self.gates.insert(key, o);
                        o
                    }
                };
                if flip {
                    Bit::Lit(o.neg())
                } else {
                    Bit::Lit(o)
                }
            }
        }
    }

    fn mux(&mut self, sel: Bit, a: Bit, b: Bit) -> Bit {
        match sel {
            Bit::Const(true) => a,
            Bit::Const(false) => b,
            _ if a == b => a,
            _ => {
                let x = self.and2(sel, a);
                let y = self.and2(sel.not(), b);
                self.or2(x, y)
            }
        }
    }

    fn or_reduce(&mut self, bits: &[Bit]) -> Bit {
        bits.iter().fold(Bit::Const(false), |acc, &b| self.or2(acc, b))
    }

    fn adder(&mut self, a: &[Bit], b: &[Bit], carry_in: Bit) -> (Vec<Bit>, Bit) {
        let mut carry = carry_in;
        let mut out = Vec::with_capacity(32);
        for i in 0..32 {
            let t = self.xor2(a[i], b[i]);
            out.push(self.xor2(t, carry));
            let g = self.and2(a[i], b[i]);
            let p = self.and2(t, carry);
            carry = self.or2(g, p);
        }
        (out, carry)
    }

    /// `a < b` unsigned: no carry out of `a + !b + 1`.
    fn ult(&mut self, a: &[Bit], b: &[Bit]) -> Bit {
        let nb: Vec<Bit> = b.iter().map(|x| x.not()).collect();
        let (_, carry) = self.adder(a, &nb, Bit::Const(true));
        carry.not()
    }

    fn equal(&mut self, a: &[Bit], b: &[Bit]) -> Bit {
        let mut acc = Bit::Const(true);
        for i in 0..32 {
            let d = self.xor2(a[i], b[i]);
            acc = self.and2(acc, d.not());
        }
        acc
    }

    fn shift(&mut self, a: &[Bit], amount: &[Bit], left: bool) -> Vec<Bit> {
        let mut cur = a.to_vec();
        for (stage, sel) in amount.iter().take(5).enumerate() {
            let k = 1usize << stage;
            let shifted: Vec<Bit> = (0..32)
                .map(|i| {
                    if left {
                        if i >= k {
                            cur[i - k]
                        } else {
                            Bit::Const(false)
                        }
                    } else if i + k < 32 {
                        cur[i + k]
                    } else {
                        Bit::Const(false)
                    }
                })
                .collect();
            cur = (0..32).map(|i| self.mux(*sel, shifted[i], cur[i])).collect();
        }
        cur
    }

    fn bool_vec(b: Bit) -> Vec<Bit> {
        let mut v = vec![Bit::Const(false); 32];
        v[0] = b;
        v
    }

    fn blast(&mut self, e: &Expr) -> Vec<Bit> {
        let key = e.node() as *const Node;
        if let Some(bits) = self.memo.get(&key) {
            return bits.clone();
        }
        let bits = match e.node() {
            Node::Const(c) => (0..32).map(|i| Bit::Const(c >> i & 1 == 1)).collect(),
            Node::Var(v) => {
                if let Some(bits) = self.var_bits.get(v) {
                    bits.clone()
                } else {
                    let bits: Vec<Bit> = (0..32).map(|_| Bit::Lit(self.fresh())).collect();
                    self.var_bits.insert(*v, bits.clone());
                    bits
                }
            }
            Node::Bin(op, a, b) => {
                let x = self.blast(a);
                let y = self.blast(b);
                match op {
                    BinOp::Add => self.adder(&x, &y, Bit::Const(false)).0,
                    BinOp::Sub => {
                        let ny: Vec<Bit> = y.iter().map(|b| b.not()).collect();
                        self.adder(&x, &ny, Bit::Const(true)).0
                    }
                    BinOp::And => (0..32).map(|i| self.and2(x[i], y[i])).collect(),
                    BinOp::Or => (0..32).map(|i| self.or2(x[i], y[i])).collect(),
                    BinOp::Xor => (0..32).map(|i| self.xor2(x[i], y[i])).collect(),
                    BinOp::Shl => self.shift(&x, &y, true),
                    BinOp::Shr => self.shift(&x, &y, false),
                    BinOp::Eq => Self::bool_vec(self.equal(&x, &y)),
                    BinOp::Ne => Self::bool_vec(self.equal(&x, &y).not()),
                    BinOp::Ult => Self::bool_vec(self.ult(&x, &y)),
                    BinOp::Slt => {
                        let mut fx = x.clone();
                        let mut fy = y.clone();
                        fx[31] = fx[31].not();
                        fy[31] = fy[31].not();
                        Self::bool_vec(self.ult(&fx, &fy))
                    }
                }
            }
            Node::Ite(c, a, b) => {
                let cb = self.blast(c);
                let sel = self.or_reduce(&cb);
                let x = self.blast(a);
                let y = self.blast(b);
                (0..32).map(|i| self.mux(sel, x[i], y[i])).collect()
            }
        };
        self.memo.insert(key, bits.clone());
        bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Value {
    Unassigned,
    True,
    False,
}

#[derive(Default)]
struct Cnf {
    num_vars: usize,
    clauses: Vec<Vec<Lit>>,
    units: Vec<Lit>,
    empty: bool,
    // search state
    watches: Vec<Vec<usize>>,
    assign: Vec<Value>,
    level: Vec<u32>,
    reason: Vec<Option<usize>>,
    trail: Vec<Lit>,
    trail_lim: Vec<usize>,
    qhead: usize,
    activity: Vec<f64>,
    var_inc: f64,
    phase: Vec<bool>,
    heap: VarHeap,
}

impl Cnf {
    fn new_var(&mut self) -> u32 {
        self.num_vars += 1;
        (self.num_vars - 1) as u32
    }

    fn add_clause(&mut self, mut lits: Vec<Lit>) {
        lits.sort();
        lits.dedup();
        if lits.windows(2).any(|w| w[0] == w[1].neg()) {
            return;
        }
        match lits.len() {
            0 => self.empty = true,
            1 => self.units.push(lits[0]),
            _ => self.clauses.push(lits),
        }
    }

    fn lit_value(&self, l: Lit) -> bool {
        match self.assign.get(l.var()).copied().unwrap_or(Value::Unassigned) {
            Value::True => !l.is_neg(),
            Value::False => l.is_neg(),
            Value::Unassigned => false,
        }
    }

    fn value(&self, l: Lit) -> Value {
        match self.assign[l.var()] {
            Value::Unassigned => Value::Unassigned,
            Value::True => {
                if l.is_neg() {
                    Value::False
                } else {
                    Value::True
                }
            }
            Value::False => {
                if l.is_neg() {
                    Value::True
                } else {
                    Value::False
                }
            }
        }
    }

    fn decision_level(&self) -> u32 {
        self.trail_lim.len() as u32
    }

    fn enqueue(&mut self, l: Lit, reason: Option<usize>) -> bool {
        match self.value(l) {
            Value::True => true,
            Value::False => false,
            Value::Unassigned => {
                let v = l.var();
                self.assign[v] = if l.is_neg() { Value::False } else { Value::True };
                self.level[v] = self.decision_level();
                self.reason[v] = reason;
                self.trail.push(l);
                true
            }
        }
    }

    fn attach(&mut self, idx: usize) {
        let c = &self.clauses[idx];
        self.watches[c[0].neg().0 as usize].push(idx);
        self.watches[c[1].neg().0 as usize].push(idx);
    }

    /// Unit propagation; returns a conflicting clause index.
    fn propagate(&mut self) -> Option<usize> {
        while self.qhead < self.trail.len() {
            let p = self.trail[self.qhead];
            self.qhead += 1;
            let mut ws = std::mem::take(&mut self.watches[p.0 as usize]);
            let mut i = 0;
            let mut conflict = None;
            while i < ws.len() {
                let ci = ws[i];
                let false_lit = p.neg();
                {
                    let c = &mut self.clauses[ci];
                    if c[0] == false_lit {
                        c.swap(0, 1);
                    }
                }
                let first = self.clauses[ci][0];
                if self.value(first) == Value::True {
                    i += 1;
                    continue;
                }
                let len = self.clauses[ci].len();
                let mut moved = false;
                for k in 2..len {
                    let lk = self.clauses[ci][k];
                    if self.value(lk) != Value::False {
                        self.clauses[ci].swap(1, k);
                        let nw = self.clauses[ci][1].neg().0 as usize;
                        self.watches[nw].push(ci);
                        ws.swap_remove(i);
                        moved = true;
                        break;
                    }
                }
                if moved {
                    continue;
                }
                if !self.enqueue(first, Some(ci)) {
                    conflict = Some(ci);
                    break;
                }
                i += 1;
            }
            let existing = std::mem::take(&mut self.watches[p.0 as usize]);
            ws.extend(existing);
            self.watches[p.0 as usize] = ws;
            if conflict.is_some() {
                self.qhead = self.trail.len();
                return conflict;
            }
        }
        None
    }

    fn bump(&mut self, v: usize) {
        self.activity[v] += self.var_inc;
        if self.activity[v] > 1e100 {
            for a in self.activity.iter_mut() {
                *a *= 1e-100;
            }
            self.var_inc *= 1e-100;
        }
        self.heap.update(v, &self.activity);
    }

    fn analyze(&mut self, mut confl: usize) -> (Vec<Lit>, u32) {
        let mut seen = vec![false; self.num_vars];
        let mut learnt = vec![Lit(0)];
        let mut counter = 0;
        let mut p: Option<Lit> = None;
        let mut idx = self.trail.len();
        loop {
            let clause = self.clauses[confl].clone();
            for &q in clause.iter().skip(usize::from(p.is_some())) {
                let v = q.var();
                if !seen[v] && self.level[v] > 0 {
                    seen[v] = true;
                    self.bump(v);
                    if self.level[v] >= self.decision_level() {
                        counter += 1;
                    } else {
                        learnt.push(q);
                    }
                }
            }
            loop {
                idx -= 1;
                if seen[self.trail[idx].var()] {
                    break;
                }
            }
            let lit = self.trail[idx];
            p = Some(lit);
            seen[lit.var()] = false;
            counter -= 1;
            if counter == 0 {
                learnt[0] = lit.neg();
                break;
            }
            confl = self.reason[lit.var()].expect("implied literal has a reason");
            // The reason clause has the implied literal first.
            let pos = self.clauses[confl].iter().position(|&l| l == lit).unwrap();
            self.clauses[confl].swap(0, pos);
        }
        let back = if learnt.len() == 1 {
            0
        } else {
            let (mi, _) = learnt
                .iter()
                .enumerate()
                .skip(1)
                .max_by_key(|(_, l)| self.level[l.var()])
                .unwrap();
            learnt.swap(1, mi);
            self.level[learnt[1].var()]
        };
        (learnt, back)
    }

    fn cancel_until(&mut self, lvl: u32) {
        if self.decision_level() <= lvl {
            return;
        }
        let lim = self.trail_lim[lvl as usize];
        for i in (lim..self.trail.len()).rev() {
            let v = self.trail[i].var();
            self.phase[v] = !self.trail[i].is_neg();
            self.assign[v] = Value::Unassigned;
            self.reason[v] = None;
            self.heap.insert(v, &self.activity);
        }
        self.trail.truncate(lim);
        self.trail_lim.truncate(lvl as usize);
        self.qhead = lim;
    }

    fn pick_branch(&mut self) -> Option<Lit> {
        while let Some(v) = self.heap.pop(&self.activity) {
            if self.assign[v] == Value::Unassigned {
                let l = Lit::pos(v as u32);
                return Some(if self.phase[v] { l } else { l.neg() });
            }
        }
        None
    }

    fn search(&mut self, budget: u64) -> Result<bool, SolverError> {
        if self.empty {
            return Ok(false);
        }
        let n = self.num_vars;
        self.watches = vec![Vec::new(); 2 * n];
        self.assign = vec![Value::Unassigned; n];
        self.level = vec![0; n];
        self.reason = vec![None; n];
        self.activity = vec![0.0; n];
        self.phase = vec![false; n];
        self.var_inc = 1.0;
        self.heap = VarHeap::new(n);
        for v in 0..n {
            self.heap.insert(v, &self.activity);
        }
        for idx in 0..self.clauses.len() {
            self.attach(idx);
        }
        for l in std::mem::take(&mut self.units) {
            if !self.enqueue(l, None) {
                return Ok(false);
            }
        }
        if self.propagate().is_some() {
            return Ok(false);
        }
        let mut steps = 0u64;
        let mut restart_round = 0u32;
        let mut conflicts_until_restart = luby(restart_round) * 64;
        loop {
            if let Some(confl) = self.propagate() {
                steps += 1;
                if self.decision_level() == 0 {
                    return Ok(false);
                }
                let (learnt, back) = self.analyze(confl);
                self.cancel_until(back);
                if learnt.len() == 1 {
                    self.enqueue(learnt[0], None);
                } else {
                    let idx = self.clauses.len();
                    self.clauses.push(learnt.clone());
                    self.attach(idx);
                    self.enqueue(learnt[0], Some(idx));
                }
                self.var_inc *= 1.0 / 0.95;
                conflicts_until_restart = conflicts_until_restart.saturating_sub(1);
            } else {
                if conflicts_until_restart == 0 {
                    restart_round += 1;
                    conflicts_until_restart = luby(restart_round) * 64;
                    self.cancel_until(0);
                    continue;
                }
                match self.pick_branch() {
                    None => return Ok(true),
                    Some(l) => {
                        steps += 1;
                        self.trail_lim.push(self.trail.len());
                        self.enqueue(l, None);
                    }
                }
            }
            if steps > budget {
                return Err(SolverError::SolverBudgetExhausted(budget));
            }
        }
    }
}

fn luby(mut i: u32) -> u64 {
    let (mut size, mut seq) = (1u64, 0u32);
    while size < u64::from(i) + 1 {
        seq += 1;
        size = 2 * size + 1;
    }
    while size - 1 != u64::from(i) {
        size = (size - 1) >> 1;
        seq -= 1;
        i %= size as u32;
    }
    1u64 << seq
}

/// Max-heap of variables keyed by activity.
#[derive(Default)]
struct VarHeap {
    heap: Vec<usize>,
    pos: Vec<Option<usize>>,
}

impl VarHeap {
    fn new(n: usize) -> Self {
        VarHeap { heap: Vec::with_capacity(n), pos: vec![None; n] }
    }

    fn less(a: usize, b: usize, act: &[f64]) -> bool {
        act[a] > act[b] || (act[a] == act[b] && a < b)
    }

    fn insert(&mut self, v: usize, act: &[f64]) {
        if self.pos[v].is_some() {
            return;
        }
        self.heap.push(v);
        self.pos[v] = Some(self.heap.len() - 1);
        self.sift_up(self.heap.len() - 1, act);
    }

    fn update(&mut self, v: usize, act: &[f64]) {
        if let Some(i) = self.pos[v] {
            self.sift_up(i, act);
        }
    }

    fn pop(&mut self, act: &[f64]) -> Option<usize> {
        if self.heap.is_empty() {
            return None;
        }
        let top = self.heap.swap_remove(0);
        self.pos[top] = None;
        if !self.heap.is_empty() {
            self.pos[self.heap[0]] = Some(0);
            self.sift_down(0, act);
        }
        Some(top)
    }

    fn sift_up(&mut self, mut i: usize, act: &[f64]) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if Self::less(self.heap[i], self.heap[parent], act) {
                self.swap(i, parent);
                i = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize, act: &[f64]) {
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut best = i;
            if l < self.heap.len() && Self::less(self.heap[l], self.heap[best], act) {
                best = l;
            }
            if r < self.heap.len() && Self::less(self.heap[r], self.heap[best], act) {
                best = r;
            }
            if best == i {
                break;
            }
            self.swap(i, best);
            i = best;
        }
    }

    fn swap(&mut self, i: usize, j: usize) {
        self.heap.swap(i, j);
        self.pos[self.heap[i]] = Some(i);
        self.pos[self.heap[j]] = Some(j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::tests::{arb_raw_expr, c, v};
    use crate::expr::Origin;
    use proptest::prelude::*;

    fn solve(cs: &[Expr]) -> SolveResult {
        Solver::default().solve(cs).unwrap()
    }

    #[test]
    fn uart_receive_only_event() {
        let sr = v(0);
        let cs = [
            Expr::ne(Expr::and(sr.clone(), c(0x20)), c(0)),
            Expr::eq(Expr::and(sr.clone(), c(0x80)), c(0)),
        ];
        let model = solve(&cs).model().unwrap();
        let value = model.get(Var::new(Origin::Sr, 0)).unwrap();
        assert_ne!(value & 0x20, 0);
        assert_eq!(value & 0x80, 0);
    }

    #[test]
    fn contradictory_bit_is_unsat() {
        let cs = [Expr::eq(Expr::and(v(0), c(1)), c(0)), Expr::ne(Expr::and(v(0), c(1)), c(0))];
        assert_eq!(solve(&cs), SolveResult::Unsat);
    }

    #[test]
    fn substituted_ground_constraint() {
        let g = Var::new(Origin::Global, 0);
        let e = Expr::eq(Expr::var(g), c(4));
        let e = e.substitute(&[(g, Expr::add(c(1), c(3)))].into_iter().collect());
        assert!(solve(&[e]).is_sat());
    }

    #[test]
    fn arithmetic_and_comparisons() {
        // x + 7 == 3 (wraps), x <u 0xFFFF_FFFD is false for the unique witness
        let x = v(0);
        let m = solve(&[Expr::eq(Expr::add(x.clone(), c(7)), c(3))]).model().unwrap();
        assert_eq!(m.get(Var::new(Origin::Sr, 0)), Some(3u32.wrapping_sub(7)));
        let cs = [Expr::eq(Expr::add(x.clone(), c(7)), c(3)), Expr::ult(x.clone(), c(0xFFFF_FFFC))];
        assert_eq!(solve(&cs), SolveResult::Unsat);
        // signed
        let m = solve(&[Expr::slt(x.clone(), c(0)), Expr::ult(c(0xFFFF_FFF0), x.clone())]).model().unwrap();
        assert!(m.get(Var::new(Origin::Sr, 0)).unwrap() > 0xFFFF_FFF0);
    }

    #[test]
    fn symbolic_shift_amounts() {
        let (x, s) = (v(0), v(1));
        let cs = [Expr::eq(Expr::shl(x.clone(), s.clone()), c(0x80)), Expr::eq(x.clone(), c(1))];
        let m = solve(&cs).model().unwrap();
        assert_eq!(m.get(Var::new(Origin::Sr, 1)).unwrap() & 31, 7);
        let cs = [Expr::eq(Expr::shr(c(0x8000_0000), s), c(1))];
        let m = solve(&cs).model().unwrap();
        assert_eq!(m.get(Var::new(Origin::Sr, 1)).unwrap() & 31, 31);
    }

    #[test]
    fn byte_sum_checksum() {
        let x = v(0);
        let byte = |k: u32| Expr::and(Expr::shr(x.clone(), c(8 * k)), c(0xFF));
        let sum = Expr::add(Expr::add(byte(0), byte(1)), Expr::add(byte(2), byte(3)));
        let cs = [Expr::eq(sum.clone(), c(0x1F0)), Expr::eq(byte(3), c(0x7E))];
        let m = solve(&cs).model().unwrap();
        let w = m.get(Var::new(Origin::Sr, 0)).unwrap();
        let s: u32 = w.to_le_bytes().iter().map(|b| u32::from(*b)).sum();
        assert_eq!((s, w >> 24), (0x1F0, 0x7E));
    }

    #[test]
    fn ite_conditions() {
        let x = v(0);
        let e = Expr::ite(Expr::ult(x.clone(), c(10)), c(1), c(2));
        let m = solve(&[Expr::eq(e.clone(), c(2))]).model().unwrap();
        assert!(m.get(Var::new(Origin::Sr, 0)).unwrap() >= 10);
    }

    #[test]
    fn free_variables_get_assigned() {
        let m = solve(&[Expr::ne(Expr::or(v(3), c(1)), c(0))]).model().unwrap();
        assert!(m.get(Var::new(Origin::Sr, 3)).is_some());
        let m = solve(&[Expr::eq(Expr::and(v(3), c(0)), c(0))]).model().unwrap();
        assert_eq!(m.get(Var::new(Origin::Sr, 3)), None);
    }

    #[test]
    fn tiny_budget_is_reported() {
        let x = v(0);
        let y = v(1);
        // Hard-ish: two unknowns tied by xor/add.
        let cs = [
            Expr::eq(Expr::add(x.clone(), y.clone()), c(0x1234_5678)),
            Expr::eq(Expr::xor(x.clone(), y.clone()), c(0x0F0F_0F0F)),
        ];
        let res = Solver::new(1).solve(&cs);
        assert!(matches!(res, Err(SolverError::SolverBudgetExhausted(1)) | Ok(_)));
    }

    /// Brute-force decision over masked variables.
    fn enumerate(cs: &[Expr], nvars: u32, bits: u32) -> bool {
        let total = 1u64 << (bits * nvars);
        (0..total).any(|code| {
            let model: Model = (0..nvars)
                .map(|i| (Var::new(Origin::Sr, i), ((code >> (i * bits)) as u32) & ((1 << bits) - 1)))
                .collect();
            cs.iter().all(|e| e.eval(&model).unwrap() != 0)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn agrees_with_enumeration(cs in prop::collection::vec(arb_raw_expr(2), 1..4)) {
            // Mask both variables to 5 bits so enumeration stays exhaustive.
            let masked: Vec<Expr> = cs.iter().map(|e| e.substitute_with(&|var| {
                Some(Expr::and(Expr::var(*var), c(0x1F)))
            })).collect();
            let mut query = masked.clone();
            for i in 0..2 {
                query.push(Expr::eq(Expr::and(v(i), c(!0x1F)), c(0)));
            }
            let expected = enumerate(&masked, 2, 5);
            match Solver::default().solve(&query).unwrap() {
                SolveResult::Sat(m) => {
                    prop_assert!(expected);
                    for e in &query {
                        prop_assert_ne!(e.eval(&m).unwrap(), 0);
                    }
                }
                SolveResult::Unsat => prop_assert!(!expected),
            }
        }
    }
}
