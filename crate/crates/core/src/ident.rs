//! Interrupt identification.
//!
//! When the firmware enables an interrupt line, or turns on an event
//! switch in a control register of a peripheral already tied to a line, the
//! line's service routine is explored symbolically from a copy of the
//! current state. Status reads are symbolic, control registers keep their
//! stored values and globals keep their concrete values. Each returning
//! path yields a record: the line, a minimal status value that drives the
//! path, and the effect of the path on every global it wrote.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::expr::{Expr, Model, Origin, Var};
use crate::image::FirmwareImage;
use crate::isa::{LR, SP};
use crate::machine::{step_concrete, CategoryPeripherals, MachineError, MachineState, FRAME_SIZE};
use crate::mmio::{RegisterModel, Scope};
use crate::slice::slice_trace;
use crate::solver::{SolveResult, Solver, SolverError};
use crate::symex::{eval_total, explore, Env, Event, StopRule, SymIsr, SymState, SymexError};

/// Bytes below the initial stack pointer never treated as globals.
pub const STACK_RESERVE: u32 = 0x400;
/// Instruction bound of the reset-handler prologue run.
pub const PROLOGUE_STEPS: u64 = 200_000;
/// Per-path instruction bound inside a routine under analysis.
pub const ISR_STEP_LIMIT: u64 = 20_000;
/// Re-exploration passes while register categories keep changing.
pub const MAX_PASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentError {
    #[error("reset handler initialized no RAM")]
    RegionNotFound { fallback: GlobalRegion },
    #[error("peripheral block {0} is not associated with any analyzed line")]
    UnassociatedPeripheral(u32),
    #[error("line {0} has no service routine")]
    NoVector(u32),
    #[error("no interrupt model for variable 0x{0:08x}")]
    NoModelForVariable(u32),
    #[error(transparent)]
    Symex(#[from] SymexError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GlobalRegion {
    /// Half-open `[start, end)` ranges, sorted and disjoint.
    pub ranges: Vec<(u32, u32)>,
}

impl GlobalRegion {
    pub fn contains(&self, addr: u32) -> bool {
        self.ranges.iter().any(|&(s, e)| s <= addr && addr < e)
    }

    fn from_words(words: impl IntoIterator<Item = u32>) -> Self {
        let mut ranges: Vec<(u32, u32)> = Vec::new();
        for w in words {
            match ranges.last_mut() {
                Some((_, end)) if *end == w => *end = w + 4,
                _ => ranges.push((w, w + 4)),
            }
        }
        GlobalRegion { ranges }
    }
}

/// Runs the reset handler up to its first call and returns the RAM it
/// initialized below the stack reserve.
pub fn locate_global_region(image: &FirmwareImage) -> Result<GlobalRegion, IdentError> {
    let limit = image.initial_sp().saturating_sub(STACK_RESERVE);
    let fallback = GlobalRegion { ranges: vec![(image.map.ram_base, limit)] };
    let mut st = MachineState::reset(image);
    let mut bus = CategoryPeripherals::default();
    for _ in 0..PROLOGUE_STEPS {
        match image.decode_at(st.pc) {
            Ok(i) if i.opcode == crate::isa::Opcode::Jal && i.rd == LR => break,
            Ok(_) => {}
            Err(_) => break,
        }
        if st.halted || step_concrete(image, &mut st, &mut bus).is_err() {
            break;
        }
    }
    let words: BTreeSet<u32> = st.mem.keys().copied().filter(|&a| a < limit).collect();
    if words.is_empty() {
        return Err(IdentError::RegionNotFound { fallback });
    }
    Ok(GlobalRegion::from_words(words))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pattern {
    ConstAssign,
    SelfReferral,
    DataReception,
    Other,
}

/// Modification pattern of a global's new value.
pub fn classify_pattern(var_addr: u32, formula: &Expr) -> Pattern {
    if formula.is_const() {
        Pattern::ConstAssign
    } else if formula.mentions(|v| v.old_value_addr() == Some(var_addr)) {
        Pattern::SelfReferral
    } else if formula.mentions(|v| v.origin == Origin::Dr) {
        Pattern::DataReception
    } else {
        Pattern::Other
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Effect {
    pub var_addr: u32,
    /// New value over old global values, data inputs `dr0..` and constants.
    pub formula: Expr,
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IsrPathRecord {
    pub line: u32,
    pub sr_value: u32,
    /// Sorted by address, one per global.
    pub effects: Vec<Effect>,
    /// Conditions on old global values under which the path is taken.
    pub guards: Vec<Expr>,
    /// Conditions on the data inputs `dr0..`.
    pub dr_constraints: Vec<Expr>,
    /// Data inputs that satisfy `dr_constraints`.
    pub dr_witness: Vec<u32>,
    pub address_dependent: bool,
}

impl IsrPathRecord {
    pub fn side_effect_count(&self) -> usize {
        self.effects.len()
    }

    pub fn effect(&self, var_addr: u32) -> Option<&Effect> {
        self.effects.iter().find(|e| e.var_addr == var_addr)
    }

    pub fn dr_count(&self) -> u32 {
        self.dr_witness.len() as u32
    }
}

/// Drops records with the same effects as a retained one with a lower
/// status value, then records whose effects are exactly the union of
/// retained records with strictly fewer effects.
pub fn filter_paths(mut records: Vec<IsrPathRecord>) -> Vec<IsrPathRecord> {
    records.sort_by_key(|r| r.sr_value);
    let mut unique: Vec<IsrPathRecord> = Vec::new();
    for r in records {
        if !unique.iter().any(|u| u.effects == r.effects) {
            unique.push(r);
        }
    }
    let mut order: Vec<usize> = (0..unique.len()).collect();
    order.sort_by_key(|&i| unique[i].effects.len());
    let mut keep = vec![true; unique.len()];
    for &i in &order {
        let mine = &unique[i].effects;
        let mut covered: BTreeSet<usize> = BTreeSet::new();
        for &j in &order {
            if j == i || !keep[j] || unique[j].effects.len() >= mine.len() {
                continue;
            }
            if unique[j].effects.iter().all(|e| mine.contains(e)) {
                covered.extend(unique[j].effects.iter().map(|e| mine.iter().position(|m| m == e).unwrap()));
            }
        }
        if !mine.is_empty() && covered.len() == mine.len() {
            keep[i] = false;
        }
    }
    unique.into_iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).collect()
}

/// Everything learned about one line from its latest analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineModel {
    pub line: u32,
    pub isr_entry: u32,
    /// Peripheral block the routine accessed most.
    pub block: Option<u32>,
    pub records: Vec<IsrPathRecord>,
    /// A path with no effect on globals, if the routine has one.
    pub null_record: Option<IsrPathRecord>,
    /// Effectful paths before filtering.
    pub unfiltered: Vec<IsrPathRecord>,
    /// Union of the status values of effectful paths.
    pub sr_bits: u32,
    /// Control-register bits tested by the routine, per register.
    pub enable_switches: BTreeMap<u32, u32>,
    /// Paths that faulted, halted, ran too long or had no status witness.
    pub dropped: usize,
    pub blocks: BTreeSet<u32>,
    /// Instructions executed during the analysis.
    pub work: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InterruptModelTable {
    pub lines: BTreeMap<u32, LineModel>,
}

impl InterruptModelTable {
    pub fn keys(&self) -> BTreeSet<u32> {
        self.lines.values().flat_map(|l| l.records.iter().flat_map(|r| r.effects.iter().map(|e| e.var_addr))).collect()
    }

    /// Records touching `var_addr`, fewest side effects first, ties by
    /// line and status value.
    pub fn table_lookup(&self, var_addr: u32) -> Result<Vec<&IsrPathRecord>, IdentError> {
        let mut out: Vec<&IsrPathRecord> = self
            .lines
            .values()
            .flat_map(|l| l.records.iter())
            .filter(|r| r.effect(var_addr).is_some())
            .collect();
        if out.is_empty() {
            return Err(IdentError::NoModelForVariable(var_addr));
        }
        out.sort_by_key(|r| (r.side_effect_count(), r.line, r.sr_value));
        Ok(out)
    }

    pub fn line_for_block(&self, block: u32) -> Option<u32> {
        self.lines.values().find(|l| l.block == Some(block)).map(|l| l.line)
    }

    pub fn record_count(&self) -> usize {
        self.lines.values().map(|l| l.records.len()).sum()
    }

    /// The `imt dump` document.
    pub fn to_json(&self) -> Value {
        let entries: Vec<Value> = self
            .keys()
            .into_iter()
            .map(|addr| {
                let records: Vec<Value> = self
                    .table_lookup(addr)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|r| {
                        let e = r.effect(addr).expect("looked up by address");
                        json!({
                            "line": r.line,
                            "sr_value": format!("0x{:08x}", r.sr_value),
                            "pattern": e.pattern,
                            "formula": e.formula.to_string(),
                            "side_effects": r.effects.iter().map(|e| format!("0x{:08x}", e.var_addr)).collect::<Vec<_>>(),
                        })
                    })
                    .collect();
                json!({ "var_addr": format!("0x{addr:08x}"), "records": records })
            })
            .collect();
        Value::Array(entries)
    }
}

fn popcount(e: &Expr) -> Expr {
    (0..32).fold(Expr::constant(0), |acc, i| {
        Expr::add(acc, Expr::and(Expr::shr(e.clone(), Expr::constant(i)), Expr::constant(1)))
    })
}

/// Smallest status value satisfying `pc`: fewest set bits, then the
/// numerically smallest among those. Returns the value and a model of
/// `pc` with the status pinned to it.
pub fn minimal_sr(solver: &Solver, pc: &[Expr], sr: Option<Var>) -> Result<Option<(u32, Model)>, SolverError> {
    let Some(first) = solver.solve(pc)?.model() else { return Ok(None) };
    let Some(sr) = sr else { return Ok(Some((0, first))) };
    let s = Expr::var(sr);
    let mut best = (eval_total(&s, &first), first);
    let mut fixed: Vec<Expr> = pc.to_vec();
    let count = popcount(&s);
    for k in 0..best.0.count_ones() {
        let mut q = fixed.clone();
        q.push(Expr::eq(count.clone(), Expr::constant(k)));
        if let SolveResult::Sat(m) = solver.solve(&q)? {
            best = (eval_total(&s, &m), m);
            break;
        }
    }
    fixed.push(Expr::eq(count, Expr::constant(best.0.count_ones())));
    for bit in (0..32).rev() {
        let zero = Expr::eq(Expr::and(s.clone(), Expr::constant(1 << bit)), Expr::constant(0));
        if best.0 & (1 << bit) != 0 {
            let mut q = fixed.clone();
            q.push(zero);
            match solver.solve(&q)? {
                SolveResult::Sat(m) => {
                    best = (eval_total(&s, &m), m);
                    fixed.push(Expr::eq(Expr::and(s.clone(), Expr::constant(1 << bit)), Expr::constant(0)));
                }
                SolveResult::Unsat => fixed.push(Expr::ne(Expr::and(s.clone(), Expr::constant(1 << bit)), Expr::constant(0))),
            }
        } else {
            fixed.push(zero);
        }
    }
    Ok(Some(best))
}

/// Analysis state for `line`: `trigger` with every value made concrete,
/// an interrupt frame pushed and the pc at the routine entry.
fn analysis_entry(solver: &Solver, image: &FirmwareImage, trigger: &SymState, line: u32) -> Result<SymState, IdentError> {
    let model = solver.solve(&trigger.path_condition)?.model().unwrap_or_default();
    let mut st = trigger.concretized(&model);
    let sp = st.reg(SP).as_const().expect("concrete").wrapping_sub(FRAME_SIZE);
    st.mem.insert(sp, Expr::constant(st.pc));
    st.mem.insert(sp + 4, st.reg(LR).clone());
    st.mem.insert(sp + 8, Expr::or(st.z.clone(), Expr::shl(st.n.clone(), Expr::constant(1))));
    st.set_reg(SP, Expr::constant(sp));
    st.in_isr = true;
    st.isr = Some(SymIsr { line, staged: None, dr_cursor: 0, analysis: true, sr_var: None });
    st.pc = image.vector(line);
    st.steps = 0;
    st.bb_count = 0;
    st.blocks.clear();
    st.after_indirect = false;
    st.mmio_hits.clear();
    st.skip_site_pc = None;
    st.start_trace();
    Ok(st)
}

fn record_of(
    image: &FirmwareImage,
    solver: &Solver,
    region: &GlobalRegion,
    line: u32,
    st: &SymState,
) -> Result<Option<IsrPathRecord>, SolverError> {
    let trace = st.trace.as_ref().expect("analysis paths are traced");
    let mut sr_vars: Vec<Var> = Vec::new();
    let mut dr_vars: Vec<Var> = Vec::new();
    for e in &trace.entries {
        for v in e.loaded.iter().flat_map(|l| l.vars()) {
            let list = match v.origin {
                Origin::Sr => &mut sr_vars,
                Origin::Dr => &mut dr_vars,
                Origin::Global => continue,
            };
            if !list.contains(&v) {
                list.push(v);
            }
        }
    }
    let Some((sr_value, model)) = minimal_sr(solver, &st.path_condition, sr_vars.first().copied())? else {
        return Ok(None);
    };
    let mut rename: BTreeMap<Var, Expr> =
        sr_vars.iter().map(|v| (*v, Expr::constant(sr_value))).collect();
    for (i, v) in dr_vars.iter().enumerate() {
        rename.insert(*v, Expr::var(Var::new(Origin::Dr, i as u32)));
    }
    let dr_constraints: Vec<Expr> = st
        .path_condition
        .iter()
        .filter(|c| c.mentions(|v| v.origin == Origin::Dr))
        .map(|c| c.substitute(&rename))
        .filter(|c| c.as_const() != Some(1))
        .collect();
    let dr_witness: Vec<u32> = dr_vars.iter().map(|v| model.get(*v).unwrap_or(0)).collect();
    let slice = slice_trace(image, trace, &|a| region.contains(a));
    let effects: Vec<Effect> = slice
        .effects
        .iter()
        .map(|(addr, f)| {
            let formula = f.substitute(&rename);
            Effect { var_addr: *addr, pattern: classify_pattern(*addr, &formula), formula }
        })
        .collect();
    let guards = slice.guards.iter().map(|g| g.substitute(&rename)).collect();
    Ok(Some(IsrPathRecord {
        line,
        sr_value,
        effects,
        guards,
        dr_constraints,
        dr_witness,
        address_dependent: slice.address_dependent,
    }))
}

/// Explores the routine of `line` from `trigger` and builds its model.
pub fn analyze_isr(
    image: &FirmwareImage,
    leaders: &BTreeSet<u32>,
    model: &mut RegisterModel,
    solver: &Solver,
    region: &GlobalRegion,
    trigger: &SymState,
    line: u32,
    path_cap: usize,
) -> Result<LineModel, IdentError> {
    if image.vector(line) == 0 {
        return Err(IdentError::NoVector(line));
    }
    let entry = analysis_entry(solver, image, trigger, line)?;
    let mut work = 0;
    let mut pass = 0;
    let (paths, tests) = loop {
        pass += 1;
        let version = model.version;
        let mut env = Env::new(image, leaders, model, Scope::IsrAnalysis);
        env.solver = *solver;
        env.dispatch = false;
        let set = explore(&mut env, entry.clone(), StopRule::ReturnedFromFrame, ISR_STEP_LIMIT, path_cap)?;
        work += env.work;
        let tests = std::mem::take(&mut env.tests);
        if model.version == version || pass >= MAX_PASSES {
            break (set, tests);
        }
    };

    let mut hits: BTreeMap<u32, u32> = BTreeMap::new();
    let mut blocks = BTreeSet::new();
    for st in paths.finished.iter().chain(paths.terminated.iter().map(|(s, _)| s)) {
        for (b, n) in &st.mmio_hits {
            *hits.entry(*b).or_default() += n;
        }
        blocks.extend(st.blocks.iter().copied());
    }
    let block = hits.iter().max_by_key(|(b, n)| (**n, std::cmp::Reverse(**b))).map(|(b, _)| *b);

    let mut dropped = paths.terminated.len();
    let mut effectful = Vec::new();
    let mut null_record = None;
    for st in &paths.finished {
        match record_of(image, solver, region, line, st)? {
            None => {
                log::debug!("line {line}: path without a status witness dropped");
                dropped += 1;
            }
            Some(r) if r.effects.is_empty() => {
                if null_record.is_none() {
                    null_record = Some(r);
                }
            }
            Some(r) => effectful.push(r),
        }
    }
    let sr_bits = effectful.iter().fold(0, |acc, r| acc | r.sr_value);
    let categories = model.categories();
    let enable_switches = tests
        .into_iter()
        .filter_map(|(addr, bits)| {
            let on = bits & categories.get(&addr).map_or(0, |c| c.cr_mask());
            (on != 0).then_some((addr, on))
        })
        .collect();
    Ok(LineModel {
        line,
        isr_entry: image.vector(line),
        block,
        records: filter_paths(effectful.clone()),
        null_record,
        unfiltered: effectful,
        sr_bits,
        enable_switches,
        dropped,
        blocks,
        work,
    })
}

/// Identification state kept across the whole analysis.
#[derive(Debug, Clone, Default)]
pub struct Identifier {
    pub region: GlobalRegion,
    pub region_fallback: bool,
    pub table: InterruptModelTable,
    cache: BTreeMap<(u32, Vec<(u32, u32)>), LineModel>,
    /// Control-register changes on blocks not yet tied to a line.
    pub deferred: Vec<(u32, u32)>,
    pub analyses: u64,
    pub work: u64,
    pub explored_blocks: BTreeSet<u32>,
    pub path_cap: usize,
}

impl Identifier {
    pub fn new(image: &FirmwareImage, path_cap: usize) -> Self {
        let (region, region_fallback) = match locate_global_region(image) {
            Ok(r) => (r, false),
            Err(IdentError::RegionNotFound { fallback }) => (fallback, true),
            Err(e) => unreachable!("{e}"),
        };
        Identifier { region, region_fallback, path_cap, ..Default::default() }
    }

    /// Reacts to `event` raised by `trigger`. Returns the analyzed line.
    pub fn on_trigger(
        &mut self,
        image: &FirmwareImage,
        leaders: &BTreeSet<u32>,
        model: &mut RegisterModel,
        solver: &Solver,
        trigger: &SymState,
        event: Event,
    ) -> Result<Option<u32>, IdentError> {
        let line = match event {
            Event::LineEnabled(line) => line,
            Event::CrBitEnabled { addr, bits } => {
                let block = image.map.periph_block(addr).map_or(0, |(b, _)| b);
                match self.table.line_for_block(block) {
                    Some(line) => line,
                    None => {
                        self.deferred.push((addr, bits));
                        return Err(IdentError::UnassociatedPeripheral(block));
                    }
                }
            }
        };
        if image.vector(line) == 0 {
            return Err(IdentError::NoVector(line));
        }
        self.analyze(image, leaders, model, solver, trigger, line)?;
        Ok(Some(line))
    }

    pub fn analyze(
        &mut self,
        image: &FirmwareImage,
        leaders: &BTreeSet<u32>,
        model: &mut RegisterModel,
        solver: &Solver,
        trigger: &SymState,
        line: u32,
    ) -> Result<&LineModel, IdentError> {
        let stored: Vec<(u32, u32)> = trigger
            .periph
            .iter()
            .map(|(a, e)| (*a, e.as_const().unwrap_or(0)))
            .collect();
        let key = (line, stored);
        let lm = match self.cache.get(&key) {
            Some(lm) => lm.clone(),
            None => {
                let lm = analyze_isr(image, leaders, model, solver, &self.region, trigger, line, self.path_cap)?;
                self.analyses += 1;
                self.work += lm.work;
                self.explored_blocks.extend(lm.blocks.iter().copied());
                self.cache.insert(key, lm.clone());
                lm
            }
        };
        if let Some(b) = lm.block {
            self.deferred.retain(|(a, _)| image.map.periph_block(*a).map(|(x, _)| x) != Some(b));
        }
        self.table.lines.insert(line, lm);
        Ok(&self.table.lines[&line])
    }

    /// Forgets cached analyses of `line` so the next trigger re-explores.
    pub fn invalidate(&mut self, line: u32) {
        self.cache.retain(|(l, _), _| *l != line);
    }
}

/// Concretely raises `line` from `state` with the given status value and
/// data payload, runs the routine to its return and reports the globals
/// whose value changed.
pub fn fire_concrete(
    image: &FirmwareImage,
    state: &MachineState,
    bus: &CategoryPeripherals,
    region: &GlobalRegion,
    line: u32,
    sr: u32,
    dr: &[u32],
) -> Result<BTreeMap<u32, u32>, MachineError> {
    let mut st = state.clone();
    st.nvic.enabled |= 1 << line;
    st.nvic.fire(line, sr, dr.to_vec()).map_err(MachineError::Nvic)?;
    let mut bus = bus.clone();
    let mut entered = false;
    for _ in 0..ISR_STEP_LIMIT {
        step_concrete(image, &mut st, &mut bus)?;
        entered |= st.in_isr;
        if entered && !st.in_isr {
            break;
        }
    }
    Ok(st
        .mem
        .iter()
        .filter(|(a, v)| region.contains(**a) && state.ram_word(**a) != **v)
        .map(|(a, v)| (*a, *v))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(line: u32, sr: u32, effects: &[(u32, u32)]) -> IsrPathRecord {
        IsrPathRecord {
            line,
            sr_value: sr,
            effects: effects
                .iter()
                .map(|&(a, v)| Effect { var_addr: a, formula: Expr::constant(v), pattern: Pattern::ConstAssign })
                .collect(),
            guards: Vec::new(),
            dr_constraints: Vec::new(),
            dr_witness: Vec::new(),
            address_dependent: false,
        }
    }

    #[test]
    fn patterns() {
        let g = 0x2000_0000;
        let old = Expr::var(Var::old_value(g));
        assert_eq!(classify_pattern(g, &Expr::add(old.clone(), Expr::constant(1))), Pattern::SelfReferral);
        assert_eq!(classify_pattern(g, &Expr::constant(0)), Pattern::ConstAssign);
        assert_eq!(classify_pattern(g, &Expr::var(Var::new(Origin::Dr, 0))), Pattern::DataReception);
        assert_eq!(classify_pattern(g + 4, &old), Pattern::Other);
    }

    #[test]
    fn duplicates_collapse() {
        let out = filter_paths(vec![rec(0, 1, &[(0x10, 0)]), rec(0, 2, &[(0x10, 0)])]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sr_value, 1);
    }

    #[test]
    fn union_record_is_removed() {
        let a: Vec<(u32, u32)> = (0..4).map(|i| (0x100 + 4 * i, 1)).collect();
        let b: Vec<(u32, u32)> = (0..6).map(|i| (0x200 + 4 * i, 2)).collect();
        let ab: Vec<(u32, u32)> = a.iter().chain(b.iter()).copied().collect();
        let out = filter_paths(vec![rec(0, 3, &ab), rec(0, 1, &a), rec(0, 2, &b)]);
        assert_eq!(out.iter().map(|r| r.sr_value).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn disjoint_records_are_kept() {
        let out = filter_paths(vec![rec(0, 1, &[(0x10, 1)]), rec(0, 2, &[(0x14, 1)])]);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn lookup_order_and_missing_variable() {
        let mut table = InterruptModelTable::default();
        let lm = |line, records| LineModel {
            line,
            isr_entry: 0x100,
            block: None,
            records,
            null_record: None,
            unfiltered: Vec::new(),
            sr_bits: 0,
            enable_switches: BTreeMap::new(),
            dropped: 0,
            blocks: BTreeSet::new(),
            work: 0,
        };
        table.lines.insert(1, lm(1, vec![rec(1, 1, &[(0x10, 1), (0x14, 1), (0x18, 1)]), rec(1, 4, &[(0x10, 2)])]));
        table.lines.insert(0, lm(0, vec![rec(0, 8, &[(0x10, 3)])]));
        let order: Vec<(u32, u32)> = table.table_lookup(0x10).unwrap().iter().map(|r| (r.line, r.sr_value)).collect();
        assert_eq!(order, vec![(0, 8), (1, 4), (1, 1)]);
        assert_eq!(table.table_lookup(0x99).unwrap_err(), IdentError::NoModelForVariable(0x99));
    }

    #[test]
    fn minimal_status_value() {
        let solver = Solver::default();
        let sr = Var::new(Origin::Sr, 0);
        let s = Expr::var(sr);
        let pc = vec![
            Expr::ne(Expr::and(s.clone(), Expr::constant(0x30)), Expr::constant(0)),
            Expr::ne(Expr::and(s.clone(), Expr::constant(0x0F)), Expr::constant(0)),
        ];
        let (v, _) = minimal_sr(&solver, &pc, Some(sr)).unwrap().unwrap();
        let oracle = (0u32..256)
            .filter(|x| x & 0x30 != 0 && x & 0x0F != 0)
            .min_by_key(|x| (x.count_ones(), *x))
            .unwrap();
        assert_eq!(v, oracle);
    }

    #[test]
    fn region_coalescing() {
        let r = GlobalRegion::from_words([0x2000_0000, 0x2000_0004, 0x2000_0010]);
        assert_eq!(r.ranges, vec![(0x2000_0000, 0x2000_0008), (0x2000_0010, 0x2000_0014)]);
        assert!(r.contains(0x2000_0004) && !r.contains(0x2000_0008));
    }
}
