//! Symbolic interpreter over MVM-32.
//!
//! A [`SymState`] holds registers and memory as expressions; the program
//! counter stays concrete. Conditional branches on symbolic conditions fork,
//! symbolic indirect targets fan out to at most [`MAX_INDIRECT_TARGETS`]
//! concrete targets, and symbolic addresses are pinned to one witness.
//! Peripheral reads follow the register categories of the shared
//! [`RegisterModel`] and the scope of the running analysis.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, Model, Origin, Var};
use crate::image::FirmwareImage;
use crate::isa::{Instr, IsaError, Opcode, LR, NUM_REGS, SP};
use crate::machine::{is_block_entry, ScheduledFiring, FRAME_SIZE};
use crate::memory::{check_access, AccessKind, MemPermissions, MemoryFault, Region};
use crate::mmio::{read_source, Category, ReadContext, ReadSource, RegisterModel, Scope, SrSource};
use crate::nvic::{NvicError, NvicState, StagedValues};
use crate::solver::{SolveResult, Solver, SolverError};

pub const DEFAULT_PATH_CAP: usize = 4096;
pub const MAX_INDIRECT_TARGETS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SymexError {
    #[error("live path set exceeded the cap of {0}")]
    PathBudgetExhausted(usize),
    #[error("expression has no satisfying value under the path condition")]
    Unsatisfiable,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Why a path stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Termination {
    Halted,
    Fault(MemoryFault),
    Decode(String),
    Nvic(String),
    IretOutsideIsr(u32),
    /// Indirect jump whose target could not be made concrete.
    SymbolicPc(u32),
    Solver(String),
    StepLimit,
}

/// Interrupt-related state of a running service routine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymIsr {
    pub line: u32,
    pub staged: Option<StagedValues>,
    pub dr_cursor: usize,
    /// Routine under identification: status reads are symbolic.
    pub analysis: bool,
    /// Status snapshot shared by every status read of this invocation.
    pub sr_var: Option<Var>,
}

impl SymIsr {
    fn read_context(&self) -> ReadContext {
        if self.analysis {
            ReadContext::Analysis
        } else if self.staged.is_some() {
            ReadContext::Fired
        } else {
            ReadContext::Plain
        }
    }
}

/// Peripheral-value provenance of a register, used to infer which register
/// bits the firmware tests and whether read values are stored onward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Taint {
    addr: u32,
    shift: u32,
    /// Bits kept by an `AND` with a constant, in register positions.
    mask: Option<u32>,
}

/// One executed instruction, as needed by the backward slicer.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub pc: u32,
    pub instr: Instr,
    /// Concrete address of a load or store.
    pub addr: Option<u32>,
    /// Symbolic address of a load or store before concretization.
    pub addr_expr: Option<Expr>,
    /// Value a load produced.
    pub loaded: Option<Expr>,
    /// Direction of a conditional branch.
    pub taken: Option<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub init_regs: Vec<Expr>,
    pub entries: Vec<TraceEntry>,
}

/// Everything needed to replay a path concretely.
#[derive(Debug, Clone, Default)]
pub struct PathInputs {
    /// Every peripheral read value, in order.
    pub mmio_reads: Vec<Expr>,
    pub firings: Vec<ScheduledFiring>,
}

#[derive(Debug, Clone)]
pub struct SymState {
    pub id: u64,
    pub regs: Vec<Expr>,
    pub pc: u32,
    /// Zero and negative flags, each 0 or 1.
    pub z: Expr,
    pub n: Expr,
    /// RAM overlay; absent words are zero.
    pub mem: BTreeMap<u32, Expr>,
    /// Last value written to each peripheral register.
    pub periph: BTreeMap<u32, Expr>,
    pub nvic: NvicState,
    pub in_isr: bool,
    pub isr: Option<SymIsr>,
    pub path_condition: Vec<Expr>,
    pub steps: u64,
    pub bb_count: u64,
    pub blocks: BTreeSet<u32>,
    pub after_indirect: bool,
    pub halted: bool,
    pub fresh: u32,
    pub trace: Option<Trace>,
    taint: [Option<Taint>; NUM_REGS],
    pub inputs: PathInputs,
    /// Firing-site check is skipped once at this pc.
    pub skip_site_pc: Option<u32>,
    /// Basic-block count at which the fixed-frequency baseline fires next.
    pub fixed_next: u64,
    pub fixed_cursor: u32,
    /// Peripheral accesses per block index.
    pub mmio_hits: BTreeMap<u32, u32>,
}

impl SymState {
    pub fn reset(image: &FirmwareImage) -> Self {
        let mut regs = vec![Expr::constant(0); NUM_REGS];
        regs[SP as usize] = Expr::constant(image.initial_sp());
        SymState {
            id: 0,
            regs,
            pc: image.entry(),
            z: Expr::constant(0),
            n: Expr::constant(0),
            mem: BTreeMap::new(),
            periph: BTreeMap::new(),
            nvic: NvicState::default(),
            in_isr: false,
            isr: None,
            path_condition: Vec::new(),
            steps: 0,
            bb_count: 0,
            blocks: BTreeSet::new(),
            after_indirect: false,
            halted: false,
            fresh: 0,
            trace: None,
            taint: [None; NUM_REGS],
            inputs: PathInputs::default(),
            skip_site_pc: None,
            fixed_next: 0,
            fixed_cursor: 0,
            mmio_hits: BTreeMap::new(),
        }
    }

    pub fn fresh_var(&mut self, origin: Origin) -> Var {
        let v = Var::new(origin, self.fresh);
        self.fresh += 1;
        v
    }

    pub fn ram(&self, addr: u32) -> Expr {
        self.mem.get(&addr).cloned().unwrap_or_else(|| Expr::constant(0))
    }

    pub fn reg(&self, r: u8) -> &Expr {
        &self.regs[r as usize]
    }

    pub fn set_reg(&mut self, r: u8, value: Expr) {
        self.regs[r as usize] = value;
        self.taint[r as usize] = None;
    }

    pub fn constrain(&mut self, c: Expr) {
        if c.as_const() != Some(1) {
            self.path_condition.push(c);
        }
    }

    pub fn start_trace(&mut self) {
        self.trace = Some(Trace { init_regs: self.regs.clone(), entries: Vec::new() });
    }

    /// Replaces every symbolic value by its value under `model`; unbound
    /// variables become 0. Clears the path condition and recorded inputs.
    pub fn concretized(&self, model: &Model) -> SymState {
        let c = |e: &Expr| Expr::constant(eval_total(e, model));
        let mut out = self.clone();
        out.regs = self.regs.iter().map(c).collect();
        out.z = c(&self.z);
        out.n = c(&self.n);
        out.mem = self.mem.iter().map(|(a, e)| (*a, c(e))).collect();
        out.periph = self.periph.iter().map(|(a, e)| (*a, c(e))).collect();
        out.path_condition.clear();
        out.taint = [None; NUM_REGS];
        out.inputs = PathInputs::default();
        out.trace = None;
        out
    }
}

/// Evaluates `e` with unbound variables read as 0.
pub fn eval_total(e: &Expr, model: &Model) -> u32 {
    e.substitute_with(&|v| Some(Expr::constant(model.get(*v).unwrap_or(0))))
        .as_const()
        .expect("closed expression folds to a constant")
}

/// Constraints of `pc` transitively sharing variables with `seeds`.
pub fn relevant(pc: &[Expr], seeds: &[Expr]) -> Vec<Expr> {
    let mut vars: BTreeSet<Var> = seeds.iter().flat_map(|e| e.vars()).collect();
    let sets: Vec<BTreeSet<Var>> = pc.iter().map(|c| c.vars()).collect();
    let mut taken = vec![false; pc.len()];
    loop {
        let mut grew = false;
        for (i, s) in sets.iter().enumerate() {
            if !taken[i] && !s.is_disjoint(&vars) {
                taken[i] = true;
                vars.extend(s.iter().copied());
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    pc.iter().zip(taken).filter(|(_, t)| *t).map(|(c, _)| c.clone()).collect()
}

/// Something the firmware did that interrupt identification reacts to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Event {
    LineEnabled(u32),
    /// Bits of a control register went from 0 to 1.
    CrBitEnabled { addr: u32, bits: u32 },
}

/// A global-variable read the JIT engine may want to intercept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SiteHit {
    pub pc: u32,
    pub addr: u32,
}

/// Engine-side context of a step.
pub struct Env<'a> {
    pub image: &'a FirmwareImage,
    pub perms: MemPermissions,
    pub leaders: &'a BTreeSet<u32>,
    pub model: &'a mut RegisterModel,
    pub solver: Solver,
    pub scope: Scope,
    /// Whether pending interrupts are dispatched.
    pub dispatch: bool,
    /// Addresses whose reads are firing sites.
    pub sites: Option<&'a BTreeSet<u32>>,
    pub events: Vec<Event>,
    /// Blocks entered during the last steps.
    pub entered: Vec<u32>,
    /// Bits tested per peripheral register during the last steps.
    pub tests: BTreeMap<u32, u32>,
    /// Instructions executed.
    pub work: u64,
}

impl<'a> Env<'a> {
    pub fn new(image: &'a FirmwareImage, leaders: &'a BTreeSet<u32>, model: &'a mut RegisterModel, scope: Scope) -> Self {
        Env {
            image,
            perms: MemPermissions::new(image.map),
            leaders,
            model,
            solver: Solver::default(),
            scope,
            dispatch: scope == Scope::GlobalDse,
            sites: None,
            events: Vec::new(),
            entered: Vec::new(),
            tests: BTreeMap::new(),
            work: 0,
        }
    }

    fn emits_events(&self) -> bool {
        self.scope == Scope::GlobalDse
    }

    fn sat(&self, st: &SymState, extra: &Expr) -> Result<Option<Model>, SolverError> {
        if extra.as_const() == Some(0) {
            return Ok(None);
        }
        let mut q = relevant(&st.path_condition, std::slice::from_ref(extra));
        q.push(extra.clone());
        Ok(self.solver.solve(&q)?.model())
    }
}

#[derive(Debug, Clone)]
pub enum Successor {
    Live(SymState),
    /// The state is about to read a firing-site global; nothing executed.
    Site(SymState, SiteHit),
    Done(SymState, Termination),
}

/// Pins `e` to one satisfying value and records that choice.
pub fn concretize(solver: &Solver, st: &mut SymState, e: &Expr) -> Result<u32, SymexError> {
    if let Some(c) = e.as_const() {
        return Ok(c);
    }
    let q = relevant(&st.path_condition, std::slice::from_ref(e));
    match solver.solve(&q)? {
        SolveResult::Sat(model) => {
            let x = eval_total(e, &model);
            st.constrain(Expr::eq(e.clone(), Expr::constant(x)));
            Ok(x)
        }
        SolveResult::Unsat => Err(SymexError::Unsatisfiable),
    }
}

fn permitted(perms: &MemPermissions, addr: &Expr, kind: AccessKind) -> Expr {
    let aligned = Expr::eq(Expr::and(addr.clone(), Expr::constant(3)), Expr::constant(0));
    let mut inside = Expr::constant(0);
    for (lo, hi) in perms.permitted_ranges(kind) {
        let r = Expr::and(Expr::uge(addr.clone(), Expr::constant(lo)), Expr::ult(addr.clone(), Expr::constant(hi)));
        inside = Expr::or(inside, r);
    }
    Expr::and(aligned, inside)
}

fn flags_expr(z: &Expr, n: &Expr) -> Expr {
    Expr::or(z.clone(), Expr::shl(n.clone(), Expr::constant(1)))
}

fn bool_expr(e: Expr) -> Expr {
    Expr::ite(e, Expr::constant(1), Expr::constant(0))
}

pub(crate) fn cond_of(op: Opcode, a: Expr, b: Expr) -> Expr {
    match op {
        Opcode::Beq => Expr::eq(a, b),
        Opcode::Bne => Expr::ne(a, b),
        Opcode::Blt => Expr::ult(a, b),
        _ => Expr::uge(a, b),
    }
}

pub(crate) fn alu_expr(op: Opcode, a: Expr, b: Expr) -> Expr {
    let amount = |b: Expr| Expr::and(b, Expr::constant(31));
    match op {
        Opcode::Add => Expr::add(a, b),
        Opcode::Sub => Expr::sub(a, b),
        Opcode::And => Expr::and(a, b),
        Opcode::Or => Expr::or(a, b),
        Opcode::Xor => Expr::xor(a, b),
        Opcode::Shl => Expr::shl(a, amount(b)),
        Opcode::Shr => Expr::shr(a, amount(b)),
        _ => unreachable!("not an ALU opcode"),
    }
}

/// Outcome of resolving a possibly symbolic address.
enum Resolved {
    Ok(u32),
    Stop(Termination),
    Gone,
}

/// Executes one instruction of `st`, entering a pending service routine
/// first when dispatch is enabled.
pub fn step_symbolic(env: &mut Env, mut st: SymState) -> Vec<Successor> {
    if st.halted {
        return vec![Successor::Done(st, Termination::Halted)];
    }
    let mut dispatched = false;
    if env.dispatch && st.nvic.peek_dispatch(st.in_isr).is_some() {
        match push_frame(env, &mut st) {
            Ok(()) => dispatched = true,
            Err(t) => return vec![Successor::Done(st, t)],
        }
    }
    let pc = st.pc;
    if let Err(f) = check_access(pc, pc, AccessKind::Execute, &env.perms) {
        return vec![Successor::Done(st, Termination::Fault(f))];
    }
    let instr = match env.image.decode_at(pc) {
        Ok(i) => i,
        Err(e) => return vec![Successor::Done(st, decode_failure(e))],
    };

    if instr.opcode == Opcode::Ld && !st.in_isr && env.scope == Scope::GlobalDse && st.skip_site_pc != Some(pc) {
        if let Some(sites) = env.sites {
            let addr = Expr::add(st.reg(instr.rs1).clone(), Expr::constant(instr.imm as i32 as u32));
            if let Some(a) = addr.as_const().filter(|a| sites.contains(a)) {
                return vec![Successor::Site(st, SiteHit { pc, addr: a })];
            }
        }
    }
    if st.skip_site_pc == Some(pc) {
        st.skip_site_pc = None;
    }

    if is_block_entry(env.leaders, pc, st.after_indirect && !dispatched) {
        st.blocks.insert(pc);
        st.bb_count += 1;
        env.entered.push(pc);
    }
    env.work += 1;
    st.after_indirect = instr.opcode == Opcode::Jalr;
    let mut entry = TraceEntry { pc, instr, addr: None, addr_expr: None, loaded: None, taken: None };
    let next = pc.wrapping_add(instr.size());
    let mut fault_paths = Vec::new();

    let outcome: Result<Next, Termination> = (|| {
        match instr.opcode {
            Opcode::Nop => Ok(Next::Same(next, None)),
            Opcode::Halt => {
                st.halted = true;
                Ok(Next::Same(pc, None))
            }
            Opcode::Ldi => {
                st.set_reg(instr.rd, Expr::constant(instr.ext_imm.unwrap_or(0)));
                Ok(Next::Same(next, None))
            }
            Opcode::Mov => {
                let v = st.reg(instr.rs1).clone();
                let t = st.taint[instr.rs1 as usize];
                st.set_reg(instr.rd, v);
                st.taint[instr.rd as usize] = t;
                Ok(Next::Same(next, None))
            }
            op if op.is_alu() => {
                let (a, b) = (st.reg(instr.rs1).clone(), st.reg(instr.rs2).clone());
                let taint = alu_taint(op, &st, instr.rs1, instr.rs2);
                let v = alu_expr(op, a, b);
                st.z = bool_expr(Expr::eq(v.clone(), Expr::constant(0)));
                st.n = Expr::shr(v.clone(), Expr::constant(31));
                st.set_reg(instr.rd, v);
                st.taint[instr.rd as usize] = taint;
                Ok(Next::Same(next, None))
            }
            Opcode::Ld => {
                let addr_expr = Expr::add(st.reg(instr.rs1).clone(), Expr::constant(instr.imm as i32 as u32));
                let addr = match resolve_addr(env, &mut st, &addr_expr, AccessKind::Read, &mut fault_paths) {
                    Resolved::Ok(a) => a,
                    Resolved::Stop(t) => return Err(t),
                    Resolved::Gone => return Ok(Next::Forks(Vec::new())),
                };
                let (value, taint) = load(env, &mut st, addr)?;
                entry.addr = Some(addr);
                entry.addr_expr = Some(addr_expr);
                entry.loaded = Some(value.clone());
                st.set_reg(instr.rd, value);
                st.taint[instr.rd as usize] = taint;
                Ok(Next::Same(next, None))
            }
            Opcode::St => {
                let addr_expr = Expr::add(st.reg(instr.rs1).clone(), Expr::constant(instr.imm as i32 as u32));
                let addr = match resolve_addr(env, &mut st, &addr_expr, AccessKind::Write, &mut fault_paths) {
                    Resolved::Ok(a) => a,
                    Resolved::Stop(t) => return Err(t),
                    Resolved::Gone => return Ok(Next::Forks(Vec::new())),
                };
                if let Some(t) = st.taint[instr.rs2 as usize] {
                    if t.addr != addr {
                        env.model.record_store(t.addr);
                    }
                }
                let value = st.reg(instr.rs2).clone();
                store(env, &mut st, addr, value)?;
                entry.addr = Some(addr);
                entry.addr_expr = Some(addr_expr);
                Ok(Next::Same(next, None))
            }
            op if op.is_conditional_branch() => {
                for r in [instr.rs1, instr.rs2] {
                    if let Some(Taint { addr, shift, mask: Some(m) }) = st.taint[r as usize] {
                        env.model.record_test(addr, m << shift);
                        *env.tests.entry(addr).or_default() |= m << shift;
                    }
                }
                let cond = cond_of(op, st.reg(instr.rs1).clone(), st.reg(instr.rs2).clone());
                let target = instr.branch_target(pc);
                if let Some(c) = cond.as_const() {
                    let taken = c != 0;
                    return Ok(Next::Same(if taken { target } else { next }, Some(taken)));
                }
                let mut out = Vec::new();
                for (taken, c) in [(true, cond.clone()), (false, Expr::falsity(cond))] {
                    match env.sat(&st, &c) {
                        Ok(Some(_)) => {
                            let mut child = st.clone();
                            child.constrain(c);
                            out.push((child, if taken { target } else { next }, Some(taken)));
                        }
                        Ok(None) => {}
                        Err(e) => return Err(Termination::Solver(e.to_string())),
                    }
                }
                Ok(Next::Forks(out))
            }
            Opcode::Jal => {
                st.set_reg(instr.rd, Expr::constant(next));
                Ok(Next::Same(instr.branch_target(pc), None))
            }
            Opcode::Jalr => {
                let target = Expr::add(st.reg(instr.rs1).clone(), Expr::constant(instr.imm as i32 as u32));
                st.set_reg(instr.rd, Expr::constant(next));
                if let Some(t) = target.as_const() {
                    return Ok(Next::Same(t, None));
                }
                let targets = enumerate_targets(env, &st, &target).map_err(|e| Termination::Solver(e.to_string()))?;
                if targets.is_empty() {
                    return Err(Termination::SymbolicPc(pc));
                }
                Ok(Next::Forks(targets
                    .into_iter()
                    .map(|t| {
                        let mut child = st.clone();
                        child.constrain(Expr::eq(target.clone(), Expr::constant(t)));
                        (child, t, None)
                    })
                    .collect()))
            }
            Opcode::Iret => {
                if !st.in_isr {
                    return Err(Termination::IretOutsideIsr(pc));
                }
                let sp = concrete_reg(env, &mut st, SP)?;
                for off in [0, 4, 8] {
                    check_access(pc, sp.wrapping_add(off), AccessKind::Read, &env.perms).map_err(Termination::Fault)?;
                }
                let ret = st.ram(sp);
                let ret = concretize(&env.solver, &mut st, &ret).map_err(|e| Termination::Solver(e.to_string()))?;
                let lr = st.ram(sp + 4);
                let flags = st.ram(sp + 8);
                st.set_reg(LR, lr);
                st.z = Expr::and(flags.clone(), Expr::constant(1));
                st.n = Expr::and(Expr::shr(flags, Expr::constant(1)), Expr::constant(1));
                st.set_reg(SP, Expr::constant(sp.wrapping_add(FRAME_SIZE)));
                st.in_isr = false;
                st.isr = None;
                Ok(Next::Same(ret, None))
            }
            _ => unreachable!("all opcodes handled"),
        }
    })();

    let mut out: Vec<Successor> = fault_paths;
    match outcome {
        Ok(next) => {
            let children = match next {
                Next::Same(pc, taken) => vec![(st, pc, taken)],
                Next::Forks(children) => children,
            };
            for (mut child, next_pc, taken) in children {
                if let Some(trace) = child.trace.as_mut() {
                    let mut e = entry.clone();
                    e.taken = taken;
                    trace.entries.push(e);
                }
                child.pc = next_pc;
                child.steps += 1;
                if child.halted {
                    out.push(Successor::Done(child, Termination::Halted));
                } else {
                    out.push(Successor::Live(child));
                }
            }
        }
        Err(t) => out.push(Successor::Done(st, t)),
    }
    out
}

/// Successors of one instruction: the stepped state itself, or copies.
enum Next {
    Same(u32, Option<bool>),
    Forks(Vec<(SymState, u32, Option<bool>)>),
}

fn decode_failure(e: IsaError) -> Termination {
    Termination::Decode(e.to_string())
}

fn alu_taint(op: Opcode, st: &SymState, rs1: u8, rs2: u8) -> Option<Taint> {
    let (t1, t2) = (st.taint[rs1 as usize], st.taint[rs2 as usize]);
    let (c1, c2) = (st.reg(rs1).as_const(), st.reg(rs2).as_const());
    match op {
        Opcode::And => {
            let (t, m) = match (t1, t2, c1, c2) {
                (Some(t), None, _, Some(m)) => (t, m),
                (None, Some(t), Some(m), _) => (t, m),
                _ => return None,
            };
            Some(Taint { mask: Some(t.mask.unwrap_or(u32::MAX) & m), ..t })
        }
        Opcode::Shr => match (t1, c2) {
            (Some(t), Some(c)) => {
                let c = c & 31;
                Some(Taint { shift: t.shift + c, mask: t.mask.map(|m| m >> c), ..t })
            }
            _ => None,
        },
        _ => None,
    }
}

fn concrete_reg(env: &Env, st: &mut SymState, r: u8) -> Result<u32, Termination> {
    let e = st.reg(r).clone();
    concretize(&env.solver, st, &e).map_err(|e| Termination::Solver(e.to_string()))
}

fn push_frame(env: &mut Env, st: &mut SymState) -> Result<(), Termination> {
    let sp = concrete_reg(env, st, SP)?.wrapping_sub(FRAME_SIZE);
    for off in [0, 4, 8] {
        check_access(st.pc, sp.wrapping_add(off), AccessKind::Write, &env.perms).map_err(Termination::Fault)?;
    }
    let d = st.nvic.next_dispatch(st.in_isr).expect("peeked");
    st.mem.insert(sp, Expr::constant(st.pc));
    st.mem.insert(sp + 4, st.reg(LR).clone());
    st.mem.insert(sp + 8, flags_expr(&st.z, &st.n));
    st.set_reg(SP, Expr::constant(sp));
    st.in_isr = true;
    st.isr = Some(SymIsr { line: d.line, staged: d.staged, dr_cursor: 0, analysis: false, sr_var: None });
    st.pc = env.image.vector(d.line);
    Ok(())
}

/// Makes an address concrete. In global exploration, a symbolic address
/// that may leave the permitted regions first spawns a faulting path.
fn resolve_addr(
    env: &Env,
    st: &mut SymState,
    addr: &Expr,
    kind: AccessKind,
    faults: &mut Vec<Successor>,
) -> Resolved {
    let a = match addr.as_const() {
        Some(a) => a,
        None => {
            let ok = permitted(&env.perms, addr, kind);
            if env.scope == Scope::GlobalDse {
                let bad = Expr::falsity(ok.clone());
                match env.sat(st, &bad) {
                    Ok(Some(model)) => {
                        let mut f = st.clone();
                        let witness = eval_total(addr, &model);
                        f.constrain(bad);
                        f.constrain(Expr::eq(addr.clone(), Expr::constant(witness)));
                        f.steps += 1;
                        faults.push(Successor::Done(f, Termination::Fault(MemoryFault { pc: st.pc, addr: witness, kind })));
                    }
                    Ok(None) => {}
                    Err(e) => return Resolved::Stop(Termination::Solver(e.to_string())),
                }
                match env.sat(st, &ok) {
                    Ok(Some(_)) => st.constrain(ok),
                    // Only the faulting side is feasible.
                    Ok(None) => return Resolved::Gone,
                    Err(e) => return Resolved::Stop(Termination::Solver(e.to_string())),
                }
            }
            match concretize(&env.solver, st, addr) {
                Ok(a) => a,
                Err(e) => return Resolved::Stop(Termination::Solver(e.to_string())),
            }
        }
    };
    match check_access(st.pc, a, kind, &env.perms) {
        Ok(()) => Resolved::Ok(a),
        Err(f) => Resolved::Stop(Termination::Fault(f)),
    }
}

fn load(env: &mut Env, st: &mut SymState, addr: u32) -> Result<(Expr, Option<Taint>), Termination> {
    Ok(match env.image.map.region_of(addr) {
        Some(Region::Flash) => (Expr::constant(env.image.flash_word(addr)), None),
        Some(Region::Ram) => (st.ram(addr), None),
        Some(Region::Peripheral) => {
            let v = mmio_read(env, st, addr);
            (v, Some(Taint { addr, shift: 0, mask: None }))
        }
        Some(Region::Controller) => {
            let v = st.nvic.ctrl_read(addr - env.image.map.ctrl_base).map_err(nvic_failure)?;
            (Expr::constant(v), None)
        }
        None => unreachable!("access check admits only mapped regions"),
    })
}

fn nvic_failure(e: NvicError) -> Termination {
    Termination::Nvic(e.to_string())
}

fn block_index(env: &Env, addr: u32) -> u32 {
    env.image.map.periph_block(addr).map_or(0, |(b, _)| b)
}

fn mmio_read(env: &mut Env, st: &mut SymState, addr: u32) -> Expr {
    env.model.record_read(addr);
    *st.mmio_hits.entry(block_index(env, addr)).or_default() += 1;
    let ctx = st.isr.as_ref().map_or(ReadContext::Plain, SymIsr::read_context);
    let stored = st.periph.get(&addr).cloned().unwrap_or_else(|| Expr::constant(0));
    let sr_symbol = |st: &mut SymState| -> Expr {
        if let Some(v) = st.isr.as_ref().and_then(|i| i.sr_var) {
            return Expr::var(v);
        }
        let v = st.fresh_var(Origin::Sr);
        if let Some(i) = st.isr.as_mut() {
            i.sr_var = Some(v);
        }
        Expr::var(v)
    };
    let staged_sr = |st: &SymState| Expr::constant(st.isr.as_ref().and_then(|i| i.staged.as_ref()).map_or(0, |s| s.sr));
    let value = match read_source(env.model.category(addr), env.scope, ctx) {
        ReadSource::Stored => stored,
        ReadSource::Zero => Expr::constant(0),
        ReadSource::SrSymbol => sr_symbol(st),
        ReadSource::SrStaged => staged_sr(st),
        ReadSource::DrSymbol => Expr::var(st.fresh_var(Origin::Dr)),
        ReadSource::DrStaged => {
            let isr = st.isr.as_mut().expect("fired context implies a routine");
            let v = isr.staged.as_ref().and_then(|s| s.dr.get(isr.dr_cursor)).copied().unwrap_or(0);
            isr.dr_cursor += 1;
            Expr::constant(v)
        }
        ReadSource::Mixed { cr_mask, sr_mask, inner } => {
            let sr = match inner {
                SrSource::Symbol => sr_symbol(st),
                SrSource::Staged => staged_sr(st),
                SrSource::Zero => Expr::constant(0),
            };
            Expr::or(
                Expr::and(stored, Expr::constant(cr_mask)),
                Expr::and(sr, Expr::constant(sr_mask)),
            )
        }
    };
    st.inputs.mmio_reads.push(value.clone());
    value
}

fn store(env: &mut Env, st: &mut SymState, addr: u32, value: Expr) -> Result<(), Termination> {
    match env.image.map.region_of(addr) {
        Some(Region::Ram) => {
            st.mem.insert(addr, value);
        }
        Some(Region::Peripheral) => {
            let written = value.as_const();
            env.model.record_write(addr, written.unwrap_or(u32::MAX));
            *st.mmio_hits.entry(block_index(env, addr)).or_default() += 1;
            if env.emits_events() {
                let cr_mask = match env.model.category(addr) {
                    Some(c @ (Category::Cr | Category::Csr { .. })) => c.cr_mask(),
                    _ => 0,
                };
                let old = st.periph.get(&addr).and_then(Expr::as_const).unwrap_or(0);
                let rising = written.unwrap_or(0) & !old & cr_mask;
                if rising != 0 {
                    env.events.push(Event::CrBitEnabled { addr, bits: rising });
                }
            }
            st.periph.insert(addr, value);
        }
        Some(Region::Controller) => {
            let v = concretize(&env.solver, st, &value).map_err(|e| Termination::Solver(e.to_string()))?;
            let lines = st.nvic.ctrl_write(addr - env.image.map.ctrl_base, v).map_err(nvic_failure)?;
            if env.emits_events() {
                env.events.extend(lines.into_iter().map(Event::LineEnabled));
            }
        }
        _ => unreachable!("access check admits only writable regions"),
    }
    Ok(())
}

fn enumerate_targets(env: &Env, st: &SymState, target: &Expr) -> Result<Vec<u32>, SolverError> {
    let mut found = Vec::new();
    let mut block = Expr::constant(1);
    while found.len() < MAX_INDIRECT_TARGETS {
        let mut query = relevant(&st.path_condition, std::slice::from_ref(target));
        query.push(block.clone());
        match env.solver.solve(&query)? {
            SolveResult::Sat(m) => {
                let t = eval_total(target, &m);
                found.push(t);
                block = Expr::and(block, Expr::ne(target.clone(), Expr::constant(t)));
            }
            SolveResult::Unsat => break,
        }
    }
    Ok(found)
}

/// When `explore` stops following a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// The routine the state started in has returned.
    ReturnedFromFrame,
    /// The path has entered this many basic blocks.
    BbBudget(u64),
    StepBudget(u64),
}

impl StopRule {
    fn reached(self, st: &SymState) -> bool {
        match self {
            StopRule::ReturnedFromFrame => !st.in_isr,
            StopRule::BbBudget(n) => st.bb_count >= n,
            StopRule::StepBudget(n) => st.steps >= n,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PathSet {
    /// Paths that met the stop rule.
    pub finished: Vec<SymState>,
    pub terminated: Vec<(SymState, Termination)>,
}

/// Breadth-first expansion of `entry` until every path meets `stop` or
/// dies. `step_limit` bounds each path independently of the rule.
pub fn explore(
    env: &mut Env,
    entry: SymState,
    stop: StopRule,
    step_limit: u64,
    cap: usize,
) -> Result<PathSet, SymexError> {
    let mut out = PathSet::default();
    let start = entry.steps;
    let mut queue = VecDeque::from([entry]);
    while let Some(st) = queue.pop_front() {
        if stop.reached(&st) {
            out.finished.push(st);
            continue;
        }
        if st.steps - start >= step_limit {
            out.terminated.push((st, Termination::StepLimit));
            continue;
        }
        for s in step_symbolic(env, st) {
            match s {
                Successor::Live(s) | Successor::Site(s, _) => queue.push_back(s),
                Successor::Done(s, t) => out.terminated.push((s, t)),
            }
        }
        if queue.len() > cap {
            return Err(SymexError::PathBudgetExhausted(cap));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Instr;
    use crate::mmio::Layout;

    fn image(code: &[Instr]) -> FirmwareImage {
        let mut words = vec![0u32; 0x40];
        words[0] = 0x2001_0000;
        words[1] = 0x100;
        for i in code {
            words.extend(i.encode());
        }
        FirmwareImage::new(words).unwrap()
    }

    fn halt() -> Instr {
        Instr::new(Opcode::Halt, 0, 0, 0, 0)
    }

    fn run<T>(code: &[Instr], scope: Scope, f: impl FnOnce(&mut Env, SymState) -> T) -> T {
        let img = image(code);
        let leaders = crate::cfg::build_cfg(&img).leaders();
        let mut model = RegisterModel::new(&Layout::default());
        let mut env = Env::new(&img, &leaders, &mut model, scope);
        let st = SymState::reset(&img);
        f(&mut env, st)
    }

    fn live(s: Vec<Successor>) -> Vec<SymState> {
        s.into_iter()
            .filter_map(|s| match s {
                Successor::Live(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn symbolic_branch_forks() {
        let code = [Instr::new(Opcode::Beq, 0, 1, 2, 1), halt(), halt()];
        run(&code, Scope::Local, |env, mut st| {
            let g = st.fresh_var(Origin::Global);
            st.regs[1] = Expr::var(g);
            st.regs[2] = Expr::constant(4);
            let kids = live(step_symbolic(env, st));
            assert_eq!(kids.iter().map(|k| k.pc).collect::<Vec<_>>(), vec![0x108, 0x104]);
            assert_eq!(kids[0].path_condition, vec![Expr::eq(Expr::var(g), Expr::constant(4))]);
        });
    }

    #[test]
    fn concrete_branch_does_not_fork() {
        let code = [Instr::new(Opcode::Beq, 0, 1, 2, 1), halt(), halt()];
        run(&code, Scope::Local, |env, st| {
            let kids = live(step_symbolic(env, st));
            assert_eq!(kids.len(), 1);
            assert_eq!(kids[0].pc, 0x108);
        });
    }

    #[test]
    fn infeasible_child_is_dropped() {
        let code = [Instr::new(Opcode::Beq, 0, 1, 0, 1), halt(), halt()];
        run(&code, Scope::Local, |env, mut st| {
            let v = st.fresh_var(Origin::Sr);
            st.regs[1] = Expr::and(Expr::var(v), Expr::constant(1));
            st.constrain(Expr::ne(st.regs[1].clone(), Expr::constant(0)));
            let kids = live(step_symbolic(env, st));
            assert_eq!(kids.len(), 1);
            assert_eq!(kids[0].pc, 0x104);
        });
    }

    #[test]
    fn concretize_pins_a_witness() {
        let solver = Solver::default();
        let mut st = SymState::reset(&image(&[halt()]));
        let g = Expr::var(st.fresh_var(Origin::Global));
        st.constrain(Expr::ult(g.clone(), Expr::constant(3)));
        st.constrain(Expr::ne(g.clone(), Expr::constant(0)));
        let x = concretize(&solver, &mut st, &g).unwrap();
        let oracle: Vec<u32> = (0..8).filter(|w| *w < 3 && *w != 0).collect();
        assert!(oracle.contains(&x));
        assert_eq!(st.path_condition.last(), Some(&Expr::eq(g.clone(), Expr::constant(x))));

        let before = st.path_condition.len();
        assert_eq!(concretize(&solver, &mut st, &Expr::constant(7)).unwrap(), 7);
        assert_eq!(st.path_condition.len(), before);

        st.constrain(Expr::eq(g.clone(), Expr::constant(5)));
        assert_eq!(concretize(&solver, &mut st, &g), Err(SymexError::Unsatisfiable));
    }

    #[test]
    fn straight_line_function_is_one_path() {
        // call f; f: nop; j g; g: ret-to-halt
        let code = [
            Instr::new(Opcode::Jal, LR, 0, 0, 1),
            halt(),
            Instr::nop(),
            Instr::new(Opcode::Beq, 0, 0, 0, 0),
            Instr::new(Opcode::Jalr, LR, LR, 0, 0),
        ];
        run(&code, Scope::Local, |env, st| {
            let set = explore(env, st, StopRule::StepBudget(100), 1000, 16).unwrap();
            assert!(set.finished.is_empty());
            assert_eq!(set.terminated.len(), 1);
            assert_eq!(set.terminated[0].1, Termination::Halted);
        });
    }

    #[test]
    fn bb_budget_stops_symbolic_loop() {
        // loop: r1 = r1 + r2; bne r1, r3, loop; halt
        let code = [Instr::new(Opcode::Add, 1, 1, 2, 0), Instr::new(Opcode::Bne, 0, 1, 3, -2), halt()];
        run(&code, Scope::Local, |env, mut st| {
            let g = st.fresh_var(Origin::Global);
            st.regs[3] = Expr::var(g);
            st.regs[2] = Expr::constant(1);
            let set = explore(env, st, StopRule::BbBudget(30), 10_000, 4096).unwrap();
            assert!(!set.finished.is_empty());
            assert!(set.finished.iter().all(|s| s.bb_count == 30));
        });
    }

    #[test]
    fn symbolic_indirect_jump_fans_out() {
        let code = [Instr::new(Opcode::Jalr, 0, 1, 0, 0), halt(), halt(), halt()];
        run(&code, Scope::Local, |env, mut st| {
            let g = Expr::var(st.fresh_var(Origin::Global));
            st.constrain(Expr::ule(g.clone(), Expr::constant(2)));
            st.regs[1] = Expr::add(Expr::constant(0x104), Expr::shl(g, Expr::constant(2)));
            let mut pcs: Vec<u32> = live(step_symbolic(env, st)).iter().map(|s| s.pc).collect();
            pcs.sort();
            assert_eq!(pcs, vec![0x104, 0x108, 0x10C]);
        });
    }

    #[test]
    fn symbolic_store_may_fault() {
        let code = [Instr::new(Opcode::St, 0, 1, 0, 0), halt()];
        run(&code, Scope::GlobalDse, |env, mut st| {
            let d = Expr::var(st.fresh_var(Origin::Dr));
            st.regs[1] = Expr::add(Expr::constant(0x2000_0000), Expr::shl(Expr::and(d, Expr::constant(0xFFFF)), Expr::constant(2)));
            let out = step_symbolic(env, st);
            let fault = out.iter().find_map(|s| match s {
                Successor::Done(_, Termination::Fault(f)) => Some(*f),
                _ => None,
            });
            let f = fault.expect("fault path");
            assert!(!env.perms.allows(f.addr, AccessKind::Write));
            assert_eq!(live(out).len(), 1);
        });
    }

    #[test]
    fn peripheral_taint_records_tests_and_stores() {
        // r1 = periph; r2 = r1 & 0x20; beq r2, r0; st r1 -> ram
        let code = [
            Instr::ldi(3, 0x4000_0000),
            Instr::new(Opcode::Ld, 1, 3, 0, 0),
            Instr::ldi(4, 0x20),
            Instr::new(Opcode::And, 2, 1, 4, 0),
            Instr::new(Opcode::Beq, 0, 2, 0, 0),
            Instr::ldi(5, 0x2000_0000),
            Instr::new(Opcode::St, 0, 5, 1, 0),
            halt(),
        ];
        run(&code, Scope::GlobalDse, |env, st| {
            explore(env, st, StopRule::StepBudget(100), 100, 16).unwrap();
            let log = env.model.log(0x4000_0000);
            assert_eq!(log.tested_mask, 0x20);
            assert!(log.stored_onward);
        });
    }
}
