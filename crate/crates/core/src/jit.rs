//! Just-in-time interrupt inference and firing at global-variable reads.
//!
//! When a path is about to read a global that some service routine
//! modifies, the read value is made symbolic and the code after the read
//! is explored for a bounded number of blocks. For every local path that
//! reaches new code, the routine effects in the model table are used to
//! find an interrupt sequence that drives the global into the path's
//! constraints. The sequence is then replayed on a copy of the pre-read
//! state.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Expr, Origin, Var};
use crate::ident::{IdentError, InterruptModelTable, IsrPathRecord, Pattern, ISR_STEP_LIMIT};
use crate::image::FirmwareImage;
use crate::isa::Opcode;
use crate::machine::ScheduledFiring;
use crate::mmio::{RegisterModel, Scope};
use crate::nvic::NvicError;
use crate::solver::{Solver, SolverError};
use crate::symex::{
    explore, relevant, step_symbolic, Env, Event, StopRule, Successor, SymState, SymexError, Termination,
};

pub const DEFAULT_ISR_WINDOW: u64 = 30;
pub const DEFAULT_MAX_SEQ_LEN: usize = 64;
pub const DEFAULT_LOCAL_PATH_CAP: usize = 512;
/// Instruction bound of one local exploration.
pub const LOCAL_STEP_LIMIT: u64 = 20_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JitError {
    #[error("no interrupt sequence satisfies the path at 0x{pc:08x}")]
    InferenceFailed { pc: u32 },
    #[error("interrupt line {0} is not enabled")]
    LineNotEnabled(u32),
    #[error("global 0x{var_addr:08x} misses its target after firing at 0x{pc:08x}")]
    PostFireMismatch { pc: u32, var_addr: u32, lines: Vec<u32> },
    #[error("fired routine of line {line} stopped: {reason:?}")]
    FiredRoutineStopped { line: u32, reason: Termination },
    #[error(transparent)]
    Symex(#[from] SymexError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FiringSite {
    pub pc: u32,
    pub var_addr: u32,
    pub occurrences: u64,
}

/// A path found after a firing site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalPath {
    /// Symbol standing for the value read at the site.
    pub var: Var,
    pub constraints: Vec<Expr>,
    pub new_blocks: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Firing {
    pub line: u32,
    pub sr_value: u32,
    pub dr_payloads: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InterruptSequence {
    pub firings: Vec<Firing>,
    /// Index of the targeted local path.
    pub target: usize,
}

/// Site returned when `st` is about to read a global listed in `table`.
pub fn detect_site(image: &FirmwareImage, st: &SymState, table: &InterruptModelTable) -> Option<FiringSite> {
    let instr = image.decode_at(st.pc).ok()?;
    if instr.opcode != Opcode::Ld {
        return None;
    }
    let addr = Expr::add(st.reg(instr.rs1).clone(), Expr::constant(instr.imm as i32 as u32)).as_const()?;
    table.keys().contains(&addr).then_some(FiringSite { pc: st.pc, var_addr: addr, occurrences: 1 })
}

/// Site bookkeeping: visit counts and the coverage version at the last
/// exploration of each site.
#[derive(Debug, Clone, Default)]
pub struct SiteTracker {
    pub sites: BTreeMap<u32, FiringSite>,
    explored_at: BTreeMap<u32, u64>,
}

impl SiteTracker {
    pub fn visit(&mut self, pc: u32, var_addr: u32) -> &FiringSite {
        let s = self.sites.entry(pc).or_insert(FiringSite { pc, var_addr, occurrences: 0 });
        s.occurrences += 1;
        s
    }

    /// Whether the site should be explored under `coverage_version`.
    pub fn due(&mut self, pc: u32, coverage_version: u64) -> bool {
        if self.explored_at.get(&pc) == Some(&coverage_version) {
            return false;
        }
        self.explored_at.insert(pc, coverage_version);
        true
    }

    pub fn reset(&mut self, pc: u32) {
        self.explored_at.remove(&pc);
    }
}

/// Shared inputs of the JIT operations.
pub struct JitContext<'a> {
    pub image: &'a FirmwareImage,
    pub leaders: &'a BTreeSet<u32>,
    pub solver: Solver,
    pub isr_window: u64,
    pub max_seq_len: usize,
    pub path_cap: usize,
}

impl<'a> JitContext<'a> {
    pub fn new(image: &'a FirmwareImage, leaders: &'a BTreeSet<u32>) -> Self {
        JitContext {
            image,
            leaders,
            solver: Solver::default(),
            isr_window: DEFAULT_ISR_WINDOW,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            path_cap: DEFAULT_LOCAL_PATH_CAP,
        }
    }
}

/// Explores from the site with the read value symbolized.
pub fn local_explore(
    cx: &JitContext,
    model: &mut RegisterModel,
    st: &SymState,
    site: &FiringSite,
    coverage: &BTreeSet<u32>,
) -> Result<(Vec<LocalPath>, u64), JitError> {
    let mut s = st.clone();
    let var = s.fresh_var(Origin::Global);
    s.mem.insert(site.var_addr, Expr::var(var));
    s.bb_count = 0;
    s.blocks.clear();
    s.skip_site_pc = None;
    let mut env = Env::new(cx.image, cx.leaders, model, Scope::Local);
    env.solver = cx.solver;
    env.dispatch = false;
    let set = explore(&mut env, s, StopRule::BbBudget(cx.isr_window), LOCAL_STEP_LIMIT, cx.path_cap)?;
    let seed = [Expr::var(var)];
    let paths = set
        .finished
        .iter()
        .chain(set.terminated.iter().map(|(s, _)| s))
        .map(|p| LocalPath {
            var,
            constraints: relevant(&p.path_condition, &seed),
            new_blocks: p.blocks.difference(coverage).copied().collect(),
        })
        .collect();
    Ok((paths, env.work))
}

/// Keeps the paths that own at least one block no other retained path
/// covers. Paths without new blocks never survive.
pub fn prune(paths: &[LocalPath]) -> Vec<usize> {
    let mut keep = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        if p.new_blocks.is_empty() {
            continue;
        }
        let dominated = paths.iter().enumerate().any(|(j, q)| {
            j != i
                && p.new_blocks.is_subset(&q.new_blocks)
                && (p.new_blocks.len() < q.new_blocks.len() || j < i)
        });
        if !dominated {
            keep.push(i);
        }
    }
    keep
}

/// Values of globals as seen by successive firings of one record.
struct Application {
    values: BTreeMap<u32, Expr>,
    conditions: Vec<Expr>,
    dr_vars: Vec<Vec<Var>>,
    next_var: u32,
}

impl Application {
    fn new(st: &SymState) -> Self {
        Application { values: BTreeMap::new(), conditions: Vec::new(), dr_vars: Vec::new(), next_var: st.fresh }
    }

    fn value(&self, st: &SymState, addr: u32) -> Expr {
        self.values.get(&addr).cloned().unwrap_or_else(|| st.ram(addr))
    }

    /// Applies every effect of `r` once, simultaneously.
    fn apply(&mut self, st: &SymState, r: &IsrPathRecord) {
        let fresh: Vec<Var> = (0..r.dr_count())
            .map(|_| {
                self.next_var += 1;
                Var::new(Origin::Dr, self.next_var)
            })
            .collect();
        let subst = |e: &Expr| {
            e.substitute_with(&|v| match (v.old_value_addr(), v.origin) {
                (Some(a), _) => Some(self.value(st, a)),
                (None, Origin::Dr) => Some(Expr::var(fresh[v.id as usize])),
                _ => None,
            })
        };
        let updated: Vec<(u32, Expr)> = r.effects.iter().map(|e| (e.var_addr, subst(&e.formula))).collect();
        let conditions: Vec<Expr> = r.guards.iter().chain(&r.dr_constraints).map(subst).collect();
        self.conditions.extend(conditions);
        self.values.extend(updated);
        self.dr_vars.push(fresh);
    }
}

fn satisfiable(solver: &Solver, st: &SymState, mut q: Vec<Expr>) -> Result<Option<crate::expr::Model>, SolverError> {
    let context = relevant(&st.path_condition, &q);
    q.extend(context);
    Ok(solver.solve(&q)?.model())
}

/// Finds the interrupts that make the read at `site` satisfy `path`.
pub fn infer_sequence(
    cx: &JitContext,
    table: &InterruptModelTable,
    st: &SymState,
    site: &FiringSite,
    path: &LocalPath,
    target: usize,
) -> Result<InterruptSequence, JitError> {
    let g = Expr::var(path.var);
    let target_query = |value: Expr, extra: &[Expr]| {
        let mut q = path.constraints.clone();
        q.push(Expr::eq(g.clone(), value));
        q.extend(extra.iter().cloned());
        q
    };
    if satisfiable(&cx.solver, st, target_query(st.ram(site.var_addr), &[]))?.is_some() {
        return Ok(InterruptSequence { firings: Vec::new(), target });
    }
    let records = match table.table_lookup(site.var_addr) {
        Ok(r) => r,
        Err(IdentError::NoModelForVariable(_)) => return Err(JitError::InferenceFailed { pc: site.pc }),
        Err(e) => unreachable!("lookup only fails on unknown variables: {e}"),
    };
    for r in records {
        if !st.nvic.is_enabled(r.line) {
            continue;
        }
        let Some(effect) = r.effect(site.var_addr) else { continue };
        let max_k = match effect.pattern {
            Pattern::ConstAssign | Pattern::DataReception => 1,
            Pattern::SelfReferral | Pattern::Other => cx.max_seq_len,
        };
        let mut app = Application::new(st);
        for _ in 0..max_k {
            app.apply(st, r);
            let q = target_query(app.value(st, site.var_addr), &app.conditions);
            if let Some(m) = satisfiable(&cx.solver, st, q)? {
                let firings = app
                    .dr_vars
                    .iter()
                    .map(|vars| Firing {
                        line: r.line,
                        sr_value: r.sr_value,
                        dr_payloads: vars.iter().map(|v| m.get(*v).unwrap_or(0)).collect(),
                    })
                    .collect();
                return Ok(InterruptSequence { firings, target });
            }
        }
    }
    Err(JitError::InferenceFailed { pc: site.pc })
}

/// Result of replaying a sequence.
#[derive(Debug, Clone)]
pub struct Fired {
    pub state: SymState,
    pub events: Vec<Event>,
    pub entered: Vec<u32>,
    pub work: u64,
}

/// Raises `seq` on a copy of the pre-read state `st`, running each routine
/// to its return, then checks the read value against the target path.
pub fn fire_sequence(
    cx: &JitContext,
    model: &mut RegisterModel,
    st: &SymState,
    site: &FiringSite,
    seq: &InterruptSequence,
    path: &LocalPath,
) -> Result<Fired, JitError> {
    let mut s = st.clone();
    let mut env = Env::new(cx.image, cx.leaders, model, Scope::GlobalDse);
    env.solver = cx.solver;
    for f in &seq.firings {
        s.nvic.fire(f.line, f.sr_value, f.dr_payloads.clone()).map_err(|e| match e {
            NvicError::LineNotEnabled(l) => JitError::LineNotEnabled(l),
            other => JitError::FiredRoutineStopped { line: f.line, reason: Termination::Nvic(other.to_string()) },
        })?;
        s.inputs.firings.push(ScheduledFiring { step: s.steps, line: f.line, sr: f.sr_value, dr: f.dr_payloads.clone() });
        let mut entered = false;
        for _ in 0..ISR_STEP_LIMIT {
            let mut next = step_symbolic(&mut env, s);
            s = match next.swap_remove(0) {
                Successor::Live(x) | Successor::Site(x, _) => x,
                Successor::Done(_, reason) => return Err(JitError::FiredRoutineStopped { line: f.line, reason }),
            };
            entered |= s.in_isr;
            if entered && !s.in_isr {
                break;
            }
        }
        if s.in_isr {
            return Err(JitError::FiredRoutineStopped { line: f.line, reason: Termination::StepLimit });
        }
    }
    let mut q = path.constraints.clone();
    q.push(Expr::eq(Expr::var(path.var), s.ram(site.var_addr)));
    if satisfiable(&cx.solver, &s, q)?.is_none() {
        return Err(JitError::PostFireMismatch {
            pc: site.pc,
            var_addr: site.var_addr,
            lines: seq.firings.iter().map(|f| f.line).collect(),
        });
    }
    s.skip_site_pc = Some(site.pc);
    Ok(Fired { state: s, events: env.events, entered: env.entered, work: env.work })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::{Effect, LineModel};

    fn lp(blocks: &[u32]) -> LocalPath {
        LocalPath { var: Var::new(Origin::Global, 0), constraints: Vec::new(), new_blocks: blocks.iter().copied().collect() }
    }

    #[test]
    fn prune_rules() {
        assert_eq!(prune(&[lp(&[1, 2]), lp(&[1])]), vec![0]);
        assert_eq!(prune(&[lp(&[1, 2]), lp(&[2, 3])]), vec![0, 1]);
        assert_eq!(prune(&[lp(&[1]), lp(&[1])]), vec![0]);
        assert_eq!(prune(&[lp(&[]), lp(&[4])]), vec![1]);
    }

    const G: u32 = 0x2000_0000;

    fn table(line: u32, formula: Expr, pattern: Pattern) -> InterruptModelTable {
        let drs = formula.vars().iter().filter(|v| v.origin == Origin::Dr).count();
        let rec = IsrPathRecord {
            line,
            sr_value: 1,
            effects: vec![Effect { var_addr: G, formula, pattern }],
            guards: Vec::new(),
            dr_constraints: Vec::new(),
            dr_witness: vec![0; drs],
            address_dependent: false,
        };
        let mut t = InterruptModelTable::default();
        t.lines.insert(
            line,
            LineModel {
                line,
                isr_entry: 0x100,
                block: None,
                records: vec![rec],
                null_record: None,
                unfiltered: Vec::new(),
                sr_bits: 1,
                enable_switches: BTreeMap::new(),
                dropped: 0,
                blocks: BTreeSet::new(),
                work: 0,
            },
        );
        t
    }

    fn setup(value: u32) -> (FirmwareImage, SymState) {
        let mut words = vec![0u32; 0x40];
        words[0] = 0x2001_0000;
        words[1] = 0x100;
        words.push(0x0F00_0000);
        let image = FirmwareImage::new(words).unwrap();
        let mut st = SymState::reset(&image);
        st.mem.insert(G, Expr::constant(value));
        st.nvic.enabled = 1;
        (image, st)
    }

    fn infer(t: &InterruptModelTable, st: &SymState, image: &FirmwareImage, c: Expr) -> Result<InterruptSequence, JitError> {
        let leaders = BTreeSet::new();
        let cx = JitContext::new(image, &leaders);
        let var = Var::new(Origin::Global, 1000);
        let path = LocalPath { var, constraints: vec![c], new_blocks: BTreeSet::new() };
        infer_sequence(&cx, t, st, &FiringSite { pc: 0x100, var_addr: G, occurrences: 1 }, &path, 0)
    }

    #[test]
    fn self_referral_counts_firings() {
        let (image, st) = setup(0);
        let t = table(0, Expr::add(Expr::var(Var::old_value(G)), Expr::constant(1)), Pattern::SelfReferral);
        let g = Expr::var(Var::new(Origin::Global, 1000));
        let seq = infer(&t, &st, &image, Expr::uge(g.clone(), Expr::constant(5))).unwrap();
        assert_eq!(seq.firings.len(), 5);
        let seq = infer(&t, &st, &image, Expr::ult(g, Expr::constant(5))).unwrap();
        assert!(seq.firings.is_empty());
    }

    #[test]
    fn data_reception_solves_payload() {
        let (image, st) = setup(0);
        let t = table(0, Expr::var(Var::new(Origin::Dr, 0)), Pattern::DataReception);
        let g = Expr::var(Var::new(Origin::Global, 1000));
        let seq = infer(&t, &st, &image, Expr::eq(g, Expr::constant(0x42))).unwrap();
        assert_eq!(seq.firings, vec![Firing { line: 0, sr_value: 1, dr_payloads: vec![0x42] }]);
    }

    #[test]
    fn disabled_lines_are_never_chosen() {
        let (image, mut st) = setup(0);
        st.nvic.enabled = 0;
        let t = table(0, Expr::constant(1), Pattern::ConstAssign);
        let g = Expr::var(Var::new(Origin::Global, 1000));
        assert_eq!(infer(&t, &st, &image, Expr::eq(g, Expr::constant(1))), Err(JitError::InferenceFailed { pc: 0x100 }));
    }
}
