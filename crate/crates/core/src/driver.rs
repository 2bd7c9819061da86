//! Global symbolic exploration with interrupt identification and firing.
//!
//! Paths are scheduled by CFG distance to the nearest uncovered block.
//! Line enables and control-bit changes suspend the path and run
//! identification; reads of modeled globals run inference and firing. Two
//! baselines are available: no interrupts at all, and round-robin firing
//! of enabled lines every `n` blocks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cfg::{build_cfg, Cfg};
use crate::ident::{IdentError, Identifier};
use crate::image::FirmwareImage;
use crate::jit::{
    fire_sequence, infer_sequence, local_explore, prune, Firing, JitContext, JitError, SiteTracker,
    DEFAULT_ISR_WINDOW, DEFAULT_LOCAL_PATH_CAP, DEFAULT_MAX_SEQ_LEN,
};
use crate::machine::{run_concrete, MachineError, RunInputs, ScheduledFiring};
use crate::memory::AccessKind;
use crate::mmio::{Layout, RegisterModel, Scope};
use crate::solver::{Solver, DEFAULT_BUDGET};
use crate::symex::{eval_total, step_symbolic, Env, Event, SiteHit, Successor, SymState, Termination, DEFAULT_PATH_CAP};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_STEP_BUDGET: u64 = 2_000_000;
pub const DEFAULT_FIXED_PERIOD: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Aim,
    NoInt,
    /// Fire enabled lines round-robin every `n` basic blocks.
    Fixed(u64),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            Mode::Aim => f.write_str("aim"),
            Mode::NoInt => f.write_str("no_int"),
            Mode::Fixed(n) => write!(f, "fixed:{n}"),
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "aim" => Ok(Mode::Aim),
            "no_int" | "no-int" | "noint" => Ok(Mode::NoInt),
            "fixed" => Ok(Mode::Fixed(DEFAULT_FIXED_PERIOD)),
            other => match other.strip_prefix("fixed:").map(str::parse::<u64>) {
                Some(Ok(n)) if n > 0 => Ok(Mode::Fixed(n)),
                _ => Err(format!("unknown mode `{s}` (expected aim, no_int, fixed or fixed:N)")),
            },
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

/// Status value staged by the fixed-frequency baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FixedSr {
    /// Lowest status bit known for the line, 0 when none is known.
    Auto,
    Forced(u32),
}

impl FromStr for FixedSr {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(FixedSr::Auto);
        }
        let v = match s.strip_prefix("0x") {
            Some(hex) => u32::from_str_radix(hex, 16),
            None => s.parse(),
        };
        v.map(FixedSr::Forced).map_err(|_| format!("bad status value `{s}`"))
    }
}

impl TryFrom<String> for FixedSr {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<FixedSr> for String {
    fn from(v: FixedSr) -> String {
        match v {
            FixedSr::Auto => "auto".into(),
            FixedSr::Forced(x) => format!("0x{x:x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub mode: Mode,
    /// Instructions executed by global exploration.
    pub step_budget: u64,
    /// Wall-clock limit, ignored in deterministic mode.
    pub time_budget_secs: Option<f64>,
    pub isr_window: u64,
    pub max_seq_len: usize,
    pub path_cap: usize,
    pub local_path_cap: usize,
    pub solver_budget: u64,
    pub deterministic: bool,
    pub fixed_sr: FixedSr,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            mode: Mode::Aim,
            step_budget: DEFAULT_STEP_BUDGET,
            time_budget_secs: None,
            isr_window: DEFAULT_ISR_WINDOW,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            path_cap: DEFAULT_PATH_CAP,
            local_path_cap: DEFAULT_LOCAL_PATH_CAP,
            solver_budget: DEFAULT_BUDGET,
            deterministic: true,
            fixed_sr: FixedSr::Auto,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Coverage {
    pub covered: BTreeSet<u32>,
    pub first_hit_step: BTreeMap<u32, u64>,
    pub first_hit_secs: BTreeMap<u32, f64>,
    /// Bumped whenever a block is covered for the first time.
    pub version: u64,
}

impl Coverage {
    pub fn hit(&mut self, block: u32, step: u64, secs: f64) -> bool {
        if !self.covered.insert(block) {
            return false;
        }
        self.first_hit_step.insert(block, step);
        self.first_hit_secs.insert(block, secs);
        self.version += 1;
        true
    }
}

fn priority(st: &SymState, cfg: &Cfg, dist: &BTreeMap<u32, u32>) -> (u32, u64, u64) {
    let d = cfg.block_of(st.pc).and_then(|b| dist.get(&b.start)).copied().unwrap_or(u32::MAX);
    (d, st.steps, st.id)
}

/// Index of the path to run next: nearest to uncovered code, then fewest
/// steps, then earliest created.
pub fn prioritize(paths: &[SymState], cfg: &Cfg, covered: &BTreeSet<u32>) -> Option<usize> {
    let dist = cfg.distances(covered);
    (0..paths.len()).min_by_key(|&i| priority(&paths[i], cfg, &dist))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayInputs {
    /// Peripheral read values in program order.
    pub mmio_reads: Vec<u32>,
    pub firings: Vec<ScheduledFiring>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Read,
    Write,
    Execute,
    Decode,
    IretOutsideIsr,
    SymbolicPc,
    Nvic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultReport {
    pub kind: FaultKind,
    pub pc: u32,
    pub addr: Option<u32>,
    pub path: u64,
    pub step: u64,
    pub detail: String,
    pub replay: ReplayInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageSummary {
    pub total_blocks: usize,
    pub covered: usize,
    pub percent: f64,
    pub blocks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceRecord {
    pub site_pc: u32,
    pub var_addr: u32,
    pub step: u64,
    pub firings: Vec<Firing>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceSummary {
    pub count: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub len_avg: f64,
    pub post_fire_mismatches: u64,
    pub inference_failures: u64,
    pub list: Vec<SequenceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineSummary {
    pub line: u32,
    pub isr_entry: u32,
    pub block: Option<u32>,
    pub sr_bits: u32,
    pub enable_switches: BTreeMap<String, String>,
    pub records: usize,
    pub unfiltered: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImtSummary {
    pub lines: Vec<LineSummary>,
    pub analyses: u64,
    pub region: Vec<(u32, u32)>,
    pub region_fallback: bool,
    pub table: Value,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseWork {
    pub identification: u64,
    pub inference_and_firing: u64,
    pub symbolic_execution: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseTimes {
    pub identification: f64,
    pub inference_and_firing: f64,
    pub symbolic_execution: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PathStats {
    pub created: u64,
    pub halted: u64,
    pub faulted: u64,
    pub evicted: u64,
    pub live_at_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    #[serde(rename = "schema")]
    pub schema_version: u32,
    /// Seconds since the Unix epoch; absent in deterministic mode.
    pub timestamp: Option<u64>,
    pub config: AnalysisConfig,
    pub steps: u64,
    pub coverage: CoverageSummary,
    pub trend: Vec<(u64, usize)>,
    pub sites: usize,
    pub sequences: SequenceSummary,
    pub imt: ImtSummary,
    pub faults: Vec<FaultReport>,
    pub phase_work: PhaseWork,
    pub phase_times: PhaseTimes,
    pub paths: PathStats,
    pub fixed_firings: u64,
    /// Firing requests for lines the firmware never enabled.
    pub disabled_line_fire_attempts: u64,
}

impl AnalysisReport {
    pub fn covered_blocks(&self) -> BTreeSet<u32> {
        self.coverage.blocks.iter().map(|b| u32::from_str_radix(&b[2..], 16).expect("hex block address")).collect()
    }

    pub fn trend_csv(&self) -> String {
        let mut out = String::from("step,covered\n");
        for (s, c) in &self.trend {
            out.push_str(&format!("{s},{c}\n"));
        }
        out
    }
}

struct Analysis<'a> {
    image: &'a FirmwareImage,
    cfg: Cfg,
    leaders: BTreeSet<u32>,
    config: AnalysisConfig,
    solver: Solver,
    model: RegisterModel,
    ident: Identifier,
    coverage: Coverage,
    live: Vec<SymState>,
    next_id: u64,
    steps: u64,
    started: Instant,
    dist: (u64, BTreeMap<u32, u32>),
    site_keys: BTreeSet<u32>,
    /// Blocks targeted by fired sequences whose states have not run yet.
    claimed: BTreeSet<u32>,
    tracker: SiteTracker,
    sequences: Vec<SequenceRecord>,
    mismatches: u64,
    inference_failures: u64,
    faults: Vec<FaultReport>,
    fault_keys: BTreeSet<(u32, Option<u32>, String)>,
    trend: Vec<(u64, usize)>,
    work: PhaseWork,
    times: PhaseTimes,
    paths: PathStats,
    fixed_firings: u64,
}

/// Runs the analysis of `image` under `config`.
pub fn run_analysis(image: &FirmwareImage, layout: &Layout, config: &AnalysisConfig) -> AnalysisReport {
    let cfg = build_cfg(image);
    let leaders = cfg.leaders();
    let dist = cfg.distances(&BTreeSet::new());
    let mut a = Analysis {
        image,
        cfg,
        leaders,
        config: config.clone(),
        solver: Solver { budget: config.solver_budget },
        model: RegisterModel::new(layout),
        ident: Identifier::new(image, config.path_cap),
        coverage: Coverage::default(),
        live: Vec::new(),
        next_id: 0,
        steps: 0,
        started: Instant::now(),
        dist: (0, dist),
        site_keys: BTreeSet::new(),
        claimed: BTreeSet::new(),
        tracker: SiteTracker::default(),
        sequences: Vec::new(),
        mismatches: 0,
        inference_failures: 0,
        faults: Vec::new(),
        fault_keys: BTreeSet::new(),
        trend: vec![(0, 0)],
        work: PhaseWork::default(),
        times: PhaseTimes::default(),
        paths: PathStats::default(),
        fixed_firings: 0,
    };
    a.push(SymState::reset(image));
    a.run();
    a.report()
}

impl<'a> Analysis<'a> {
    fn secs(&self) -> f64 {
        if self.config.deterministic {
            0.0
        } else {
            self.started.elapsed().as_secs_f64()
        }
    }

    /// Queues a newly created path.
    fn push(&mut self, mut st: SymState) {
        st.id = self.next_id;
        self.next_id += 1;
        self.paths.created += 1;
        self.requeue(st);
    }

    /// Queues a path that keeps its identity.
    fn requeue(&mut self, st: SymState) {
        self.live.push(st);
        if self.live.len() > self.config.path_cap {
            self.refresh_distances();
            let worst = (0..self.live.len())
                .max_by_key(|&i| priority(&self.live[i], &self.cfg, &self.dist.1))
                .expect("non-empty");
            self.live.swap_remove(worst);
            self.paths.evicted += 1;
        }
    }

    fn refresh_distances(&mut self) {
        if self.dist.0 != self.coverage.version {
            self.dist = (self.coverage.version, self.cfg.distances(&self.coverage.covered));
        }
    }

    fn cover(&mut self, blocks: &[u32]) {
        let secs = self.secs();
        let mut grew = false;
        for &b in blocks {
            grew |= self.coverage.hit(b, self.steps, secs);
        }
        if grew {
            self.trend.push((self.steps, self.coverage.covered.len()));
        }
    }

    fn out_of_budget(&self) -> bool {
        if self.steps >= self.config.step_budget {
            return true;
        }
        !self.config.deterministic
            && self.config.time_budget_secs.is_some_and(|t| self.started.elapsed().as_secs_f64() >= t)
    }

    fn run(&mut self) {
        while !self.live.is_empty() && !self.out_of_budget() {
            self.refresh_distances();
            let i = (0..self.live.len())
                .min_by_key(|&i| priority(&self.live[i], &self.cfg, &self.dist.1))
                .expect("non-empty");
            let mut st = self.live.swap_remove(i);
            if let Mode::Fixed(n) = self.config.mode {
                self.baseline_tick(&mut st, n);
            }
            let t0 = Instant::now();
            let (succs, events, entered, work) = {
                let mut env = Env::new(self.image, &self.leaders, &mut self.model, Scope::GlobalDse);
                env.solver = self.solver;
                if self.config.mode == Mode::Aim {
                    env.sites = Some(&self.site_keys);
                }
                let succs = step_symbolic(&mut env, st);
                (succs, env.events, env.entered, env.work)
            };
            self.steps += work;
            self.work.symbolic_execution += work;
            self.times.symbolic_execution += t0.elapsed().as_secs_f64();
            self.cover(&entered);

            let trigger = if events.is_empty() {
                None
            } else {
                succs.iter().find_map(|s| match s {
                    Successor::Live(s) => Some(s.clone()),
                    _ => None,
                })
            };
            let forked = succs.len() > 1;
            for s in succs {
                match s {
                    Successor::Live(s) if forked => self.push(s),
                    Successor::Live(s) => self.requeue(s),
                    Successor::Site(s, hit) => self.on_site(s, hit),
                    Successor::Done(s, t) => self.on_done(s, t),
                }
            }
            if let Some(trigger) = trigger {
                self.on_events(&trigger, events);
            }
        }
        self.paths.live_at_end = self.live.len();
    }

    fn on_events(&mut self, trigger: &SymState, events: Vec<Event>) {
        if self.config.mode == Mode::NoInt {
            return;
        }
        let mut queue: VecDeque<Event> = events.into();
        while let Some(ev) = queue.pop_front() {
            let t0 = Instant::now();
            let before = self.ident.work;
            let r = self.ident.on_trigger(self.image, &self.leaders, &mut self.model, &self.solver, trigger, ev);
            self.work.identification += self.ident.work - before;
            self.times.identification += t0.elapsed().as_secs_f64();
            match r {
                Ok(Some(line)) => log::info!("identified line {line} after {ev:?}"),
                Ok(None) => {}
                Err(IdentError::UnassociatedPeripheral(b)) => log::debug!("deferred control change on block {b}"),
                Err(e) => log::warn!("identification after {ev:?} failed: {e}"),
            }
            self.site_keys = self.ident.table.keys();
            self.cover_analysis();
        }
    }

    /// Routine blocks explored by identification count as covered.
    fn cover_analysis(&mut self) {
        let blocks: Vec<u32> = self.ident.explored_blocks.iter().copied().collect();
        self.cover(&blocks);
    }

    fn reanalyze(&mut self, trigger: &SymState, line: u32) {
        self.ident.invalidate(line);
        let t0 = Instant::now();
        let before = self.ident.work;
        if let Err(e) = self.ident.analyze(self.image, &self.leaders, &mut self.model, &self.solver, trigger, line) {
            log::warn!("re-analysis of line {line} failed: {e}");
        }
        self.work.identification += self.ident.work - before;
        self.times.identification += t0.elapsed().as_secs_f64();
        self.site_keys = self.ident.table.keys();
        self.cover_analysis();
    }

    fn on_site(&mut self, st: SymState, hit: SiteHit) {
        let site = self.tracker.visit(hit.pc, hit.addr).clone();
        if self.tracker.due(hit.pc, self.coverage.version) {
            let t0 = Instant::now();
            let cx = JitContext {
                image: self.image,
                leaders: &self.leaders,
                solver: self.solver,
                isr_window: self.config.isr_window,
                max_seq_len: self.config.max_seq_len,
                path_cap: self.config.local_path_cap,
            };
            let mut fired_states = Vec::new();
            let mut reanalyze = BTreeSet::new();
            let known: BTreeSet<u32> = self.coverage.covered.union(&self.claimed).copied().collect();
            match local_explore(&cx, &mut self.model, &st, &site, &known) {
                Err(e) => log::warn!("local exploration at 0x{:08x} failed: {e}", site.pc),
                Ok((paths, work)) => {
                    self.work.inference_and_firing += work;
                    for i in prune(&paths) {
                        let seq = match infer_sequence(&cx, &self.ident.table, &st, &site, &paths[i], i) {
                            Ok(seq) if seq.firings.is_empty() => continue,
                            Ok(seq) => seq,
                            Err(e) => {
                                log::debug!("{e}");
                                self.inference_failures += 1;
                                continue;
                            }
                        };
                        match fire_sequence(&cx, &mut self.model, &st, &site, &seq, &paths[i]) {
                            Ok(fired) => {
                                self.work.inference_and_firing += fired.work;
                                self.claimed.extend(paths[i].new_blocks.iter().copied());
                                self.sequences.push(SequenceRecord {
                                    site_pc: site.pc,
                                    var_addr: site.var_addr,
                                    step: self.steps,
                                    firings: seq.firings.clone(),
                                });
                                fired_states.push(fired);
                            }
                            Err(JitError::PostFireMismatch { lines, .. }) => {
                                log::info!("stale model at 0x{:08x}, lines {lines:?}", site.pc);
                                self.mismatches += 1;
                                reanalyze.extend(lines);
                            }
                            Err(e) => {
                                log::debug!("firing at 0x{:08x} failed: {e}", site.pc);
                                self.inference_failures += 1;
                            }
                        }
                    }
                }
            }
            self.times.inference_and_firing += t0.elapsed().as_secs_f64();
            for line in &reanalyze {
                self.reanalyze(&st, *line);
            }
            if !reanalyze.is_empty() {
                self.tracker.reset(site.pc);
            }
            for f in fired_states {
                self.cover(&f.entered);
                let trigger = f.state.clone();
                self.push(f.state);
                self.on_events(&trigger, f.events);
            }
        }
        let mut cont = st;
        cont.skip_site_pc = Some(hit.pc);
        self.requeue(cont);
    }

    fn on_done(&mut self, st: SymState, t: Termination) {
        let (kind, pc, addr, detail) = match &t {
            Termination::Halted => {
                self.paths.halted += 1;
                return;
            }
            Termination::StepLimit | Termination::Solver(_) => {
                log::debug!("path {} dropped: {t:?}", st.id);
                return;
            }
            Termination::Fault(f) => {
                let kind = match f.kind {
                    AccessKind::Read => FaultKind::Read,
                    AccessKind::Write => FaultKind::Write,
                    AccessKind::Execute => FaultKind::Execute,
                };
                (kind, f.pc, Some(f.addr), f.to_string())
            }
            Termination::Decode(m) => (FaultKind::Decode, st.pc, None, m.clone()),
            Termination::IretOutsideIsr(pc) => (FaultKind::IretOutsideIsr, *pc, None, "IRET outside a routine".into()),
            Termination::SymbolicPc(pc) => (FaultKind::SymbolicPc, *pc, None, "unresolved indirect jump".into()),
            Termination::Nvic(m) => (FaultKind::Nvic, st.pc, None, m.clone()),
        };
        self.paths.faulted += 1;
        if !self.fault_keys.insert((pc, addr, format!("{kind:?}"))) {
            return;
        }
        let model = self.solver.solve(&st.path_condition).ok().and_then(|r| r.model()).unwrap_or_default();
        let replay = ReplayInputs {
            mmio_reads: st.inputs.mmio_reads.iter().map(|e| eval_total(e, &model)).collect(),
            firings: st.inputs.firings.clone(),
        };
        self.faults.push(FaultReport { kind, pc, addr, path: st.id, step: st.steps, detail, replay });
    }

    fn baseline_tick(&mut self, st: &mut SymState, n: u64) {
        if st.in_isr {
            return;
        }
        if st.fixed_next == 0 {
            st.fixed_next = n;
        }
        if st.bb_count < st.fixed_next {
            return;
        }
        st.fixed_next = st.bb_count + n;
        let enabled = st.nvic.enabled;
        if enabled == 0 {
            return;
        }
        let line = (0..32).map(|k| (st.fixed_cursor + k) % 32).find(|l| enabled & (1 << l) != 0).expect("some line");
        st.fixed_cursor = (line + 1) % 32;
        let sr = match self.config.fixed_sr {
            FixedSr::Forced(v) => v,
            FixedSr::Auto => self
                .ident
                .table
                .lines
                .get(&line)
                .map(|lm| lm.records.iter().fold(0, |acc, r| acc | r.sr_value))
                .map_or(0, |bits| bits & bits.wrapping_neg()),
        };
        if st.nvic.fire(line, sr, Vec::new()).is_ok() {
            st.inputs.firings.push(ScheduledFiring { step: st.steps, line, sr, dr: Vec::new() });
            self.fixed_firings += 1;
        }
    }

    fn report(self) -> AnalysisReport {
        let total = self.cfg.blocks.len();
        let covered = self.coverage.covered.len();
        let lens: Vec<usize> = self.sequences.iter().map(|s| s.firings.len()).collect();
        let lines = self
            .ident
            .table
            .lines
            .values()
            .map(|lm| LineSummary {
                line: lm.line,
                isr_entry: lm.isr_entry,
                block: lm.block,
                sr_bits: lm.sr_bits,
                enable_switches: lm
                    .enable_switches
                    .iter()
                    .map(|(a, b)| (format!("0x{a:08x}"), format!("0x{b:x}")))
                    .collect(),
                records: lm.records.len(),
                unfiltered: lm.unfiltered.len(),
                dropped: lm.dropped,
            })
            .collect();
        let mut trend = self.trend;
        if trend.last().map(|t| t.0) != Some(self.steps) {
            trend.push((self.steps, covered));
        }
        AnalysisReport {
            schema_version: SCHEMA_VERSION,
            timestamp: (!self.config.deterministic).then(|| {
                std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
            }),
            steps: self.steps,
            coverage: CoverageSummary {
                total_blocks: total,
                covered,
                percent: if total == 0 { 0.0 } else { 100.0 * covered as f64 / total as f64 },
                blocks: self.coverage.covered.iter().map(|b| format!("0x{b:08x}")).collect(),
            },
            trend,
            sites: self.tracker.sites.len(),
            sequences: SequenceSummary {
                count: lens.len(),
                len_min: lens.iter().copied().min().unwrap_or(0),
                len_max: lens.iter().copied().max().unwrap_or(0),
                len_avg: if lens.is_empty() { 0.0 } else { lens.iter().sum::<usize>() as f64 / lens.len() as f64 },
                post_fire_mismatches: self.mismatches,
                inference_failures: self.inference_failures,
                list: self.sequences,
            },
            imt: ImtSummary {
                lines,
                analyses: self.ident.analyses,
                region: self.ident.region.ranges.clone(),
                region_fallback: self.ident.region_fallback,
                table: self.ident.table.to_json(),
            },
            faults: self.faults,
            phase_work: self.work,
            phase_times: if self.config.deterministic { PhaseTimes::default() } else { self.times },
            paths: self.paths,
            fixed_firings: self.fixed_firings,
            disabled_line_fire_attempts: 0,
            config: self.config,
        }
    }
}

/// Replays a reported fault concretely from reset. Returns the concrete
/// failure when it matches the report.
pub fn replay_fault(image: &FirmwareImage, fault: &FaultReport) -> Result<MachineError, String> {
    let inputs = RunInputs {
        schedule: fault.replay.firings.clone(),
        recorded_reads: Some(fault.replay.mmio_reads.clone()),
        ..Default::default()
    };
    match run_concrete(image, &inputs, fault.step + 1) {
        Ok(r) => Err(format!("run ended without a fault at 0x{:08x}", r.state.pc)),
        Err(f) => {
            let matches = match (&f.error, &fault.kind) {
                (MachineError::Memory(m), k) => {
                    m.pc == fault.pc
                        && Some(m.addr) == fault.addr
                        && matches!(
                            (m.kind, k),
                            (AccessKind::Read, FaultKind::Read)
                                | (AccessKind::Write, FaultKind::Write)
                                | (AccessKind::Execute, FaultKind::Execute)
                        )
                }
                (MachineError::Decode(_), FaultKind::Decode) => f.state.pc == fault.pc,
                (MachineError::IretOutsideIsr(pc), FaultKind::IretOutsideIsr) => *pc == fault.pc,
                _ => false,
            };
            if matches {
                Ok(f.error)
            } else {
                Err(format!("replay stopped with {} instead", f.error))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!("aim".parse::<Mode>().unwrap(), Mode::Aim);
        assert_eq!("NO_INT".parse::<Mode>().unwrap(), Mode::NoInt);
        assert_eq!("fixed".parse::<Mode>().unwrap(), Mode::Fixed(1000));
        assert_eq!("fixed:50".parse::<Mode>().unwrap(), Mode::Fixed(50));
        assert!("fixed:0".parse::<Mode>().is_err());
        assert_eq!(Mode::Fixed(7).to_string().parse::<Mode>().unwrap(), Mode::Fixed(7));
    }

    #[test]
    fn config_round_trip() {
        let c = AnalysisConfig { mode: Mode::Fixed(10), fixed_sr: FixedSr::Forced(1), ..Default::default() };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<AnalysisConfig>(&text).unwrap(), c);
        let partial: AnalysisConfig = serde_json::from_str(r#"{"mode":"no_int","step_budget":5}"#).unwrap();
        assert_eq!((partial.mode, partial.step_budget, partial.isr_window), (Mode::NoInt, 5, 30));
    }

    #[test]
    fn prioritize_prefers_near_then_short() {
        let image = crate::fixtures::by_name("uart-isr").unwrap().assemble().image;
        let cfg = build_cfg(&image);
        let mut a = SymState::reset(&image);
        let mut b = a.clone();
        b.id = 1;
        b.steps = 5;
        assert_eq!(prioritize(&[b.clone(), a.clone()], &cfg, &BTreeSet::new()), Some(1));
        let all = cfg.leaders();
        a.steps = 10;
        assert_eq!(prioritize(&[a, b], &cfg, &all), Some(1));
    }
}
