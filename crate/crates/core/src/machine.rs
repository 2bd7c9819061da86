//! Concrete interpreter.
//!
//! This is the reference semantics of MVM-32. The symbolic executor must
//! agree with it instruction for instruction on concrete inputs, and every
//! oracle in the test suites replays through it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg;
use crate::image::FirmwareImage;
use crate::isa::{Instr, IsaError, Opcode, LR, NUM_REGS, SP};
use crate::memory::{check_access, AccessKind, MemPermissions, MemoryFault, Region};
use crate::mmio::{read_source, Category, ReadContext, ReadSource, Scope, SrSource};
use crate::nvic::{NvicError, NvicState, StagedValues};

/// Bytes pushed on interrupt entry: pc, r14 and the flags word.
pub const FRAME_SIZE: u32 = 12;

pub fn flags_word(z: bool, n: bool) -> u32 {
    u32::from(z) | (u32::from(n) << 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsrContext {
    pub line: u32,
    pub staged: Option<StagedValues>,
    pub dr_cursor: usize,
}

impl IsrContext {
    pub fn read_context(&self) -> ReadContext {
        if self.staged.is_some() {
            ReadContext::Fired
        } else {
            ReadContext::Plain
        }
    }

    /// Next staged data payload, 0 once exhausted.
    pub fn next_dr(&mut self) -> u32 {
        let value = self.staged.as_ref().and_then(|s| s.dr.get(self.dr_cursor)).copied().unwrap_or(0);
        self.dr_cursor += 1;
        value
    }

    pub fn staged_sr(&self) -> u32 {
        self.staged.as_ref().map_or(0, |s| s.sr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineState {
    pub regs: [u32; NUM_REGS],
    pub pc: u32,
    pub z: bool,
    pub n: bool,
    /// RAM contents; absent words read as zero.
    pub mem: BTreeMap<u32, u32>,
    pub halted: bool,
    pub in_isr: bool,
    pub isr: Option<IsrContext>,
    pub nvic: NvicState,
    pub steps: u64,
}

impl MachineState {
    pub fn reset(image: &FirmwareImage) -> Self {
        let mut regs = [0; NUM_REGS];
        regs[SP as usize] = image.initial_sp();
        MachineState {
            regs,
            pc: image.entry(),
            z: false,
            n: false,
            mem: BTreeMap::new(),
            halted: false,
            in_isr: false,
            isr: None,
            nvic: NvicState::default(),
            steps: 0,
        }
    }

    pub fn ram_word(&self, addr: u32) -> u32 {
        self.mem.get(&addr).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("{0}")]
    Memory(MemoryFault),
    #[error("{0}")]
    Decode(IsaError),
    #[error("interrupt controller: {0}")]
    Nvic(NvicError),
    #[error("IRET outside a service routine at 0x{0:08x}")]
    IretOutsideIsr(u32),
    #[error("machine is halted")]
    Halted,
    #[error("step budget of {0} instructions exhausted")]
    StepBudgetExhausted(u64),
}

impl From<MemoryFault> for MachineError {
    fn from(f: MemoryFault) -> Self {
        MachineError::Memory(f)
    }
}

/// Peripheral-region side of the bus.
pub trait PeripheralBus {
    fn read(&mut self, addr: u32, isr: Option<&mut IsrContext>) -> u32;
    fn write(&mut self, addr: u32, value: u32);
}

/// Category-driven peripherals: control bits keep what was written, status
/// reads return the staged value inside fired routines, data reads consume
/// the staged payload inside fired routines and `dr_queue` elsewhere.
#[derive(Debug, Clone, Default)]
pub struct CategoryPeripherals {
    pub categories: BTreeMap<u32, Category>,
    pub stored: BTreeMap<u32, u32>,
    pub dr_queue: VecDeque<u32>,
}

impl PeripheralBus for CategoryPeripherals {
    fn read(&mut self, addr: u32, isr: Option<&mut IsrContext>) -> u32 {
        let ctx = isr.as_ref().map_or(ReadContext::Plain, |i| i.read_context());
        let stored = self.stored.get(&addr).copied().unwrap_or(0);
        let staged_sr = isr.as_ref().map_or(0, |i| i.staged_sr());
        match read_source(self.categories.get(&addr).copied(), Scope::GlobalDse, ctx) {
            ReadSource::Stored => stored,
            ReadSource::Zero => 0,
            ReadSource::SrStaged => staged_sr,
            ReadSource::DrStaged => isr.map_or(0, |i| i.next_dr()),
            ReadSource::DrSymbol => self.dr_queue.pop_front().unwrap_or(0),
            ReadSource::Mixed { cr_mask, sr_mask, inner } => {
                let sr = if inner == SrSource::Staged { staged_sr } else { 0 };
                (stored & cr_mask) | (sr & sr_mask)
            }
            // Symbolic status only exists during identification.
            ReadSource::SrSymbol => 0,
        }
    }

    fn write(&mut self, addr: u32, value: u32) {
        self.stored.insert(addr, value);
    }
}

/// Replays a recorded sequence of peripheral read values.
#[derive(Debug, Clone, Default)]
pub struct RecordedPeripherals {
    pub reads: VecDeque<u32>,
}

impl PeripheralBus for RecordedPeripherals {
    fn read(&mut self, _addr: u32, _isr: Option<&mut IsrContext>) -> u32 {
        self.reads.pop_front().unwrap_or(0)
    }

    fn write(&mut self, _addr: u32, _value: u32) {}
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepInfo {
    pub pc: u32,
    /// Line dispatched before this instruction, if any.
    pub dispatched: Option<u32>,
    pub lines_enabled: Vec<u32>,
}

fn alu(op: Opcode, a: u32, b: u32) -> u32 {
    match op {
        Opcode::Add => a.wrapping_add(b),
        Opcode::Sub => a.wrapping_sub(b),
        Opcode::And => a & b,
        Opcode::Or => a | b,
        Opcode::Xor => a ^ b,
        Opcode::Shl => a << (b & 31),
        Opcode::Shr => a >> (b & 31),
        _ => unreachable!("not an ALU opcode"),
    }
}

fn load(
    image: &FirmwareImage,
    st: &mut MachineState,
    bus: &mut dyn PeripheralBus,
    perms: &MemPermissions,
    addr: u32,
) -> Result<u32, MachineError> {
    check_access(st.pc, addr, AccessKind::Read, perms)?;
    Ok(match image.map.region_of(addr) {
        Some(Region::Flash) => image.flash_word(addr),
        Some(Region::Ram) => st.ram_word(addr),
        Some(Region::Peripheral) => bus.read(addr, st.isr.as_mut()),
        Some(Region::Controller) => {
            st.nvic.ctrl_read(addr - image.map.ctrl_base).map_err(MachineError::Nvic)?
        }
        None => unreachable!("access check admits only mapped regions"),
    })
}

fn store(
    image: &FirmwareImage,
    st: &mut MachineState,
    bus: &mut dyn PeripheralBus,
    perms: &MemPermissions,
    addr: u32,
    value: u32,
    info: &mut StepInfo,
) -> Result<(), MachineError> {
    check_access(st.pc, addr, AccessKind::Write, perms)?;
    match image.map.region_of(addr) {
        Some(Region::Ram) => {
            st.mem.insert(addr, value);
        }
        Some(Region::Peripheral) => bus.write(addr, value),
        Some(Region::Controller) => {
            let lines = st.nvic.ctrl_write(addr - image.map.ctrl_base, value).map_err(MachineError::Nvic)?;
            info.lines_enabled.extend(lines);
        }
        _ => unreachable!("access check admits only writable regions"),
    }
    Ok(())
}

/// Pushes the interrupt frame and enters the line's routine when the
/// controller has something dispatchable.
fn dispatch(image: &FirmwareImage, st: &mut MachineState, perms: &MemPermissions) -> Result<Option<u32>, MachineError> {
    if st.nvic.peek_dispatch(st.in_isr).is_none() {
        return Ok(None);
    }
    let sp = st.regs[SP as usize].wrapping_sub(FRAME_SIZE);
    for off in [0, 4, 8] {
        check_access(st.pc, sp.wrapping_add(off), AccessKind::Write, perms)?;
    }
    let d = st.nvic.next_dispatch(st.in_isr).expect("peeked");
    st.mem.insert(sp, st.pc);
    st.mem.insert(sp + 4, st.regs[LR as usize]);
    st.mem.insert(sp + 8, flags_word(st.z, st.n));
    st.regs[SP as usize] = sp;
    st.in_isr = true;
    st.isr = Some(IsrContext { line: d.line, staged: d.staged, dr_cursor: 0 });
    st.pc = image.vector(d.line);
    Ok(Some(d.line))
}

/// Executes one instruction, entering a pending service routine first when
/// the controller has one.
pub fn step_concrete(
    image: &FirmwareImage,
    st: &mut MachineState,
    bus: &mut dyn PeripheralBus,
) -> Result<StepInfo, MachineError> {
    if st.halted {
        return Err(MachineError::Halted);
    }
    let perms = MemPermissions::new(image.map);
    let mut info = StepInfo { dispatched: dispatch(image, st, &perms)?, ..Default::default() };
    let pc = st.pc;
    info.pc = pc;
    check_access(pc, pc, AccessKind::Execute, &perms)?;
    let instr = image.decode_at(pc).map_err(MachineError::Decode)?;
    let r = |i: u8| st.regs[i as usize];
    let mut next = pc.wrapping_add(instr.size());
    match instr.opcode {
        Opcode::Nop => {}
        Opcode::Halt => {
            st.halted = true;
            next = pc;
        }
        Opcode::Ldi => st.regs[instr.rd as usize] = instr.ext_imm.unwrap_or(0),
        Opcode::Ld => {
            let addr = r(instr.rs1).wrapping_add(instr.imm as i32 as u32);
            let value = load(image, st, bus, &perms, addr)?;
            st.regs[instr.rd as usize] = value;
        }
        Opcode::St => {
            let addr = r(instr.rs1).wrapping_add(instr.imm as i32 as u32);
            let value = r(instr.rs2);
            store(image, st, bus, &perms, addr, value, &mut info)?;
        }
        Opcode::Mov => st.regs[instr.rd as usize] = r(instr.rs1),
        op if op.is_alu() => {
            let value = alu(op, r(instr.rs1), r(instr.rs2));
            st.regs[instr.rd as usize] = value;
            st.z = value == 0;
            st.n = value >> 31 == 1;
        }
        op if op.is_conditional_branch() => {
            let (a, b) = (r(instr.rs1), r(instr.rs2));
            let taken = match op {
                Opcode::Beq => a == b,
                Opcode::Bne => a != b,
                Opcode::Blt => a < b,
                _ => a >= b,
            };
            if taken {
                next = instr.branch_target(pc);
            }
        }
        Opcode::Jal => {
            st.regs[instr.rd as usize] = next;
            next = instr.branch_target(pc);
        }
        Opcode::Jalr => {
            let target = r(instr.rs1).wrapping_add(instr.imm as i32 as u32);
            st.regs[instr.rd as usize] = next;
            next = target;
        }
        Opcode::Iret => {
            if !st.in_isr {
                return Err(MachineError::IretOutsideIsr(pc));
            }
            let sp = r(SP);
            for off in [0, 4, 8] {
                check_access(pc, sp.wrapping_add(off), AccessKind::Read, &perms)?;
            }
            next = st.ram_word(sp);
            st.regs[LR as usize] = st.ram_word(sp + 4);
            let flags = st.ram_word(sp + 8);
            st.z = flags & 1 != 0;
            st.n = flags & 2 != 0;
            st.regs[SP as usize] = sp.wrapping_add(FRAME_SIZE);
            st.in_isr = false;
            st.isr = None;
        }
        _ => unreachable!("all opcodes handled"),
    }
    st.pc = next;
    st.steps += 1;
    Ok(info)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledFiring {
    /// Number of instructions executed before the firing is raised.
    pub step: u64,
    pub line: u32,
    pub sr: u32,
    pub dr: Vec<u32>,
}

/// Inputs of a concrete run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunInputs {
    /// Data-register values read outside fired routines, in order.
    pub dr_values: Vec<u32>,
    pub schedule: Vec<ScheduledFiring>,
    pub categories: BTreeMap<u32, Category>,
    /// When present, peripheral reads replay these values verbatim instead
    /// of following the categories.
    pub recorded_reads: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    /// Start address of every basic block entered, in order.
    pub trace: Vec<u32>,
    pub state: MachineState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: MachineError,
    pub trace: Vec<u32>,
    pub state: MachineState,
}

/// Block-entry rule shared with the symbolic executor: an instruction starts
/// a block when it is a static leader or the target of an indirect jump.
pub fn is_block_entry(leaders: &BTreeSet<u32>, pc: u32, after_indirect: bool) -> bool {
    after_indirect || leaders.contains(&pc)
}

/// Deterministic replay of `image` from reset, stopping at HALT.
pub fn run_concrete(image: &FirmwareImage, inputs: &RunInputs, max_steps: u64) -> Result<RunResult, RunFailure> {
    let state = MachineState::reset(image);
    run_concrete_from(image, state, inputs, max_steps)
}

/// As [`run_concrete`], from an arbitrary state. Schedule steps are
/// absolute values of `state.steps`.
pub fn run_concrete_from(
    image: &FirmwareImage,
    mut st: MachineState,
    inputs: &RunInputs,
    max_steps: u64,
) -> Result<RunResult, RunFailure> {
    let leaders = cfg::build_cfg(image).leaders();
    let mut bus: Box<dyn PeripheralBus> = match &inputs.recorded_reads {
        Some(reads) => Box::new(RecordedPeripherals { reads: reads.iter().copied().collect() }),
        None => Box::new(CategoryPeripherals {
            categories: inputs.categories.clone(),
            stored: BTreeMap::new(),
            dr_queue: inputs.dr_values.iter().copied().collect(),
        }),
    };
    let mut schedule: VecDeque<&ScheduledFiring> = inputs.schedule.iter().collect();
    let mut trace = Vec::new();
    let mut after_indirect = false;
    let limit = st.steps.saturating_add(max_steps);
    let fail = |error, trace, state| Err(RunFailure { error, trace, state });
    while !st.halted {
        if st.steps >= limit {
            return fail(MachineError::StepBudgetExhausted(max_steps), trace, st);
        }
        while schedule.front().is_some_and(|f| f.step <= st.steps) {
            let f = schedule.pop_front().unwrap();
            if let Err(e) = st.nvic.fire(f.line, f.sr, f.dr.clone()) {
                return fail(MachineError::Nvic(e), trace, st);
            }
        }
        let before = st.clone();
        match step_concrete(image, &mut st, bus.as_mut()) {
            Ok(info) => {
                if is_block_entry(&leaders, info.pc, after_indirect && info.dispatched.is_none()) {
                    trace.push(info.pc);
                }
                let instr: Option<Instr> = image.decode_at(info.pc).ok();
                after_indirect = instr.is_some_and(|i| i.opcode == Opcode::Jalr);
            }
            Err(e) => return fail(e, trace, before),
        }
    }
    Ok(RunResult { trace, state: st })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::VECTOR_SLOTS;

    /// Vector table plus code at 0x100.
    fn image_with(code: &[Instr], vectors: &[(u32, u32)]) -> FirmwareImage {
        let mut words = vec![0u32; 0x40];
        words[0] = 0x2001_0000;
        words[1] = 0x100;
        for &(line, addr) in vectors {
            words[(line + 2) as usize] = addr;
        }
        for i in code {
            words.extend(i.encode());
        }
        assert!(words.len() > VECTOR_SLOTS as usize);
        FirmwareImage::new(words).unwrap()
    }

    #[test]
    fn add_registers() {
        let image = image_with(&[Instr::new(Opcode::Add, 1, 1, 2, 0)], &[]);
        let mut st = MachineState::reset(&image);
        st.regs[1] = 2;
        st.regs[2] = 3;
        step_concrete(&image, &mut st, &mut CategoryPeripherals::default()).unwrap();
        assert_eq!((st.regs[1], st.pc), (5, 0x104));
    }

    #[test]
    fn dispatch_pushes_frame_and_iret_restores() {
        let code = [Instr::nop(), Instr::nop(), Instr::new(Opcode::Iret, 0, 0, 0, 0)];
        let image = image_with(&code, &[(3, 0x104)]);
        let mut st = MachineState::reset(&image);
        st.regs[LR as usize] = 0xAB;
        st.z = true;
        st.nvic.enabled = 1 << 3;
        st.nvic.pending = 1 << 3;
        let before = st.clone();
        let info = step_concrete(&image, &mut st, &mut CategoryPeripherals::default()).unwrap();
        assert_eq!((info.dispatched, info.pc), (Some(3), 0x104));
        assert!(st.in_isr);
        assert_eq!(st.regs[SP as usize], 0x2001_0000 - 12);
        assert_eq!(st.ram_word(0x2001_0000 - 12), 0x100);
        assert_eq!(st.ram_word(0x2001_0000 - 8), 0xAB);
        assert_eq!(st.ram_word(0x2001_0000 - 4), 1);
        step_concrete(&image, &mut st, &mut CategoryPeripherals::default()).unwrap();
        assert_eq!((st.pc, st.regs, st.z, st.n, st.in_isr), (before.pc, before.regs, before.z, before.n, false));
    }

    #[test]
    fn halt_image_traces_one_block() {
        let image = image_with(&[Instr::new(Opcode::Halt, 0, 0, 0, 0)], &[]);
        let out = run_concrete(&image, &RunInputs::default(), 10).unwrap();
        assert_eq!(out.trace, vec![0x100]);
    }

    #[test]
    fn store_to_flash_faults() {
        let image = image_with(&[Instr::new(Opcode::St, 0, 0, 1, 0x10)], &[]);
        let mut st = MachineState::reset(&image);
        let err = step_concrete(&image, &mut st, &mut CategoryPeripherals::default()).unwrap_err();
        assert_eq!(err, MachineError::Memory(MemoryFault { pc: 0x100, addr: 0x10, kind: AccessKind::Write }));
    }

    #[test]
    fn unsigned_branches() {
        // r1 = 0xFFFF_FFFF, r2 = 1: BLT is unsigned, so not taken.
        let image = image_with(&[Instr::new(Opcode::Blt, 0, 1, 2, 4), Instr::new(Opcode::Halt, 0, 0, 0, 0)], &[]);
        let mut st = MachineState::reset(&image);
        st.regs[1] = u32::MAX;
        st.regs[2] = 1;
        step_concrete(&image, &mut st, &mut CategoryPeripherals::default()).unwrap();
        assert_eq!(st.pc, 0x104);
    }

    #[test]
    fn jump_to_null_is_a_decode_fault() {
        let image = image_with(&[Instr::ldi(1, 0), Instr::new(Opcode::Jalr, LR, 1, 0, 0)], &[]);
        let err = run_concrete(&image, &RunInputs::default(), 10).unwrap_err();
        assert!(matches!(err.error, MachineError::Decode(IsaError::UnknownOpcode { address: 0, .. })));
    }
}
