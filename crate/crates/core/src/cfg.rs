//! Static control-flow graph by recursive descent.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;

use crate::image::FirmwareImage;
use crate::isa::{Instr, Opcode, LR};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    pub start: u32,
    /// One past the last instruction byte.
    pub end: u32,
    pub successors: Vec<u32>,
    /// Set for indirect jumps whose target could not be resolved.
    pub unknown_successors: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Cfg {
    pub blocks: BTreeMap<u32, Block>,
    pub entries: BTreeSet<u32>,
}

fn in_image(image: &FirmwareImage, pc: u32) -> bool {
    pc.is_multiple_of(4) && image.map.in_flash(pc) && ((pc - image.map.flash_base) / 4) < image.words.len() as u32
}

/// Decodes the straight-line run starting at `start` into `instrs`, stopping
/// after a block terminator or at already-decoded code. Returns false when
/// the run hits undecodable words.
fn walk(image: &FirmwareImage, start: u32, instrs: &mut BTreeMap<u32, Instr>, out: &mut Vec<u32>) -> bool {
    let mut pc = start;
    let mut run: Vec<(u32, Instr)> = Vec::new();
    loop {
        if instrs.contains_key(&pc) {
            break;
        }
        if !in_image(image, pc) {
            return false;
        }
        let Ok(instr) = image.decode_at(pc) else { return false };
        run.push((pc, instr));
        let next = pc + instr.size();
        if instr.opcode.ends_block() {
            out.extend(static_targets(&run, pc, &instr));
            if falls_through(&instr) {
                out.push(next);
            }
            break;
        }
        pc = next;
    }
    instrs.extend(run);
    true
}

/// Target of a `JALR` whose base register was loaded by an `LDI` earlier in
/// the same run and not redefined since.
fn resolve_jalr(run: &[(u32, Instr)], jalr: &Instr) -> Option<u32> {
    for (_, i) in run.iter().rev().skip(1) {
        let writes_reg = matches!(
            i.opcode,
            Opcode::Ldi | Opcode::Ld | Opcode::Mov | Opcode::Jal | Opcode::Jalr
        ) || i.opcode.is_alu();
        if writes_reg && i.rd == jalr.rs1 {
            return (i.opcode == Opcode::Ldi).then(|| i.ext_imm.unwrap_or(0).wrapping_add(jalr.imm as i32 as u32));
        }
    }
    None
}

fn static_targets(run: &[(u32, Instr)], pc: u32, instr: &Instr) -> Vec<u32> {
    match instr.opcode {
        op if op.is_conditional_branch() => vec![instr.branch_target(pc)],
        Opcode::Jal => vec![instr.branch_target(pc)],
        Opcode::Jalr => resolve_jalr(run, instr).into_iter().collect(),
        _ => Vec::new(),
    }
}

fn is_return(instr: &Instr) -> bool {
    instr.opcode == Opcode::Jalr && instr.rs1 == LR
}

/// Whether control can continue at the next instruction: conditional
/// branches, and calls (which return there).
fn falls_through(instr: &Instr) -> bool {
    match instr.opcode {
        Opcode::Beq => instr.rs1 != instr.rs2,
        op if op.is_conditional_branch() => true,
        Opcode::Jal => instr.rd == LR,
        Opcode::Jalr => instr.rd == LR && !is_return(instr),
        Opcode::Halt | Opcode::Iret => false,
        _ => true,
    }
}

/// Decodes everything reachable from `root`. With `strict`, nothing is
/// kept unless the whole reachable region decodes.
fn explore(
    image: &FirmwareImage,
    root: u32,
    instrs: &mut BTreeMap<u32, Instr>,
    leaders: &mut BTreeSet<u32>,
    strict: bool,
) -> bool {
    let mut trial = instrs.clone();
    let mut found = vec![root];
    let mut work = vec![root];
    let mut seen = BTreeSet::new();
    while let Some(a) = work.pop() {
        if !seen.insert(a) {
            continue;
        }
        let mut out = Vec::new();
        if walk(image, a, &mut trial, &mut out) {
            found.extend(out.iter().copied());
            work.extend(out);
        } else if strict {
            return false;
        } else {
            found.retain(|&x| x != a);
        }
    }
    *instrs = trial;
    leaders.extend(found.into_iter().filter(|a| instrs.contains_key(a)));
    true
}

/// Recovers the CFG from the reset handler and every vector target.
///
/// Constants loaded by `LDI` that point at code addresses at or above the
/// lowest entry are tried as address-taken functions; a candidate is kept
/// only if everything reachable from it decodes.
pub fn build_cfg(image: &FirmwareImage) -> Cfg {
    let mut entries: BTreeSet<u32> = std::iter::once(image.entry())
        .chain(image.vectored_lines().map(|l| image.vector(l)))
        .filter(|&a| in_image(image, a))
        .collect();
    let mut instrs: BTreeMap<u32, Instr> = BTreeMap::new();
    let mut leaders: BTreeSet<u32> = BTreeSet::new();
    for &e in &entries {
        explore(image, e, &mut instrs, &mut leaders, false);
    }
    let lowest = entries.iter().next().copied().unwrap_or(0);
    let mut rejected: BTreeSet<u32> = BTreeSet::new();
    loop {
        let candidates: BTreeSet<u32> = instrs
            .values()
            .filter(|i| i.opcode == Opcode::Ldi)
            .filter_map(|i| i.ext_imm)
            .filter(|&c| c >= lowest && in_image(image, c) && !leaders.contains(&c) && !rejected.contains(&c))
            .collect();
        if candidates.is_empty() {
            break;
        }
        for c in candidates {
            if instrs.contains_key(&c) || explore(image, c, &mut instrs, &mut leaders, true) {
                leaders.insert(c);
                entries.insert(c);
            } else {
                rejected.insert(c);
            }
        }
    }
    entries.retain(|e| instrs.contains_key(e));

    let mut blocks = BTreeMap::new();
    let mut iter = instrs.iter().peekable();
    while let Some((&start, _)) = iter.next() {
        if !leaders.contains(&start) {
            continue;
        }
        let mut pc = start;
        let mut run = vec![(start, instrs[&start])];
        loop {
            let instr = instrs[&pc];
            let next = pc + instr.size();
            if instr.opcode.ends_block() || !instrs.contains_key(&next) || leaders.contains(&next) {
                break;
            }
            pc = next;
            run.push((pc, instrs[&pc]));
            iter.next();
        }
        let (last_pc, last) = *run.last().unwrap();
        let end = last_pc + last.size();
        let mut successors = Vec::new();
        let mut unknown = false;
        if last.opcode.ends_block() {
            successors.extend(static_targets(&run, last_pc, &last));
            if last.opcode == Opcode::Jalr && successors.is_empty() {
                unknown = true;
            }
            if falls_through(&last) {
                successors.push(end);
            }
        } else {
            successors.push(end);
        }
        successors.retain(|s| leaders.contains(s));
        successors.dedup();
        blocks.insert(start, Block { start, end, successors, unknown_successors: unknown });
    }
    Cfg { blocks, entries }
}

impl Cfg {
    pub fn leaders(&self) -> BTreeSet<u32> {
        self.blocks.keys().copied().collect()
    }

    /// Block containing `pc`.
    pub fn block_of(&self, pc: u32) -> Option<&Block> {
        self.blocks.range(..=pc).next_back().map(|(_, b)| b).filter(|b| pc < b.end)
    }

    /// Number of CFG edges from `from` to the nearest block outside
    /// `covered`; `None` when every reachable block is covered.
    pub fn distance_to_uncovered(&self, from: u32, covered: &BTreeSet<u32>) -> Option<u32> {
        let mut queue = VecDeque::from([(from, 0u32)]);
        let mut seen = BTreeSet::from([from]);
        while let Some((b, d)) = queue.pop_front() {
            if !covered.contains(&b) {
                return Some(d);
            }
            if let Some(block) = self.blocks.get(&b) {
                for &s in &block.successors {
                    if seen.insert(s) {
                        queue.push_back((s, d + 1));
                    }
                }
            }
        }
        None
    }

    /// Distance to the nearest uncovered block for every block that can
    /// reach one, computed in a single backward search.
    pub fn distances(&self, covered: &BTreeSet<u32>) -> BTreeMap<u32, u32> {
        let mut preds: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for b in self.blocks.values() {
            for &s in &b.successors {
                preds.entry(s).or_default().push(b.start);
            }
        }
        let mut dist: BTreeMap<u32, u32> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for &b in self.blocks.keys().filter(|b| !covered.contains(b)) {
            dist.insert(b, 0);
            queue.push_back(b);
        }
        while let Some(b) = queue.pop_front() {
            let d = dist[&b];
            for &p in preds.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(p) {
                    e.insert(d + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph cfg {\n  node [shape=box, fontname=monospace];\n");
        for b in self.blocks.values() {
            let shape = if self.entries.contains(&b.start) { ", style=bold" } else { "" };
            let _ = writeln!(out, "  \"0x{:08x}\" [label=\"0x{:08x}..0x{:08x}\"{shape}];", b.start, b.start, b.end);
            for s in &b.successors {
                let _ = writeln!(out, "  \"0x{:08x}\" -> \"0x{:08x}\";", b.start, s);
            }
            if b.unknown_successors {
                let _ = writeln!(out, "  \"0x{:08x}\" -> \"?\" [style=dashed];", b.start);
            }
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Instr;

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

    #[test]
    fn branch_has_two_successors() {
        let cfg = build_cfg(&image(&[Instr::nop(), Instr::new(Opcode::Beq, 0, 1, 2, 1), halt(), halt()]));
        assert_eq!(cfg.blocks[&0x100].successors, vec![0x10C, 0x108]);
        assert!(cfg.blocks[&0x108].successors.is_empty());
    }

    #[test]
    fn jalr_through_ldi_resolves() {
        let code = [Instr::ldi(3, 0x110), Instr::new(Opcode::Jalr, 0, 3, 0, 0), halt(), halt()];
        let cfg = build_cfg(&image(&code));
        assert_eq!(cfg.blocks[&0x100].successors, vec![0x110]);
        assert!(!cfg.blocks[&0x100].unknown_successors);
    }

    #[test]
    fn distances() {
        // A -> B -> C chain through fallthrough into leaders.
        let code = [
            Instr::new(Opcode::Beq, 0, 0, 0, 0),
            Instr::new(Opcode::Beq, 0, 0, 0, 0),
            halt(),
        ];
        let cfg = build_cfg(&image(&code));
        let covered: BTreeSet<u32> = [0x100, 0x104].into();
        assert_eq!(cfg.distance_to_uncovered(0x100, &covered), Some(2));
        assert_eq!(cfg.distance_to_uncovered(0x108, &covered), Some(0));
        let all: BTreeSet<u32> = [0x100, 0x104, 0x108].into();
        assert_eq!(cfg.distance_to_uncovered(0x100, &all), None);
    }

    #[test]
    fn block_lookup() {
        let cfg = build_cfg(&image(&[Instr::nop(), Instr::nop(), halt()]));
        assert_eq!(cfg.block_of(0x104).unwrap().start, 0x100);
        assert!(cfg.block_of(0x10C).is_none());
        assert!(cfg.to_dot().contains("0x00000100"));
    }
}
