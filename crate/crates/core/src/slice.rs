//! Dynamic data slicing of recorded service-routine traces.
//!
//! Every value the trace computes is rebuilt as a formula over its
//! leaves: the pre-interrupt value of a global that was read before being
//! written, peripheral inputs, constants and the concrete live-in
//! registers. Only data dependences on the recorded path are followed.

use std::collections::BTreeMap;

use crate::expr::{Expr, Origin, Var};
use crate::image::FirmwareImage;
use crate::isa::Opcode;
use crate::memory::Region;
use crate::symex::{alu_expr, cond_of, Trace};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Slice {
    /// Final value formula of every global the path wrote.
    pub effects: BTreeMap<u32, Expr>,
    /// Branch conditions that held on the path and depend on globals.
    pub guards: Vec<Expr>,
    /// Some store address depended on a global or a peripheral input.
    pub address_dependent: bool,
}

fn is_input(v: &Var) -> bool {
    v.old_value_addr().is_some() || matches!(v.origin, Origin::Sr | Origin::Dr)
}

/// Slices `trace`. `is_global` tells which RAM words hold globals.
pub fn slice_trace(image: &FirmwareImage, trace: &Trace, is_global: &dyn Fn(u32) -> bool) -> Slice {
    let mut regs = trace.init_regs.clone();
    let mut mem: BTreeMap<u32, Expr> = BTreeMap::new();
    let mut out = Slice::default();
    for e in &trace.entries {
        let i = e.instr;
        let r = |regs: &[Expr], n: u8| regs[n as usize].clone();
        let next = Expr::constant(e.pc.wrapping_add(i.size()));
        match i.opcode {
            Opcode::Ldi => regs[i.rd as usize] = Expr::constant(i.ext_imm.unwrap_or(0)),
            Opcode::Mov => regs[i.rd as usize] = r(&regs, i.rs1),
            op if op.is_alu() => regs[i.rd as usize] = alu_expr(op, r(&regs, i.rs1), r(&regs, i.rs2)),
            Opcode::Ld => {
                let addr = e.addr.expect("loads record their address");
                let loaded = e.loaded.clone().expect("loads record their value");
                let v = match mem.get(&addr) {
                    Some(v) => v.clone(),
                    None if image.map.region_of(addr) == Some(Region::Ram) && is_global(addr) => {
                        Expr::var(Var::old_value(addr))
                    }
                    None => loaded,
                };
                regs[i.rd as usize] = v;
            }
            Opcode::St => {
                let addr = e.addr.expect("stores record their address");
                let formula = Expr::add(r(&regs, i.rs1), Expr::constant(i.imm as i32 as u32));
                if formula.mentions(is_input) {
                    out.address_dependent = true;
                }
                let v = r(&regs, i.rs2);
                if image.map.region_of(addr) == Some(Region::Ram) {
                    mem.insert(addr, v.clone());
                    if is_global(addr) {
                        out.effects.insert(addr, v);
                    }
                }
            }
            op if op.is_conditional_branch() => {
                let c = cond_of(op, r(&regs, i.rs1), r(&regs, i.rs2));
                let c = if e.taken == Some(true) { c } else { Expr::falsity(c) };
                if c.mentions(|v| v.old_value_addr().is_some()) {
                    out.guards.push(c);
                }
            }
            Opcode::Jal | Opcode::Jalr => regs[i.rd as usize] = next,
            _ => {}
        }
    }
    out.effects.retain(|addr, f| *f != Expr::var(Var::old_value(*addr)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Instr;
    use crate::symex::TraceEntry;

    fn image() -> FirmwareImage {
        let mut words = vec![0u32; 0x40];
        words[0] = 0x2001_0000;
        words[1] = 0x100;
        words.push(0x0F00_0000);
        FirmwareImage::new(words).unwrap()
    }

    fn entry(instr: Instr, addr: Option<u32>, loaded: Option<Expr>) -> TraceEntry {
        TraceEntry { pc: 0x100, instr, addr, addr_expr: None, loaded, taken: None }
    }

    const G: u32 = 0x2000_0000;

    fn trace(entries: Vec<TraceEntry>) -> Trace {
        let mut init = vec![Expr::constant(0); 16];
        init[5] = Expr::constant(G);
        Trace { init_regs: init, entries }
    }

    #[test]
    fn increment_is_self_referral_formula() {
        let t = trace(vec![
            entry(Instr::new(Opcode::Ld, 1, 5, 0, 0), Some(G), Some(Expr::constant(7))),
            entry(Instr::ldi(2, 1), None, None),
            entry(Instr::new(Opcode::Add, 1, 1, 2, 0), None, None),
            entry(Instr::new(Opcode::St, 0, 5, 1, 0), Some(G), None),
        ]);
        let s = slice_trace(&image(), &t, &|_| true);
        assert_eq!(s.effects[&G], Expr::add(Expr::var(Var::old_value(G)), Expr::constant(1)));
        assert!(!s.address_dependent);
    }

    #[test]
    fn data_register_leaf_and_unchanged_write() {
        let dr = Expr::var(Var::new(Origin::Dr, 3));
        let t = trace(vec![
            entry(Instr::new(Opcode::Ld, 1, 5, 0, 0), Some(G), Some(Expr::constant(7))),
            entry(Instr::new(Opcode::St, 0, 5, 1, 0), Some(G), None),
            entry(Instr::new(Opcode::Ld, 2, 0, 0, 0), Some(0x4000_0004), Some(dr.clone())),
            entry(Instr::new(Opcode::St, 0, 5, 2, 4), Some(G + 4), None),
        ]);
        let s = slice_trace(&image(), &t, &|_| true);
        assert_eq!(s.effects.len(), 1);
        assert_eq!(s.effects[&(G + 4)], dr);
    }

    #[test]
    fn guard_and_address_dependence() {
        let mut br = entry(Instr::new(Opcode::Beq, 0, 1, 0, 4), None, None);
        br.taken = Some(false);
        let t = trace(vec![
            entry(Instr::new(Opcode::Ld, 1, 5, 0, 0), Some(G), Some(Expr::constant(2))),
            br,
            entry(Instr::new(Opcode::Add, 3, 5, 1, 0), None, None),
            entry(Instr::new(Opcode::St, 0, 3, 0, 0), Some(G + 2 * 4), None),
        ]);
        let s = slice_trace(&image(), &t, &|_| true);
        assert_eq!(s.guards, vec![Expr::falsity(Expr::eq(Expr::var(Var::old_value(G)), Expr::constant(0)))]);
        assert!(s.address_dependent);
    }
}
