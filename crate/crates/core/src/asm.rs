//! Two-pass assembler for MVM-32.
//!
//! ```text
//! ; comment            // comment
//! .equ  UART, 0x40000300
//! .stack 0x20010000    ; vector slot 0 (defaults to the end of RAM)
//! .entry reset         ; vector slot 1
//! .vector 3, uart_isr  ; vector slot 3 + 2
//! .org  0x100          ; code origin (the default)
//! label:  LDI  r1, #UART+4
//!         LD   r2, 0(r1)
//!         ST   r2, -4(sp)
//!         ADD  r3, r2, r2
//!         BNE  r3, r0, label
//!         CALL func        ; JAL r14, func
//!         RET              ; JALR r14, r14, 0
//!         J    label       ; BEQ r0, r0, label
//! table:  .word 1, 2, label
//! ```
//!
//! Immediates may carry a leading `#` and are sums of numbers and symbols.
//! `lr` and `sp` name r14 and r15.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::image::{FirmwareImage, ImageError, NUM_LINES, VECTOR_SLOTS};
use crate::isa::{Instr, Opcode, IMM_MAX, IMM_MIN, LR};
use crate::memory::MemoryMap;

pub const DEFAULT_ORIGIN: u32 = 0x100;

#[derive(Debug, Error)]
pub enum AsmError {
    #[error("line {line}: undefined label `{name}`")]
    UndefinedLabel { line: usize, name: String },
    #[error("line {line}: duplicate label `{name}`")]
    DuplicateLabel { line: usize, name: String },
    #[error("line {line}: value {value} does not fit {what}")]
    RangeError { line: usize, value: i64, what: &'static str },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("no `.entry` directive")]
    MissingEntry,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// An assembled program and its symbol table.
#[derive(Debug, Clone)]
pub struct AsmUnit {
    pub image: FirmwareImage,
    pub symbols: BTreeMap<String, u32>,
}

impl AsmUnit {
    pub fn symbol(&self, name: &str) -> u32 {
        *self.symbols.get(name).unwrap_or_else(|| panic!("no symbol `{name}`"))
    }
}

#[derive(Debug, Clone)]
enum Item {
    Instr { mnemonic: String, operands: Vec<String> },
    Words(Vec<String>),
}

#[derive(Debug, Clone)]
struct Placed {
    line: usize,
    addr: u32,
    item: Item,
}

fn strip_comment(line: &str) -> &str {
    let cut = [line.find(';'), line.find("//")].into_iter().flatten().min();
    match cut {
        Some(i) => &line[..i],
        None => line,
    }
}

fn split_operands(text: &str) -> Vec<String> {
    if text.trim().is_empty() {
        return Vec::new();
    }
    text.split(',').map(|s| s.trim().to_string()).collect()
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return i64::from_str_radix(&hex.replace('_', ""), 16).ok();
    }
    if let Some(bin) = s.strip_prefix("0b") {
        return i64::from_str_radix(&bin.replace('_', ""), 2).ok();
    }
    s.replace('_', "").parse().ok()
}

struct Ctx<'a> {
    symbols: &'a BTreeMap<String, u32>,
    line: usize,
}

impl Ctx<'_> {
    fn syntax(&self, message: impl Into<String>) -> AsmError {
        AsmError::Syntax { line: self.line, message: message.into() }
    }

    /// Evaluates `term (+|- term)*`.
    fn eval(&self, text: &str) -> Result<i64, AsmError> {
        let text = text.trim().trim_start_matches('#').trim();
        if text.is_empty() {
            return Err(self.syntax("missing value"));
        }
        let mut total: i64 = 0;
        let mut sign = 1i64;
        let mut term = String::new();
        let flush = |term: &mut String, sign: i64, total: &mut i64| -> Result<(), AsmError> {
            let t = term.trim();
            if t.is_empty() {
                return Err(self.syntax(format!("malformed expression `{text}`")));
            }
            let v = match parse_number(t) {
                Some(v) => v,
                None if is_ident(t) => match self.symbols.get(t) {
                    Some(v) => i64::from(*v),
                    None => return Err(AsmError::UndefinedLabel { line: self.line, name: t.to_string() }),
                },
                None => return Err(self.syntax(format!("bad value `{t}`"))),
            };
            *total += sign * v;
            term.clear();
            Ok(())
        };
        for (i, ch) in text.char_indices() {
            if (ch == '+' || ch == '-') && i > 0 && !term.trim().is_empty() {
                flush(&mut term, sign, &mut total)?;
                sign = if ch == '+' { 1 } else { -1 };
            } else if ch == '-' && term.trim().is_empty() {
                sign = -sign;
            } else {
                term.push(ch);
            }
        }
        flush(&mut term, sign, &mut total)?;
        Ok(total)
    }

    fn word(&self, text: &str) -> Result<u32, AsmError> {
        let v = self.eval(text)?;
        if v < i64::from(i32::MIN) || v > i64::from(u32::MAX) {
            return Err(AsmError::RangeError { line: self.line, value: v, what: "32 bits" });
        }
        Ok(v as u32)
    }

    fn imm12(&self, v: i64) -> Result<i16, AsmError> {
        if v < i64::from(IMM_MIN) || v > i64::from(IMM_MAX) {
            return Err(AsmError::RangeError { line: self.line, value: v, what: "a 12-bit immediate" });
        }
        Ok(v as i16)
    }

    fn reg(&self, text: &str) -> Result<u8, AsmError> {
        let t = text.trim().to_ascii_lowercase();
        match t.as_str() {
            "lr" => return Ok(LR),
            "sp" => return Ok(15),
            _ => {}
        }
        t.strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .filter(|&n| n < 16)
            .ok_or_else(|| self.syntax(format!("expected register, found `{text}`")))
    }

    /// `off(reg)` memory operand.
    fn mem(&self, text: &str) -> Result<(u8, i16), AsmError> {
        let t = text.trim();
        let open = t.find('(').ok_or_else(|| self.syntax(format!("expected `off(reg)`, found `{t}`")))?;
        let close = t.rfind(')').filter(|&c| c > open).ok_or_else(|| self.syntax("unclosed `(`"))?;
        let reg = self.reg(&t[open + 1..close])?;
        let off = if t[..open].trim().is_empty() { 0 } else { self.eval(&t[..open])? };
        Ok((reg, self.imm12(off)?))
    }

    /// Word offset from the instruction at `pc` to `target`.
    fn rel(&self, pc: u32, text: &str) -> Result<i16, AsmError> {
        let target = self.eval(text)?;
        let delta = target - i64::from(pc) - 4;
        if delta % 4 != 0 {
            return Err(self.syntax("branch target is not word aligned"));
        }
        let words = delta / 4;
        if words < i64::from(IMM_MIN) || words > i64::from(IMM_MAX) {
            return Err(AsmError::RangeError { line: self.line, value: words, what: "a branch offset" });
        }
        Ok(words as i16)
    }
}

fn expect(ctx: &Ctx, ops: &[String], n: usize, mnemonic: &str) -> Result<(), AsmError> {
    if ops.len() != n {
        return Err(ctx.syntax(format!("{mnemonic} takes {n} operand(s), found {}", ops.len())));
    }
    Ok(())
}

fn size_of(mnemonic: &str) -> u32 {
    if mnemonic.eq_ignore_ascii_case("LDI") {
        8
    } else {
        4
    }
}

fn encode(ctx: &Ctx, pc: u32, mnemonic: &str, ops: &[String]) -> Result<Instr, AsmError> {
    let upper = mnemonic.to_ascii_uppercase();
    let instr = match upper.as_str() {
        "RET" => {
            expect(ctx, ops, 0, &upper)?;
            Instr::new(Opcode::Jalr, LR, LR, 0, 0)
        }
        "CALL" => {
            expect(ctx, ops, 1, &upper)?;
            Instr::new(Opcode::Jal, LR, 0, 0, ctx.rel(pc, &ops[0])?)
        }
        "J" => {
            expect(ctx, ops, 1, &upper)?;
            Instr::new(Opcode::Beq, 0, 0, 0, ctx.rel(pc, &ops[0])?)
        }
        _ => {
            let op = Opcode::from_mnemonic(&upper).ok_or_else(|| ctx.syntax(format!("unknown mnemonic `{mnemonic}`")))?;
            match op {
                Opcode::Nop | Opcode::Halt | Opcode::Iret => {
                    expect(ctx, ops, 0, &upper)?;
                    Instr::new(op, 0, 0, 0, 0)
                }
                Opcode::Ldi => {
                    expect(ctx, ops, 2, &upper)?;
                    Instr::ldi(ctx.reg(&ops[0])?, ctx.word(&ops[1])?)
                }
                Opcode::Ld => {
                    expect(ctx, ops, 2, &upper)?;
                    let (base, off) = ctx.mem(&ops[1])?;
                    Instr::new(op, ctx.reg(&ops[0])?, base, 0, off)
                }
                Opcode::St => {
                    expect(ctx, ops, 2, &upper)?;
                    let (base, off) = ctx.mem(&ops[1])?;
                    Instr::new(op, 0, base, ctx.reg(&ops[0])?, off)
                }
                Opcode::Mov => {
                    expect(ctx, ops, 2, &upper)?;
                    Instr::new(op, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, 0, 0)
                }
                Opcode::Jal => {
                    expect(ctx, ops, 2, &upper)?;
                    Instr::new(op, ctx.reg(&ops[0])?, 0, 0, ctx.rel(pc, &ops[1])?)
                }
                Opcode::Jalr => {
                    if ops.len() == 2 {
                        Instr::new(op, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, 0, 0)
                    } else {
                        expect(ctx, ops, 3, &upper)?;
                        let imm = ctx.imm12(ctx.eval(&ops[2])?)?;
                        Instr::new(op, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, 0, imm)
                    }
                }
                op if op.is_conditional_branch() => {
                    expect(ctx, ops, 3, &upper)?;
                    Instr::new(op, 0, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, ctx.rel(pc, &ops[2])?)
                }
                _ => {
                    expect(ctx, ops, 3, &upper)?;
                    Instr::new(op, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, ctx.reg(&ops[2])?, 0)
                }
            }
        }
    };
    Ok(instr)
}

/// Assembles `source` into a firmware image.
pub fn assemble(source: &str) -> Result<AsmUnit, AsmError> {
    let map = MemoryMap::default();
    let mut symbols: BTreeMap<String, u32> = BTreeMap::new();
    let mut placed: Vec<Placed> = Vec::new();
    let mut vectors: Vec<(usize, String, String)> = Vec::new();
    let mut entry: Option<(usize, String)> = None;
    let mut stack: Option<(usize, String)> = None;
    let mut pc = DEFAULT_ORIGIN;

    let define = |symbols: &mut BTreeMap<String, u32>, line: usize, name: &str, value: u32| {
        if symbols.insert(name.to_string(), value).is_some() {
            return Err(AsmError::DuplicateLabel { line, name: name.to_string() });
        }
        Ok(())
    };

    // Pass 1: addresses and symbols.
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let mut text = strip_comment(raw).trim();
        while let Some(colon) = text.find(':') {
            let label = text[..colon].trim();
            if !is_ident(label) {
                break;
            }
            define(&mut symbols, line, label, pc)?;
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let ops = split_operands(rest);
        let ctx = Ctx { symbols: &symbols, line };
        match head.to_ascii_lowercase().as_str() {
            ".org" => {
                expect(&ctx, &ops, 1, ".org")?;
                pc = ctx.word(&ops[0])?;
                if !pc.is_multiple_of(4) {
                    return Err(ctx.syntax(".org address must be word aligned"));
                }
            }
            ".equ" => {
                expect(&ctx, &ops, 2, ".equ")?;
                let value = ctx.word(&ops[1])?;
                define(&mut symbols, line, &ops[0], value)?;
            }
            ".word" => {
                if ops.is_empty() {
                    return Err(ctx.syntax(".word needs at least one value"));
                }
                let n = ops.len() as u32;
                placed.push(Placed { line, addr: pc, item: Item::Words(ops) });
                pc += 4 * n;
            }
            ".space" => {
                expect(&ctx, &ops, 1, ".space")?;
                let bytes = ctx.word(&ops[0])?;
                pc += bytes.div_ceil(4) * 4;
            }
            ".vector" => {
                expect(&ctx, &ops, 2, ".vector")?;
                vectors.push((line, ops[0].clone(), ops[1].clone()));
            }
            ".entry" => {
                expect(&ctx, &ops, 1, ".entry")?;
                entry = Some((line, ops[0].clone()));
            }
            ".stack" => {
                expect(&ctx, &ops, 1, ".stack")?;
                stack = Some((line, ops[0].clone()));
            }
            d if d.starts_with('.') => return Err(ctx.syntax(format!("unknown directive `{head}`"))),
            _ => {
                let size = size_of(head);
                placed.push(Placed { line, addr: pc, item: Item::Instr { mnemonic: head.to_string(), operands: ops } });
                pc += size;
            }
        }
    }

    // Pass 2: encoding.
    let mut words: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    let table_end = VECTOR_SLOTS * 4;
    let mut emit = |line: usize, addr: u32, value: u32| {
        if addr < table_end {
            return Err(AsmError::Syntax { line, message: format!("code at 0x{addr:x} overlaps the vector table") });
        }
        if let Some((prev, _)) = words.insert(addr, (line, value)) {
            return Err(AsmError::Syntax { line, message: format!("address 0x{addr:x} already used by line {prev}") });
        }
        Ok(())
    };
    for p in &placed {
        let ctx = Ctx { symbols: &symbols, line: p.line };
        match &p.item {
            Item::Words(values) => {
                for (k, v) in values.iter().enumerate() {
                    emit(p.line, p.addr + 4 * k as u32, ctx.word(v)?)?;
                }
            }
            Item::Instr { mnemonic, operands } => {
                let instr = encode(&ctx, p.addr, mnemonic, operands)?;
                for (k, w) in instr.encode().into_iter().enumerate() {
                    emit(p.line, p.addr + 4 * k as u32, w)?;
                }
            }
        }
    }

    let end = words.keys().next_back().map_or(table_end, |a| a + 4).max(table_end);
    let mut image = vec![0u32; (end / 4) as usize];
    for (addr, (_, w)) in &words {
        image[(addr / 4) as usize] = *w;
    }
    let (line, name) = entry.ok_or(AsmError::MissingEntry)?;
    image[1] = Ctx { symbols: &symbols, line }.word(&name)?;
    image[0] = match stack {
        Some((line, v)) => Ctx { symbols: &symbols, line }.word(&v)?,
        None => map.ram_end(),
    };
    for (line, n, label) in vectors {
        let ctx = Ctx { symbols: &symbols, line };
        let n = ctx.eval(&n)?;
        if !(0..i64::from(NUM_LINES)).contains(&n) {
            return Err(AsmError::RangeError { line, value: n, what: "an interrupt line" });
        }
        image[(n + 2) as usize] = ctx.word(&label)?;
    }
    Ok(AsmUnit { image: FirmwareImage::new(image)?, symbols })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::decode;

    fn unit(body: &str) -> AsmUnit {
        assemble(&format!(".entry start\nstart:\n{body}")).unwrap()
    }

    #[test]
    fn add_encoding() {
        let u = unit("ADD r1, r1, r2\n");
        assert_eq!(u.image.flash_word(0x100), 0x0411_2000);
    }

    #[test]
    fn undefined_label_reports_line() {
        let err = assemble(".entry start\nstart:\n  NOP\n  BEQ r1, r2, nowhere\n").unwrap_err();
        assert!(matches!(err, AsmError::UndefinedLabel { line: 4, ref name } if name == "nowhere"));
    }

    #[test]
    fn duplicate_label() {
        let err = assemble(".entry a\na: NOP\na: NOP\n").unwrap_err();
        assert!(matches!(err, AsmError::DuplicateLabel { line: 3, .. }));
    }

    #[test]
    fn immediate_overflow() {
        let err = assemble(".entry a\na: LD r1, 5000(r2)\n").unwrap_err();
        assert!(matches!(err, AsmError::RangeError { line: 2, value: 5000, .. }));
    }

    #[test]
    fn vectors_and_pseudo_ops() {
        let u = unit("  CALL f\n  J start\nf: RET\n.vector 3, f\n.stack 0x20008000\n");
        assert_eq!(u.image.vector(3), u.symbol("f"));
        assert_eq!(u.image.initial_sp(), 0x2000_8000);
        let call = decode(0x100, u.image.flash_word(0x100), None).unwrap();
        assert_eq!((call.opcode, call.rd, call.branch_target(0x100)), (Opcode::Jal, LR, u.symbol("f")));
        let j = decode(0x104, u.image.flash_word(0x104), None).unwrap();
        assert_eq!((j.opcode, j.rs1, j.rs2, j.branch_target(0x104)), (Opcode::Beq, 0, 0, 0x100));
    }

    #[test]
    fn expressions_and_memory_operands() {
        let u = unit(".equ BASE, 0x40000300\n  LDI r1, #BASE+4\n  LD r2, -8(sp)\n  ST r2, (r1)\nd: .word d, BASE-0x300, 7\n");
        let ldi = decode(0x100, u.image.flash_word(0x100), Some(u.image.flash_word(0x104))).unwrap();
        assert_eq!(ldi.ext_imm, Some(0x4000_0304));
        let ld = decode(0x108, u.image.flash_word(0x108), None).unwrap();
        assert_eq!((ld.rd, ld.rs1, ld.imm), (2, 15, -8));
        let st = decode(0x10C, u.image.flash_word(0x10C), None).unwrap();
        assert_eq!((st.rs1, st.rs2, st.imm), (1, 2, 0));
        let d = u.symbol("d");
        assert_eq!(u.image.flash_word(d), d);
        assert_eq!(u.image.flash_word(d + 4), 0x4000_0000);
    }

    #[test]
    fn deterministic() {
        let src = ".entry s\ns: LDI r1, #1\n HALT\n";
        assert_eq!(assemble(src).unwrap().image, assemble(src).unwrap().image);
    }
}
