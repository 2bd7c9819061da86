//! The MVM-32 instruction set.
//!
//! Every instruction is one little-endian 32-bit word laid out as
//! `opcode[31:24] rd[23:20] rs1[19:16] rs2[15:12] imm[11:0]`, with the
//! immediate sign-extended. `LDI` is the only two-word instruction: the
//! second word carries the full 32-bit constant.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Link register used by `CALL`/`RET` conventions and saved on interrupt entry.
pub const LR: u8 = 14;
/// Stack pointer.
pub const SP: u8 = 15;
pub const NUM_REGS: usize = 16;

pub const IMM_MIN: i32 = -2048;
pub const IMM_MAX: i32 = 2047;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opcode {
    Nop,
    Ldi,
    Ld,
    St,
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Mov,
    Beq,
    Bne,
    Blt,
    Bge,
    Jal,
    Jalr,
    Iret,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 20] = [
        Opcode::Nop,
        Opcode::Ldi,
        Opcode::Ld,
        Opcode::St,
        Opcode::Add,
        Opcode::Sub,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Mov,
        Opcode::Beq,
        Opcode::Bne,
        Opcode::Blt,
        Opcode::Bge,
        Opcode::Jal,
        Opcode::Jalr,
        Opcode::Iret,
        Opcode::Halt,
    ];

    pub fn byte(self) -> u8 {
        match self {
            Opcode::Nop => 0x00,
            Opcode::Ldi => 0x01,
            Opcode::Ld => 0x02,
            Opcode::St => 0x03,
            Opcode::Add => 0x04,
            Opcode::Sub => 0x05,
            Opcode::And => 0x06,
            Opcode::Or => 0x07,
            Opcode::Xor => 0x08,
            Opcode::Shl => 0x09,
            Opcode::Shr => 0x0A,
            Opcode::Mov => 0x0B,
            Opcode::Beq => 0x10,
            Opcode::Bne => 0x11,
            Opcode::Blt => 0x12,
            Opcode::Bge => 0x13,
            Opcode::Jal => 0x14,
            Opcode::Jalr => 0x15,
            Opcode::Iret => 0x16,
            Opcode::Halt => 0x17,
        }
    }

    pub fn from_byte(byte: u8) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.byte() == byte)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Nop => "NOP",
            Opcode::Ldi => "LDI",
            Opcode::Ld => "LD",
            Opcode::St => "ST",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::And => "AND",
            Opcode::Or => "OR",
            Opcode::Xor => "XOR",
            Opcode::Shl => "SHL",
            Opcode::Shr => "SHR",
            Opcode::Mov => "MOV",
            Opcode::Beq => "BEQ",
            Opcode::Bne => "BNE",
            Opcode::Blt => "BLT",
            Opcode::Bge => "BGE",
            Opcode::Jal => "JAL",
            Opcode::Jalr => "JALR",
            Opcode::Iret => "IRET",
            Opcode::Halt => "HALT",
        }
    }

    pub fn from_mnemonic(text: &str) -> Option<Opcode> {
        let upper = text.to_ascii_uppercase();
        Opcode::ALL.iter().copied().find(|op| op.mnemonic() == upper)
    }

    pub fn is_conditional_branch(self) -> bool {
        matches!(self, Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge)
    }

    /// Register-register ALU operations. These update the Z/N flags.
    pub fn is_alu(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Shl
                | Opcode::Shr
        )
    }

    /// True when the instruction ends a basic block.
    pub fn ends_block(self) -> bool {
        self.is_conditional_branch()
            || matches!(self, Opcode::Jal | Opcode::Jalr | Opcode::Iret | Opcode::Halt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instr {
    pub opcode: Opcode,
    pub rd: u8,
    pub rs1: u8,
    pub rs2: u8,
    /// Sign-extended 12-bit immediate.
    pub imm: i16,
    /// Second word of `LDI`; `None` for every other opcode.
    pub ext_imm: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("unknown opcode 0x{opcode:02x} at 0x{address:08x}")]
    UnknownOpcode { address: u32, opcode: u8 },
    #[error("LDI at 0x{address:08x} is missing its constant word")]
    TruncatedLdi { address: u32 },
    #[error("invalid instruction field: {0}")]
    InvalidField(String),
}

impl Instr {
    pub fn new(opcode: Opcode, rd: u8, rs1: u8, rs2: u8, imm: i16) -> Instr {
        Instr { opcode, rd, rs1, rs2, imm, ext_imm: None }
    }

    pub fn ldi(rd: u8, value: u32) -> Instr {
        Instr { opcode: Opcode::Ldi, rd, rs1: 0, rs2: 0, imm: 0, ext_imm: Some(value) }
    }

    pub fn nop() -> Instr {
        Instr::new(Opcode::Nop, 0, 0, 0, 0)
    }

    /// Size in bytes.
    pub fn size(&self) -> u32 {
        if self.opcode == Opcode::Ldi {
            8
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<(), IsaError> {
        if self.rd >= 16 || self.rs1 >= 16 || self.rs2 >= 16 {
            return Err(IsaError::InvalidField(format!("register index out of range in {self}")));
        }
        if i32::from(self.imm) < IMM_MIN || i32::from(self.imm) > IMM_MAX {
            return Err(IsaError::InvalidField(format!("immediate {} exceeds 12 bits", self.imm)));
        }
        match (self.opcode, self.ext_imm) {
            (Opcode::Ldi, None) => Err(IsaError::InvalidField("LDI without constant".into())),
            (op, Some(_)) if op != Opcode::Ldi => {
                Err(IsaError::InvalidField(format!("{} carries a constant word", op.mnemonic())))
            }
            _ => Ok(()),
        }
    }

    /// Encodes into one or two words.
    pub fn encode(&self) -> Vec<u32> {
        let word = (u32::from(self.opcode.byte()) << 24)
            | (u32::from(self.rd & 0xF) << 20)
            | (u32::from(self.rs1 & 0xF) << 16)
            | (u32::from(self.rs2 & 0xF) << 12)
            | (self.imm as u32 & 0xFFF);
        match self.ext_imm {
            Some(ext) => vec![word, ext],
            None => vec![word],
        }
    }

    /// Target of a pc-relative branch or `JAL` located at `pc`.
    pub fn branch_target(&self, pc: u32) -> u32 {
        pc.wrapping_add(4).wrapping_add((i32::from(self.imm) * 4) as u32)
    }
}

/// Decodes the instruction at `address`. `next` is the following flash word,
/// consumed only by `LDI`.
pub fn decode(address: u32, word: u32, next: Option<u32>) -> Result<Instr, IsaError> {
    let byte = (word >> 24) as u8;
    let opcode = Opcode::from_byte(byte).ok_or(IsaError::UnknownOpcode { address, opcode: byte })?;
    let imm = (((word & 0xFFF) << 20) as i32 >> 20) as i16;
    let mut instr = Instr {
        opcode,
        rd: ((word >> 20) & 0xF) as u8,
        rs1: ((word >> 16) & 0xF) as u8,
        rs2: ((word >> 12) & 0xF) as u8,
        imm,
        ext_imm: None,
    };
    if opcode == Opcode::Ldi {
        instr.ext_imm = Some(next.ok_or(IsaError::TruncatedLdi { address })?);
    }
    Ok(instr)
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.opcode.mnemonic();
        match self.opcode {
            Opcode::Nop | Opcode::Iret | Opcode::Halt => write!(f, "{m}"),
            Opcode::Ldi => write!(f, "{m} r{}, #0x{:x}", self.rd, self.ext_imm.unwrap_or(0)),
            Opcode::Ld => write!(f, "{m} r{}, {}(r{})", self.rd, self.imm, self.rs1),
            Opcode::St => write!(f, "{m} r{}, {}(r{})", self.rs2, self.imm, self.rs1),
            Opcode::Mov => write!(f, "{m} r{}, r{}", self.rd, self.rs1),
            Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge => {
                write!(f, "{m} r{}, r{}, {:+}", self.rs1, self.rs2, self.imm)
            }
            Opcode::Jal => write!(f, "{m} r{}, {:+}", self.rd, self.imm),
            Opcode::Jalr => write!(f, "{m} r{}, r{}, {}", self.rd, self.rs1, self.imm),
            _ => write!(f, "{m} r{}, r{}, r{}", self.rd, self.rs1, self.rs2),
        }
    }
}
