//! Firmware images: raw little-endian flash words with the vector table at
//! flash base.
//!
//! Slot 0 holds the initial stack pointer, slot 1 the reset handler, and
//! slots 2..34 the service routines of interrupt lines 0..31.

use std::path::Path;

use thiserror::Error;

use crate::isa::{self, Instr, IsaError};
use crate::memory::MemoryMap;

pub const NUM_LINES: u32 = 32;
pub const VECTOR_SLOTS: u32 = NUM_LINES + 2;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image size {0} is not a multiple of 4 bytes")]
    Unaligned(usize),
    #[error("image of {words} words does not fit flash ({capacity} words)")]
    TooLarge { words: usize, capacity: usize },
    #[error("image is too short to hold a vector table")]
    MissingVectorTable,
    #[error("reset vector 0x{0:08x} is outside flash")]
    BadEntry(u32),
    #[error("initial stack pointer 0x{0:08x} is outside RAM")]
    BadStack(u32),
    #[error("vector for line {line} points outside flash (0x{addr:08x})")]
    BadVector { line: u32, addr: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareImage {
    pub words: Vec<u32>,
    pub map: MemoryMap,
}

impl FirmwareImage {
    pub fn new(words: Vec<u32>) -> Result<Self, ImageError> {
        Self::with_map(words, MemoryMap::default())
    }

    pub fn with_map(words: Vec<u32>, map: MemoryMap) -> Result<Self, ImageError> {
        let image = FirmwareImage { words, map };
        image.validate()?;
        Ok(image)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(ImageError::Unaligned(bytes.len()));
        }
        let words = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(words)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    fn validate(&self) -> Result<(), ImageError> {
        let capacity = (self.map.flash_size / 4) as usize;
        if self.words.len() > capacity {
            return Err(ImageError::TooLarge { words: self.words.len(), capacity });
        }
        if self.words.len() < VECTOR_SLOTS as usize {
            return Err(ImageError::MissingVectorTable);
        }
        if !self.map.in_flash(self.entry()) || !self.entry().is_multiple_of(4) {
            return Err(ImageError::BadEntry(self.entry()));
        }
        let sp = self.initial_sp();
        if !sp.is_multiple_of(4) || sp <= self.map.ram_base || sp > self.map.ram_end() {
            return Err(ImageError::BadStack(sp));
        }
        for line in 0..NUM_LINES {
            let addr = self.vector(line);
            if addr != 0 && (!self.map.in_flash(addr) || !addr.is_multiple_of(4)) {
                return Err(ImageError::BadVector { line, addr });
            }
        }
        Ok(())
    }

    pub fn initial_sp(&self) -> u32 {
        self.words[0]
    }

    pub fn entry(&self) -> u32 {
        self.words[1]
    }

    /// Service routine address for `line`, 0 when unset.
    pub fn vector(&self, line: u32) -> u32 {
        if line >= NUM_LINES {
            return 0;
        }
        self.words[(line + 2) as usize]
    }

    /// Lines with a nonzero vector.
    pub fn vectored_lines(&self) -> impl Iterator<Item = u32> + '_ {
        (0..NUM_LINES).filter(|&l| self.vector(l) != 0)
    }

    /// Flash word at a byte address; reads past the image return 0.
    pub fn flash_word(&self, addr: u32) -> u32 {
        let idx = (addr.wrapping_sub(self.map.flash_base) / 4) as usize;
        self.words.get(idx).copied().unwrap_or(0)
    }

    pub fn decode_at(&self, pc: u32) -> Result<Instr, IsaError> {
        isa::decode(pc, self.flash_word(pc), Some(self.flash_word(pc.wrapping_add(4))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Vec<u32> {
        let mut words = vec![0u32; VECTOR_SLOTS as usize + 2];
        words[0] = 0x2001_0000;
        words[1] = VECTOR_SLOTS * 4;
        words[VECTOR_SLOTS as usize] = 0x1700_0000;
        words
    }

    #[test]
    fn bytes_round_trip() {
        let image = FirmwareImage::new(minimal()).unwrap();
        let again = FirmwareImage::from_bytes(&image.to_bytes()).unwrap();
        assert_eq!(image, again);
    }

    #[test]
    fn rejects_stack_outside_ram() {
        let mut words = minimal();
        words[0] = 0x1000;
        assert!(matches!(FirmwareImage::new(words), Err(ImageError::BadStack(0x1000))));
    }

    #[test]
    fn rejects_vector_outside_flash() {
        let mut words = minimal();
        words[5] = 0x2000_0000;
        assert!(matches!(FirmwareImage::new(words), Err(ImageError::BadVector { line: 3, .. })));
    }

    #[test]
    fn reads_past_end_are_zero() {
        let image = FirmwareImage::new(minimal()).unwrap();
        assert_eq!(image.flash_word(0x1000), 0);
    }
}
