//! Address space layout and the least-permission access checker.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const FLASH_BASE: u32 = 0x0000_0000;
pub const RAM_BASE: u32 = 0x2000_0000;
pub const PERIPH_BASE: u32 = 0x4000_0000;
pub const PERIPH_BLOCK_SIZE: u32 = 0x100;
pub const PERIPH_BLOCKS: u32 = 32;
pub const CTRL_BASE: u32 = 0xE000_E000;
pub const CTRL_SIZE: u32 = 0x400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMap {
    pub flash_base: u32,
    pub flash_size: u32,
    pub ram_base: u32,
    pub ram_size: u32,
    pub periph_base: u32,
    pub periph_size: u32,
    pub ctrl_base: u32,
    pub ctrl_size: u32,
}

impl Default for MemoryMap {
    fn default() -> Self {
        MemoryMap {
            flash_base: FLASH_BASE,
            flash_size: 256 * 1024,
            ram_base: RAM_BASE,
            ram_size: 64 * 1024,
            periph_base: PERIPH_BASE,
            periph_size: PERIPH_BLOCKS * PERIPH_BLOCK_SIZE,
            ctrl_base: CTRL_BASE,
            ctrl_size: CTRL_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Flash,
    Ram,
    Peripheral,
    Controller,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Execute => "execute",
        })
    }
}

fn within(addr: u32, base: u32, size: u32) -> bool {
    addr.wrapping_sub(base) < size
}

impl MemoryMap {
    pub fn region_of(&self, addr: u32) -> Option<Region> {
        if within(addr, self.flash_base, self.flash_size) {
            Some(Region::Flash)
        } else if within(addr, self.ram_base, self.ram_size) {
            Some(Region::Ram)
        } else if within(addr, self.periph_base, self.periph_size) {
            Some(Region::Peripheral)
        } else if within(addr, self.ctrl_base, self.ctrl_size) {
            Some(Region::Controller)
        } else {
            None
        }
    }

    pub fn ram_end(&self) -> u32 {
        self.ram_base + self.ram_size
    }

    pub fn in_ram(&self, addr: u32) -> bool {
        within(addr, self.ram_base, self.ram_size)
    }

    pub fn in_flash(&self, addr: u32) -> bool {
        within(addr, self.flash_base, self.flash_size)
    }

    /// Peripheral block index and register offset for a peripheral address.
    pub fn periph_block(&self, addr: u32) -> Option<(u32, u32)> {
        within(addr, self.periph_base, self.periph_size).then(|| {
            let rel = addr - self.periph_base;
            (rel / PERIPH_BLOCK_SIZE, rel % PERIPH_BLOCK_SIZE)
        })
    }

    /// Regions are disjoint and every size is a multiple of the word size.
    pub fn is_well_formed(&self) -> bool {
        let spans = [
            (self.flash_base, self.flash_size),
            (self.ram_base, self.ram_size),
            (self.periph_base, self.periph_size),
            (self.ctrl_base, self.ctrl_size),
        ];
        spans.iter().all(|&(b, s)| s % 4 == 0 && b % 4 == 0 && s > 0)
            && spans.iter().enumerate().all(|(i, &(b1, s1))| {
                spans[i + 1..].iter().all(|&(b2, s2)| {
                    u64::from(b1) + u64::from(s1) <= u64::from(b2)
                        || u64::from(b2) + u64::from(s2) <= u64::from(b1)
                })
            })
    }
}

/// Region permissions: flash is read+execute, RAM and both MMIO regions are
/// read+write, everything else is inaccessible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemPermissions {
    map: MemoryMap,
}

impl MemPermissions {
    pub fn new(map: MemoryMap) -> Self {
        MemPermissions { map }
    }

    pub fn map(&self) -> &MemoryMap {
        &self.map
    }

    pub fn allows(&self, addr: u32, kind: AccessKind) -> bool {
        if !addr.is_multiple_of(4) {
            return false;
        }
        match (self.map.region_of(addr), kind) {
            (Some(Region::Flash), AccessKind::Read | AccessKind::Execute) => true,
            (Some(Region::Ram | Region::Peripheral | Region::Controller), AccessKind::Read | AccessKind::Write) => true,
            _ => false,
        }
    }

    /// Address ranges `[start, end)` in which `kind` is permitted.
    pub fn permitted_ranges(&self, kind: AccessKind) -> Vec<(u32, u32)> {
        let m = &self.map;
        let ranges = match kind {
            AccessKind::Read => vec![
                (m.flash_base, m.flash_size),
                (m.ram_base, m.ram_size),
                (m.periph_base, m.periph_size),
                (m.ctrl_base, m.ctrl_size),
            ],
            AccessKind::Write => vec![
                (m.ram_base, m.ram_size),
                (m.periph_base, m.periph_size),
                (m.ctrl_base, m.ctrl_size),
            ],
            AccessKind::Execute => vec![(m.flash_base, m.flash_size)],
        };
        ranges.into_iter().map(|(b, s)| (b, b + s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryFault {
    pub pc: u32,
    pub addr: u32,
    pub kind: AccessKind,
}

impl fmt::Display for MemoryFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} fault at 0x{:08x} (pc 0x{:08x})", self.kind, self.addr, self.pc)
    }
}

/// Traps any access that violates the region permissions.
pub fn check_access(pc: u32, addr: u32, kind: AccessKind, perms: &MemPermissions) -> Result<(), MemoryFault> {
    if perms.allows(addr, kind) {
        Ok(())
    } else {
        Err(MemoryFault { pc, addr, kind })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perms() -> MemPermissions {
        MemPermissions::new(MemoryMap::default())
    }

    #[test]
    fn default_map_is_well_formed() {
        assert!(MemoryMap::default().is_well_formed());
    }

    #[test]
    fn flash_is_not_writable() {
        let err = check_access(0x104, 0x200, AccessKind::Write, &perms()).unwrap_err();
        assert_eq!(err, MemoryFault { pc: 0x104, addr: 0x200, kind: AccessKind::Write });
    }

    #[test]
    fn ram_is_not_executable() {
        assert!(check_access(0x2000_0000, 0x2000_0000, AccessKind::Execute, &perms()).is_err());
    }

    #[test]
    fn ram_is_readable() {
        assert!(check_access(0x100, 0x2000_0010, AccessKind::Read, &perms()).is_ok());
        assert!(check_access(0x100, 0x2000_0010, AccessKind::Write, &perms()).is_ok());
    }

    #[test]
    fn unmapped_and_misaligned_accesses_fault() {
        assert!(check_access(0, 0x3000_0000, AccessKind::Read, &perms()).is_err());
        assert!(check_access(0, 0x2000_0002, AccessKind::Read, &perms()).is_err());
        assert!(check_access(0, 0x2001_0000, AccessKind::Write, &perms()).is_err());
    }

    #[test]
    fn peripheral_block_decomposition() {
        let map = MemoryMap::default();
        assert_eq!(map.periph_block(0x4000_0304), Some((3, 4)));
        assert_eq!(map.periph_block(0x4000_2000), None);
        assert_eq!(map.region_of(0xE000_E100), Some(Region::Controller));
    }
}
