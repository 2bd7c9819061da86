//! Interrupt controller emulation.
//!
//! Register block at `CTRL_BASE`: ISER at +0x100, ICER at +0x180, ISPR at
//! +0x200, one word each with one bit per line. Arbitration is fixed
//! lowest-line-first; there are no priorities and no preemption, so nothing
//! is dispatched while a service routine is running.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::NUM_LINES;

pub const ISER: u32 = 0x100;
pub const ICER: u32 = 0x180;
pub const ISPR: u32 = 0x200;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NvicError {
    #[error("unmapped controller offset 0x{0:x}")]
    UnmappedControllerOffset(u32),
    #[error("interrupt line {0} is not enabled")]
    LineNotEnabled(u32),
    #[error("interrupt line {0} does not exist")]
    NoSuchLine(u32),
}

/// What a dispatch hands to the service routine: the line plus whatever a
/// firing staged for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    pub line: u32,
    /// Present when the interrupt was raised by `fire` rather than by a
    /// firmware write to ISPR.
    pub staged: Option<StagedValues>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedValues {
    pub sr: u32,
    pub dr: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NvicState {
    pub enabled: u32,
    pub pending: u32,
    pub staged_sr: BTreeMap<u32, u32>,
    pub staged_dr: BTreeMap<u32, Vec<u32>>,
}

impl NvicState {
    /// Applies a firmware write. Returns the lines whose enable bit went 0→1.
    pub fn ctrl_write(&mut self, offset: u32, value: u32) -> Result<Vec<u32>, NvicError> {
        match offset {
            ISER => {
                let rising = value & !self.enabled;
                self.enabled |= value;
                Ok(bits(rising).collect())
            }
            ICER => {
                self.enabled &= !value;
                Ok(Vec::new())
            }
            ISPR => {
                self.pending |= value;
                Ok(Vec::new())
            }
            other => Err(NvicError::UnmappedControllerOffset(other)),
        }
    }

    pub fn ctrl_read(&self, offset: u32) -> Result<u32, NvicError> {
        match offset {
            ISER | ICER => Ok(self.enabled),
            ISPR => Ok(self.pending),
            other => Err(NvicError::UnmappedControllerOffset(other)),
        }
    }

    pub fn is_enabled(&self, line: u32) -> bool {
        line < NUM_LINES && self.enabled & (1 << line) != 0
    }

    /// Raises `line` with the status value its routine will observe and the
    /// data-register payloads it will consume.
    pub fn fire(&mut self, line: u32, sr_value: u32, dr_payloads: Vec<u32>) -> Result<(), NvicError> {
        if line >= NUM_LINES {
            return Err(NvicError::NoSuchLine(line));
        }
        if !self.is_enabled(line) {
            return Err(NvicError::LineNotEnabled(line));
        }
        self.pending |= 1 << line;
        self.staged_sr.insert(line, sr_value);
        self.staged_dr.insert(line, dr_payloads);
        Ok(())
    }

    /// Lowest dispatchable line without consuming it.
    pub fn peek_dispatch(&self, in_isr: bool) -> Option<u32> {
        let ready = self.enabled & self.pending;
        (!in_isr && ready != 0).then(|| ready.trailing_zeros())
    }

    /// Picks the lowest enabled pending line, clears its pending bit and
    /// hands over the staged values.
    pub fn next_dispatch(&mut self, in_isr: bool) -> Option<Dispatch> {
        let line = self.peek_dispatch(in_isr)?;
        self.pending &= !(1 << line);
        let sr = self.staged_sr.remove(&line);
        let dr = self.staged_dr.remove(&line);
        let staged = sr.map(|sr| StagedValues { sr, dr: dr.unwrap_or_default() });
        Some(Dispatch { line, staged })
    }
}

fn bits(mask: u32) -> impl Iterator<Item = u32> {
    (0..32).filter(move |b| mask & (1 << b) != 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iser_emits_once_per_rising_edge() {
        let mut nvic = NvicState::default();
        assert_eq!(nvic.ctrl_write(ISER, 0x8).unwrap(), vec![3]);
        assert_eq!(nvic.enabled, 0x8);
        assert!(nvic.ctrl_write(ISER, 0x8).unwrap().is_empty());
        assert_eq!(nvic.ctrl_write(ISER, 0x9).unwrap(), vec![0]);
    }

    #[test]
    fn icer_clears_silently() {
        let mut nvic = NvicState::default();
        nvic.ctrl_write(ISER, 0x8).unwrap();
        assert!(nvic.ctrl_write(ICER, 0x8).unwrap().is_empty());
        assert_eq!(nvic.enabled, 0);
        // Re-enabling is a new transition.
        assert_eq!(nvic.ctrl_write(ISER, 0x8).unwrap(), vec![3]);
    }

    #[test]
    fn unmapped_offset() {
        let mut nvic = NvicState::default();
        assert_eq!(nvic.ctrl_write(0, 1), Err(NvicError::UnmappedControllerOffset(0)));
    }

    #[test]
    fn fire_requires_enabled_line() {
        let mut nvic = NvicState::default();
        assert_eq!(nvic.fire(3, 0x20, vec![]), Err(NvicError::LineNotEnabled(3)));
        nvic.ctrl_write(ISER, 0x8).unwrap();
        nvic.fire(3, 0x20, vec![7]).unwrap();
        let d = nvic.next_dispatch(false).unwrap();
        assert_eq!(d, Dispatch { line: 3, staged: Some(StagedValues { sr: 0x20, dr: vec![7] }) });
        assert_eq!(nvic.pending, 0);
        assert!(nvic.staged_sr.is_empty() && nvic.staged_dr.is_empty());
        assert_eq!(nvic.next_dispatch(false), None);
    }

    #[test]
    fn lowest_line_wins() {
        let mut nvic = NvicState { enabled: 0b1010, pending: 0b1000, ..Default::default() };
        assert_eq!(nvic.peek_dispatch(false), Some(3));
        assert_eq!(nvic.peek_dispatch(true), None);
        nvic.pending = 0b1010;
        assert_eq!(nvic.next_dispatch(false).unwrap().line, 1);
        nvic.pending = 0;
        assert_eq!(nvic.next_dispatch(false), None);
    }

    #[test]
    fn software_pend_has_no_staged_values() {
        let mut nvic = NvicState::default();
        nvic.ctrl_write(ISER, 1).unwrap();
        nvic.ctrl_write(ISPR, 1).unwrap();
        assert_eq!(nvic.next_dispatch(false), Some(Dispatch { line: 0, staged: None }));
    }
}
