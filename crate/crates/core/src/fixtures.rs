//! Bundled example firmware with hand-derived ground truth.
//!
//! Each fixture ships as assembly source plus a prebuilt image. Symbol
//! names in the ground truth refer to labels or `.equ` names of the source.

use crate::asm::{assemble, AsmUnit};
use crate::ident::Pattern;
use crate::memory::MemoryMap;
use crate::mmio::{Layout, LayoutError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineTruth {
    pub line: u32,
    /// Peripheral block the routine belongs to, if it reads one.
    pub block: Option<u32>,
    pub sr_bits: u32,
    /// `(register address, bits)` pairs.
    pub enable_switches: &'static [(u32, u32)],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub lines: &'static [LineTruth],
    /// Vectored lines the firmware never enables.
    pub disabled_lines: &'static [u32],
    pub patterns: &'static [(&'static str, Pattern)],
    /// Label reachable only after interrupts, with the shortest number of
    /// firings that reaches it.
    pub target: Option<(&'static str, usize)>,
    /// Instruction label where a fault is reachable.
    pub fault: Option<&'static str>,
    /// Half-open RAM ranges the startup code initializes.
    pub global_ranges: &'static [(u32, u32)],
}

#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub name: &'static str,
    pub source: &'static str,
    pub layout: Option<&'static str>,
    pub binary: &'static [u8],
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown fixture `{0}`")]
pub struct UnknownFixture(pub String);

impl Fixture {
    pub fn assemble(&self) -> AsmUnit {
        assemble(self.source).unwrap_or_else(|e| panic!("fixture {}: {e}", self.name))
    }

    pub fn layout(&self, map: &MemoryMap) -> Result<Layout, LayoutError> {
        match self.layout {
            Some(text) => Layout::parse(text, map),
            None => Ok(Layout::default()),
        }
    }
}

macro_rules! fixture {
    ($name:literal, $layout:expr, $truth:expr) => {
        Fixture {
            name: $name,
            source: include_str!(concat!("../fixtures/", $name, ".s")),
            layout: $layout,
            binary: include_bytes!(concat!("../fixtures/", $name, ".bin")),
            truth: $truth,
        }
    };
}

const NONE: GroundTruth = GroundTruth {
    lines: &[],
    disabled_lines: &[],
    patterns: &[],
    target: None,
    fault: None,
    global_ranges: &[],
};

pub static FIXTURES: &[Fixture] = &[
    fixture!(
        "delay-boot",
        None,
        GroundTruth {
            lines: &[LineTruth { line: 0, block: None, sr_bits: 0, enable_switches: &[] }],
            patterns: &[("UWTICK", Pattern::SelfReferral)],
            target: Some(("post_delay", 5)),
            global_ranges: &[(0x2000_0000, 0x2000_0010)],
            ..NONE
        }
    ),
    fixture!(
        "uart-isr",
        None,
        GroundTruth {
            lines: &[LineTruth {
                line: 3,
                block: Some(3),
                sr_bits: 0xAF,
                enable_switches: &[(0x4000_030C, 0x1A0), (0x4000_0314, 0x1)],
            }],
            patterns: &[
                ("RX_BYTE", Pattern::DataReception),
                ("RX_COUNT", Pattern::SelfReferral),
                ("TX_COUNT", Pattern::SelfReferral),
                ("PE_COUNT", Pattern::SelfReferral),
                ("ERR", Pattern::SelfReferral),
            ],
            target: Some(("got_a", 1)),
            global_ranges: &[(0x2000_0000, 0x2000_0028)],
            ..NONE
        }
    ),
    fixture!(
        "const-assign-flag",
        None,
        GroundTruth {
            lines: &[LineTruth { line: 1, block: Some(1), sr_bits: 0x1, enable_switches: &[] }],
            patterns: &[("READY", Pattern::ConstAssign)],
            target: Some(("ready", 1)),
            global_ranges: &[(0x2000_0000, 0x2000_0008)],
            ..NONE
        }
    ),
    fixture!(
        "data-reception-checksum",
        None,
        GroundTruth {
            lines: &[LineTruth { line: 2, block: Some(2), sr_bits: 0x21, enable_switches: &[] }],
            patterns: &[("RX_WORD", Pattern::DataReception), ("ERR_COUNT", Pattern::SelfReferral)],
            target: Some(("good_sum", 1)),
            global_ranges: &[(0x2000_0000, 0x2000_000C)],
            ..NONE
        }
    ),
    fixture!(
        "interrupt-chain",
        None,
        GroundTruth {
            lines: &[LineTruth { line: 5, block: Some(5), sr_bits: 0x16, enable_switches: &[] }],
            patterns: &[
                ("STAGE_A", Pattern::ConstAssign),
                ("STAGE_B", Pattern::ConstAssign),
                ("STAGE_C", Pattern::ConstAssign),
            ],
            target: Some(("chain_c", 3)),
            global_ranges: &[(0x2000_0000, 0x2000_0010)],
            ..NONE
        }
    ),
    fixture!(
        "dup-effect-isr",
        None,
        GroundTruth {
            lines: &[LineTruth { line: 6, block: Some(6), sr_bits: 0x7, enable_switches: &[] }],
            patterns: &[("VAR_A", Pattern::ConstAssign), ("VAR_J", Pattern::ConstAssign)],
            target: Some(("got_j", 2)),
            global_ranges: &[(0x2000_0000, 0x2000_002C)],
            ..NONE
        }
    ),
    fixture!(
        "null-handler",
        None,
        GroundTruth {
            lines: &[LineTruth { line: 4, block: Some(4), sr_bits: 0x2, enable_switches: &[] }],
            disabled_lines: &[7],
            patterns: &[("EVENT1", Pattern::ConstAssign)],
            target: Some(("got_event", 1)),
            fault: Some("null_call"),
            global_ranges: &[(0x2000_0000, 0x2000_000C)],
        }
    ),
    fixture!(
        "oob-write",
        Some(include_str!("../fixtures/oob-write.layout")),
        GroundTruth { fault: Some("oob_store"), global_ranges: &[(0x2000_0000, 0x2000_0004)], ..NONE }
    ),
    fixture!(
        "mode-switch",
        None,
        GroundTruth {
            lines: &[LineTruth { line: 9, block: Some(9), sr_bits: 0x1, enable_switches: &[] }],
            patterns: &[("MODE", Pattern::SelfReferral)],
            target: Some(("mode_c", 3)),
            global_ranges: &[(0x2000_0000, 0x2000_0008)],
            ..NONE
        }
    ),
    fixture!(
        "stale-record",
        None,
        GroundTruth {
            lines: &[LineTruth { line: 10, block: Some(10), sr_bits: 0x1, enable_switches: &[(0x4000_0A0C, 0x1)] }],
            patterns: &[("FLAG", Pattern::ConstAssign)],
            global_ranges: &[(0x2000_0000, 0x2000_0004)],
            ..NONE
        }
    ),
    fixture!(
        "two-regions",
        None,
        GroundTruth { global_ranges: &[(0x2000_0000, 0x2000_0010), (0x2000_0400, 0x2000_0410)], ..NONE }
    ),
    fixture!("no-globals", None, NONE),
];

pub fn by_name(name: &str) -> Result<&'static Fixture, UnknownFixture> {
    FIXTURES.iter().find(|f| f.name == name).ok_or_else(|| UnknownFixture(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Set `FIRMIRQ_BLESS=1` to rewrite the prebuilt images.
    #[test]
    fn prebuilt_images_match_sources() {
        let bless = std::env::var_os("FIRMIRQ_BLESS").is_some();
        for f in FIXTURES {
            let bytes = f.assemble().image.to_bytes();
            if bless {
                let path = format!("{}/fixtures/{}.bin", env!("CARGO_MANIFEST_DIR"), f.name);
                std::fs::write(path, &bytes).unwrap();
            } else {
                assert!(f.binary == bytes.as_slice(), "{} is stale", f.name);
            }
        }
    }

    #[test]
    fn truth_names_resolve() {
        for f in FIXTURES {
            let u = f.assemble();
            for (name, _) in f.truth.patterns {
                u.symbol(name);
            }
            f.truth.target.map(|(l, _)| u.symbol(l));
            f.truth.fault.map(|l| u.symbol(l));
            for t in f.truth.lines {
                assert_ne!(u.image.vector(t.line), 0, "{}", f.name);
            }
            f.layout(&u.image.map).unwrap();
        }
    }

    #[test]
    fn lookup() {
        assert_eq!(by_name("uart-isr").unwrap().name, "uart-isr");
        assert!(by_name("nope").is_err());
    }
}
