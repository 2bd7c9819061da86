//! Peripheral register categories inferred from access patterns.
//!
//! Every peripheral register gets an [`AccessLog`] that aggregates how the
//! firmware touches it: reads, written bits, bits tested by a branch after
//! masking, and whether read values flow onward into RAM or other
//! registers. [`classify`] turns a log into a [`Category`]; the same log
//! always yields the same category.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{MemoryMap, PERIPH_BLOCK_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Cr,
    Sr,
    Dr,
    Csr { cr_mask: u32, sr_mask: u32 },
}

impl Category {
    /// Bits that hold configuration and are preserved across reads.
    pub fn cr_mask(self) -> u32 {
        match self {
            Category::Cr => u32::MAX,
            Category::Sr | Category::Dr => 0,
            Category::Csr { cr_mask, .. } => cr_mask,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::Cr => f.write_str("CR"),
            Category::Sr => f.write_str("SR"),
            Category::Dr => f.write_str("DR"),
            Category::Csr { cr_mask, sr_mask } => write!(f, "CSR 0x{cr_mask:x} 0x{sr_mask:x}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scope {
    Boot,
    IsrAnalysis,
    Local,
    GlobalDse,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub reads: u64,
    pub writes: u64,
    pub written_mask: u32,
    pub tested_mask: u32,
    /// A read value reached RAM or another register through a store.
    pub stored_onward: bool,
    pub read_after_write: bool,
}

impl AccessLog {
    pub fn record_read(&mut self) {
        self.reads += 1;
        if self.writes > 0 {
            self.read_after_write = true;
        }
    }

    pub fn record_write(&mut self, value: u32) {
        self.writes += 1;
        self.written_mask |= value;
    }

    pub fn record_test(&mut self, mask: u32) {
        self.tested_mask |= mask;
    }

    pub fn record_store(&mut self) {
        self.stored_onward = true;
    }

    pub fn is_empty(&self) -> bool {
        *self == AccessLog::default()
    }
}

/// First matching rule wins:
/// 1. written, values never flow onward, tested bits within written bits: CR
/// 2. read and bit-tested, never written: SR
/// 3. read and flowing onward without bit tests: DR
/// 4. written and tested beyond the written bits: CSR (written bits are CR)
/// 5. any other written register: CR
pub fn classify(log: &AccessLog) -> Option<Category> {
    let written = log.writes > 0;
    let tested = log.tested_mask != 0;
    if written && !log.stored_onward && log.tested_mask & !log.written_mask == 0 {
        return Some(Category::Cr);
    }
    if log.reads > 0 && tested && !written {
        return Some(Category::Sr);
    }
    if log.reads > 0 && log.stored_onward && !tested {
        return Some(Category::Dr);
    }
    if written && log.tested_mask & !log.written_mask != 0 {
        return Some(Category::Csr {
            cr_mask: log.written_mask,
            sr_mask: log.tested_mask & !log.written_mask,
        });
    }
    written.then_some(Category::Cr)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recategorization {
    pub addr: u32,
    pub from: Category,
    pub to: Category,
}

/// Engine-wide register knowledge: declared categories, access logs and the
/// categories derived from them. Per-path register contents live in the
/// execution states.
#[derive(Debug, Clone, Default)]
pub struct RegisterModel {
    declared: BTreeMap<u32, Category>,
    logs: BTreeMap<u32, AccessLog>,
    current: BTreeMap<u32, Category>,
    pub recategorizations: Vec<Recategorization>,
    /// Bumped whenever any derived category changes.
    pub version: u64,
}

impl RegisterModel {
    pub fn new(layout: &Layout) -> Self {
        RegisterModel { declared: layout.entries.clone(), ..Default::default() }
    }

    pub fn category(&self, addr: u32) -> Option<Category> {
        self.declared.get(&addr).or_else(|| self.current.get(&addr)).copied()
    }

    pub fn log(&self, addr: u32) -> AccessLog {
        self.logs.get(&addr).copied().unwrap_or_default()
    }

    /// Categories of every register seen or declared.
    pub fn categories(&self) -> BTreeMap<u32, Category> {
        let mut out = self.current.clone();
        out.extend(self.declared.iter().map(|(a, c)| (*a, *c)));
        out
    }

    pub fn record_read(&mut self, addr: u32) {
        self.update(addr, AccessLog::record_read);
    }

    pub fn record_write(&mut self, addr: u32, value: u32) {
        self.update(addr, |l| l.record_write(value));
    }

    pub fn record_test(&mut self, addr: u32, mask: u32) {
        self.update(addr, |l| l.record_test(mask));
    }

    pub fn record_store(&mut self, addr: u32) {
        self.update(addr, AccessLog::record_store);
    }

    fn update(&mut self, addr: u32, f: impl FnOnce(&mut AccessLog)) {
        let log = self.logs.entry(addr).or_default();
        let before = *log;
        f(log);
        if *log == before || self.declared.contains_key(&addr) {
            return;
        }
        let new = classify(log);
        let old = self.current.get(&addr).copied();
        if new == old {
            return;
        }
        if let (Some(from), Some(to)) = (old, new) {
            log::debug!("register 0x{addr:08x} recategorized {from} -> {to}");
            self.recategorizations.push(Recategorization { addr, from, to });
        }
        match new {
            Some(c) => self.current.insert(addr, c),
            None => self.current.remove(&addr),
        };
        self.version += 1;
    }
}

/// Where a peripheral read takes its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadSource {
    Stored,
    Zero,
    /// The status snapshot of the running analysis.
    SrSymbol,
    /// The status value staged by the firing that raised the running routine.
    SrStaged,
    DrSymbol,
    DrStaged,
    /// Configuration bits from the stored value, status bits from `inner`.
    Mixed { cr_mask: u32, sr_mask: u32, inner: SrSource },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrSource {
    Symbol,
    Staged,
    Zero,
}

/// Context of the routine performing a read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadContext {
    /// Outside any service routine, or in one raised without staged values.
    Plain,
    /// In a routine under interrupt identification.
    Analysis,
    /// In a routine raised by a firing that staged values.
    Fired,
}

/// Read semantics per category, scope and context. Unknown registers act
/// as status registers inside service routines and read 0 elsewhere.
pub fn read_source(category: Option<Category>, scope: Scope, ctx: ReadContext) -> ReadSource {
    let sr = match ctx {
        ReadContext::Analysis => SrSource::Symbol,
        ReadContext::Fired => SrSource::Staged,
        ReadContext::Plain => SrSource::Zero,
    };
    let sr_source = match sr {
        SrSource::Symbol => ReadSource::SrSymbol,
        SrSource::Staged => ReadSource::SrStaged,
        SrSource::Zero => ReadSource::Zero,
    };
    match category {
        Some(Category::Cr) => ReadSource::Stored,
        Some(Category::Sr) | None => sr_source,
        Some(Category::Csr { cr_mask, sr_mask }) => ReadSource::Mixed { cr_mask, sr_mask, inner: sr },
        Some(Category::Dr) => match ctx {
            ReadContext::Analysis => ReadSource::DrSymbol,
            ReadContext::Fired => ReadSource::DrStaged,
            ReadContext::Plain if scope == Scope::GlobalDse => ReadSource::DrSymbol,
            ReadContext::Plain => ReadSource::Zero,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("layout line {line}: {message}")]
    Syntax { line: usize, message: String },
}

/// Declared register categories, keyed by absolute address.
///
/// Text format, one register per line: `block offset category`, where the
/// category is `CR`, `SR`, `DR` or `CSR cr_mask sr_mask`. Numbers accept a
/// `0x` prefix; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    pub entries: BTreeMap<u32, Category>,
}

fn parse_num(text: &str) -> Option<u32> {
    match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16).ok(),
        None => text.parse().ok(),
    }
}

impl Layout {
    pub fn parse(text: &str, map: &MemoryMap) -> Result<Layout, LayoutError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: &str| LayoutError::Syntax { line, message: message.to_string() };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() < 3 {
                return Err(err("expected `block offset category`"));
            }
            let block = parse_num(fields[0]).ok_or_else(|| err("bad block index"))?;
            let offset = parse_num(fields[1]).ok_or_else(|| err("bad register offset"))?;
            if offset >= PERIPH_BLOCK_SIZE || offset % 4 != 0 {
                return Err(err("register offset out of range"));
            }
            let addr = map.periph_base + block * PERIPH_BLOCK_SIZE + offset;
            if map.periph_block(addr).is_none() {
                return Err(err("block index out of range"));
            }
            let category = match fields[2].to_ascii_uppercase().as_str() {
                "CR" => Category::Cr,
                "SR" => Category::Sr,
                "DR" => Category::Dr,
                "CSR" => {
                    let masks = (fields.get(3).and_then(|t| parse_num(t)), fields.get(4).and_then(|t| parse_num(t)));
                    match masks {
                        (Some(cr_mask), Some(sr_mask)) if cr_mask & sr_mask == 0 => Category::Csr { cr_mask, sr_mask },
                        _ => return Err(err("CSR needs two disjoint masks")),
                    }
                }
                _ => return Err(err("unknown category")),
            };
            entries.insert(addr, category);
        }
        Ok(Layout { entries })
    }
}

impl FromStr for Layout {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Layout::parse(s, &MemoryMap::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read_is_cr() {
        let mut log = AccessLog::default();
        log.record_write(0x25);
        log.record_read();
        assert_eq!(classify(&log), Some(Category::Cr));
        assert!(log.read_after_write);
    }

    #[test]
    fn tested_reads_are_sr() {
        let mut log = AccessLog::default();
        log.record_read();
        log.record_test(1 << 5);
        log.record_read();
        log.record_test(1 << 7);
        assert_eq!(classify(&log), Some(Category::Sr));
    }

    #[test]
    fn stored_reads_are_dr() {
        let mut log = AccessLog::default();
        log.record_read();
        log.record_store();
        assert_eq!(classify(&log), Some(Category::Dr));
        // Transmit writes do not turn a data register into a control register.
        log.record_write(0x41);
        assert_eq!(classify(&log), Some(Category::Dr));
    }

    #[test]
    fn mixed_register_is_csr_with_write_winning() {
        let mut log = AccessLog::default();
        log.record_write(0x3);
        log.record_read();
        log.record_test(0x6);
        assert_eq!(classify(&log), Some(Category::Csr { cr_mask: 0x3, sr_mask: 0x4 }));
    }

    #[test]
    fn unobserved_or_untested_reads_stay_unknown() {
        assert_eq!(classify(&AccessLog::default()), None);
        let mut log = AccessLog::default();
        log.record_read();
        assert_eq!(classify(&log), None);
    }

    #[test]
    fn write_to_sr_is_logged_as_recategorization() {
        let mut model = RegisterModel::default();
        model.record_read(0x4000_0000);
        model.record_test(0x4000_0000, 0x20);
        assert_eq!(model.category(0x4000_0000), Some(Category::Sr));
        model.record_write(0x4000_0000, 0x1);
        assert_eq!(model.category(0x4000_0000), Some(Category::Csr { cr_mask: 0x1, sr_mask: 0x20 }));
        assert_eq!(model.recategorizations.len(), 1);
    }

    #[test]
    fn declared_categories_are_pinned() {
        let layout: Layout = "# uart\n3 0x04 DR\n3 0x0c CSR 0xf0 0x0f\n".parse().unwrap();
        let mut model = RegisterModel::new(&layout);
        model.record_write(0x4000_0304, 7);
        assert_eq!(model.category(0x4000_0304), Some(Category::Dr));
        assert_eq!(model.category(0x4000_030c), Some(Category::Csr { cr_mask: 0xf0, sr_mask: 0x0f }));
    }

    #[test]
    fn layout_errors_carry_line() {
        let err = "3 0x04 DR\n3 0x05 SR\n".parse::<Layout>().unwrap_err();
        assert_eq!(err, LayoutError::Syntax { line: 2, message: "register offset out of range".into() });
    }

    #[test]
    fn read_rules() {
        use ReadContext::*;
        assert_eq!(read_source(Some(Category::Sr), Scope::IsrAnalysis, Analysis), ReadSource::SrSymbol);
        assert_eq!(read_source(Some(Category::Cr), Scope::IsrAnalysis, Analysis), ReadSource::Stored);
        assert_eq!(read_source(Some(Category::Dr), Scope::GlobalDse, Plain), ReadSource::DrSymbol);
        assert_eq!(read_source(Some(Category::Dr), Scope::Boot, Plain), ReadSource::Zero);
        assert_eq!(read_source(Some(Category::Dr), Scope::GlobalDse, Fired), ReadSource::DrStaged);
        assert_eq!(read_source(None, Scope::GlobalDse, Plain), ReadSource::Zero);
        assert_eq!(read_source(Some(Category::Sr), Scope::Local, Plain), ReadSource::Zero);
    }
}
