use std::collections::BTreeSet;

use firmirq::cfg::build_cfg;
use firmirq::driver::{replay_fault, run_analysis, AnalysisConfig, AnalysisReport, FaultKind, Mode};
use firmirq::fixtures::{Fixture, FIXTURES};

const BUDGET: u64 = 300_000;

fn analyze(f: &Fixture, mode: Mode) -> AnalysisReport {
    let unit = f.assemble();
    let layout = f.layout(&unit.image.map).unwrap();
    run_analysis(&unit.image, &layout, &AnalysisConfig { mode, step_budget: BUDGET, ..Default::default() })
}

fn all_modes() -> Vec<(&'static Fixture, AnalysisReport, AnalysisReport)> {
    std::thread::scope(|s| {
        let handles: Vec<_> = FIXTURES
            .iter()
            .map(|f| s.spawn(move || (f, analyze(f, Mode::NoInt), analyze(f, Mode::Aim))))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

#[test]
fn aim_covers_everything_no_int_covers_and_reaches_targets() {
    for (f, no_int, aim) in all_modes() {
        let (n, a) = (no_int.covered_blocks(), aim.covered_blocks());
        assert!(n.is_subset(&a), "{}: blocks {:x?} lost", f.name, n.difference(&a).collect::<Vec<_>>());
        let Some((label, firings)) = f.truth.target else { continue };
        let unit = f.assemble();
        let cfg = build_cfg(&unit.image);
        let block = cfg.block_of(unit.symbol(label)).unwrap().start;
        assert!(a.contains(&block), "{}: {label} not reached", f.name);
        assert!(!n.contains(&block), "{}: {label} reached without interrupts", f.name);
        let total: usize = aim.sequences.list.iter().map(|s| s.firings.len()).sum();
        assert!(total >= firings, "{}: {total} firings cannot reach {label}", f.name);
    }
}

#[test]
fn reports_are_consistent() {
    for (f, no_int, aim) in all_modes() {
        for r in [&no_int, &aim] {
            assert_eq!(r.coverage.covered, r.coverage.blocks.len(), "{}", f.name);
            assert!(r.steps <= BUDGET + 20_000, "{}: {} steps", f.name, r.steps);
            assert_eq!(r.trend.last().map(|t| t.1), Some(r.coverage.covered), "{}", f.name);
            assert!(r.trend.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1), "{}: trend", f.name);
            assert_eq!(r.sequences.count, r.sequences.list.len());
            assert_eq!(r.disabled_line_fire_attempts, 0);
            let unit = f.assemble();
            let mut seen = BTreeSet::new();
            for fault in &r.faults {
                assert!(seen.insert((fault.pc, fault.addr)), "{}: duplicate fault", f.name);
                replay_fault(&unit.image, fault).unwrap();
            }
        }
        assert!(no_int.sequences.list.is_empty() && no_int.fixed_firings == 0);
    }
}

#[test]
fn reachable_fault_is_reported() {
    let f = firmirq::fixtures::by_name("oob-write").unwrap();
    let unit = f.assemble();
    let store = unit.symbol(f.truth.fault.unwrap());
    let r = analyze(f, Mode::NoInt);
    let fault = r.faults.iter().find(|x| x.pc == store).expect("no fault at the store");
    assert_eq!(fault.kind, FaultKind::Write);
    assert!(!unit.image.map.in_ram(fault.addr.unwrap()) || fault.addr.unwrap() >= unit.image.initial_sp());
}
