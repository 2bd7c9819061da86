use firmirq::cfg::build_cfg;
use firmirq::fixtures::{Fixture, FIXTURES};
use firmirq::ident::{locate_global_region, IdentError, Identifier};
use firmirq::mmio::{RegisterModel, Scope};
use firmirq::solver::Solver;
use firmirq::symex::{step_symbolic, Env, Event, Successor, SymState};

/// Runs the single boot path until the firmware enables `line`.
fn trigger(f: &Fixture, line: u32) -> (SymState, RegisterModel) {
    let unit = f.assemble();
    let leaders = build_cfg(&unit.image).leaders();
    let mut model = RegisterModel::new(&f.layout(&unit.image.map).unwrap());
    let mut st = SymState::reset(&unit.image);
    for _ in 0..100_000 {
        let mut env = Env::new(&unit.image, &leaders, &mut model, Scope::GlobalDse);
        let mut next = step_symbolic(&mut env, st);
        assert_eq!(next.len(), 1, "{}: boot forked", f.name);
        let hit = env.events.contains(&Event::LineEnabled(line));
        st = match next.pop().unwrap() {
            Successor::Live(s) => s,
            other => panic!("{}: boot ended early: {other:?}", f.name),
        };
        if hit {
            return (st, model);
        }
    }
    panic!("{}: line {line} never enabled", f.name);
}

#[test]
fn recovered_models_match_ground_truth() {
    for f in FIXTURES {
        let unit = f.assemble();
        let leaders = build_cfg(&unit.image).leaders();
        for t in f.truth.lines {
            let (st, mut model) = trigger(f, t.line);
            let mut ident = Identifier::new(&unit.image, 4096);
            let lm = ident.analyze(&unit.image, &leaders, &mut model, &Solver::default(), &st, t.line).unwrap();
            assert_eq!(lm.sr_bits, t.sr_bits, "{}: status bits", f.name);
            assert_eq!(lm.block, t.block, "{}: block", f.name);
            let switches: Vec<(u32, u32)> = lm.enable_switches.iter().map(|(a, b)| (*a, *b)).collect();
            assert_eq!(switches, t.enable_switches, "{}: switches", f.name);
            for (name, pattern) in f.truth.patterns {
                let addr = unit.symbol(name);
                let found = ident.table.table_lookup(addr).unwrap_or_default();
                assert!(
                    found.iter().any(|r| r.effect(addr).map(|e| e.pattern) == Some(*pattern)),
                    "{}: {name} lacks {pattern:?}",
                    f.name
                );
            }
        }
    }
}

#[test]
fn duplicate_and_union_records_are_filtered() {
    let f = firmirq::fixtures::by_name("dup-effect-isr").unwrap();
    let unit = f.assemble();
    let leaders = build_cfg(&unit.image).leaders();
    let (st, mut model) = trigger(f, 6);
    let mut ident = Identifier::new(&unit.image, 4096);
    let lm = ident.analyze(&unit.image, &leaders, &mut model, &Solver::default(), &st, 6).unwrap();
    let kept: Vec<u32> = lm.records.iter().map(|r| r.sr_value).collect();
    assert_eq!(kept, vec![1, 2]);
    assert!(lm.unfiltered.len() > kept.len());
}

#[test]
fn global_regions_of_fixtures() {
    for f in FIXTURES {
        let image = f.assemble().image;
        match locate_global_region(&image) {
            Ok(r) => assert_eq!(r.ranges, f.truth.global_ranges, "{}", f.name),
            Err(IdentError::RegionNotFound { .. }) => assert!(f.truth.global_ranges.is_empty(), "{}", f.name),
            Err(e) => panic!("{}: {e}", f.name),
        }
    }
}
