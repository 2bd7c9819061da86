//! Forcing an event whose callback was never registered makes the firmware
//! jump through a null pointer. Kept apart from the regular suites because
//! the run is deliberately unsafe for the emulated device.

use firmirq::driver::{replay_fault, run_analysis, AnalysisConfig, FaultKind, FixedSr, Mode};
use firmirq::fixtures::by_name;
use firmirq::machine::MachineError;

#[test]
fn forced_status_reaches_the_wild_jump() {
    let f = by_name("null-handler").unwrap();
    let unit = f.assemble();
    let layout = f.layout(&unit.image.map).unwrap();
    let config = AnalysisConfig { mode: Mode::Fixed(100), fixed_sr: FixedSr::Forced(1), step_budget: 200_000, ..Default::default() };
    let report = run_analysis(&unit.image, &layout, &config);
    let wild = report.faults.iter().find(|x| x.kind == FaultKind::Decode).expect("no wild jump");
    assert_eq!(wild.pc, 0);
    assert!(matches!(replay_fault(&unit.image, wild), Ok(MachineError::Decode(_))));
}
