use std::collections::BTreeSet;

use firmirq::cfg::build_cfg;
use firmirq::fixtures::FIXTURES;
use proptest::prelude::*;

proptest! {
    #[test]
    fn batch_distances_agree_with_search(fixture in 0..FIXTURES.len(), mask in any::<u64>(), extra in any::<u64>()) {
        let cfg = build_cfg(&FIXTURES[fixture].assemble().image);
        let blocks: Vec<u32> = cfg.blocks.keys().copied().collect();
        let covered: BTreeSet<u32> = blocks.iter().enumerate().filter(|(i, _)| mask >> (i % 64) & 1 == 1).map(|(_, b)| *b).collect();
        let dist = cfg.distances(&covered);
        for &b in &blocks {
            prop_assert_eq!(dist.get(&b).copied(), cfg.distance_to_uncovered(b, &covered));
        }
        // Shrinking the covered set never increases a distance.
        let smaller: BTreeSet<u32> = covered.iter().enumerate().filter(|(i, _)| extra >> (i % 64) & 1 == 1).map(|(_, b)| *b).collect();
        let dist2 = cfg.distances(&smaller);
        for &b in &blocks {
            if let Some(d) = dist.get(&b) {
                prop_assert!(dist2[&b] <= *d);
            }
        }
    }
}
