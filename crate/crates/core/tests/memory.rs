use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;
use upcl_core::encoder::EncoderState;
use upcl_core::memory::{herding_select, imbalance_ratio, MemoryBuffer, MemoryStrategy};
use upcl_core::rng::seeded;

fn class_data(class: usize, n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |(i, j)| {
        ((class * 17 + i * 3 + j * 11) as f64 * 0.13).sin()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixed_total_never_exceeds_capacity(capacity in 1usize..60, groups in proptest::collection::vec(1usize..5, 1..5), per_class in 1usize..30) {
        let enc = EncoderState::new(&[5, 6, 3], &mut seeded(0)).unwrap();
        let mut mem = MemoryBuffer::new(MemoryStrategy::FixedTotal { capacity });
        let mut next = 0;
        for g in groups {
            let seen = mem.counts().len() + g;
            if capacity < seen {
                prop_assert!(mem.quota(seen).is_err());
                break;
            }
            let batch: BTreeMap<usize, Array2<f64>> = (next..next + g).map(|c| (c, class_data(c, per_class, 5))).collect();
            next += g;
            mem.update(&batch, &enc).unwrap();
            prop_assert!(mem.total() <= capacity);
            let quota = capacity / seen;
            for (_, count) in mem.counts() {
                prop_assert_eq!(count, quota.min(per_class));
            }
        }
    }

    #[test]
    fn herding_returns_distinct_prefix_stable_indices(n in 1usize..25, m in 1usize..30, seed in 0u64..300) {
        let feats = Array2::from_shape_fn((n, 4), |(i, j)| ((seed as usize + i * 7 + j * 13) as f64).sin());
        let picked = herding_select(feats.view(), m).unwrap();
        prop_assert_eq!(picked.len(), m.min(n));
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), picked.len());
        // greedy: the first k picks do not depend on m
        let shorter = herding_select(feats.view(), (m / 2).max(1)).unwrap();
        prop_assert_eq!(&picked[..shorter.len()], &shorter[..]);
    }
}

#[test]
fn old_classes_keep_their_best_exemplars_when_shrunk() {
    let enc = EncoderState::new(&[5, 6, 3], &mut seeded(4)).unwrap();
    let mut mem = MemoryBuffer::new(MemoryStrategy::FixedTotal { capacity: 12 });
    mem.update(
        &BTreeMap::from([(0, class_data(0, 20, 5)), (1, class_data(1, 20, 5))]),
        &enc,
    )
    .unwrap();
    let first: Vec<Vec<f64>> = mem.exemplars(0).to_vec();
    assert_eq!(first.len(), 6);
    mem.update(
        &BTreeMap::from([(2, class_data(2, 20, 5)), (3, class_data(3, 20, 5))]),
        &enc,
    )
    .unwrap();
    assert_eq!(mem.exemplars(0), &first[..3]);
    assert_eq!(mem.total(), 12);
}

#[test]
fn per_class_memory_grows_with_classes() {
    let enc = EncoderState::new(&[5, 3], &mut seeded(4)).unwrap();
    let mut mem = MemoryBuffer::new(MemoryStrategy::FixedPerClass { per_class: 4 });
    for c in 0..3 {
        mem.update(&BTreeMap::from([(c, class_data(c, 10, 5))]), &enc)
            .unwrap();
    }
    assert_eq!(mem.total(), 12);
    assert_eq!(imbalance_ratio(&mem.counts()).unwrap(), 1.0);
}
