mod common;

use proptest::prelude::*;
use tcnf::data::{split_train_val, training_targets, validation_targets, SplitMode, SplitSpec};

use common::find_leak;

fn mode() -> impl Strategy<Value = SplitMode> {
    prop_oneof![Just(SplitMode::RandomSections), Just(SplitMode::SequentialTail)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn no_window_leaks(len in 50usize..3000, k in 1usize..=50, mode in mode(), seed in any::<u64>()) {
        prop_assert_eq!(find_leak(len, k, mode, seed), None);
    }

    #[test]
    fn validation_share_and_disjointness(len in 50usize..3000, k in 0usize..=50, mode in mode(), seed in any::<u64>()) {
        let Ok(split) = split_train_val(len, &SplitSpec { mode, gap: k, seed }) else {
            return Ok(());
        };
        prop_assert_eq!(split.val.len(), (0.2 * len as f64).round() as usize);
        prop_assert!(split.train.iter().all(|t| split.val.binary_search(t).is_err()));
        prop_assert!(split.val.windows(2).all(|w| w[0] < w[1]));
        for t in training_targets(&split, k) {
            prop_assert!(t >= k);
        }
        for t in validation_targets(&split, k) {
            prop_assert!(split.val.binary_search(&t).is_ok());
        }
    }

    #[test]
    fn same_seed_same_split(len in 50usize..2000, seed in any::<u64>()) {
        let spec = SplitSpec { mode: SplitMode::RandomSections, gap: 5, seed };
        prop_assert_eq!(split_train_val(len, &spec).ok(), split_train_val(len, &spec).ok());
    }
}

#[test]
fn tail_split_puts_validation_last() {
    let spec = SplitSpec {
        mode: SplitMode::SequentialTail,
        gap: 3,
        seed: 0,
    };
    let split = split_train_val(100, &spec).unwrap();
    assert_eq!(split.val, (80..100).collect::<Vec<_>>());
    assert_eq!(split.train, (0..77).collect::<Vec<_>>());
}
