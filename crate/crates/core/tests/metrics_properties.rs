mod common;

use proptest::prelude::*;
use tcnf::metrics::{auc_pr, auc_roc, best_f1_threshold, evaluate, range_labels, vus_roc};

use common::pairwise_auc;

/// Labels with at least one positive and one negative, and matching scores
/// on a coarse grid so ties are common.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            proptest::collection::vec((0u8..12).prop_map(|v| v as f64 * 0.25), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auc_equals_pairwise_count((scores, labels) in instance()) {
        prop_assert_eq!(auc_roc(&scores, &labels).unwrap(), pairwise_auc(&scores, &labels));
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in instance(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let moved: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
        prop_assert_eq!(auc_roc(&scores, &labels).unwrap(), auc_roc(&moved, &labels).unwrap());
        prop_assert_eq!(auc_pr(&scores, &labels).unwrap(), auc_pr(&moved, &labels).unwrap());
    }

    #[test]
    fn reversed_scores_flip_auc((scores, labels) in instance()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc_roc(&scores, &labels).unwrap() + auc_roc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn range_weights_grow_with_the_buffer((_, labels) in instance(), w in 0usize..10) {
        let narrow = range_labels(&labels, w);
        let wide = range_labels(&labels, w + 1);
        for (t, (a, b)) in narrow.weights.iter().zip(&wide.weights).enumerate() {
            prop_assert!(a <= b);
            prop_assert!((0.0..=1.0).contains(a));
            if labels[t] {
                prop_assert_eq!(*a, 1.0);
            }
        }
    }

    #[test]
    fn vus_without_buffer_is_auc((scores, labels) in instance()) {
        let a = auc_roc(&scores, &labels).unwrap();
        prop_assert!((vus_roc(&scores, &labels, 0).unwrap() - a).abs() <= 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_range((scores, labels) in instance(), w in 0usize..8) {
        let e = evaluate(&scores, &labels, Some(w)).unwrap();
        for (name, v) in e.named() {
            if name != "threshold" && name != "vus_window" {
                prop_assert!((0.0..=1.0).contains(&v), "{name} = {v}");
            }
        }
        let (_, f1) = best_f1_threshold(&scores, &labels).unwrap();
        prop_assert!((f1 - e.f1).abs() <= 1e-12);
    }
}

#[test]
fn worked_example() {
    let auc = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    assert_eq!(auc, 0.75);
}

#[test]
fn perfect_scores() {
    let labels = [false, true, true, false, false];
    let scores: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let e = evaluate(&scores, &labels, None).unwrap();
    assert_eq!((e.auc_roc, e.auc_pr, e.f1), (1.0, 1.0, 1.0));
}
