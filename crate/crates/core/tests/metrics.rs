mod support;

use crossvideo::eval::{
    edit_score, framewise_accuracy, levenshtein, mean_iou, segmental_f1, segmental_f1_counts, segmental_f1_greedy_counts,
    to_segments,
};
use proptest::prelude::*;
use rand::Rng;
use support::{edit_oracle, exhaustive_tp, f1_oracle, levenshtein_dp, random_labelling, rng, runs};

#[test]
fn worked_edit_example() {
    // Segments [A, B] against [A, B, C].
    let e = edit_score(&[0, 0, 1, 1], &[0, 1, 2]).unwrap();
    assert!((e - 66.667).abs() < 1e-3);
    assert!((edit_oracle(&[0, 0, 1, 1], &[0, 1, 2]) - e).abs() < 1e-12);
}

#[test]
fn worked_f1_example() {
    let gt = vec![7; 10];
    let mut pred = vec![7; 10];
    pred[6..].fill(8);
    for th in [0.5, 0.1] {
        let f = segmental_f1(&pred, &gt, th).unwrap();
        assert!((f - 66.667).abs() < 1e-3);
        assert_eq!(exhaustive_tp(&pred, &gt, th), 1);
    }
    for th in [0.1, 0.25, 0.5] {
        assert_eq!(segmental_f1(&gt, &gt, th).unwrap(), 100.0);
    }
}

#[test]
fn miou_excludes_absent_classes() {
    assert_eq!(mean_iou(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 25.0);
    // Classes 2..9 never appear and do not drag the mean down.
    assert_eq!(mean_iou(&[0, 0, 0, 0], &[0, 0, 1, 1], 10).unwrap(), 25.0);
}

#[test]
fn fuzzed_labellings_match_oracles() {
    let mut r = rng(2024);
    for case in 0..1000 {
        let len = r.gen_range(1..=40);
        let classes = r.gen_range(1..=4);
        let pred = random_labelling(&mut r, len, 6, classes);
        let gt = random_labelling(&mut r, len, 6, classes);
        assert!(runs(&pred).len() <= 6 && runs(&gt).len() <= 6);

        let e = edit_score(&pred, &gt).unwrap();
        assert_eq!(e, edit_oracle(&pred, &gt), "case {case}: edit");
        assert!((0.0..=100.0).contains(&e));

        let mut last = f64::INFINITY;
        for th in [0.5, 0.25, 0.1] {
            let c = segmental_f1_counts(&pred, &gt, th).unwrap();
            assert_eq!(c.tp, exhaustive_tp(&pred, &gt, th), "case {case}: tp at {th}");
            assert_eq!(c.tp + c.fp, runs(&pred).len());
            assert_eq!(c.tp + c.fn_, runs(&gt).len());
            let f = c.f1();
            assert!((f - f1_oracle(&pred, &gt, th)).abs() < 1e-12, "case {case}: f1 at {th}");
            assert!((0.0..=100.0).contains(&f));
            assert!(segmental_f1_greedy_counts(&pred, &gt, th).unwrap().tp <= c.tp);
            // Thresholds are visited in decreasing order.
            assert!(last == f64::INFINITY || f >= last);
            last = f;
        }

        let a = framewise_accuracy(&pred, &gt).unwrap();
        assert_eq!(a, framewise_accuracy(&gt, &pred).unwrap());
        assert!((0.0..=100.0).contains(&a));
        let m = mean_iou(&pred, &gt, classes as usize).unwrap();
        assert!((0.0..=100.0).contains(&m));
    }
}

proptest! {
    #[test]
    fn levenshtein_matches_dp(a in prop::collection::vec(0i32..4, 0..12), b in prop::collection::vec(0i32..4, 0..12)) {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein_dp(&a, &b));
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
    }

    #[test]
    fn segments_tile_the_sequence(labels in prop::collection::vec(0i32..3, 1..30)) {
        let segs = to_segments(&labels);
        prop_assert_eq!(segs[0].start, 0);
        prop_assert_eq!(segs.last().unwrap().end, labels.len());
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert_ne!(w[0].label, w[1].label);
        }
        for s in &segs {
            prop_assert!(labels[s.start..s.end].iter().all(|&l| l == s.label));
        }
    }

    #[test]
    fn perfect_prediction_scores_full_marks(labels in prop::collection::vec(0i32..3, 1..30)) {
        prop_assert_eq!(edit_score(&labels, &labels).unwrap(), 100.0);
        prop_assert_eq!(framewise_accuracy(&labels, &labels).unwrap(), 100.0);
        prop_assert_eq!(mean_iou(&labels, &labels, 3).unwrap(), 100.0);
        for th in [0.1, 0.25, 0.5] {
            prop_assert_eq!(segmental_f1(&labels, &labels, th).unwrap(), 100.0);
        }
    }
}
