#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use mambacaps_core::metrics::{confusion, per_class_metrics, round_half_up, standard_f1};
use proptest::prelude::*;

#[test]
fn mitbih_table_is_reproduced() {
    let report = per_class_metrics(&confusion_from(&MITBIH_CONFUSION)).unwrap();
    let rows: Vec<[f64; 5]> = report
        .classes
        .iter()
        .chain([&report.macro_avg])
        .map(score_row)
        .collect();
    let (er, ec, computed) = MITBIH_F1_FROM_MATRIX;
    for (r, (got, want)) in rows.iter().zip(&MITBIH_SCORES).enumerate() {
        for c in 0..5 {
            let want = if (r, c) == (er, ec) { computed } else { want[c] };
            assert!(
                (got[c] - want).abs() <= 0.01 + 1e-9,
                "row {r} col {c}: {} vs {want}",
                got[c]
            );
        }
    }
    assert!((MITBIH_SCORES[er][ec] - rows[er][ec]).abs() > 0.5);
    assert_eq!(round_half_up(report.macro_avg.acc, 2), 99.54);
    assert_eq!(round_half_up(report.classes[1].f1, 2), 83.52);
}

#[test]
fn standard_f1_differs_from_accuracy_based_f1() {
    let cm = confusion_from(&MITBIH_CONFUSION);
    let (f1, flag) = standard_f1(&cm)[0];
    assert!(!flag);
    let oracle = 2.0 * 98.98 * 99.86 / (98.98 + 99.86);
    assert!((f1 - oracle).abs() < 0.01, "{f1} vs {oracle}");
    assert_eq!(round_half_up(f1, 2), 99.42);
}

#[test]
fn table_expands_to_prediction_stream() {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (t, row) in MITBIH_CONFUSION.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            preds.extend(std::iter::repeat_n(p, n as usize));
            labels.extend(std::iter::repeat_n(t, n as usize));
        }
    }
    assert_eq!(
        confusion(&preds, &labels, 5).unwrap(),
        confusion_from(&MITBIH_CONFUSION)
    );
}

#[test]
fn ptb_scores_come_from_the_matrix() {
    let report = per_class_metrics(&confusion_from(&PTB_CONFUSION)).unwrap();
    // Normal sensitivity is 800 / 809, not the listed 99.24.
    assert!((report.classes[0].sen - 100.0 * 800.0 / 809.0).abs() < 1e-12);
    assert_eq!(round_half_up(report.classes[0].sen, 2), 98.89);
    // The MI precision and specificity cells are consistent with the matrix.
    assert!((report.classes[1].ppv - PTB_SCORES[1][3]).abs() <= 0.01);
    assert!((report.classes[1].spec - PTB_SCORES[1][4]).abs() <= 0.01);
}

proptest! {
    #[test]
    fn confusion_identities(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let (labels, preds): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let cm = confusion(&preds, &labels, 4).unwrap();
        prop_assert_eq!(cm.total() as usize, pairs.len());
        let tp: u64 = (0..4).map(|k| cm.one_vs_rest(k).0).sum();
        prop_assert_eq!(tp, cm.trace());
        let support: u64 = (0..4).map(|k| { let (tp, _, _, fn_) = cm.one_vs_rest(k); tp + fn_ }).sum();
        prop_assert_eq!(support, cm.total());
        let report = per_class_metrics(&cm).unwrap();
        for c in &report.classes {
            for v in score_row(c) {
                prop_assert!((0.0..=100.0).contains(&v));
            }
        }
    }

    #[test]
    fn relabelling_permutes_the_report(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..100)) {
        let perm = [2usize, 0, 1];
        let (labels, preds): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let base = per_class_metrics(&confusion(&preds, &labels, 3).unwrap()).unwrap();
        let pl: Vec<_> = labels.iter().map(|&l| perm[l]).collect();
        let pp: Vec<_> = preds.iter().map(|&p| perm[p]).collect();
        let moved = per_class_metrics(&confusion(&pp, &pl, 3).unwrap()).unwrap();
        for k in 0..3 {
            prop_assert_eq!(score_row(&base.classes[k]), score_row(&moved.classes[perm[k]]));
        }
    }
}
