use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Mean loss components per epoch.
    pub loss_curves: Vec<BTreeMap<String, f64>>,
}

/// Accuracy and macro-averaged precision, recall and F1. The macro average
/// runs over classes that occur in the labels or the predictions; a class
/// with a zero denominator scores 0.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<MetricReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().chain(predictions).find(|&&l| l >= n_classes) {
        return Err(Error::Contract(format!("class {bad} outside [0, {n_classes})")));
    }
    if labels.is_empty() {
        return Ok(MetricReport::default());
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut true_count = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        pred_count[p] += 1;
        true_count[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut sp, mut sr, mut sf, mut n) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..n_classes {
        if pred_count[c] == 0 && true_count[c] == 0 {
            continue;
        }
        let p = ratio(tp[c], pred_count[c]);
        let r = ratio(tp[c], true_count[c]);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        sp += p;
        sr += r;
        sf += f;
        n += 1;
    }
    let n = n as f64;
    Ok(MetricReport {
        accuracy: ratio(tp.iter().sum(), labels.len()),
        macro_f1: sf / n,
        macro_precision: sp / n,
        macro_recall: sr / n,
        loss_curves: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2], 5).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.macro_precision, m.macro_recall), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_enumerated_two_class_case() {
        let m = compute_metrics(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.macro_precision - 0.75).abs() < 1e-12);
        assert!((m.macro_recall - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((m.macro_f1 - 0.7333).abs() < 1e-4);
    }

    #[test]
    fn single_class_predictions_do_not_divide_by_zero() {
        let m = compute_metrics(&[0, 0, 0], &[0, 1, 1], 2).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-12);
        // class 1: never predicted → precision 0, recall 0.
        assert!((m.macro_recall - 0.5).abs() < 1e-12);
        assert!(m.macro_f1.is_finite());
        assert!(matches!(compute_metrics(&[0], &[2], 2), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval(seed in 0u64..500, n in 1usize..60, k in 1usize..6) {
            let mut r = stream(seed, "m");
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let m = compute_metrics(&preds, &labels, k).unwrap();
            for v in [m.accuracy, m.macro_f1, m.macro_precision, m.macro_recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
