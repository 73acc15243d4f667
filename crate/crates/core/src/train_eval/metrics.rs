use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts with the euphemistic class (1) as positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of the per-class F1 scores.
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = f1_of(precision, recall);
        // class 0 as positive: its true positives are our true negatives
        let neg_f1 = f1_of(ratio(tn, tn + fn_), ratio(tn, tn + fp));
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            macro_f1: (f1 + neg_f1) / 2.0,
        }
    }

    pub fn from_predictions(predicted: &[usize], gold: &[usize]) -> Result<Self> {
        if predicted.len() != gold.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predicted.len(),
                gold.len()
            )));
        }
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p == 1, g == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Ok(Self::from_counts(tp, fp, fn_, tn))
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// F1 from a precision/recall pair alone.
    pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
        f1_of(precision, recall)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn headline_precision_recall_give_f1() {
        let f1 = Metrics::f1_from_pr(0.818, 0.814);
        assert!((f1 - 0.816).abs() < 5e-4, "{f1}");
    }

    #[test]
    fn perfect_predictions() {
        let m = Metrics::from_predictions(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.macro_f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_counted_confusion() {
        let m = Metrics::from_counts(2, 1, 1, 0);
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_denominators_are_zero() {
        let m = Metrics::from_counts(0, 0, 0, 5);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.macro_f1, 0.5);
    }

    proptest! {
        #[test]
        fn f1_identity_is_exact(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let m = Metrics::from_counts(tp, fp, fn_, tn);
            // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn)
            let den = 2 * tp + fp + fn_;
            let exact = if den == 0 { 0.0 } else { (2 * tp) as f64 / den as f64 };
            prop_assert!((m.f1 - exact).abs() <= 1e-12);
            prop_assert_eq!(m.total(), tp + fp + fn_ + tn);
        }

        #[test]
        fn flipping_predictions_swaps_counts(pairs in proptest::collection::vec((0usize..2, 0usize..2), 0..200)) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let gold: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let flipped: Vec<usize> = pred.iter().map(|&p| 1 - p).collect();
            let a = Metrics::from_predictions(&pred, &gold).unwrap();
            let b = Metrics::from_predictions(&flipped, &gold).unwrap();
            prop_assert_eq!((b.tp, b.fn_, b.fp, b.tn), (a.fn_, a.tp, a.tn, a.fp));
            let back = Metrics::from_predictions(&flipped.iter().map(|&p| 1 - p).collect::<Vec<_>>(), &gold).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
