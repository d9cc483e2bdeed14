//! Confusion-matrix metrics and the Dice overlap score.
//!
//! Zero denominators yield `None` rather than a conventional zero.

use serde::{Deserialize, Serialize};

use crate::dataio::MaskSlice;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    #[serde(rename = "tp")]
    pub true_pos: u64,
    #[serde(rename = "fp")]
    pub false_pos: u64,
    #[serde(rename = "fn")]
    pub false_neg: u64,
    #[serde(rename = "tn")]
    pub true_neg: u64,
}

impl ConfusionMatrix {
    pub fn new(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        ConfusionMatrix { true_pos, false_pos, false_neg, true_neg }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, true) => self.false_neg += 1,
            (false, false) => self.true_neg += 1,
        }
    }
}

/// Table columns. `dice` is only populated in a segmentation context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub dice: Option<f64>,
}

pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset("confusion matrix needs at least one decision".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        if p > 1 || l > 1 {
            return Err(Error::OutOfRange(format!("non-binary entry (prediction {p}, label {l})")));
        }
        cm.record(p == 1, l == 1);
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let (tp, fp, fneg, tn) = (cm.true_pos, cm.false_pos, cm.false_neg, cm.true_neg);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * r * p / (r + p)),
        _ => None,
    };
    MetricsReport {
        accuracy: ratio(tp + tn, tp + fp + fneg + tn),
        f1,
        precision,
        recall,
        specificity: ratio(tn, tn + fp),
        dice: None,
    }
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &MaskSlice, truth: &MaskSlice) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!("dice: {:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let (mut inter, mut sp, mut sg) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.pixels().iter().zip(truth.pixels()) {
        if p > 1 || g > 1 {
            return Err(Error::OutOfRange("dice needs binary masks".into()));
        }
        inter += u64::from(p & g);
        sp += u64::from(p);
        sg += u64::from(g);
    }
    Ok(if sp + sg == 0 { 1.0 } else { 2.0 * inter as f64 / (sp + sg) as f64 })
}

/// Dice aggregated three ways over a set of (patient, prediction, truth) slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    /// Mean over slices with non-empty truth, then mean over patients.
    pub slice_then_patient: Option<f64>,
    /// Mean over all slices with non-empty truth.
    pub slice_mean: Option<f64>,
    /// Global pixel-pooled Dice.
    pub pooled: Option<f64>,
}

pub fn dice_summary<'a, I>(slices: I) -> Result<DiceSummary>
where
    I: IntoIterator<Item = (&'a str, &'a MaskSlice, &'a MaskSlice)>,
{
    let mut per_patient: Vec<(&str, f64, usize)> = Vec::new();
    let (mut all_sum, mut all_n) = (0.0, 0usize);
    let (mut inter, mut total) = (0u64, 0u64);
    for (patient, pred, truth) in slices {
        let d = dice(pred, truth)?;
        inter += pred.pixels().iter().zip(truth.pixels()).map(|(&p, &g)| u64::from(p & g)).sum::<u64>();
        total += pred.area() as u64 + truth.area() as u64;
        if truth.area() == 0 {
            continue;
        }
        all_sum += d;
        all_n += 1;
        match per_patient.iter_mut().find(|(p, ..)| *p == patient) {
            Some(entry) => {
                entry.1 += d;
                entry.2 += 1;
            }
            None => per_patient.push((patient, d, 1)),
        }
    }
    let slice_then_patient = (!per_patient.is_empty())
        .then(|| per_patient.iter().map(|(_, s, n)| s / *n as f64).sum::<f64>() / per_patient.len() as f64);
    Ok(DiceSummary {
        slice_then_patient,
        slice_mean: (all_n > 0).then(|| all_sum / all_n as f64),
        pooled: (total > 0).then(|| 2.0 * inter as f64 / total as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> MaskSlice {
        let mut px = vec![0u8; h * w];
        on.iter().for_each(|&i| px[i] = 1);
        MaskSlice::new(h, w, px).unwrap()
    }

    #[test]
    fn confusion_enumeration() {
        let cm = confusion(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(1, 1, 1, 1));
        let cm = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((cm.false_pos, cm.false_neg), (0, 0));
        let cm = confusion(&[0, 1, 0], &[1, 0, 1]).unwrap();
        assert_eq!((cm.true_pos, cm.true_neg), (0, 0));
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[2], &[1]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn worked_example() {
        let m = classification_metrics(&ConfusionMatrix::new(3, 1, 2, 4));
        assert!((m.accuracy.unwrap() - 0.70).abs() < 1e-12);
        assert!((m.precision.unwrap() - 0.75).abs() < 1e-12);
        assert!((m.recall.unwrap() - 0.60).abs() < 1e-12);
        assert!((m.f1.unwrap() - 0.6667).abs() < 1e-4);
        assert!((m.specificity.unwrap() - 0.80).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = classification_metrics(&ConfusionMatrix::new(5, 0, 0, 5));
        for v in [m.accuracy, m.f1, m.precision, m.recall, m.specificity] {
            assert_eq!(v, Some(1.0));
        }
        let m = classification_metrics(&ConfusionMatrix::new(0, 0, 3, 7));
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(m.f1, None);
    }

    #[test]
    fn dice_cases() {
        let a = mask(4, 4, &[0, 1, 2]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(4, 4, &[8, 9])).unwrap(), 0.0);
        assert_eq!(dice(&mask(4, 4, &[0, 1]), &mask(4, 4, &[1, 2])).unwrap(), 0.5);
        assert_eq!(dice(&mask(4, 4, &[]), &mask(4, 4, &[])).unwrap(), 1.0);
        assert!(dice(&mask(4, 4, &[]), &mask(4, 5, &[])).is_err());
    }

    #[test]
    fn summary_averages_patients_first() {
        let full = mask(2, 2, &[0, 1, 2, 3]);
        let half = mask(2, 2, &[0, 1]);
        let empty = mask(2, 2, &[]);
        let slices = [("a", &full, &full), ("a", &full, &full), ("b", &empty, &half), ("c", &full, &empty)];
        let s = dice_summary(slices.iter().map(|(p, x, y)| (*p, *x, *y))).unwrap();
        assert_eq!(s.slice_then_patient, Some(0.5));
        assert!((s.slice_mean.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // pooled: inter 8, sizes 12 + 10
        assert!((s.pooled.unwrap() - 16.0 / 22.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn f1_within_harmonic_bounds(tp in 0u64..50, fp in 0u64..50, fneg in 0u64..50, tn in 0u64..50) {
            prop_assume!(tp + fp + fneg + tn > 0);
            let m = classification_metrics(&ConfusionMatrix::new(tp, fp, fneg, tn));
            for v in [m.accuracy, m.f1, m.precision, m.recall, m.specificity].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f1) {
                prop_assert!(f <= p.max(r) + 1e-15 && f >= p.min(r) - 1e-15);
            }
            prop_assert_eq!(m.accuracy.unwrap(), (tp + tn) as f64 / (tp + fp + fneg + tn) as f64);
        }

        #[test]
        fn permutation_invariant(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..40), rot in 0usize..40) {
            let (p, l): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
            let k = rot % p.len();
            let (mut p2, mut l2) = (p.clone(), l.clone());
            p2.rotate_left(k);
            l2.rotate_left(k);
            prop_assert_eq!(confusion(&p, &l).unwrap(), confusion(&p2, &l2).unwrap());
        }
    }
}
