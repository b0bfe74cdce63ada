//! Pixel-level segmentation metrics.

use std::fmt;
use std::ops::{Add, Div, Mul};

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Column order used in every report: recall, specificity, precision, Dice,
/// IoU (polyp), IoU (background), mean IoU, accuracy.
pub const REPORT_COLUMNS: [&str; 8] = ["recall", "specificity", "precision", "dice", "iou_p", "iou_b", "miou", "accuracy"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

/// Value type a report is computed in: `f64` for reporting, exact
/// rationals for checking algebraic identities.
pub trait Fraction:
    Clone + PartialEq + fmt::Debug + Add<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    /// `num/den`, with `0/0` read as a perfect score.
    fn ratio(num: u64, den: u64) -> Self;
}

impl Fraction for f64 {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }
}

impl Fraction for Ratio<u128> {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Ratio::from_integer(1)
        } else {
            Ratio::new(num as u128, den as u128)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport<F = f64> {
    pub recall: F,
    pub specificity: F,
    pub precision: F,
    pub dice: F,
    pub iou_p: F,
    pub iou_b: F,
    pub miou: F,
    pub accuracy: F,
}

impl<F: Fraction> MetricReport<F> {
    /// Values in [`REPORT_COLUMNS`] order.
    pub fn values(&self) -> [F; 8] {
        [
            self.recall.clone(),
            self.specificity.clone(),
            self.precision.clone(),
            self.dice.clone(),
            self.iou_p.clone(),
            self.iou_b.clone(),
            self.miou.clone(),
            self.accuracy.clone(),
        ]
    }

    pub fn from_values(v: [F; 8]) -> Self {
        let [recall, specificity, precision, dice, iou_p, iou_b, miou, accuracy] = v;
        Self { recall, specificity, precision, dice, iou_p, iou_b, miou, accuracy }
    }
}

impl MetricReport {
    /// Arithmetic mean of several reports, summed in the given order.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        MetricReport::from_values(acc.map(|a| a / reports.len() as f64))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, v)) in REPORT_COLUMNS.iter().zip(self.values()).enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{name}={:.2}", 100.0 * v)?;
        }
        Ok(())
    }
}

/// `logit > threshold` per pixel (strict, so a zero logit maps to 0).
pub fn binarize<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Vec<bool> {
    let th = T::of(threshold);
    logits.data().iter().map(|v| *v > th).collect()
}

pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape("confusion", format!("{} vs {} pixels", pred.len(), truth.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn report(c: &ConfusionCounts) -> MetricReport {
    report_as(c)
}

/// The eight metrics from raw counts, computed in `F`.
pub fn report_as<F: Fraction>(c: &ConfusionCounts) -> MetricReport<F> {
    let iou_p = F::ratio(c.tp, c.tp + c.fp + c.fn_);
    let iou_b = F::ratio(c.tn, c.tn + c.fp + c.fn_);
    MetricReport {
        recall: F::ratio(c.tp, c.tp + c.fn_),
        specificity: F::ratio(c.tn, c.tn + c.fp),
        precision: F::ratio(c.tp, c.tp + c.fp),
        dice: F::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        miou: (iou_p.clone() + iou_b.clone()) / F::ratio(2, 1),
        iou_p,
        iou_b,
        accuracy: F::ratio(c.tp + c.tn, c.total()),
    }
}

/// How per-image results combine into a dataset figure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean of per-image reports.
    #[default]
    PerImage,
    /// One report from summed counts.
    Pooled,
}

pub fn aggregate(counts: &[ConfusionCounts], mode: Aggregation) -> MetricReport {
    match mode {
        Aggregation::PerImage => MetricReport::mean(&counts.iter().map(report).collect::<Vec<_>>()),
        Aggregation::Pooled => report(&counts.iter().copied().fold(ConfusionCounts::default(), |a, b| a + b)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn binarize_is_strict() {
        let t = Tensor::<f32>::from_f64([3], &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(binarize(&t, 0.0), vec![false, false, true]);
    }

    #[test]
    fn perfect_prediction() {
        let m = mask(&[0, 1, 1, 0, 0, 0]);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 0, tn: 4, fn_: 0 });
        assert!(report(&c).values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn inverted_prediction() {
        let m = mask(&[0, 1, 1, 0]);
        let inv: Vec<bool> = m.iter().map(|b| !b).collect();
        let c = confusion(&inv, &m).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn half_overlap_on_sixteen_pixels() {
        let mut pred = vec![false; 16];
        let mut truth = vec![false; 16];
        pred[0] = true;
        pred[1] = true;
        truth[1] = true;
        truth[2] = true;
        let r = report(&confusion(&pred, &truth).unwrap());
        assert_eq!(r.dice, 0.5);
        assert_eq!(r.iou_p, 1.0 / 3.0);
    }

    #[test]
    fn empty_masks_score_one() {
        let m = vec![false; 9];
        let r = report(&confusion(&m, &m).unwrap());
        assert_eq!(r.dice, 1.0);
        assert_eq!(r.precision, 1.0);
    }

    #[test]
    fn pooled_differs_from_per_image() {
        let a = ConfusionCounts { tp: 1, fp: 0, tn: 0, fn_: 0 };
        let b = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 3 };
        assert_eq!(aggregate(&[a, b], Aggregation::PerImage).recall, 0.5);
        assert_eq!(aggregate(&[a, b], Aggregation::Pooled).recall, 0.25);
    }

    proptest! {
        #[test]
        fn dice_iou_identity(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let c = ConfusionCounts { tp, fp, tn, fn_ };
            let exact: MetricReport<Ratio<u128>> = report_as(&c);
            let one = Ratio::from_integer(1);
            let two = Ratio::from_integer(2);
            prop_assert_eq!(exact.dice, two * exact.iou_p / (one + exact.iou_p));
            prop_assert_eq!(exact.miou, (exact.iou_p + exact.iou_b) / two);
            let r = report(&c);
            prop_assert!((r.dice - 2.0 * r.iou_p / (1.0 + r.iou_p)).abs() < 1e-15);
            prop_assert_eq!(r.miou, (r.iou_p + r.iou_b) / 2.0);
            for v in r.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn swapping_roles_swaps_precision_and_recall(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
            let (p, t): (Vec<bool>, Vec<bool>) = bits.into_iter().unzip();
            let a = report(&confusion(&p, &t).unwrap());
            let b = report(&confusion(&t, &p).unwrap());
            prop_assert_eq!(a.dice, b.dice);
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
        }
    }
}
