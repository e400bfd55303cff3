//! Voxel confusion counts and the six overlap metrics.

use std::fmt::Write as _;
use std::ops::Add;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

/// Tallies a binary prediction against a binary truth mask.
pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("confusion", format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == 1.0, t == 1.0) {
            _ if (p != 0.0 && p != 1.0) || (t != 0.0 && t != 1.0) => {
                return Err(Error::invalid("confusion", format!("masks must be binary, saw {p} / {t}")));
            }
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub specificity: f64,
    pub iou: f64,
    pub mcc: f64,
}

/// Ratio with an empty denominator meaning "nothing to get wrong".
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// All six metrics. Empty denominators give 1 for the ratio metrics and 0
/// for MCC.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    let (tp, fp, fn_, tn) = (c.tp, c.fp, c.fn_, c.tn);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    let mcc = if factors.contains(&0) {
        0.0
    } else {
        let num = tp as f64 * tn as f64 - fp as f64 * fn_ as f64;
        num / factors.iter().map(|&f| f as f64).product::<f64>().sqrt()
    };
    MetricsReport {
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        accuracy: ratio(tp + tn, c.total()),
        precision: ratio(tp, tp + fp),
        specificity: ratio(tn, tn + fp),
        iou: ratio(tp, tp + fp + fn_),
        mcc,
    }
}

impl MetricsReport {
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let s = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            dice: s(|r| r.dice),
            accuracy: s(|r| r.accuracy),
            precision: s(|r| r.precision),
            specificity: s(|r| r.specificity),
            iou: s(|r| r.iou),
            mcc: s(|r| r.mcc),
        }
    }

    fn row(&self, name: &str) -> String {
        format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.dice, self.accuracy, self.precision, self.specificity, self.iou, self.mcc
        )
    }
}

/// Per-volume metrics plus their mean.
#[derive(Debug, Clone, Default)]
pub struct MetricsTable {
    pub rows: Vec<(String, MetricsReport)>,
}

pub const CSV_HEADER: &str = "img,Dice,Accuracy,Precision,Specificity,IOU,MCC";

impl MetricsTable {
    pub fn push(&mut self, name: impl Into<String>, r: MetricsReport) {
        self.rows.push((name.into(), r));
    }

    pub fn average(&self) -> MetricsReport {
        MetricsReport::mean(&self.rows.iter().map(|(_, r)| *r).collect::<Vec<_>>())
    }

    /// Comma-separated table with a final `AVE` row (omitted when empty).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (n, r) in &self.rows {
            let _ = writeln!(s, "{}", r.row(n));
        }
        if !self.rows.is_empty() {
            let _ = writeln!(s, "{}", self.average().row("AVE"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rand_tensor;

    #[test]
    fn confusion_basics() {
        let ones = Tensor::ones(&[8]);
        assert_eq!(confusion(&ones, &ones).unwrap(), ConfusionCounts { tp: 8, ..Default::default() });
        let t = rand_tensor(&[10], 1).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let c = confusion(&t.map(|v| 1.0 - v), &t).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&Tensor::full(&[2], 0.5), &ones.reshape(&[8]).unwrap()).is_err());
        assert!(confusion(&Tensor::full(&[8], 0.5), &ones).is_err());
    }

    #[test]
    fn worked_example() {
        let r = compute_metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 4 });
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(r.dice, 2.0 / 3.0));
        assert!(close(r.accuracy, 0.75));
        assert!(close(r.precision, 2.0 / 3.0));
        assert!(close(r.specificity, 0.8));
        assert!(close(r.iou, 0.5));
        assert!(close(r.mcc, 7.0 / 15.0));
    }

    #[test]
    fn degenerate_counts() {
        let r = compute_metrics(&ConfusionCounts { tp: 8, ..Default::default() });
        assert_eq!((r.dice, r.precision, r.iou, r.mcc), (1.0, 1.0, 1.0, 0.0));
        let r = compute_metrics(&ConfusionCounts { tn: 8, ..Default::default() });
        assert_eq!((r.dice, r.iou, r.specificity, r.accuracy, r.mcc), (1.0, 1.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn iou_dice_identity_and_order() {
        for seed in 0..50 {
            let p = rand_tensor(&[5, 5], seed).map(|v| if v > 0.3 { 1.0 } else { 0.0 });
            let t = rand_tensor(&[5, 5], seed + 100).map(|v| if v > -0.1 { 1.0 } else { 0.0 });
            let r = compute_metrics(&confusion(&p, &t).unwrap());
            assert!((r.iou - r.dice / (2.0 - r.dice)).abs() < 1e-12);
            assert!(0.0 <= r.iou && r.iou <= r.dice && r.dice <= 1.0);
            assert!((-1.0..=1.0).contains(&r.mcc));
        }
    }

    #[test]
    fn csv_layout() {
        let mut t = MetricsTable::default();
        assert_eq!(t.to_csv(), format!("{CSV_HEADER}\n"));
        t.push("a.nii", compute_metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 4 }));
        t.push("b.nii", compute_metrics(&ConfusionCounts { tp: 8, ..Default::default() }));
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("a.nii,0.666667,0.750000"));
        assert!(lines[3].starts_with("AVE,0.833333"));
    }
}
