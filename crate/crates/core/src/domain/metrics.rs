use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn from_predictions<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (bool, bool)>,
    {
        let mut c = ConfusionCounts::default();
        for (pred, truth) in pairs {
            c.record(pred, truth);
        }
        c
    }

    pub fn record(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1, sensitivity and specificity. Zero denominators yield 0.
pub fn metrics_from_confusion(c: &ConfusionCounts) -> (f64, f64, f64) {
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let sens = ratio(c.tp, c.tp + c.fn_);
    let spec = ratio(c.tn, c.tn + c.fp);
    (f1, sens, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Mean accrued test time per patient, minutes.
    pub avg_time_cost: f64,
    pub confusion: ConfusionCounts,
}

impl MetricReport {
    pub fn new(confusion: ConfusionCounts, auc: f64, avg_time_cost: f64) -> Self {
        let (f1, sensitivity, specificity) = metrics_from_confusion(&confusion);
        MetricReport {
            f1,
            auc,
            sensitivity,
            specificity,
            avg_time_cost,
            confusion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_vectors() {
        let (f1, s, p) = metrics_from_confusion(&ConfusionCounts::new(3, 1, 2, 4));
        assert_eq!(f1, 6.0 / 9.0);
        assert_eq!(s, 0.6);
        assert_eq!(p, 0.8);

        assert_eq!(
            metrics_from_confusion(&ConfusionCounts::new(0, 0, 0, 10)),
            (0.0, 0.0, 1.0)
        );
        assert_eq!(
            metrics_from_confusion(&ConfusionCounts::new(5, 0, 0, 5)),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn report_is_consistent_with_counts() {
        let c = ConfusionCounts::from_predictions([(true, true), (true, false), (false, false)]);
        assert_eq!(c, ConfusionCounts::new(1, 1, 0, 1));
        let r = MetricReport::new(c, 0.5, 12.0);
        assert_eq!(r.f1, 2.0 / 3.0);
        assert_eq!(r.confusion.total(), 3);
    }

    proptest! {
        #[test]
        fn metrics_are_scale_free(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50, k in 1u64..20) {
            let a = metrics_from_confusion(&ConfusionCounts::new(tp, fp, fn_, tn));
            let b = metrics_from_confusion(&ConfusionCounts::new(tp * k, fp * k, fn_ * k, tn * k));
            prop_assert!((a.0 - b.0).abs() < 1e-12);
            prop_assert!((a.1 - b.1).abs() < 1e-12);
            prop_assert!((a.2 - b.2).abs() < 1e-12);
            for v in [a.0, a.1, a.2] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
