/// Outcomes of detection trials.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    /// Records one trial.
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when either is undefined.
pub fn f1_score(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fp == 0 || c.tp + c.fn_ == 0 {
        return 0.0;
    }
    let (p, r) = (c.precision(), c.recall());
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        assert_eq!(f1_score(&ConfusionCounts::new(100, 0, 0, 0)), 1.0);
        assert_eq!(f1_score(&ConfusionCounts::new(0, 0, 0, 100)), 0.0);
        assert_eq!(f1_score(&ConfusionCounts::default()), 0.0);
        // precision 1, recall 0.6: 2 * 0.6 / 1.6
        assert!((f1_score(&ConfusionCounts::new(60, 0, 0, 40)) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn record_counts() {
        let mut c = ConfusionCounts::default();
        for (p, a) in [(true, true), (true, false), (false, false), (false, true), (true, true)] {
            c.record(p, a);
        }
        assert_eq!(c, ConfusionCounts::new(2, 1, 1, 1));
        assert_eq!(c.total(), 5);
    }

    proptest! {
        #[test]
        fn f1_in_unit_interval(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
            let f = f1_score(&ConfusionCounts::new(tp, fp, tn, fn_));
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn f1_symmetric_under_relabeling(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            // Swapping which address counts as positive swaps fp and fn.
            let a = f1_score(&ConfusionCounts::new(tp, fp, 0, fn_));
            let b = f1_score(&ConfusionCounts::new(tp, fn_, 0, fp));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
