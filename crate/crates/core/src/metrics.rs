//! Confusion-matrix metrics for binary classification (1 = epileptic).

use std::fmt;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_positive: f64,
    pub f1_negative: f64,
}

/// `2·tp / (2·tp + fp + fn)`, defined as 0 when the class never appears
/// in either predictions or labels.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Metrics {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1_positive: f1(tp, fp, fn_),
            // negative class: its true positives are tn, its false positives are fn
            f1_negative: f1(tn, fn_, fp),
        }
    }

    /// Thresholds probabilities (`p >= threshold` is positive).
    pub fn from_probabilities(probs: &[f64], labels: &[u8], threshold: f64) -> Self {
        assert_eq!(probs.len(), labels.len(), "one label per prediction");
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= threshold, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn f1_macro(&self) -> f64 {
        (self.f1_positive + self.f1_negative) / 2.0
    }

    /// F1 of whichever class has more true examples.
    pub fn f1_majority(&self) -> f64 {
        if self.tn + self.fp >= self.tp + self.fn_ {
            self.f1_negative
        } else {
            self.f1_positive
        }
    }

    pub fn predicted_positive(&self) -> usize {
        self.tp + self.fp
    }

    /// `key=value` report, one field per line.
    pub fn report(&self) -> String {
        format!(
            "total={}\ntp={}\nfp={}\ntn={}\nfn={}\naccuracy={:.6}\nprecision={:.6}\nrecall={:.6}\nf1_pos={:.6}\nf1_neg={:.6}\nf1_macro={:.6}\n",
            self.total(),
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            self.accuracy,
            self.precision,
            self.recall,
            self.f1_positive,
            self.f1_negative,
            self.f1_macro(),
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy  {:.4}", self.accuracy)?;
        writeln!(f, "precision {:.4}", self.precision)?;
        writeln!(f, "recall    {:.4}", self.recall)?;
        writeln!(f, "f1_pos    {:.4}", self.f1_positive)?;
        writeln!(f, "f1_neg    {:.4}", self.f1_negative)?;
        writeln!(f, "f1_macro  {:.4}", self.f1_macro())?;
        writeln!(f, "confusion matrix (rows = true, cols = predicted)")?;
        writeln!(f, "  true_pos (epileptic, predicted epileptic)        = {}", self.tp)?;
        writeln!(f, "  false_neg (epileptic, predicted non-epileptic)   = {}", self.fn_)?;
        writeln!(f, "  false_pos (non-epileptic, predicted epileptic)   = {}", self.fp)?;
        write!(f, "  true_neg (non-epileptic, predicted non-epileptic) = {}", self.tn)
    }
}
