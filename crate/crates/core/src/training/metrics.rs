//! Ranking and thresholded classification metrics for binary labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_binary(labels: &[f64]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Probability that a random positive scores above a random negative, with
/// ties counted as one half.
///
/// Computed from average ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_binary(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes among the labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += avg * positives as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-class counts for binary predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(preds: &[f64], labels: &[f64]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        check_binary(preds)?;
        check_binary(labels)?;
        let mut c = Confusion::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == 1.0, l == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// Counts with the roles of the classes swapped.
    pub fn flipped(self) -> Self {
        Confusion {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    /// Precision of the positive class; 0 when nothing is predicted positive.
    pub fn precision(self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    /// Recall of the positive class; 0 when there are no positives.
    pub fn recall(self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// F1 of the positive class; 0 when the class is neither predicted nor present.
    pub fn f1(self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Precision, recall and F1 for class 0 and class 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
}

pub fn class_scores(preds: &[f64], labels: &[f64]) -> Result<ClassScores> {
    let c1 = Confusion::new(preds, labels)?;
    let c0 = c1.flipped();
    Ok(ClassScores {
        precision: [c0.precision(), c1.precision()],
        recall: [c0.recall(), c1.recall()],
        f1: [c0.f1(), c1.f1()],
    })
}

/// Unweighted mean of the class-0 and class-1 F1 scores.
pub fn macro_f1(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("macro F1 of an empty set".into()));
    }
    let s = class_scores(preds, labels)?;
    Ok((s.f1[0] + s.f1[1]) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.3; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 1.0);
        let v = macro_f1(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((v - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let v = macro_f1(&[1.0; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_monotone_maps(
            data in prop::collection::vec((-5i32..5, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64).collect();
            let mut labels: Vec<f64> = data.iter().map(|(_, l)| *l as u8 as f64).collect();
            labels[0] = 0.0;
            labels[1] = 1.0;
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn macro_f1_is_symmetric_in_classes(
            data in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)
        ) {
            let p: Vec<f64> = data.iter().map(|(a, _)| *a as u8 as f64).collect();
            let l: Vec<f64> = data.iter().map(|(_, b)| *b as u8 as f64).collect();
            let pf: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
            let lf: Vec<f64> = l.iter().map(|x| 1.0 - x).collect();
            prop_assert_eq!(macro_f1(&p, &l).unwrap(), macro_f1(&pf, &lf).unwrap());
        }
    }
}
