//! Accuracy and micro-averaged precision, recall and F1.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{truth} true labels but {pred} predictions")]
    Length { truth: usize, pred: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// One-vs-rest counts per class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub tn: Vec<usize>,
    pub total: usize,
}

pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionCounts, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::Length {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut c = ConfusionCounts {
        tp: vec![0; classes],
        fp: vec![0; classes],
        fn_: vec![0; classes],
        tn: vec![0; classes],
        total: truth.len(),
    };
    for (&t, &p) in truth.iter().zip(pred) {
        for label in [t, p] {
            if label >= classes {
                return Err(MetricsError::LabelOutOfRange { label, classes });
            }
        }
        if t == p {
            c.tp[t] += 1;
        } else {
            c.fp[p] += 1;
            c.fn_[t] += 1;
        }
    }
    for l in 0..classes {
        c.tn[l] = c.total - c.tp[l] - c.fp[l] - c.fn_[l];
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when any score had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn micro_scores(c: &ConfusionCounts) -> MicroScores {
    let tp: usize = c.tp.iter().sum();
    let fp: usize = c.fp.iter().sum();
    let fn_: usize = c.fn_.iter().sum();
    let mut degenerate = false;
    MicroScores {
        precision: ratio(tp, tp + fp, &mut degenerate),
        recall: ratio(tp, tp + fn_, &mut degenerate),
        f1: ratio(2 * tp, 2 * tp + fp + fn_, &mut degenerate),
        degenerate,
    }
}

/// Fraction of matching labels; 0 for empty input.
pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::Length {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_correct_has_no_errors() {
        let c = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert!(c.fp.iter().chain(&c.fn_).all(|&v| v == 0));
        let s = micro_scores(&c);
        assert_eq!((s.precision, s.recall, s.f1, s.degenerate), (1.0, 1.0, 1.0, false));
    }

    #[test]
    fn swapped_pair_by_hand() {
        let c = confusion(&[0, 1], &[1, 0], 2).unwrap();
        assert_eq!(c.tp, [0, 0]);
        assert_eq!((c.fp[0], c.fn_[0]), (1, 1));
        assert_eq!(c.tn, [0, 0]);
    }

    #[test]
    fn empty_input_is_degenerate() {
        let c = confusion(&[], &[], 3).unwrap();
        assert_eq!(c.tp, [0, 0, 0]);
        let s = micro_scores(&c);
        assert!(s.degenerate);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn two_of_three() {
        let (t, p) = ([0, 1, 2], [0, 1, 1]);
        assert_eq!(accuracy(&t, &p).unwrap(), 2.0 / 3.0);
        assert_eq!(micro_scores(&confusion(&t, &p, 3).unwrap()).f1, 2.0 / 3.0);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(confusion(&[0], &[3], 3), Err(MetricsError::LabelOutOfRange { label: 3, .. })));
        assert!(accuracy(&[0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn one_vs_rest_counts_are_consistent(pairs in prop::collection::vec((0usize..4, 0usize..4), 0..30)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let c = confusion(&t, &p, 4).unwrap();
            for l in 0..4 {
                prop_assert_eq!(c.tp[l] + c.fn_[l], t.iter().filter(|&&x| x == l).count());
                prop_assert_eq!(c.tp[l] + c.fp[l] + c.fn_[l] + c.tn[l], t.len());
            }
            let correct = t.iter().zip(&p).filter(|(a, b)| a == b).count();
            prop_assert_eq!(c.tp.iter().sum::<usize>(), correct);
            let s = micro_scores(&c);
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
