//! Challenge metric: per-class F1 and their unweighted average (macro F1),
//! plus confusion bookkeeping. COVID (class 1) is the positive class.
//!
//! Macro F1 is always computed from pooled confusion counts, never averaged
//! over batches. A class whose F1 denominator is zero scores 0.

use crate::data::{ClassLabel, DatasetManifest, Provenance};
use crate::net::ModelState;
use crate::pseudo::{self, PseudoError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {predictions} predictions vs {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("invalid label {0}: expected 0 or 1")]
    InvalidLabel(i64),
    #[error("empty input: need at least one scored sample")]
    EmptyInput,
    #[error("unlabeled sample: {0}")]
    UnlabeledSample(String),
    #[error(transparent)]
    Predict(#[from] PseudoError),
}

/// 2x2 tally with COVID (class 1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionCounts,
    pub f1_covid: f64,
    pub f1_non_covid: f64,
    pub macro_f1: f64,
    pub n: u64,
}

/// Tallies predictions against truths.
pub fn confusion(
    predictions: &[ClassLabel],
    truths: &[ClassLabel],
) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut counts = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        false_neg: 0,
        true_neg: 0,
    };
    for (&pred, &truth) in predictions.iter().zip(truths) {
        match (pred, truth) {
            (ClassLabel::Covid, ClassLabel::Covid) => counts.true_pos += 1,
            (ClassLabel::Covid, ClassLabel::NonCovid) => counts.false_pos += 1,
            (ClassLabel::NonCovid, ClassLabel::Covid) => counts.false_neg += 1,
            (ClassLabel::NonCovid, ClassLabel::NonCovid) => counts.true_neg += 1,
        }
    }
    Ok(counts)
}

/// Per-class F1: `2tp / (2tp + fp + fn)` for COVID and the mirrored form for
/// non-COVID. A zero denominator yields 0.
pub fn f1_per_class(c: &ConfusionCounts) -> (f64, f64) {
    let safe = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let f1_covid = safe(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg);
    let f1_non_covid = safe(2 * c.true_neg, 2 * c.true_neg + c.false_neg + c.false_pos);
    (f1_covid, f1_non_covid)
}

/// Unweighted mean of the two class F1 scores.
pub fn macro_f1(predictions: &[ClassLabel], truths: &[ClassLabel]) -> Result<f64, MetricsError> {
    let counts = confusion(predictions, truths)?;
    let (f1_covid, f1_non_covid) = f1_per_class(&counts);
    Ok((f1_covid + f1_non_covid) / 2.0)
}

/// Full report from prediction/truth label lists.
pub fn report(
    predictions: &[ClassLabel],
    truths: &[ClassLabel],
) -> Result<MetricsReport, MetricsError> {
    let counts = confusion(predictions, truths)?;
    let (f1_covid, f1_non_covid) = f1_per_class(&counts);
    Ok(MetricsReport {
        confusion: counts,
        f1_covid,
        f1_non_covid,
        macro_f1: (f1_covid + f1_non_covid) / 2.0,
        n: counts.total(),
    })
}

/// Parses integer class codes (0/1) into labels; used by the offline `score`
/// command.
pub fn labels_from_codes(codes: &[i64]) -> Result<Vec<ClassLabel>, MetricsError> {
    codes
        .iter()
        .map(|&c| {
            usize::try_from(c)
                .ok()
                .and_then(ClassLabel::from_index)
                .ok_or(MetricsError::InvalidLabel(c))
        })
        .collect()
}

/// Scores a trained model on a fully human-labeled manifest: argmax
/// predictions in EVAL mode against the recorded truths. Deterministic.
pub fn evaluate(
    state: &ModelState,
    manifest: &DatasetManifest,
    manifest_path: &Path,
) -> Result<MetricsReport, MetricsError> {
    for entry in &manifest.entries {
        if entry.label.provenance != Provenance::Human || entry.label.label.is_none() {
            return Err(MetricsError::UnlabeledSample(entry.id.clone()));
        }
    }
    let probs = pseudo::predict_proba(state, manifest, manifest_path)?;
    let predictions: Vec<ClassLabel> = probs
        .iter()
        .map(|(_, p)| {
            if p[1] > p[0] {
                ClassLabel::Covid
            } else {
                ClassLabel::NonCovid
            }
        })
        .collect();
    let truths: Vec<ClassLabel> = manifest
        .entries
        .iter()
        .map(|e| e.label.label.expect("checked above"))
        .collect();
    report(&predictions, &truths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Precision/recall/harmonic-mean oracle, decomposed form. Zero
    /// precision+recall yields 0.
    fn f1_oracle(tp: u64, fp: u64, fne: u64) -> f64 {
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fne == 0 {
            0.0
        } else {
            tp as f64 / (tp + fne) as f64
        };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    fn macro_oracle(c: &ConfusionCounts) -> f64 {
        // Non-COVID's F1 mirrors the confusion matrix: its "tp" is tn.
        let covid = f1_oracle(c.true_pos, c.false_pos, c.false_neg);
        let non_covid = f1_oracle(c.true_neg, c.false_neg, c.false_pos);
        (covid + non_covid) / 2.0
    }

    fn labels(codes: &[usize]) -> Vec<ClassLabel> {
        codes
            .iter()
            .map(|&c| ClassLabel::from_index(c).unwrap())
            .collect()
    }

    #[test]
    fn confusion_perfect_tally() {
        let l = labels(&[1, 1, 0]);
        let c = confusion(&l, &l).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 2,
                false_pos: 0,
                false_neg: 0,
                true_neg: 1
            }
        );
    }

    #[test]
    fn confusion_all_missed_positives() {
        let c = confusion(&labels(&[0, 0]), &labels(&[1, 1])).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 0,
                false_pos: 0,
                false_neg: 2,
                true_neg: 0
            }
        );
    }

    #[test]
    fn confusion_counts_conserve_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let preds: Vec<ClassLabel> = (0..50)
            .map(|_| ClassLabel::from_index(rng.random_range(0..2)).unwrap())
            .collect();
        let truths: Vec<ClassLabel> = (0..50)
            .map(|_| ClassLabel::from_index(rng.random_range(0..2)).unwrap())
            .collect();
        let c = confusion(&preds, &truths).unwrap();
        assert_eq!(c.total(), 50);
    }

    #[test]
    fn confusion_rejects_length_mismatch_and_empty() {
        assert!(matches!(
            confusion(&labels(&[1]), &labels(&[1, 0])),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(confusion(&[], &[]), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn f1_perfect_classifier() {
        let c = ConfusionCounts {
            true_pos: 10,
            false_pos: 0,
            false_neg: 0,
            true_neg: 10,
        };
        assert_eq!(f1_per_class(&c), (1.0, 1.0));
    }

    #[test]
    fn f1_zero_support_positive_predictions() {
        let c = ConfusionCounts {
            true_pos: 0,
            false_pos: 0,
            false_neg: 5,
            true_neg: 5,
        };
        let (covid, non_covid) = f1_per_class(&c);
        assert_eq!(covid, 0.0);
        assert_abs_diff_eq!(non_covid, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn f1_matches_decomposed_oracle_on_random_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let c = ConfusionCounts {
                true_pos: rng.random_range(0..40),
                false_pos: rng.random_range(0..40),
                false_neg: rng.random_range(0..40),
                true_neg: rng.random_range(0..40),
            };
            let (covid, non_covid) = f1_per_class(&c);
            assert_abs_diff_eq!(covid, f1_oracle(c.true_pos, c.false_pos, c.false_neg), epsilon = 1e-12);
            assert_abs_diff_eq!(
                non_covid,
                f1_oracle(c.true_neg, c.false_neg, c.false_pos),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn macro_f1_perfect_predictions() {
        let l = labels(&[1, 0, 1, 1, 0]);
        assert_eq!(macro_f1(&l, &l).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_all_non_covid_on_validation_composition() {
        // 65 COVID / 113 non-COVID truths, constant non-COVID predictions.
        let truths = labels(&[vec![1usize; 65], vec![0usize; 113]].concat());
        let preds = labels(&[0usize; 178].map(|v| v).to_vec());
        let value = macro_f1(&preds, &truths).unwrap();
        let c = confusion(&preds, &truths).unwrap();
        assert_abs_diff_eq!(value, macro_oracle(&c), epsilon = 1e-15);
        assert_abs_diff_eq!(value, 113.0 / 291.0, epsilon = 1e-15);
    }

    #[test]
    fn macro_f1_symmetric_under_label_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds: Vec<usize> = (0..64).map(|_| rng.random_range(0..2)).collect();
        let truths: Vec<usize> = (0..64).map(|_| rng.random_range(0..2)).collect();
        let swap = |v: &[usize]| v.iter().map(|&c| 1 - c).collect::<Vec<_>>();
        let direct = macro_f1(&labels(&preds), &labels(&truths)).unwrap();
        let swapped = macro_f1(&labels(&swap(&preds)), &labels(&swap(&truths))).unwrap();
        assert_abs_diff_eq!(direct, swapped, epsilon = 1e-15);
    }

    #[test]
    fn report_invariant_macro_is_mean_of_class_f1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(1..200);
            let preds: Vec<ClassLabel> = (0..n)
                .map(|_| ClassLabel::from_index(rng.random_range(0..2)).unwrap())
                .collect();
            let truths: Vec<ClassLabel> = (0..n)
                .map(|_| ClassLabel::from_index(rng.random_range(0..2)).unwrap())
                .collect();
            let r = report(&preds, &truths).unwrap();
            assert_eq!(r.macro_f1, (r.f1_covid + r.f1_non_covid) / 2.0);
            assert_eq!(r.n, n as u64);
            assert!(r.macro_f1 >= 0.0 && r.macro_f1 <= 1.0);
            assert_abs_diff_eq!(r.macro_f1, macro_oracle(&r.confusion), epsilon = 1e-12);
        }
    }

    #[test]
    fn report_invariant_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<usize> = (0..40).map(|_| rng.random_range(0..2)).collect();
        let truths: Vec<usize> = (0..40).map(|_| rng.random_range(0..2)).collect();
        let base = report(&labels(&preds), &labels(&truths)).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let preds_p: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        let truths_p: Vec<usize> = order.iter().map(|&i| truths[i]).collect();
        let permuted = report(&labels(&preds_p), &labels(&truths_p)).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn single_sample_pins_zero_denominator_rule() {
        // One COVID sample predicted correctly: COVID F1 is 1, the absent
        // non-COVID class scores 0, so macro F1 is 0.5.
        let r = report(&labels(&[1]), &labels(&[1])).unwrap();
        assert_eq!((r.f1_covid, r.f1_non_covid, r.macro_f1), (1.0, 0.0, 0.5));
        let r = report(&labels(&[0]), &labels(&[0])).unwrap();
        assert_eq!((r.f1_covid, r.f1_non_covid, r.macro_f1), (0.0, 1.0, 0.5));
    }

    #[test]
    fn label_codes_parse_and_reject() {
        assert_eq!(
            labels_from_codes(&[0, 1, 1]).unwrap(),
            labels(&[0, 1, 1])
        );
        assert!(matches!(
            labels_from_codes(&[0, 2]),
            Err(MetricsError::InvalidLabel(2))
        ));
        assert!(matches!(
            labels_from_codes(&[-1]),
            Err(MetricsError::InvalidLabel(-1))
        ));
    }
}
