//! Stage-2 core: score unlabeled volumes with a trained model, admit
//! confident predictions as pseudo labels, and merge them with the annotated
//! pool.

use crate::data::{self, ClassLabel, DataError, DatasetManifest, LabelRecord};
use crate::net::{ModelState, NetError};
use crate::nn::softmax_rows;
use ndarray::{Array2, Array5};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

/// Samples per forward pass during inference. Outputs are batching-invariant,
/// so this only bounds memory.
const INFER_BATCH: usize = 8;

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid pseudo-label config: {0}")]
    InvalidConfig(String),
    #[error("sample {id}: probabilities {probs:?} are not a distribution")]
    InvalidProbability { id: String, probs: [f64; 2] },
    #[error("id collision during merge: {0}")]
    IdCollision(String),
    #[error("admitted id {0} is not in the unlabeled manifest")]
    UnknownId(String),
    #[error("sample {id}: volume shape {got:?} does not match model input {expected:?}")]
    Shape {
        id: String,
        expected: [usize; 3],
        got: [usize; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Minimum winning-class probability for admission (`>=` comparison).
    pub confidence_threshold: f64,
    /// Cap on the fraction of the unlabeled pool admitted; highest
    /// confidence first, ties broken by id.
    pub max_fraction: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.9,
            max_fraction: 1.0,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<(), PseudoError> {
        if !(0.5..1.0).contains(&self.confidence_threshold) {
            return Err(PseudoError::InvalidConfig(format!(
                "confidence_threshold {} must lie in [0.5, 1.0)",
                self.confidence_threshold
            )));
        }
        if !(self.max_fraction > 0.0 && self.max_fraction <= 1.0) {
            return Err(PseudoError::InvalidConfig(format!(
                "max_fraction {} must lie in (0, 1]",
                self.max_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub total_unlabeled: usize,
    pub admitted: usize,
    /// `[non_covid, covid]` admitted counts.
    pub per_class_admitted: [usize; 2],
    /// Winning-class confidence of every prediction, 10 bins over [0, 1].
    pub confidence_histogram: [usize; 10],
    pub threshold_used: f64,
}

/// Softmax over two logits per row.
pub(crate) fn probabilities_from_logits(logits: &Array2<f64>) -> Vec<[f64; 2]> {
    let probs = softmax_rows(logits);
    probs
        .axis_iter(ndarray::Axis(0))
        .map(|row| [row[0], row[1]])
        .collect()
}

/// Class probabilities for every manifest entry, in manifest order.
/// Deterministic and independent of batch composition.
pub fn predict_proba(
    state: &ModelState,
    manifest: &DatasetManifest,
    manifest_path: &Path,
) -> Result<Vec<(String, [f64; 2])>, PseudoError> {
    if state.config.num_classes != 2 {
        return Err(PseudoError::InvalidConfig(format!(
            "binary pipeline requires 2 classes, model has {}",
            state.config.num_classes
        )));
    }
    let shape = state.config.input_shape;
    let mut out = Vec::with_capacity(manifest.len());
    for chunk in manifest.entries.chunks(INFER_BATCH) {
        let mut x = Array5::<f64>::zeros((chunk.len(), 1, shape[0], shape[1], shape[2]));
        for (i, entry) in chunk.iter().enumerate() {
            let vol = data::load_sample_volume(manifest_path, entry)?;
            let (d, h, w) = vol.dim();
            if [d, h, w] != shape {
                return Err(PseudoError::Shape {
                    id: entry.id.clone(),
                    expected: shape,
                    got: [d, h, w],
                });
            }
            let mut dst = x.index_axis_mut(ndarray::Axis(0), i);
            for ((zd, zh, zw), &v) in vol.indexed_iter() {
                dst[[0, zd, zh, zw]] = f64::from(v);
            }
        }
        let (fwd, _) = state.forward(&x)?;
        for (entry, probs) in chunk.iter().zip(probabilities_from_logits(&fwd.logits)) {
            out.push((entry.id.clone(), probs));
        }
    }
    Ok(out)
}

/// Filters predictions into pseudo-label records. A sample is admitted when
/// its winning-class probability reaches the threshold; `max_fraction` then
/// keeps the most confident admissions.
pub fn generate_pseudo_labels(
    preds: &[(String, [f64; 2])],
    cfg: &PseudoLabelConfig,
) -> Result<(Vec<(String, LabelRecord)>, PseudoLabelReport), PseudoError> {
    cfg.validate()?;
    let mut histogram = [0usize; 10];
    let mut admitted: Vec<(String, ClassLabel, f64)> = Vec::new();
    for (id, p) in preds {
        let sum = p[0] + p[1];
        if !(p.iter().all(|v| v.is_finite() && *v >= 0.0) && (sum - 1.0).abs() <= 1e-6) {
            return Err(PseudoError::InvalidProbability {
                id: id.clone(),
                probs: *p,
            });
        }
        let (label, confidence) = if p[1] > p[0] {
            (ClassLabel::Covid, p[1])
        } else {
            (ClassLabel::NonCovid, p[0])
        };
        let bin = ((confidence * 10.0).floor() as usize).min(9);
        histogram[bin] += 1;
        if confidence >= cfg.confidence_threshold {
            admitted.push((id.clone(), label, confidence));
        }
    }

    if cfg.max_fraction < 1.0 {
        let cap = (cfg.max_fraction * preds.len() as f64).floor() as usize;
        admitted.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
        admitted.truncate(cap);
    }

    let mut per_class = [0usize; 2];
    let records: Vec<(String, LabelRecord)> = admitted
        .into_iter()
        .map(|(id, label, confidence)| {
            per_class[label.index()] += 1;
            (id, LabelRecord::pseudo(label, confidence))
        })
        .collect();

    let report = PseudoLabelReport {
        total_unlabeled: preds.len(),
        admitted: records.len(),
        per_class_admitted: per_class,
        confidence_histogram: histogram,
        threshold_used: cfg.confidence_threshold,
    };
    Ok((records, report))
}

/// Builds the stage-2 training manifest: all annotated entries unchanged plus
/// one entry per admitted pseudo label, carrying over the unlabeled pool's
/// volume references.
pub fn merge_for_stage2(
    annotated: &DatasetManifest,
    unlabeled: &DatasetManifest,
    admitted: &[(String, LabelRecord)],
) -> Result<DatasetManifest, PseudoError> {
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for entry in &annotated.entries {
        ids.insert(entry.id.as_str());
    }

    let mut merged = DatasetManifest::new(annotated.split, "stage2-merge");
    merged.entries = annotated.entries.clone();
    for (id, record) in admitted {
        if !ids.insert(id.as_str()) {
            return Err(PseudoError::IdCollision(id.clone()));
        }
        let source = unlabeled
            .entries
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| PseudoError::UnknownId(id.clone()))?;
        let mut entry = source.clone();
        entry.label = record.clone();
        merged.entries.push(entry);
    }
    merged.validate()?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, Provenance, Split, VolumeSample};
    use crate::net::ModelConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logit_probabilities_match_analytic_softmax() {
        let logits = ndarray::arr2(&[[0.0, 0.0], [2.5, -2.5], [5.0, -5.0]]);
        let probs = probabilities_from_logits(&logits);
        assert_abs_diff_eq!(probs[0][0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[0][1], 0.5, epsilon = 1e-12);
        // softmax over a gap of 5: 1/(1+e^-5)
        assert_abs_diff_eq!(probs[1][0], 0.993_307_149_075_715_3, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[1][1], 0.006_692_850_924_284_856, epsilon = 1e-12);
        // gap of 10
        assert_abs_diff_eq!(probs[2][0], 0.999_954_602_131_297_6, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[2][1], 4.539_786_870_243_442e-5, epsilon = 1e-12);
        for p in &probs {
            assert_abs_diff_eq!(p[0] + p[1], 1.0, epsilon = 1e-12);
        }
    }

    fn unlabeled_entry(id: &str) -> VolumeSample {
        VolumeSample {
            id: id.into(),
            domain: Domain::B,
            volume_ref: format!("{id}.vol"),
            shape: [4, 4, 4],
            label: LabelRecord::unlabeled(),
        }
    }

    fn human_entry(id: &str, label: ClassLabel) -> VolumeSample {
        VolumeSample {
            id: id.into(),
            domain: Domain::A,
            volume_ref: format!("{id}.vol"),
            shape: [4, 4, 4],
            label: LabelRecord::human(label),
        }
    }

    #[test]
    fn admits_by_threshold_with_argmax_label() {
        let preds = vec![
            ("a".to_string(), [0.95, 0.05]),
            ("b".to_string(), [0.6, 0.4]),
            ("c".to_string(), [0.08, 0.92]),
        ];
        let cfg = PseudoLabelConfig::default();
        let (records, report) = generate_pseudo_labels(&preds, &cfg).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].0, "a");
        assert_eq!(records[0].1.label, Some(ClassLabel::NonCovid));
        assert_eq!(records[0].1.confidence, Some(0.95));
        assert_eq!(records[0].1.provenance, Provenance::Pseudo);
        assert_eq!(records[1].0, "c");
        assert_eq!(records[1].1.label, Some(ClassLabel::Covid));
        assert_eq!(report.total_unlabeled, 3);
        assert_eq!(report.admitted, 2);
        assert_eq!(report.per_class_admitted, [1, 1]);
        assert_eq!(report.threshold_used, 0.9);
        assert_eq!(report.confidence_histogram.iter().sum::<usize>(), 3);
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let preds = vec![("edge".to_string(), [0.9, 0.1])];
        let cfg = PseudoLabelConfig::default();
        let (records, _) = generate_pseudo_labels(&preds, &cfg).unwrap();
        assert_eq!(records.len(), 1);
    }

    #[test]
    fn admission_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(494);
        let preds: Vec<(String, [f64; 2])> = (0..494)
            .map(|i| {
                let p: f64 = rng.random_range(0.0..1.0);
                (format!("u{i:04}"), [p, 1.0 - p])
            })
            .collect();
        let mut last = usize::MAX;
        for threshold in [0.5, 0.7, 0.9, 0.99] {
            let cfg = PseudoLabelConfig {
                confidence_threshold: threshold,
                max_fraction: 1.0,
            };
            let (records, report) = generate_pseudo_labels(&preds, &cfg).unwrap();
            assert_eq!(records.len(), report.admitted);
            assert!(report.admitted <= last);
            last = report.admitted;
        }
    }

    #[test]
    fn cap_keeps_highest_confidence_with_id_tiebreak() {
        let preds = vec![
            ("n2".to_string(), [0.97, 0.03]),
            ("n1".to_string(), [0.97, 0.03]),
            ("n3".to_string(), [0.99, 0.01]),
            ("n4".to_string(), [0.95, 0.05]),
        ];
        let cfg = PseudoLabelConfig {
            confidence_threshold: 0.9,
            max_fraction: 0.5,
        };
        let (records, report) = generate_pseudo_labels(&preds, &cfg).unwrap();
        // cap = floor(0.5 * 4) = 2: n3 first, then the id tie between n1/n2.
        assert_eq!(report.admitted, 2);
        assert_eq!(records[0].0, "n3");
        assert_eq!(records[1].0, "n1");
    }

    #[test]
    fn rejects_invalid_probabilities_and_configs() {
        let bad = vec![("x".to_string(), [0.7, 0.7])];
        assert!(matches!(
            generate_pseudo_labels(&bad, &PseudoLabelConfig::default()),
            Err(PseudoError::InvalidProbability { .. })
        ));
        let cfg = PseudoLabelConfig {
            confidence_threshold: 0.4,
            max_fraction: 1.0,
        };
        assert!(matches!(
            generate_pseudo_labels(&[], &cfg),
            Err(PseudoError::InvalidConfig(_))
        ));
        let cfg = PseudoLabelConfig {
            confidence_threshold: 0.9,
            max_fraction: 0.0,
        };
        assert!(matches!(
            generate_pseudo_labels(&[], &cfg),
            Err(PseudoError::InvalidConfig(_))
        ));
    }

    #[test]
    fn merge_appends_pseudo_entries_and_preserves_annotated() {
        let mut annotated = DatasetManifest::new(Split::Train, "test");
        annotated.entries = vec![
            human_entry("a1", ClassLabel::Covid),
            human_entry("a2", ClassLabel::NonCovid),
        ];
        let mut unlabeled = DatasetManifest::new(Split::Train, "test");
        unlabeled.entries = vec![unlabeled_entry("u1"), unlabeled_entry("u2")];

        let admitted = vec![("u2".to_string(), LabelRecord::pseudo(ClassLabel::Covid, 0.93))];
        let merged = merge_for_stage2(&annotated, &unlabeled, &admitted).unwrap();
        assert_eq!(merged.len(), 3);
        assert_eq!(merged.created_by, "stage2-merge");
        assert_eq!(&merged.entries[..2], &annotated.entries[..]);
        assert_eq!(merged.entries[2].id, "u2");
        assert_eq!(merged.entries[2].volume_ref, "u2.vol");
        assert_eq!(merged.entries[2].label.provenance, Provenance::Pseudo);

        let empty = merge_for_stage2(&annotated, &unlabeled, &[]).unwrap();
        assert_eq!(empty.entries, annotated.entries);
    }

    #[test]
    fn merge_rejects_collisions_and_unknown_ids() {
        let mut annotated = DatasetManifest::new(Split::Train, "test");
        annotated.entries = vec![human_entry("dup", ClassLabel::Covid)];
        let mut unlabeled = DatasetManifest::new(Split::Train, "test");
        unlabeled.entries = vec![unlabeled_entry("dup")];

        let admitted = vec![("dup".to_string(), LabelRecord::pseudo(ClassLabel::Covid, 0.9))];
        assert!(matches!(
            merge_for_stage2(&annotated, &unlabeled, &admitted),
            Err(PseudoError::IdCollision(_))
        ));

        let admitted = vec![("ghost".to_string(), LabelRecord::pseudo(ClassLabel::Covid, 0.9))];
        assert!(matches!(
            merge_for_stage2(&annotated, &unlabeled, &admitted),
            Err(PseudoError::UnknownId(_))
        ));
    }

    #[test]
    fn predict_proba_is_batching_invariant_on_disk_volumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::micro();
        let state = crate::net::build_model(cfg.clone(), 11, None).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut manifest = DatasetManifest::new(Split::Test, "test");
        for i in 0..4 {
            let vol = Array3::from_shape_fn((8, 16, 16), |_| rng.random_range(0.0f32..1.0));
            let name = format!("v{i}.vol");
            crate::data::write_volume(&vol, &dir.path().join(&name)).unwrap();
            manifest.entries.push(VolumeSample {
                id: format!("v{i}"),
                domain: Domain::B,
                volume_ref: name,
                shape: [8, 16, 16],
                label: LabelRecord::unlabeled(),
            });
        }
        let manifest_path = dir.path().join("manifest.jsonl");
        crate::data::save_manifest(&manifest, &manifest_path).unwrap();

        let batched = predict_proba(&state, &manifest, &manifest_path).unwrap();
        assert_eq!(batched.len(), 4);
        for (i, entry) in manifest.entries.iter().enumerate() {
            let mut single = DatasetManifest::new(Split::Test, "test");
            single.entries.push(entry.clone());
            let one = predict_proba(&state, &single, &manifest_path).unwrap();
            assert_eq!(one[0].0, batched[i].0);
            assert_eq!(one[0].1, batched[i].1, "sample {i} differs across batching");
        }
        for (_, p) in &batched {
            assert_abs_diff_eq!(p[0] + p[1], 1.0, epsilon = 1e-12);
        }
    }
}
