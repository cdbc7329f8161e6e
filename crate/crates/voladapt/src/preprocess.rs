//! Volume preprocessing: compose a 2D slice series into a 3D volume, resize
//! to the canonical shape, and normalize intensities to [0, 1].
//!
//! Resizing is linear per axis with align-corners index mapping: output index
//! `j` on an axis of length `n_out` samples source coordinate
//! `j * (n_in - 1) / (n_out - 1)` (0 when `n_out == 1`). The three axis passes
//! compose to trilinear interpolation.

use crate::data::{self, DataError, DatasetManifest, VolumeTensor};
use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("empty slice series")]
    EmptySeries,
    #[error("inconsistent slice shape at index {index}: expected {expected:?}, got {got:?}")]
    InconsistentSliceShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite input volume")]
    NonFiniteInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<PreprocessError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_shape: [usize; 3],
    pub interpolation: Interpolation,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_shape: [128, 256, 256],
            interpolation: Interpolation::Trilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.target_shape.iter().any(|&d| d == 0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "target_shape {:?} has a zero component",
                self.target_shape
            )));
        }
        Ok(())
    }
}

/// Stacks an ordered slice series into a (len, H, W) volume. Slice `k` of the
/// output equals input slice `k` exactly; no resampling happens here.
pub fn compose_volume(slices: &[Array2<f32>]) -> Result<VolumeTensor, PreprocessError> {
    let first = slices.first().ok_or(PreprocessError::EmptySeries)?;
    let expected = first.dim();
    for (index, slice) in slices.iter().enumerate() {
        if slice.dim() != expected {
            return Err(PreprocessError::InconsistentSliceShape {
                index,
                expected,
                got: slice.dim(),
            });
        }
    }
    let mut volume = Array3::zeros((slices.len(), expected.0, expected.1));
    for (k, slice) in slices.iter().enumerate() {
        volume.index_axis_mut(Axis(0), k).assign(slice);
    }
    Ok(volume)
}

/// Per-output-index source positions and interpolation weights for one axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|j| {
            let src = if n_out <= 1 {
                0.0
            } else {
                j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resize_axis(input: &Array3<f32>, axis: usize, n_out: usize, interp: Interpolation) -> Array3<f32> {
    let n_in = input.shape()[axis];
    let weights = axis_weights(n_in, n_out);
    let mut out_shape = [input.shape()[0], input.shape()[1], input.shape()[2]];
    out_shape[axis] = n_out;
    let mut output = Array3::zeros(out_shape);
    for (j, &(i0, i1, w)) in weights.iter().enumerate() {
        let mut dst = output.index_axis_mut(Axis(axis), j);
        match interp {
            Interpolation::Nearest => {
                let i = if w < 0.5 { i0 } else { i1 };
                dst.assign(&input.index_axis(Axis(axis), i));
            }
            Interpolation::Trilinear => {
                let a = input.index_axis(Axis(axis), i0);
                let b = input.index_axis(Axis(axis), i1);
                ndarray::Zip::from(&mut dst)
                    .and(&a)
                    .and(&b)
                    .for_each(|d, &x0, &x1| {
                        *d = ((1.0 - w) * x0 as f64 + w * x1 as f64) as f32;
                    });
            }
        }
    }
    output
}

/// Resizes a volume to `cfg.target_shape`. With trilinear interpolation the
/// output stays inside the input's [min, max] range.
pub fn resize_volume(
    volume: &VolumeTensor,
    cfg: &PreprocessConfig,
) -> Result<VolumeTensor, PreprocessError> {
    cfg.validate()?;
    if volume.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFiniteInput);
    }
    let mut out = volume.clone();
    for axis in 0..3 {
        if out.shape()[axis] != cfg.target_shape[axis] {
            out = resize_axis(&out, axis, cfg.target_shape[axis], cfg.interpolation);
        }
    }
    if cfg.interpolation == Interpolation::Trilinear {
        // Axis passes are convex combinations; the clamp only removes the
        // last-ulp rounding dust so the range invariant holds exactly.
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in volume {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        out.mapv_inplace(|v| v.clamp(lo, hi));
    }
    Ok(out)
}

/// Maps intensities affinely onto [0, 1]; a constant volume maps to all
/// zeros.
pub fn normalize_intensity(volume: &VolumeTensor) -> Result<VolumeTensor, PreprocessError> {
    if volume.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFiniteInput);
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in volume {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let range = hi - lo;
        Ok(volume.mapv(|v| (v - lo) / range))
    } else {
        Ok(Array3::zeros(volume.dim()))
    }
}

struct ProcessedEntry {
    sample: crate::data::VolumeSample,
    volume_ref: String,
    shape: [usize; 3],
}

/// Resizes and normalizes every sample of a manifest, writing the results to
/// `store_dir` as `<id>.vol`. The returned manifest keeps id/domain/label per
/// sample and carries refs relative to `store_dir`. Any per-sample failure
/// aborts the whole run with the offending id attached.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    cfg: &PreprocessConfig,
    store_dir: &Path,
) -> Result<DatasetManifest, PreprocessError> {
    cfg.validate()?;
    manifest.validate()?;
    std::fs::create_dir_all(store_dir).map_err(DataError::Io)?;
    let processed: Vec<ProcessedEntry> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let run = || -> Result<ProcessedEntry, PreprocessError> {
                let src = data::resolve_volume_ref(manifest_path, &entry.volume_ref);
                let volume = data::read_volume(&src)?;
                let resized = resize_volume(&volume, cfg)?;
                let normalized = normalize_intensity(&resized)?;
                let file_name = format!("{}.vol", entry.id);
                data::write_volume(&normalized, &store_dir.join(&file_name))?;
                Ok(ProcessedEntry {
                    sample: entry.clone(),
                    volume_ref: file_name,
                    shape: cfg.target_shape,
                })
            };
            run().map_err(|source| PreprocessError::Sample {
                id: entry.id.clone(),
                source: Box::new(source),
            })
        })
        .collect::<Result<_, _>>()?;
    let mut out = DatasetManifest::new(manifest.split, "preprocess");
    out.entries = processed
        .into_iter()
        .map(|p| {
            let mut sample = p.sample;
            sample.volume_ref = p.volume_ref;
            sample.shape = p.shape;
            sample
        })
        .collect();
    out.validate()?;
    Ok(out)
}
