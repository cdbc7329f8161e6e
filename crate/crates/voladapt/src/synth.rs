//! Seeded synthetic two-domain benchmark generator.
//!
//! Emits the dataset layout the adaptation pipeline consumes: a labeled
//! Domain-A pool, a small labeled Domain-B pool, an unlabeled Domain-B pool,
//! and a Domain-B validation set. COVID-class volumes carry soft ellipsoidal
//! high-intensity bumps on a smooth textured background; Domain B applies an
//! intensity offset plus a texture amplitude/frequency change, both scaled by
//! the `shift` knob. Everything is a pure function of the config seed, so a
//! rerun reproduces every byte.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    self, ClassLabel, DataError, DatasetManifest, Domain, LabelRecord, Split, VolumeSample,
    VolumeTensor,
};
use crate::preprocess::{Interpolation, PreprocessConfig, resize_volume};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("generator i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Size and difficulty of one generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_a_labeled: usize,
    pub n_b_labeled: usize,
    pub n_b_unlabeled: usize,
    /// Domain-B validation volumes.
    pub n_val: usize,
    pub shape: [usize; 3],
    /// Domain-shift severity in [0, 1]; 0 makes Domain B identical in
    /// distribution to Domain A.
    pub shift: f64,
    /// Amplitude of the class-defining bumps; 0 removes the class signal.
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_a_labeled: 48,
            n_b_labeled: 16,
            n_b_unlabeled: 100,
            n_val: 60,
            shape: [32, 64, 64],
            shift: 0.8,
            lesion_contrast: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.shape.iter().any(|&d| d < 4) {
            return Err(SynthError::InvalidConfig(format!(
                "shape {:?} has an axis shorter than 4 voxels",
                self.shape
            )));
        }
        if !(self.shift.is_finite() && (0.0..=1.0).contains(&self.shift)) {
            return Err(SynthError::InvalidConfig(format!(
                "shift must lie in [0, 1], got {}",
                self.shift
            )));
        }
        if !(self.lesion_contrast.is_finite() && self.lesion_contrast >= 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "lesion_contrast must be >= 0, got {}",
                self.lesion_contrast
            )));
        }
        Ok(())
    }
}

/// Manifest files written by [`generate`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_a: PathBuf,
    pub train_b_labeled: PathBuf,
    pub train_b_unlabeled: PathBuf,
    /// Domain A + labeled Domain B combined: the stage-1 training input.
    pub train_labeled: PathBuf,
    pub val: PathBuf,
    /// Sealed true labels of the unlabeled pool, for benchmark scoring only;
    /// pipeline stages never read this file.
    pub truth: PathBuf,
}

/// Mean tissue level every volume is built on.
const BASE_LEVEL: f64 = 0.40;
/// Amplitude of the smooth background texture at shift 0.
const COARSE_AMP: f64 = 0.12;
/// Edge length, in voxels, of one background texture cell at shift 0.
const COARSE_CELL: f64 = 8.0;
/// Standard deviation of the per-voxel noise at shift 0.
const NOISE_AMP: f64 = 0.03;
/// Domain-B mean intensity offset per unit shift.
const SHIFT_OFFSET: f64 = 0.25;
/// Relative growth of texture amplitude, frequency, and noise per unit shift.
const SHIFT_TEXTURE: f64 = 1.0;

struct TextureParams {
    offset: f64,
    coarse_amp: f64,
    cells: [usize; 3],
    noise_amp: f64,
}

fn texture_params(shape: [usize; 3], shift: f64) -> TextureParams {
    let gain = 1.0 + SHIFT_TEXTURE * shift;
    let cell = COARSE_CELL / gain;
    TextureParams {
        offset: SHIFT_OFFSET * shift,
        coarse_amp: COARSE_AMP * gain,
        cells: shape.map(|d| ((d as f64 / cell).round() as usize).max(2)),
        noise_amp: NOISE_AMP * gain,
    }
}

/// One independent generator per volume, derived from the config seed and the
/// volume's role, so pools can grow without disturbing existing draws.
fn volume_rng(seed: u64, role: &str, index: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(role.as_bytes());
    hasher.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn add_lesion(vol: &mut VolumeTensor, contrast: f64, rng: &mut ChaCha8Rng) {
    let (d, h, w) = vol.dim();
    let dims = [d, h, w];
    let mut center = [0.0f64; 3];
    let mut radius = [0.0f64; 3];
    for a in 0..3 {
        center[a] = rng.random_range(0.25..0.75) * dims[a] as f64;
        radius[a] = rng.random_range(0.10..0.20) * dims[a] as f64;
    }
    let lo = |a: usize| (center[a] - radius[a]).floor().max(0.0) as usize;
    let hi = |a: usize| (((center[a] + radius[a]).ceil()) as usize).min(dims[a]);
    for z in lo(0)..hi(0) {
        for y in lo(1)..hi(1) {
            for x in lo(2)..hi(2) {
                let rho2 = ((z as f64 - center[0]) / radius[0]).powi(2)
                    + ((y as f64 - center[1]) / radius[1]).powi(2)
                    + ((x as f64 - center[2]) / radius[2]).powi(2);
                if rho2 < 1.0 {
                    vol[[z, y, x]] += (contrast * (1.0 - rho2)) as f32;
                }
            }
        }
    }
}

/// Builds one volume: trilinearly upsampled coarse Gaussian texture, white
/// noise, and (for the COVID class) 2–4 additive ellipsoidal bumps.
fn synth_volume(cfg: &SynthConfig, covid: bool, shift: f64, rng: &mut ChaCha8Rng) -> VolumeTensor {
    let p = texture_params(cfg.shape, shift);
    let coarse = Array3::from_shape_fn((p.cells[0], p.cells[1], p.cells[2]), |_| {
        rng.sample::<f64, _>(StandardNormal) as f32
    });
    let smooth = resize_volume(
        &coarse,
        &PreprocessConfig {
            target_shape: cfg.shape,
            interpolation: Interpolation::Trilinear,
        },
    )
    .expect("coarse grid is finite and the target shape is valid");
    let mut vol = smooth.mapv(|v| (BASE_LEVEL + p.offset + p.coarse_amp * f64::from(v)) as f32);
    vol.mapv_inplace(|v| v + (p.noise_amp * rng.sample::<f64, _>(StandardNormal)) as f32);
    if covid {
        let bumps = rng.random_range(2..=4);
        for _ in 0..bumps {
            add_lesion(&mut vol, cfg.lesion_contrast, rng);
        }
    }
    vol
}

struct PoolSpec {
    role: &'static str,
    count: usize,
    domain: Domain,
    shift: f64,
    labeled: bool,
}

/// Generates one pool's volumes, returning its manifest entries and the true
/// labels (needed separately for the sealed truth file).
fn write_pool(
    cfg: &SynthConfig,
    out_dir: &Path,
    spec: &PoolSpec,
) -> Result<(Vec<VolumeSample>, Vec<ClassLabel>), SynthError> {
    let mut entries = Vec::with_capacity(spec.count);
    let mut truths = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        // Alternating labels keep every pool balanced within one sample.
        let label = if i % 2 == 0 {
            ClassLabel::Covid
        } else {
            ClassLabel::NonCovid
        };
        let mut rng = volume_rng(cfg.seed, spec.role, i);
        let vol = synth_volume(cfg, label == ClassLabel::Covid, spec.shift, &mut rng);
        let id = format!("{}-{i:04}", spec.role);
        let volume_ref = format!("volumes/{id}.vol");
        data::write_volume(&vol, &out_dir.join(&volume_ref))?;
        entries.push(VolumeSample {
            id,
            domain: spec.domain,
            volume_ref,
            shape: cfg.shape,
            label: if spec.labeled {
                LabelRecord::human(label)
            } else {
                LabelRecord::unlabeled()
            },
        });
        truths.push(label);
    }
    Ok((entries, truths))
}

fn save_pool(
    entries: &[VolumeSample],
    split: Split,
    out_dir: &Path,
    name: &str,
) -> Result<PathBuf, SynthError> {
    let mut manifest = DatasetManifest::new(split, "synthbench");
    manifest.entries = entries.to_vec();
    let path = out_dir.join(name);
    data::save_manifest(&manifest, &path)?;
    Ok(path)
}

/// Generates the full benchmark into `out_dir`: four pool manifests, the
/// combined stage-1 training manifest, the sealed truth file, and all volume
/// files under `out_dir/volumes/`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("volumes"))?;

    let pools = [
        PoolSpec {
            role: "a-labeled",
            count: cfg.n_a_labeled,
            domain: Domain::A,
            shift: 0.0,
            labeled: true,
        },
        PoolSpec {
            role: "b-labeled",
            count: cfg.n_b_labeled,
            domain: Domain::B,
            shift: cfg.shift,
            labeled: true,
        },
        PoolSpec {
            role: "b-unlabeled",
            count: cfg.n_b_unlabeled,
            domain: Domain::B,
            shift: cfg.shift,
            labeled: false,
        },
        PoolSpec {
            role: "b-val",
            count: cfg.n_val,
            domain: Domain::B,
            shift: cfg.shift,
            labeled: true,
        },
    ];
    let (a_entries, _) = write_pool(cfg, out_dir, &pools[0])?;
    let (bl_entries, _) = write_pool(cfg, out_dir, &pools[1])?;
    let (bu_entries, bu_truths) = write_pool(cfg, out_dir, &pools[2])?;
    let (val_entries, _) = write_pool(cfg, out_dir, &pools[3])?;

    let mut combined = a_entries.clone();
    combined.extend(bl_entries.iter().cloned());

    // Same entries as the unlabeled pool, with the withheld labels restored.
    let truth_entries: Vec<VolumeSample> = bu_entries
        .iter()
        .zip(&bu_truths)
        .map(|(sample, &label)| VolumeSample {
            label: LabelRecord::human(label),
            ..sample.clone()
        })
        .collect();

    let output = SynthOutput {
        train_a: save_pool(&a_entries, Split::Train, out_dir, "train_a.jsonl")?,
        train_b_labeled: save_pool(&bl_entries, Split::Train, out_dir, "train_b_labeled.jsonl")?,
        train_b_unlabeled: save_pool(
            &bu_entries,
            Split::Train,
            out_dir,
            "train_b_unlabeled.jsonl",
        )?,
        train_labeled: save_pool(&combined, Split::Train, out_dir, "train_labeled.jsonl")?,
        val: save_pool(&val_entries, Split::Val, out_dir, "val.jsonl")?,
        truth: save_pool(
            &truth_entries,
            Split::Train,
            out_dir,
            "b_unlabeled.truth.jsonl",
        )?,
    };
    Ok(output)
}
