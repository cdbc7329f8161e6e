//! Stage-agnostic training engine.
//!
//! One [`train_model`] call runs the full optimization loop used by both
//! pipeline stages: shuffled class-mixed batches, mixup augmentation, a
//! combined cross-entropy + supervised-contrastive objective, and Adam with
//! a stepped learning-rate schedule. Checkpoints serialize the complete
//! parameter set together with the architecture they belong to, so a
//! stage-2 run can resume exactly where stage 1 stopped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array5, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, ClassLabel, DataError, DatasetManifest, VolumeSample};
use crate::metrics;
use crate::net::{ForwardOutput, ModelConfig, ModelState, NetError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} is outside the schedule range [0, {epochs})")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("no positive pairs: every label in the batch is unique")]
    NoPositivePairs,
    #[error("non-finite loss ({value}) at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("sample `{0}` carries no label; training needs human or pseudo labels")]
    UnlabeledSample(String),
    #[error("training manifest contains no samples")]
    EmptyManifest,
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header codec failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` at which the learning rate steps down.
    pub milestones: Vec<f64>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    /// Beta-distribution parameter for mixup; 0 disables mixing.
    pub mixup_alpha: f64,
    pub contrastive_temperature: f64,
    /// Weight of the contrastive term in the total loss; 0 disables it.
    pub contrastive_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 1e-4,
            weight_decay: 1e-5,
            milestones: vec![0.30, 0.80],
            lr_decay_factor: 0.1,
            batch_size: 8,
            mixup_alpha: 0.2,
            contrastive_temperature: 0.1,
            contrastive_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        for pair in self.milestones.windows(2) {
            if pair[0] >= pair[1] {
                return fail(format!("milestones must be strictly increasing: {pair:?}"));
            }
        }
        if let Some(m) = self
            .milestones
            .iter()
            .find(|m| !(m.is_finite() && 0.0 < **m && **m < 1.0))
        {
            return fail(format!("milestones must lie in (0, 1), got {m}"));
        }
        if !(self.lr_decay_factor.is_finite()
            && 0.0 < self.lr_decay_factor
            && self.lr_decay_factor < 1.0)
        {
            return fail(format!(
                "lr_decay_factor must lie in (0, 1), got {}",
                self.lr_decay_factor
            ));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2 (mixup and the contrastive term pair samples)".into());
        }
        if !(self.mixup_alpha.is_finite() && self.mixup_alpha >= 0.0) {
            return fail(format!("mixup_alpha must be >= 0, got {}", self.mixup_alpha));
        }
        if !(self.contrastive_temperature.is_finite() && self.contrastive_temperature > 0.0) {
            return fail(format!(
                "contrastive_temperature must be positive, got {}",
                self.contrastive_temperature
            ));
        }
        if !(self.contrastive_weight.is_finite() && self.contrastive_weight >= 0.0) {
            return fail(format!(
                "contrastive_weight must be >= 0, got {}",
                self.contrastive_weight
            ));
        }
        Ok(())
    }
}

/// Learning rate in force during `epoch`.
///
/// The rate steps down by `lr_decay_factor` starting at each milestone epoch
/// `floor(m * epochs)` inclusive, so with the 100-epoch defaults epoch 30
/// already runs at 1e-5. Dividing by the reciprocal factor keeps the default
/// schedule exact in floating point: `1e-4 / 10.0` is exactly `1e-5`, while
/// `1e-4 * 0.1` is not.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64, TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let steps = cfg
        .milestones
        .iter()
        .filter(|m| epoch >= (*m * cfg.epochs as f64).floor() as usize)
        .count();
    Ok(cfg.base_lr / (1.0 / cfg.lr_decay_factor).powi(steps as i32))
}

/// A batch after mixup: convex input blend plus both label endpoints.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    /// `(b, 1, D, H, W)`, elementwise `lam * x + (1 - lam) * x[perm]`.
    pub inputs: Array5<f64>,
    /// Labels of the original batch order.
    pub targets_a: Vec<ClassLabel>,
    /// Labels of the permuted partner samples.
    pub targets_b: Vec<ClassLabel>,
    pub lam: f64,
}

impl MixedBatch {
    /// Labels of the majority side of the blend; the contrastive term trains
    /// on these since a mixed sample has no canonical contrastive label.
    pub fn dominant_targets(&self) -> &[ClassLabel] {
        if self.lam >= 0.5 {
            &self.targets_a
        } else {
            &self.targets_b
        }
    }
}

/// Blends `x` with a permutation of itself using the given coefficient.
fn mix_with(x: &Array5<f64>, y: &[ClassLabel], perm: &[usize], lam: f64) -> MixedBatch {
    let targets_a = y.to_vec();
    let targets_b: Vec<ClassLabel> = perm.iter().map(|&j| y[j]).collect();
    // `lam == 1` reproduces the originals exactly; skip the arithmetic so the
    // identity holds bit-for-bit.
    let inputs = if lam == 1.0 {
        x.clone()
    } else {
        let mut mixed = x * lam;
        for (i, &j) in perm.iter().enumerate() {
            mixed
                .index_axis_mut(Axis(0), i)
                .scaled_add(1.0 - lam, &x.index_axis(Axis(0), j));
        }
        mixed
    };
    MixedBatch {
        inputs,
        targets_a,
        targets_b,
        lam,
    }
}

/// Draws a mixup coefficient from `Beta(alpha, alpha)` and a partner
/// permutation from `rng`, then blends the batch. `alpha == 0` degenerates
/// to the identity (`lam = 1`).
pub fn mixup_batch(
    x: &Array5<f64>,
    y: &[ClassLabel],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> MixedBatch {
    let b = x.dim().0;
    debug_assert_eq!(b, y.len());
    let lam = if alpha > 0.0 {
        Beta::new(alpha, alpha)
            .expect("alpha validated positive and finite")
            .sample(rng)
    } else {
        1.0
    };
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    mix_with(x, y, &perm, lam)
}

/// Mixup cross-entropy: `lam * CE(logits, targets_a) + (1 - lam) * CE(logits,
/// targets_b)`, both terms sample-averaged. Returns the loss and its gradient
/// with respect to the logits.
pub fn classification_loss(logits: &Array2<f64>, mixed: &MixedBatch) -> (f64, Array2<f64>) {
    let (b, _) = logits.dim();
    debug_assert_eq!(b, mixed.targets_a.len());
    let lam = mixed.lam;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let a = mixed.targets_a[i].index();
        let bb = mixed.targets_b[i].index();
        loss += lam * (lse - row[a]) + (1.0 - lam) * (lse - row[bb]);
        for (j, v) in row.iter().enumerate() {
            dlogits[[i, j]] = (v - lse).exp();
        }
        dlogits[[i, a]] -= lam;
        dlogits[[i, bb]] -= 1.0 - lam;
    }
    let scale = 1.0 / b as f64;
    dlogits.mapv_inplace(|v| v * scale);
    (loss * scale, dlogits)
}

/// Supervised contrastive loss over L2-normalized projections.
///
/// Every sample that has a same-label partner acts as an anchor `i` with
/// positive set `P(i)`; its loss is the mean over `p ∈ P(i)` of
/// `-log( exp(z_i·z_p/τ) / Σ_{a≠i} exp(z_i·z_a/τ) )`, and the batch loss is
/// the mean over anchors. Returns the loss and its gradient with respect to
/// the projection rows.
pub fn contrastive_loss(
    projections: &Array2<f64>,
    labels: &[ClassLabel],
    temperature: f64,
) -> Result<(f64, Array2<f64>), TrainError> {
    let (b, _) = projections.dim();
    debug_assert_eq!(b, labels.len());
    let sims = projections.dot(&projections.t()) / temperature;

    let positives: Vec<Vec<usize>> = (0..b)
        .map(|i| {
            (0..b)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect()
        })
        .collect();
    let anchors: Vec<usize> = (0..b).filter(|&i| !positives[i].is_empty()).collect();
    if anchors.is_empty() {
        return Err(TrainError::NoPositivePairs);
    }

    // dL/ds[i][j] for anchor i: softmax over the non-self row minus the
    // positive-indicator average; zero for non-anchor rows and the diagonal.
    let m = anchors.len() as f64;
    let mut loss = 0.0;
    let mut dsim = Array2::zeros((b, b));
    for &i in &anchors {
        let row = sims.row(i);
        let max = (0..b)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b)
            .filter(|&j| j != i)
            .map(|j| (row[j] - max).exp())
            .sum();
        let lse = max + denom.ln();
        let inv_pos = 1.0 / positives[i].len() as f64;
        for &p in &positives[i] {
            loss += (lse - row[p]) * inv_pos;
        }
        for j in 0..b {
            if j != i {
                dsim[[i, j]] = (row[j] - lse).exp() / m;
            }
        }
        for &p in &positives[i] {
            dsim[[i, p]] -= inv_pos / m;
        }
    }
    loss /= m;
    // s = Z Zᵀ / τ, so dZ = (G + Gᵀ) Z / τ.
    let dz = (&dsim + &dsim.t()).dot(projections) / temperature;
    Ok((loss, dz))
}

/// Combined objective for one batch, with the gradients needed to start
/// backpropagation.
pub struct TotalLoss {
    pub value: f64,
    pub classification: f64,
    /// Unweighted contrastive value; `None` when disabled or skipped.
    pub contrastive: Option<f64>,
    pub dlogits: Array2<f64>,
    /// Already scaled by `contrastive_weight`.
    pub dprojection: Option<Array2<f64>>,
    /// True when the batch had no positive pairs and the term was dropped.
    pub contrastive_skipped: bool,
}

/// `classification + contrastive_weight * contrastive`, where the contrastive
/// term reads the dominant mixup labels and is skipped (counted, treated as
/// zero) for batches without a positive pair. A zero weight reproduces the
/// pure classification loss exactly, without evaluating the contrastive term.
pub fn total_loss(fwd: &ForwardOutput, mixed: &MixedBatch, cfg: &TrainConfig) -> TotalLoss {
    let (cls, dlogits) = classification_loss(&fwd.logits, mixed);
    if cfg.contrastive_weight == 0.0 {
        return TotalLoss {
            value: cls,
            classification: cls,
            contrastive: None,
            dlogits,
            dprojection: None,
            contrastive_skipped: false,
        };
    }
    match contrastive_loss(
        &fwd.projection,
        mixed.dominant_targets(),
        cfg.contrastive_temperature,
    ) {
        Ok((con, dproj)) => TotalLoss {
            value: cls + cfg.contrastive_weight * con,
            classification: cls,
            contrastive: Some(con),
            dlogits,
            dprojection: Some(dproj * cfg.contrastive_weight),
            contrastive_skipped: false,
        },
        Err(TrainError::NoPositivePairs) => TotalLoss {
            value: cls,
            classification: cls,
            contrastive: None,
            dlogits,
            dprojection: None,
            contrastive_skipped: true,
        },
        Err(_) => unreachable!("contrastive_loss only fails on missing positive pairs"),
    }
}

/// Adam with additive L2 weight decay; moment slots follow the model's
/// parameter visitation order.
struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments1: Vec<Vec<f64>>,
    moments2: Vec<Vec<f64>>,
}

impl Adam {
    fn new(weight_decay: f64) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments1: Vec::new(),
            moments2: Vec::new(),
        }
    }

    fn step(&mut self, state: &mut ModelState, lr: f64) {
        self.step += 1;
        let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        let (moments1, moments2) = (&mut self.moments1, &mut self.moments2);
        let mut slot = 0;
        state.visit_params(&mut |_name, _shape, values, grads| {
            if moments1.len() == slot {
                moments1.push(vec![0.0; values.len()]);
                moments2.push(vec![0.0; values.len()]);
            }
            let m = &mut moments1[slot];
            let v = &mut moments2[slot];
            for i in 0..values.len() {
                let g = grads[i] + wd * values[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                values[i] -= lr * (m[i] / bias1) / ((v[i] / bias2).sqrt() + eps);
            }
            slot += 1;
        });
    }
}

/// Shuffles sample indices and cuts them into `batch_size` chunks (the last
/// may be short). When the dataset holds both classes, single-class batches
/// are repaired by swapping in one element of the other class from a later
/// position, so the contrastive term almost always has positive pairs.
fn plan_batches(
    labels: &[ClassLabel],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let two_classes = labels.windows(2).any(|w| w[0] != w[1]);
    if two_classes {
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let chunk_label = labels[order[start]];
            let uniform = order[start..end].iter().all(|&i| labels[i] == chunk_label);
            if uniform && end - start >= 2 {
                if let Some(j) = (end..n).find(|&j| labels[order[j]] != chunk_label) {
                    order.swap(start, j);
                } else if let Some(j) = (0..start).find(|&j| {
                    // Only steal from an earlier batch if that batch keeps
                    // both classes afterwards.
                    labels[order[j]] != chunk_label && {
                        let donor_start = j - j % batch_size;
                        let donor_end = (donor_start + batch_size).min(n);
                        (donor_start..donor_end)
                            .filter(|&k| k != j)
                            .any(|k| labels[order[k]] != chunk_label)
                    }
                }) {
                    order.swap(start, j);
                }
                // No safe donor: leave the batch single-class and let the
                // contrastive skip rule handle it.
            }
            start = end;
        }
    }

    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// Macro F1 of the epoch's argmax predictions against the dominant mixup
    /// labels, pooled over all batches — a training-progress signal, not a
    /// validation score.
    pub train_macro_f1: f64,
}

/// Complete record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Reproducibility mode of the run; this implementation is always
    /// bit-exact for a fixed seed.
    pub determinism: String,
    pub skipped_contrastive_batches: usize,
    pub epochs: Vec<EpochRecord>,
}

fn load_batch(
    manifest_path: &Path,
    entries: &[VolumeSample],
    indices: &[usize],
    input_shape: [usize; 3],
) -> Result<Array5<f64>, TrainError> {
    let [d, h, w] = input_shape;
    let mut x = Array5::zeros((indices.len(), 1, d, h, w));
    for (bi, &idx) in indices.iter().enumerate() {
        let vol = data::load_sample_volume(manifest_path, &entries[idx])?;
        if vol.dim() != (d, h, w) {
            return Err(NetError::InputShape {
                expected: input_shape.to_vec(),
                got: vec![vol.dim().0, vol.dim().1, vol.dim().2],
            }
            .into());
        }
        for ((z, y, c), &v) in vol.indexed_iter() {
            x[[bi, 0, z, y, c]] = f64::from(v);
        }
    }
    Ok(x)
}

/// Runs `cfg.epochs` epochs of Adam over the labeled manifest and returns the
/// trained model plus a per-epoch log. Fully deterministic for a fixed
/// `(seed, data, config)` triple.
pub fn train_model(
    mut state: ModelState,
    manifest: &DatasetManifest,
    manifest_path: &Path,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainLog), TrainError> {
    cfg.validate()?;
    if manifest.entries.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    let labels: Vec<ClassLabel> = manifest
        .entries
        .iter()
        .map(|s| {
            s.label
                .label
                .ok_or_else(|| TrainError::UnlabeledSample(s.id.clone()))
        })
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.weight_decay);
    let mut log = TrainLog {
        determinism: "bit-exact".to_string(),
        skipped_contrastive_batches: 0,
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let batches = plan_batches(&labels, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_preds: Vec<ClassLabel> = Vec::with_capacity(labels.len());
        let mut epoch_truths: Vec<ClassLabel> = Vec::with_capacity(labels.len());

        for (batch_no, batch) in batches.iter().enumerate() {
            let x = load_batch(manifest_path, &manifest.entries, batch, state.config.input_shape)?;
            let y: Vec<ClassLabel> = batch.iter().map(|&i| labels[i]).collect();
            let mixed = mixup_batch(&x, &y, cfg.mixup_alpha, &mut rng);

            let (fwd, cache) = state.forward(&mixed.inputs)?;
            let total = total_loss(&fwd, &mixed, cfg);
            if !total.value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    value: total.value,
                });
            }
            if total.contrastive_skipped {
                log.skipped_contrastive_batches += 1;
            }
            epoch_loss += total.value;
            for (row, &truth) in fwd.logits.rows().into_iter().zip(mixed.dominant_targets()) {
                let pred = if row[1] > row[0] {
                    ClassLabel::Covid
                } else {
                    ClassLabel::NonCovid
                };
                epoch_preds.push(pred);
                epoch_truths.push(truth);
            }

            state.zero_grads();
            state.backward(&cache, &total.dlogits, total.dprojection.as_ref());
            adam.step(&mut state, lr);
        }

        let train_macro_f1 = metrics::macro_f1(&epoch_preds, &epoch_truths)
            .expect("epoch predictions are non-empty and length-matched");
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: epoch_loss / batches.len() as f64,
            train_macro_f1,
        });
    }

    Ok((state, log))
}

/// Which pipeline stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingStage {
    Stage1,
    Stage2,
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"CKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    stage: TrainingStage,
    params: Vec<ParamInfo>,
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

/// Writes magic, format version, a JSON header (config, stage, parameter
/// catalog), then every parameter as little-endian f64 in visitation order.
pub fn save_checkpoint(
    state: &mut ModelState,
    stage: TrainingStage,
    path: &Path,
) -> Result<(), TrainError> {
    let mut params = Vec::new();
    state.visit_params(&mut |name, shape, _v, _g| {
        params.push(ParamInfo {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
    });
    let header = serde_json::to_vec(&CheckpointHeader {
        config: state.config.clone(),
        stage,
        params,
    })?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut io_result = Ok(());
    state.visit_params(&mut |_n, _s, values, _g| {
        if io_result.is_ok() {
            let mut bytes = Vec::with_capacity(values.len() * 8);
            for v in values.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            io_result = out.write_all(&bytes);
        }
    });
    io_result?;
    out.flush()?;
    Ok(())
}

/// Restores a checkpoint. When `expected` is given, the stored architecture
/// must match it exactly; parameter names, shapes, order, and finiteness are
/// always verified.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(ModelState, TrainingStage), TrainError> {
    let corrupt = |msg: &str| TrainError::CorruptCheckpoint(format!("{}: {msg}", path.display()));
    let mut input = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    let mut version = [0u8; 4];
    let mut header_len = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| corrupt("missing magic"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    input
        .read_exact(&mut version)
        .map_err(|_| corrupt("missing version"))?;
    if u32::from_le_bytes(version) != 1 {
        return Err(corrupt("unsupported format version"));
    }
    input
        .read_exact(&mut header_len)
        .map_err(|_| corrupt("missing header length"))?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(header_len) as usize];
    input
        .read_exact(&mut header_bytes)
        .map_err(|_| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| corrupt(&format!("undecodable header ({e})")))?;

    if let Some(exp) = expected {
        if *exp != header.config {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint {} was written for a different architecture",
                path.display()
            )));
        }
    }

    let mut state = ModelState::new(header.config.clone(), 0)?;
    let mut next = 0;
    let mut fill_result: Result<(), TrainError> = Ok(());
    state.visit_params(&mut |name, shape, values, _g| {
        if fill_result.is_err() {
            return;
        }
        fill_result = (|| {
            let info = header
                .params
                .get(next)
                .ok_or_else(|| corrupt("parameter catalog shorter than the model"))?;
            if info.name != name || info.shape != shape {
                return Err(corrupt(&format!(
                    "parameter {next} mismatch: stored {}{:?}, model wants {name}{shape:?}",
                    info.name, info.shape
                )));
            }
            let mut bytes = vec![0u8; values.len() * 8];
            input
                .read_exact(&mut bytes)
                .map_err(|_| corrupt("truncated payload"))?;
            for (v, chunk) in values.iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                if !v.is_finite() {
                    return Err(corrupt(&format!("non-finite value in parameter {name}")));
                }
            }
            next += 1;
            Ok(())
        })();
    });
    fill_result?;
    if next != header.params.len() {
        return Err(corrupt("parameter catalog longer than the model"));
    }
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok((state, header.stage))
}
