//! Volumetric classifier: conv stem, residual stages, global pooling, then an
//! embedding trunk with two heads (class logits and an L2-normalized
//! projection for the contrastive loss).
//!
//! There is no train/eval mode switch: normalization uses per-sample group
//! statistics and nothing is stochastic, so inference is a pure function of
//! the parameters. Outputs are also independent of batch composition.

mod blocks;

pub use blocks::{norm_groups_for, BasicBlock, SplatBottleneck};

use crate::nn::{
    l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward, Conv3d, Conv3dCache,
    GapCache, GlobalAvgPool, GroupNorm, GroupNormCache, Linear, LinearCache, MaxPool3d,
    MaxPoolCache, NnError, ParamFn,
};
use ndarray::{Array1, Array2, Array4, Array5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("pretrained tensor {name}: {detail}")]
    Pretrained { name: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    SplitAttention,
}

/// Architecture description. `Default` is the small preset used throughout
/// the tests and the synthetic benchmark; `full()` is the production-size
/// network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Expected input volume `(depth, height, width)`; batches are
    /// `(N, 1, depth, height, width)`.
    pub input_shape: [usize; 3],
    pub stem_channels: usize,
    pub stem_kernel: [usize; 3],
    pub stem_padding: [usize; 3],
    pub block: BlockKind,
    pub stage_blocks: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Output channels of a block are `width * expansion`.
    pub expansion: usize,
    /// Split-attention branch count; ignored by basic blocks.
    pub radix: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    /// Upper bound on group-norm groups (rounded down to a divisor).
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Small basic-block network sized for desk-scale experiments:
    /// 32x64x64 inputs, three stages, 256-d embedding.
    pub fn tiny() -> Self {
        Self {
            input_shape: [32, 64, 64],
            stem_channels: 8,
            stem_kernel: [3, 3, 3],
            stem_padding: [1, 1, 1],
            block: BlockKind::Basic,
            stage_blocks: vec![1, 1, 1],
            stage_widths: vec![16, 32, 64],
            stage_strides: vec![2, 2, 2],
            expansion: 1,
            radix: 1,
            embed_dim: 256,
            proj_dim: 32,
            num_classes: 2,
            norm_groups: 8,
        }
    }

    /// Production-size network: inflated 50-layer split-attention backbone on
    /// 128x256x256 inputs with a 2048-d embedding and 128-d projection.
    pub fn full() -> Self {
        Self {
            input_shape: [128, 256, 256],
            stem_channels: 64,
            stem_kernel: [3, 7, 7],
            stem_padding: [1, 3, 3],
            block: BlockKind::SplitAttention,
            stage_blocks: vec![3, 4, 6, 3],
            stage_widths: vec![64, 128, 256, 512],
            stage_strides: vec![1, 2, 2, 2],
            expansion: 4,
            radix: 2,
            embed_dim: 2048,
            proj_dim: 128,
            num_classes: 2,
            norm_groups: 8,
        }
    }

    /// Miniature basic-block config for gradient checks and smoke tests.
    pub fn micro() -> Self {
        Self {
            input_shape: [8, 16, 16],
            stem_channels: 4,
            stem_kernel: [3, 3, 3],
            stem_padding: [1, 1, 1],
            block: BlockKind::Basic,
            stage_blocks: vec![1],
            stage_widths: vec![8],
            stage_strides: vec![2],
            expansion: 1,
            radix: 1,
            embed_dim: 32,
            proj_dim: 8,
            num_classes: 2,
            norm_groups: 4,
        }
    }

    /// Miniature split-attention config exercising the full bottleneck path.
    pub fn micro_splat() -> Self {
        Self {
            input_shape: [8, 16, 16],
            stem_channels: 4,
            stem_kernel: [3, 3, 3],
            stem_padding: [1, 1, 1],
            block: BlockKind::SplitAttention,
            stage_blocks: vec![1],
            stage_widths: vec![8],
            stage_strides: vec![2],
            expansion: 2,
            radix: 2,
            embed_dim: 32,
            proj_dim: 8,
            num_classes: 2,
            norm_groups: 4,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let stages = self.stage_blocks.len();
        if stages == 0 {
            return Err(NetError::InvalidConfig("need at least one stage".into()));
        }
        if self.stage_widths.len() != stages || self.stage_strides.len() != stages {
            return Err(NetError::InvalidConfig(format!(
                "stage arrays disagree: {} blocks, {} widths, {} strides",
                stages,
                self.stage_widths.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(NetError::InvalidConfig("empty stage".into()));
        }
        if self.input_shape.contains(&0)
            || self.stem_channels == 0
            || self.embed_dim == 0
            || self.proj_dim == 0
            || self.expansion == 0
        {
            return Err(NetError::InvalidConfig("zero-sized dimension".into()));
        }
        if self.num_classes < 2 {
            return Err(NetError::InvalidConfig("need at least two classes".into()));
        }
        if self.block == BlockKind::SplitAttention {
            if self.radix == 0 {
                return Err(NetError::InvalidConfig("radix must be positive".into()));
            }
            for &w in &self.stage_widths {
                if w % self.radix != 0 {
                    return Err(NetError::InvalidConfig(format!(
                        "radix {} must divide stage width {w}",
                        self.radix
                    )));
                }
            }
        }
        Ok(())
    }

    /// Channel count entering the embedding layer.
    pub fn feature_channels(&self) -> usize {
        self.stage_widths.last().unwrap() * self.expansion
    }
}

enum Block {
    Basic(BasicBlock),
    Splat(SplatBottleneck),
}

enum BlockCache {
    Basic(blocks::BasicBlockCache),
    Splat(blocks::SplatCache),
}

impl Block {
    fn forward(&self, x: &Array5<f64>) -> Result<(Array5<f64>, BlockCache), NnError> {
        match self {
            Block::Basic(b) => b.forward(x).map(|(y, c)| (y, BlockCache::Basic(c))),
            Block::Splat(b) => b.forward(x).map(|(y, c)| (y, BlockCache::Splat(c))),
        }
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Array5<f64>) -> Array5<f64> {
        match (self, cache) {
            (Block::Basic(b), BlockCache::Basic(c)) => b.backward(c, dy),
            (Block::Splat(b), BlockCache::Splat(c)) => b.backward(c, dy),
            _ => unreachable!("cache kind always matches block kind"),
        }
    }

    fn visit_params(&mut self, f: &mut ParamFn) {
        match self {
            Block::Basic(b) => b.visit_params(f),
            Block::Splat(b) => b.visit_params(f),
        }
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv3d> {
        match self {
            Block::Basic(b) => b.convs_mut(),
            Block::Splat(b) => b.convs_mut(),
        }
    }
}

/// Model parameters plus the architecture they were built for.
pub struct ModelState {
    pub config: ModelConfig,
    stem_conv: Conv3d,
    stem_gn: GroupNorm,
    pool: MaxPool3d,
    blocks: Vec<Block>,
    embed: Linear,
    proj1: Linear,
    proj2: Linear,
    classifier: Linear,
    gap: GlobalAvgPool,
}

/// Heads produced by one forward pass.
pub struct ForwardOutput {
    /// `(N, num_classes)` raw scores.
    pub logits: Array2<f64>,
    /// `(N, embed_dim)` post-activation embedding.
    pub embedding: Array2<f64>,
    /// `(N, proj_dim)` L2-normalized projection.
    pub projection: Array2<f64>,
}

pub struct ModelCache {
    stem_c: Conv3dCache,
    stem_g: GroupNormCache,
    stem_r: Array5<f64>,
    pool_c: MaxPoolCache,
    block_caches: Vec<BlockCache>,
    gap_c: GapCache,
    embed_c: LinearCache,
    embedding: Array2<f64>,
    proj1_c: LinearCache,
    proj1_r: Array2<f64>,
    proj2_c: LinearCache,
    projection: Array2<f64>,
    proj_norms: Array1<f64>,
    cls_c: LinearCache,
}

/// 2D weights keyed by the conv parameter name they inflate into.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Pretrained2d {
    pub tensors: BTreeMap<String, Tensor2d>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor2d {
    /// `(out_ch, in_ch_per_group, kh, kw)`
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

/// Replicates a 2D kernel along a new leading depth axis, dividing by the
/// depth so that constant-in-depth inputs produce the 2D response.
pub fn inflate_kernel(w2d: &Array4<f64>, depth: usize) -> Array5<f64> {
    let (o, i, kh, kw) = w2d.dim();
    let scale = 1.0 / depth as f64;
    Array5::from_shape_fn((o, i, depth, kh, kw), |(oc, ic, _, y, x)| {
        w2d[[oc, ic, y, x]] * scale
    })
}

impl ModelState {
    /// Builds the network and initializes parameters (He-normal weights,
    /// unit gains, zero shifts) from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let cap = config.norm_groups;
        let stem_conv = Conv3d::new(
            "stem.conv",
            1,
            config.stem_channels,
            config.stem_kernel,
            [2, 2, 2],
            config.stem_padding,
            1,
        )?;
        let stem_gn = GroupNorm::new(
            "stem.gn",
            config.stem_channels,
            norm_groups_for(config.stem_channels, cap),
        )?;
        let pool = MaxPool3d::new([3, 3, 3], [2, 2, 2], [1, 1, 1]);

        let mut blocks = Vec::new();
        let mut in_ch = config.stem_channels;
        for (si, (&n_blocks, (&width, &stride))) in config
            .stage_blocks
            .iter()
            .zip(config.stage_widths.iter().zip(config.stage_strides.iter()))
            .enumerate()
        {
            for bi in 0..n_blocks {
                let name = format!("s{si}.b{bi}");
                let stride = if bi == 0 { stride } else { 1 };
                let out_ch = width * config.expansion;
                let block = match config.block {
                    BlockKind::Basic => {
                        if config.expansion != 1 {
                            return Err(NetError::InvalidConfig(
                                "basic blocks require expansion 1".into(),
                            ));
                        }
                        Block::Basic(BasicBlock::new(&name, in_ch, width, stride, cap)?)
                    }
                    BlockKind::SplitAttention => Block::Splat(SplatBottleneck::new(
                        &name,
                        in_ch,
                        width,
                        config.expansion,
                        config.radix,
                        stride,
                        cap,
                    )?),
                };
                blocks.push(block);
                in_ch = out_ch;
            }
        }

        let feat = config.feature_channels();
        let embed = Linear::new("embed.fc", feat, config.embed_dim);
        let proj1 = Linear::new("proj.fc1", config.embed_dim, config.embed_dim);
        let proj2 = Linear::new("proj.fc2", config.embed_dim, config.proj_dim);
        let classifier = Linear::new("head.fc", config.embed_dim, config.num_classes);

        let mut state = Self {
            config,
            stem_conv,
            stem_gn,
            pool,
            blocks,
            embed,
            proj1,
            proj2,
            classifier,
            gap: GlobalAvgPool,
        };
        state.init_params(seed);
        Ok(state)
    }

    fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_params(&mut |name, shape, value, grad| {
            grad.fill(0.0);
            if shape.len() >= 2 {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for v in value.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            } else if name.ends_with(".gamma") {
                value.fill(1.0);
            } else {
                value.fill(0.0);
            }
        });
    }

    /// Overwrites conv kernels with inflated 2D weights. Every provided
    /// tensor must match a conv in the model.
    pub fn apply_pretrained_2d(&mut self, pretrained: &Pretrained2d) -> Result<(), NetError> {
        let mut used = std::collections::BTreeSet::new();
        let mut convs: Vec<&mut Conv3d> = vec![&mut self.stem_conv];
        for block in &mut self.blocks {
            convs.extend(block.convs_mut());
        }
        for conv in convs {
            let key = format!("{}.weight", conv.name());
            let Some(t) = pretrained.tensors.get(&key) else {
                continue;
            };
            used.insert(key.clone());
            let dims = conv.weight.dim();
            let expected = [dims.0, dims.1, dims.3, dims.4];
            if t.shape != expected {
                return Err(NetError::Pretrained {
                    name: key,
                    detail: format!(
                        "2d shape {:?} does not inflate into conv shape {:?}",
                        t.shape,
                        conv.weight.shape()
                    ),
                });
            }
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(NetError::Pretrained {
                    name: key,
                    detail: format!(
                        "data length {} does not match shape {:?}",
                        t.data.len(),
                        t.shape
                    ),
                });
            }
            let w2d = Array4::from_shape_vec(
                (t.shape[0], t.shape[1], t.shape[2], t.shape[3]),
                t.data.clone(),
            )
            .expect("length checked");
            conv.weight = inflate_kernel(&w2d, dims.2);
        }
        if let Some(stray) = pretrained.tensors.keys().find(|k| !used.contains(*k)) {
            return Err(NetError::Pretrained {
                name: stray.clone(),
                detail: "no conv with this name in the model".into(),
            });
        }
        Ok(())
    }

    /// Visits every parameter in a fixed canonical order.
    pub fn visit_params(&mut self, f: &mut ParamFn) {
        self.stem_conv.visit_params(f);
        self.stem_gn.visit_params(f);
        for block in &mut self.blocks {
            block.visit_params(f);
        }
        self.embed.visit_params(f);
        self.proj1.visit_params(f);
        self.proj2.visit_params(f);
        self.classifier.visit_params(f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_n, _s, v, _g| count += v.len());
        count
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_n, _s, _v, g| g.fill(0.0));
    }

    pub fn forward(&self, x: &Array5<f64>) -> Result<(ForwardOutput, ModelCache), NetError> {
        let (n, c, d, h, w) = x.dim();
        let exp = self.config.input_shape;
        if c != 1 || [d, h, w] != exp {
            return Err(NetError::InputShape {
                expected: vec![n, 1, exp[0], exp[1], exp[2]],
                got: vec![n, c, d, h, w],
            });
        }

        let (s0, stem_c) = self.stem_conv.forward(x)?;
        let (s1, stem_g) = self.stem_gn.forward(&s0)?;
        let stem_r = relu(&s1);
        let (mut cur, pool_c) = self.pool.forward(&stem_r)?;

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&cur)?;
            block_caches.push(cache);
            cur = next;
        }

        let (feat, gap_c) = self.gap.forward(&cur);
        let (e0, embed_c) = self.embed.forward(&feat)?;
        let embedding = relu(&e0);

        let (p0, proj1_c) = self.proj1.forward(&embedding)?;
        let proj1_r = relu(&p0);
        let (p1, proj2_c) = self.proj2.forward(&proj1_r)?;
        let (projection, proj_norms) = l2_normalize_rows(&p1);

        let (logits, cls_c) = self.classifier.forward(&embedding)?;

        Ok((
            ForwardOutput {
                logits,
                embedding: embedding.clone(),
                projection: projection.clone(),
            },
            ModelCache {
                stem_c,
                stem_g,
                stem_r,
                pool_c,
                block_caches,
                gap_c,
                embed_c,
                embedding,
                proj1_c,
                proj1_r,
                proj2_c,
                projection,
                proj_norms,
                cls_c,
            },
        ))
    }

    /// Accumulates parameter gradients from head gradients. `dlogits` feeds
    /// the classifier; `dprojection` (if present) feeds the contrastive head.
    pub fn backward(
        &mut self,
        cache: &ModelCache,
        dlogits: &Array2<f64>,
        dprojection: Option<&Array2<f64>>,
    ) {
        let mut dembedding = self.classifier.backward(&cache.cls_c, dlogits);

        if let Some(dproj) = dprojection {
            let dp1 = l2_normalize_rows_backward(&cache.projection, &cache.proj_norms, dproj);
            let dp_r = self.proj2.backward(&cache.proj2_c, &dp1);
            let dp0 = relu_backward(&cache.proj1_r, &dp_r);
            dembedding += &self.proj1.backward(&cache.proj1_c, &dp0);
        }

        let de0 = relu_backward(&cache.embedding, &dembedding);
        let dfeat = self.embed.backward(&cache.embed_c, &de0);
        let mut dcur = self.gap.backward(&cache.gap_c, &dfeat);

        for (block, bcache) in self
            .blocks
            .iter_mut()
            .zip(cache.block_caches.iter())
            .rev()
        {
            dcur = block.backward(bcache, &dcur);
        }

        let dstem_r = self.pool.backward(&cache.pool_c, &dcur);
        let ds1 = relu_backward(&cache.stem_r, &dstem_r);
        let ds0 = self.stem_gn.backward(&cache.stem_g, &ds1);
        let _ = self.stem_conv.backward(&cache.stem_c, &ds0);
    }
}

/// Builds a model, optionally inflating 2D pretrained kernels into the convs.
pub fn build_model(
    config: ModelConfig,
    seed: u64,
    pretrained: Option<&Pretrained2d>,
) -> Result<ModelState, NetError> {
    let mut state = ModelState::new(config, seed)?;
    if let Some(p) = pretrained {
        state.apply_pretrained_2d(p)?;
    }
    Ok(state)
}
