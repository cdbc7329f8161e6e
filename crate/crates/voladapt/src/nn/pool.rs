//! Spatial pooling: windowed max with argmax routing and global average.

use super::{conv_out_len, NnError};
use ndarray::{Array2, Array5, ArrayD};

/// Max pooling over 3D windows. Padding positions are excluded from the max
/// (they never win), so all-negative inputs pool to negative values.
#[derive(Debug, Clone)]
pub struct MaxPool3d {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

pub struct MaxPoolCache {
    /// Linear source index `(d * H + h) * W + w` of each window maximum.
    argmax: ArrayD<u64>,
    input_dim: (usize, usize, usize, usize, usize),
}

impl MaxPool3d {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Array5<f64>) -> Result<(Array5<f64>, MaxPoolCache), NnError> {
        let (n, c, d, h, w) = x.dim();
        let dims = [d, h, w];
        let mut out_dims = [0usize; 3];
        for i in 0..3 {
            out_dims[i] = conv_out_len(dims[i], self.kernel[i], self.stride[i], self.padding[i])
                .ok_or_else(|| NnError::ShapeMismatch {
                    op: "maxpool".into(),
                    detail: format!("axis {i}: input {} smaller than kernel", dims[i]),
                })?;
        }
        let [od, oh, ow] = out_dims;
        let mut y = Array5::zeros((n, c, od, oh, ow));
        let mut argmax = ArrayD::zeros(ndarray::IxDyn(&[n, c, od, oh, ow]));
        for ni in 0..n {
            for ci in 0..c {
                for zd in 0..od {
                    let (ds, de) = window(zd, self.stride[0], self.padding[0], self.kernel[0], d);
                    for zh in 0..oh {
                        let (hs, he) =
                            window(zh, self.stride[1], self.padding[1], self.kernel[1], h);
                        for zw in 0..ow {
                            let (ws, we) =
                                window(zw, self.stride[2], self.padding[2], self.kernel[2], w);
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0u64;
                            for sd in ds..de {
                                for sh in hs..he {
                                    for sw in ws..we {
                                        let v = x[[ni, ci, sd, sh, sw]];
                                        if v > best {
                                            best = v;
                                            best_idx = ((sd * h + sh) * w + sw) as u64;
                                        }
                                    }
                                }
                            }
                            y[[ni, ci, zd, zh, zw]] = best;
                            argmax[[ni, ci, zd, zh, zw]] = best_idx;
                        }
                    }
                }
            }
        }
        Ok((
            y,
            MaxPoolCache {
                argmax,
                input_dim: (n, c, d, h, w),
            },
        ))
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Array5<f64>) -> Array5<f64> {
        let (n, c, d, h, w) = cache.input_dim;
        let mut dx = Array5::zeros((n, c, d, h, w));
        let (dn, dc, od, oh, ow) = dy.dim();
        assert_eq!((dn, dc), (n, c), "dy batch/channel mismatch in maxpool");
        for ni in 0..n {
            for ci in 0..c {
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            let lin = cache.argmax[[ni, ci, zd, zh, zw]] as usize;
                            let sw = lin % w;
                            let sh = (lin / w) % h;
                            let sd = lin / (w * h);
                            dx[[ni, ci, sd, sh, sw]] += dy[[ni, ci, zd, zh, zw]];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Valid (unpadded) source range for one output position along one axis.
fn window(out_pos: usize, stride: usize, padding: usize, kernel: usize, input: usize) -> (usize, usize) {
    let start = out_pos * stride;
    let lo = start.saturating_sub(padding);
    let hi = (start + kernel).saturating_sub(padding).min(input);
    (lo, hi)
}

/// Mean over the three spatial axes: `(N, C, D, H, W)` to `(N, C)`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool;

pub struct GapCache {
    input_dim: (usize, usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn forward(&self, x: &Array5<f64>) -> (Array2<f64>, GapCache) {
        let (n, c, d, h, w) = x.dim();
        let count = (d * h * w) as f64;
        let mut y = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                y[[ni, ci]] = x.slice(ndarray::s![ni, ci, .., .., ..]).sum() / count;
            }
        }
        (
            y,
            GapCache {
                input_dim: (n, c, d, h, w),
            },
        )
    }

    pub fn backward(&self, cache: &GapCache, dy: &Array2<f64>) -> Array5<f64> {
        let (n, c, d, h, w) = cache.input_dim;
        let count = (d * h * w) as f64;
        let mut dx = Array5::zeros((n, c, d, h, w));
        for ni in 0..n {
            for ci in 0..c {
                dx.slice_mut(ndarray::s![ni, ci, .., .., ..])
                    .fill(dy[[ni, ci]] / count);
            }
        }
        dx
    }
}
