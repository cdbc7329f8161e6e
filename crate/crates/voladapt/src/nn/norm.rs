//! Group normalization. Statistics are computed per sample and per channel
//! group, so train and eval behave identically and results never depend on
//! batch composition.

use super::{NnError, ParamFn};
use ndarray::{Array1, Array3, Array5, Axis};

#[derive(Debug, Clone)]
pub struct GroupNorm {
    name: String,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    pub num_groups: usize,
    pub eps: f64,
    channels: usize,
}

pub struct GroupNormCache {
    /// Normalized activations reshaped to `(N, G, group_len)`.
    xhat: Array3<f64>,
    inv_std: ndarray::Array2<f64>,
    dim: (usize, usize, usize, usize, usize),
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, num_groups: usize) -> Result<Self, NnError> {
        if num_groups == 0 || channels % num_groups != 0 {
            return Err(NnError::InvalidConfig(format!(
                "num_groups {num_groups} must divide channels {channels}"
            )));
        }
        Ok(Self {
            name: name.into(),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            num_groups,
            eps: 1e-5,
            channels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn visit_params(&mut self, f: &mut ParamFn) {
        f(
            &format!("{}.gamma", self.name),
            &[self.channels],
            self.gamma.as_slice_mut().expect("contiguous"),
            self.grad_gamma.as_slice_mut().expect("contiguous"),
        );
        f(
            &format!("{}.beta", self.name),
            &[self.channels],
            self.beta.as_slice_mut().expect("contiguous"),
            self.grad_beta.as_slice_mut().expect("contiguous"),
        );
    }

    pub fn forward(&self, x: &Array5<f64>) -> Result<(Array5<f64>, GroupNormCache), NnError> {
        let (n, c, d, h, w) = x.dim();
        if c != self.channels {
            return Err(NnError::ShapeMismatch {
                op: self.name.clone(),
                detail: format!("expected {} channels, got {c}", self.channels),
            });
        }
        let g = self.num_groups;
        let group_len = (c / g) * d * h * w;
        let flat = x
            .view()
            .into_shape_with_order((n, g, group_len))
            .expect("standard layout");

        let mut xhat = Array3::<f64>::zeros((n, g, group_len));
        let mut inv_std = ndarray::Array2::<f64>::zeros((n, g));
        for ni in 0..n {
            for gi in 0..g {
                let lane = flat.index_axis(Axis(0), ni);
                let lane = lane.index_axis(Axis(0), gi);
                let mean = lane.sum() / group_len as f64;
                let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                    / group_len as f64;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[[ni, gi]] = istd;
                let mut dst = xhat.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), gi);
                dst.assign(&lane.mapv(|v| (v - mean) * istd));
            }
        }

        let spatial = d * h * w;
        let per_ch = xhat
            .view()
            .into_shape_with_order((n, c, spatial))
            .expect("standard layout");
        let mut y = Array5::<f64>::zeros((n, c, d, h, w));
        {
            let mut y3 = y
                .view_mut()
                .into_shape_with_order((n, c, spatial))
                .expect("standard layout");
            for ci in 0..c {
                let gamma = self.gamma[ci];
                let beta = self.beta[ci];
                let mut dst = y3.slice_mut(ndarray::s![.., ci, ..]);
                dst.assign(&per_ch.slice(ndarray::s![.., ci, ..]).mapv(|v| gamma * v + beta));
            }
        }
        Ok((
            y,
            GroupNormCache {
                xhat,
                inv_std,
                dim: (n, c, d, h, w),
            },
        ))
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Array5<f64>) -> Array5<f64> {
        let (n, c, d, h, w) = cache.dim;
        assert_eq!(dy.dim(), cache.dim, "dy shape mismatch in {}", self.name);
        let g = self.num_groups;
        let spatial = d * h * w;
        let cpg = c / g;
        let group_len = cpg * spatial;

        let dy3 = dy
            .view()
            .into_shape_with_order((n, c, spatial))
            .expect("standard layout");
        let xhat_ch = cache
            .xhat
            .view()
            .into_shape_with_order((n, c, spatial))
            .expect("standard layout");

        for ci in 0..c {
            let dslice = dy3.slice(ndarray::s![.., ci, ..]);
            let xslice = xhat_ch.slice(ndarray::s![.., ci, ..]);
            self.grad_gamma[ci] += (&dslice * &xslice).sum();
            self.grad_beta[ci] += dslice.sum();
        }

        // dxhat = dy * gamma, then the standard normalization backward per
        // (sample, group) lane.
        let mut dx = Array5::<f64>::zeros((n, c, d, h, w));
        {
            let mut dx3 = dx
                .view_mut()
                .into_shape_with_order((n, g, group_len))
                .expect("standard layout");
            for ni in 0..n {
                for gi in 0..g {
                    let mut dxhat = Array1::<f64>::zeros(group_len);
                    {
                        let mut lane = dxhat
                            .view_mut()
                            .into_shape_with_order((cpg, spatial))
                            .expect("contiguous");
                        for cj in 0..cpg {
                            let ci = gi * cpg + cj;
                            let src = dy3.slice(ndarray::s![ni, ci, ..]);
                            lane.row_mut(cj).assign(&src.mapv(|v| v * self.gamma[ci]));
                        }
                    }
                    let xl = cache.xhat.slice(ndarray::s![ni, gi, ..]);
                    let m = group_len as f64;
                    let s1 = dxhat.sum();
                    let s2 = (&dxhat * &xl).sum();
                    let istd = cache.inv_std[[ni, gi]];
                    let mut dst = dx3.slice_mut(ndarray::s![ni, gi, ..]);
                    for ((dst, &dxh), &xh) in dst.iter_mut().zip(dxhat.iter()).zip(xl.iter()) {
                        *dst = istd / m * (m * dxh - s1 - xh * s2);
                    }
                }
            }
        }
        dx
    }
}
