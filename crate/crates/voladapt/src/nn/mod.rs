//! Minimal 3D neural-network layers with explicit forward/backward passes.
//!
//! Everything is f64 and single-threaded inside a sample so that runs are
//! bit-reproducible and gradients survive finite-difference checks. Layers own
//! their parameters and gradient buffers; a name-ordered visitor exposes both
//! to the optimizer and the checkpoint writer.
//!
//! Activations are laid out `(batch, channels, depth, height, width)`.

mod conv;
mod linear;
mod norm;
mod ops;
mod pool;

pub use conv::{Conv3d, Conv3dCache};
pub use linear::{Linear, LinearCache};
pub use norm::{GroupNorm, GroupNormCache};
pub use ops::{
    l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward, softmax_radix,
    softmax_radix_backward, softmax_rows,
};
pub use pool::{GapCache, GlobalAvgPool, MaxPool3d, MaxPoolCache};

use ndarray::Array5;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid layer config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
}

/// Parameter visitor: `(name, shape, value, grad)`, both buffers flattened in
/// row-major order. Layers call it in a fixed order, so the traversal defines
/// the canonical parameter enumeration for optimizers and checkpoints.
pub type ParamFn<'a> = dyn FnMut(&str, &[usize], &mut [f64], &mut [f64]) + 'a;

/// Output length of one convolution/pooling axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Zero-pads the three spatial axes of a `(N, C, D, H, W)` tensor with `fill`.
pub fn pad_spatial(x: &Array5<f64>, pad: [usize; 3], fill: f64) -> Array5<f64> {
    if pad == [0, 0, 0] {
        return x.clone();
    }
    let (n, c, d, h, w) = x.dim();
    let mut out = Array5::from_elem(
        (n, c, d + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]),
        fill,
    );
    out.slice_mut(ndarray::s![
        ..,
        ..,
        pad[0]..pad[0] + d,
        pad[1]..pad[1] + h,
        pad[2]..pad[2] + w
    ])
    .assign(x);
    out
}
