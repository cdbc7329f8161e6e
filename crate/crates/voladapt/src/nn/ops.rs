//! Parameter-free pointwise and row-wise operations.

use ndarray::{Array, Array1, Array2, Array3, Axis, Dimension, Zip};

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given its *output* (the derivative at 0 is taken as
/// 0, so the output sign carries enough information).
pub fn relu_backward<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    Zip::from(y)
        .and(dy)
        .map_collect(|&yv, &dv| if yv > 0.0 { dv } else { 0.0 })
}

/// Norm floor that keeps zero rows from dividing by zero.
const NORM_FLOOR: f64 = 1e-12;

/// Row-wise L2 normalization. Returns the unit rows and the (floored) norms
/// needed by the backward pass.
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x
        .axis_iter(Axis(0))
        .map(|row| row.dot(&row).sqrt().max(NORM_FLOOR))
        .collect();
    let mut y = x.clone();
    for (mut row, &n) in y.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (y, norms)
}

/// Backward of row normalization: `dx = (dz - z (z . dz)) / ||x||` per row,
/// where `z` is the normalized output.
pub fn l2_normalize_rows_backward(
    z: &Array2<f64>,
    norms: &Array1<f64>,
    dz: &Array2<f64>,
) -> Array2<f64> {
    let mut dx = Array2::zeros(z.dim());
    for ((mut out, (zrow, dzrow)), &n) in dx
        .axis_iter_mut(Axis(0))
        .zip(z.axis_iter(Axis(0)).zip(dz.axis_iter(Axis(0))))
        .zip(norms.iter())
    {
        let dot = zrow.dot(&dzrow);
        for ((o, &zv), &dv) in out.iter_mut().zip(zrow.iter()).zip(dzrow.iter()) {
            *o = (dv - zv * dot) / n;
        }
    }
    dx
}

/// Numerically stable softmax along each row of a `(N, K)` matrix.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

/// Softmax over the middle axis of a `(N, radix, ch)` tensor, independently
/// per `(sample, channel)` lane.
pub fn softmax_radix(x: &Array3<f64>) -> Array3<f64> {
    let (n, _, c) = x.dim();
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let mut lane = y.slice_mut(ndarray::s![ni, .., ci]);
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
    }
    y
}

/// Backward of `softmax_radix` given its output `y`:
/// `dx = y * (dy - sum_r(dy * y))` along the radix axis.
pub fn softmax_radix_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let (n, r, c) = y.dim();
    let mut dx = Array3::zeros((n, r, c));
    for ni in 0..n {
        for ci in 0..c {
            let ylane = y.slice(ndarray::s![ni, .., ci]);
            let dlane = dy.slice(ndarray::s![ni, .., ci]);
            let dot = ylane.dot(&dlane);
            let mut out = dx.slice_mut(ndarray::s![ni, .., ci]);
            for ((o, &yv), &dv) in out.iter_mut().zip(ylane.iter()).zip(dlane.iter()) {
                *o = yv * (dv - dot);
            }
        }
    }
    dx
}
