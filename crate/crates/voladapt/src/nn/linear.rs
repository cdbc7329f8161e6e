//! Fully connected layer: `y = x Wᵀ + b`.

use super::{NnError, ParamFn};
use ndarray::{Array1, Array2, Axis};

#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    /// `(out_features, in_features)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
            grad_weight: Array2::zeros((out_features, in_features)),
            grad_bias: Array1::zeros(out_features),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim().0
    }

    pub fn visit_params(&mut self, f: &mut ParamFn) {
        let wshape = self.weight.shape().to_vec();
        f(
            &format!("{}.weight", self.name),
            &wshape,
            self.weight.as_slice_mut().expect("contiguous"),
            self.grad_weight.as_slice_mut().expect("contiguous"),
        );
        let bshape = self.bias.shape().to_vec();
        f(
            &format!("{}.bias", self.name),
            &bshape,
            self.bias.as_slice_mut().expect("contiguous"),
            self.grad_bias.as_slice_mut().expect("contiguous"),
        );
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, LinearCache), NnError> {
        if x.dim().1 != self.in_features() {
            return Err(NnError::ShapeMismatch {
                op: self.name.clone(),
                detail: format!("expected {} input features, got {}", self.in_features(), x.dim().1),
            });
        }
        // Row-by-row dot products keep each sample's output bitwise
        // independent of the rest of the batch.
        let mut y = Array2::zeros((x.dim().0, self.out_features()));
        for (mut yrow, xrow) in y.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
            for (o, wrow) in self.weight.axis_iter(Axis(0)).enumerate() {
                yrow[o] = xrow.dot(&wrow) + self.bias[o];
            }
        }
        Ok((y, LinearCache { input: x.clone() }))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f64>) -> Array2<f64> {
        assert_eq!(dy.dim().1, self.out_features(), "dy mismatch in {}", self.name);
        self.grad_weight += &dy.t().dot(&cache.input);
        self.grad_bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}
