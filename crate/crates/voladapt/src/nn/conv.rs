//! Grouped 3D convolution via im2col + GEMM, without bias (normalization
//! layers supply the shift).

use super::{conv_out_len, pad_spatial, NnError, ParamFn};
use ndarray::{s, Array2, Array5, ArrayView4, Zip};

/// Column-buffer budget in f64 elements. Output positions are processed in
/// whole depth planes so the buffer never exceeds roughly this size.
const COL_BUDGET_ELEMS: usize = 1 << 22;

#[derive(Debug, Clone)]
pub struct Conv3d {
    name: String,
    /// `(out_ch, in_ch / groups, kd, kh, kw)`
    pub weight: Array5<f64>,
    pub grad_weight: Array5<f64>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
    in_ch: usize,
}

/// Forward state needed by the backward pass.
pub struct Conv3dCache {
    input: Array5<f64>,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<Self, NnError> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(NnError::InvalidConfig(format!(
                "groups {groups} must divide in_ch {in_ch} and out_ch {out_ch}"
            )));
        }
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(NnError::InvalidConfig(
                "kernel and stride must be positive".into(),
            ));
        }
        let shape = (out_ch, in_ch / groups, kernel[0], kernel[1], kernel[2]);
        Ok(Self {
            name: name.into(),
            weight: Array5::zeros(shape),
            grad_weight: Array5::zeros(shape),
            stride,
            padding,
            groups,
            in_ch,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn out_ch(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> [usize; 3] {
        let d = self.weight.dim();
        [d.2, d.3, d.4]
    }

    pub fn visit_params(&mut self, f: &mut ParamFn) {
        let shape = self.weight.shape().to_vec();
        f(
            &format!("{}.weight", self.name),
            &shape,
            self.weight.as_slice_mut().expect("standard layout"),
            self.grad_weight.as_slice_mut().expect("standard layout"),
        );
    }

    fn out_spatial(&self, d: usize, h: usize, w: usize) -> Result<[usize; 3], NnError> {
        let k = self.kernel();
        let dims = [d, h, w];
        let mut out = [0usize; 3];
        for i in 0..3 {
            out[i] = conv_out_len(dims[i], k[i], self.stride[i], self.padding[i]).ok_or_else(
                || NnError::ShapeMismatch {
                    op: self.name.clone(),
                    detail: format!(
                        "axis {i}: input {} too small for kernel {} with padding {}",
                        dims[i], k[i], self.padding[i]
                    ),
                },
            )?;
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Array5<f64>) -> Result<(Array5<f64>, Conv3dCache), NnError> {
        let (n, c, d, h, w) = x.dim();
        if c != self.in_ch {
            return Err(NnError::ShapeMismatch {
                op: self.name.clone(),
                detail: format!("expected {} input channels, got {c}", self.in_ch),
            });
        }
        let [od, oh, ow] = self.out_spatial(d, h, w)?;
        let padded = pad_spatial(x, self.padding, 0.0);
        let cg = self.in_ch / self.groups;
        let og = self.out_ch() / self.groups;
        let k = self.kernel();
        let rows = cg * k[0] * k[1] * k[2];
        let chunk_d = (COL_BUDGET_ELEMS / (rows * oh * ow).max(1)).clamp(1, od);

        let mut out = Array5::zeros((n, self.out_ch(), od, oh, ow));
        let mut col = Array2::zeros((rows, chunk_d * oh * ow));
        for ni in 0..n {
            for g in 0..self.groups {
                let xg = padded.slice(s![ni, g * cg..(g + 1) * cg, .., .., ..]);
                let wg = self
                    .weight
                    .slice(s![g * og..(g + 1) * og, .., .., .., ..])
                    .to_shape((og, rows))
                    .expect("contiguous weight slice")
                    .into_owned();
                let mut d0 = 0;
                while d0 < od {
                    let d1 = (d0 + chunk_d).min(od);
                    let cols = (d1 - d0) * oh * ow;
                    let mut col_chunk = col.slice_mut(s![.., ..cols]);
                    fill_col(&xg, k, self.stride, [oh, ow], d0, d1, &mut col_chunk);
                    let res = wg.dot(&col_chunk.view());
                    out.slice_mut(s![ni, g * og..(g + 1) * og, d0..d1, .., ..])
                        .assign(
                            &res.into_shape_with_order((og, d1 - d0, oh, ow))
                                .expect("chunk reshape"),
                        );
                    d0 = d1;
                }
            }
        }
        Ok((out, Conv3dCache { input: x.clone() }))
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv3dCache, dy: &Array5<f64>) -> Array5<f64> {
        let x = &cache.input;
        let (n, _, d, h, w) = x.dim();
        let (dn, doc, od, oh, ow) = dy.dim();
        assert_eq!(dn, n, "batch mismatch in {} backward", self.name);
        assert_eq!(doc, self.out_ch(), "channel mismatch in {} backward", self.name);

        let padded = pad_spatial(x, self.padding, 0.0);
        let mut dx_padded = Array5::<f64>::zeros(padded.dim());
        let cg = self.in_ch / self.groups;
        let og = self.out_ch() / self.groups;
        let k = self.kernel();
        let rows = cg * k[0] * k[1] * k[2];
        let chunk_d = (COL_BUDGET_ELEMS / (rows * oh * ow).max(1)).clamp(1, od);

        let mut col = Array2::zeros((rows, chunk_d * oh * ow));
        for ni in 0..n {
            for g in 0..self.groups {
                let xg = padded.slice(s![ni, g * cg..(g + 1) * cg, .., .., ..]);
                let wg = self
                    .weight
                    .slice(s![g * og..(g + 1) * og, .., .., .., ..])
                    .to_shape((og, rows))
                    .expect("contiguous weight slice")
                    .into_owned();
                let mut d0 = 0;
                while d0 < od {
                    let d1 = (d0 + chunk_d).min(od);
                    let cols = (d1 - d0) * oh * ow;
                    let dy_chunk = dy
                        .slice(s![ni, g * og..(g + 1) * og, d0..d1, .., ..])
                        .to_shape((og, cols))
                        .expect("contiguous dy slice")
                        .into_owned();

                    let mut col_chunk = col.slice_mut(s![.., ..cols]);
                    fill_col(&xg, k, self.stride, [oh, ow], d0, d1, &mut col_chunk);
                    let dwg = dy_chunk.dot(&col_chunk.t());
                    {
                        let mut gw = self
                            .grad_weight
                            .slice_mut(s![g * og..(g + 1) * og, .., .., .., ..])
                            .into_shape_with_order((og, rows))
                            .expect("contiguous grad slice");
                        gw += &dwg;
                    }

                    let dcol = wg.t().dot(&dy_chunk);
                    let mut dxg = dx_padded.slice_mut(s![ni, g * cg..(g + 1) * cg, .., .., ..]);
                    scatter_col(&mut dxg, &dcol.view(), k, self.stride, [oh, ow], d0, d1);
                    d0 = d1;
                }
            }
        }

        let p = self.padding;
        dx_padded
            .slice(s![.., .., p[0]..p[0] + d, p[1]..p[1] + h, p[2]..p[2] + w])
            .to_owned()
    }
}

/// Gathers padded-input patches into `col` (`rows x positions`) for output
/// depth planes `[d0, d1)`.
fn fill_col(
    xg: &ArrayView4<f64>,
    kernel: [usize; 3],
    stride: [usize; 3],
    out_hw: [usize; 2],
    d0: usize,
    d1: usize,
    col: &mut ndarray::ArrayViewMut2<f64>,
) {
    let [oh, ow] = out_hw;
    let cg = xg.dim().0;
    let mut r = 0;
    for c in 0..cg {
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for e in 0..kernel[2] {
                    let mut row = col.row_mut(r);
                    for od in d0..d1 {
                        let sd = od * stride[0] + a;
                        for hh in 0..oh {
                            let sh = hh * stride[1] + b;
                            let src = xg.slice(s![
                                c,
                                sd,
                                sh,
                                e..e + (ow - 1) * stride[2] + 1; stride[2]
                            ]);
                            let base = ((od - d0) * oh + hh) * ow;
                            row.slice_mut(s![base..base + ow]).assign(&src);
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Inverse of `fill_col`: scatter-adds column gradients back onto the padded
/// input gradient.
fn scatter_col(
    dxg: &mut ndarray::ArrayViewMut4<f64>,
    dcol: &ndarray::ArrayView2<f64>,
    kernel: [usize; 3],
    stride: [usize; 3],
    out_hw: [usize; 2],
    d0: usize,
    d1: usize,
) {
    let [oh, ow] = out_hw;
    let cg = dxg.dim().0;
    let mut r = 0;
    for c in 0..cg {
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for e in 0..kernel[2] {
                    let row = dcol.row(r);
                    for od in d0..d1 {
                        let sd = od * stride[0] + a;
                        for hh in 0..oh {
                            let sh = hh * stride[1] + b;
                            let dst = dxg.slice_mut(s![
                                c,
                                sd,
                                sh,
                                e..e + (ow - 1) * stride[2] + 1; stride[2]
                            ]);
                            let base = ((od - d0) * oh + hh) * ow;
                            Zip::from(dst)
                                .and(row.slice(s![base..base + ow]))
                                .for_each(|d, &g| *d += g);
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}
