//! Residual blocks: the plain two-conv basic block and the split-attention
//! bottleneck (grouped conv splits the width into `radix` branches, a small
//! MLP scores them per channel, and a radix softmax mixes them back).

use crate::nn::{
    relu, relu_backward, softmax_radix, softmax_radix_backward, Conv3d, Conv3dCache, GapCache,
    GlobalAvgPool, GroupNorm, GroupNormCache, Linear, LinearCache, NnError, ParamFn,
};
use ndarray::{s, Array2, Array3, Array5};

/// Largest group count `<= cap` that divides `channels`.
pub fn norm_groups_for(channels: usize, cap: usize) -> usize {
    let mut g = cap.clamp(1, channels);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub struct BasicBlock {
    conv1: Conv3d,
    gn1: GroupNorm,
    conv2: Conv3d,
    gn2: GroupNorm,
    down: Option<(Conv3d, GroupNorm)>,
}

pub struct BasicBlockCache {
    c1: Conv3dCache,
    g1: GroupNormCache,
    r1: Array5<f64>,
    c2: Conv3dCache,
    g2: GroupNormCache,
    down: Option<(Conv3dCache, GroupNormCache)>,
    out: Array5<f64>,
}

impl BasicBlock {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        norm_cap: usize,
    ) -> Result<Self, NnError> {
        let s3 = [stride, stride, stride];
        let conv1 = Conv3d::new(
            format!("{name}.conv1"),
            in_ch,
            out_ch,
            [3, 3, 3],
            s3,
            [1, 1, 1],
            1,
        )?;
        let gn1 = GroupNorm::new(format!("{name}.gn1"), out_ch, norm_groups_for(out_ch, norm_cap))?;
        let conv2 = Conv3d::new(
            format!("{name}.conv2"),
            out_ch,
            out_ch,
            [3, 3, 3],
            [1, 1, 1],
            [1, 1, 1],
            1,
        )?;
        let gn2 = GroupNorm::new(format!("{name}.gn2"), out_ch, norm_groups_for(out_ch, norm_cap))?;
        let down = if stride != 1 || in_ch != out_ch {
            Some((
                Conv3d::new(
                    format!("{name}.down.conv"),
                    in_ch,
                    out_ch,
                    [1, 1, 1],
                    s3,
                    [0, 0, 0],
                    1,
                )?,
                GroupNorm::new(
                    format!("{name}.down.gn"),
                    out_ch,
                    norm_groups_for(out_ch, norm_cap),
                )?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            gn1,
            conv2,
            gn2,
            down,
        })
    }

    pub fn visit_params(&mut self, f: &mut ParamFn) {
        self.conv1.visit_params(f);
        self.gn1.visit_params(f);
        self.conv2.visit_params(f);
        self.gn2.visit_params(f);
        if let Some((conv, gn)) = &mut self.down {
            conv.visit_params(f);
            gn.visit_params(f);
        }
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv3d> {
        let mut convs = vec![&mut self.conv1, &mut self.conv2];
        if let Some((conv, _)) = &mut self.down {
            convs.push(conv);
        }
        convs
    }

    pub fn forward(&self, x: &Array5<f64>) -> Result<(Array5<f64>, BasicBlockCache), NnError> {
        let (a, c1) = self.conv1.forward(x)?;
        let (b, g1) = self.gn1.forward(&a)?;
        let r1 = relu(&b);
        let (c, c2) = self.conv2.forward(&r1)?;
        let (d, g2) = self.gn2.forward(&c)?;
        let (short, down) = match &self.down {
            Some((conv, gn)) => {
                let (sc, cc) = conv.forward(x)?;
                let (sg, gc) = gn.forward(&sc)?;
                (sg, Some((cc, gc)))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(&d + &short));
        Ok((
            out.clone(),
            BasicBlockCache {
                c1,
                g1,
                r1,
                c2,
                g2,
                down,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BasicBlockCache, dy: &Array5<f64>) -> Array5<f64> {
        let dsum = relu_backward(&cache.out, dy);
        let dd = self.gn2.backward(&cache.g2, &dsum);
        let dr1 = self.conv2.backward(&cache.c2, &dd);
        let db = relu_backward(&cache.r1, &dr1);
        let da = self.gn1.backward(&cache.g1, &db);
        let mut dx = self.conv1.backward(&cache.c1, &da);
        match (&mut self.down, &cache.down) {
            (Some((conv, gn)), Some((cc, gc))) => {
                let ds = gn.backward(gc, &dsum);
                dx += &conv.backward(cc, &ds);
            }
            _ => dx += &dsum,
        }
        dx
    }
}

pub struct SplatBottleneck {
    conv1: Conv3d,
    gn1: GroupNorm,
    splat_conv: Conv3d,
    splat_gn: GroupNorm,
    fc1: Linear,
    fc2: Linear,
    conv3: Conv3d,
    gn3: GroupNorm,
    down: Option<(Conv3d, GroupNorm)>,
    gap: GlobalAvgPool,
    width: usize,
    radix: usize,
}

pub struct SplatCache {
    c1: Conv3dCache,
    g1: GroupNormCache,
    a: Array5<f64>,
    sc: Conv3dCache,
    sg: GroupNormCache,
    /// Branch activations after GN+ReLU, `(N, width * radix, d, h, w)`.
    v: Array5<f64>,
    gap_cache: GapCache,
    fc1c: LinearCache,
    h1: Array2<f64>,
    fc2c: LinearCache,
    /// Radix attention, `(N, radix, width)`.
    att: Array3<f64>,
    c3: Conv3dCache,
    g3: GroupNormCache,
    down: Option<(Conv3dCache, GroupNormCache)>,
    out: Array5<f64>,
}

impl SplatBottleneck {
    pub fn new(
        name: &str,
        in_ch: usize,
        width: usize,
        expansion: usize,
        radix: usize,
        stride: usize,
        norm_cap: usize,
    ) -> Result<Self, NnError> {
        if radix == 0 || width % radix != 0 {
            return Err(NnError::InvalidConfig(format!(
                "radix {radix} must be positive and divide width {width}"
            )));
        }
        let out_ch = width * expansion;
        let s3 = [stride, stride, stride];
        let conv1 = Conv3d::new(
            format!("{name}.conv1"),
            in_ch,
            width,
            [1, 1, 1],
            [1, 1, 1],
            [0, 0, 0],
            1,
        )?;
        let gn1 = GroupNorm::new(format!("{name}.gn1"), width, norm_groups_for(width, norm_cap))?;
        let splat_conv = Conv3d::new(
            format!("{name}.splat.conv"),
            width,
            width * radix,
            [3, 3, 3],
            s3,
            [1, 1, 1],
            radix,
        )?;
        let splat_gn = GroupNorm::new(
            format!("{name}.splat.gn"),
            width * radix,
            norm_groups_for(width * radix, norm_cap),
        )?;
        let inter = (width * radix / 4).max(32);
        let fc1 = Linear::new(format!("{name}.splat.fc1"), width, inter);
        let fc2 = Linear::new(format!("{name}.splat.fc2"), inter, width * radix);
        let conv3 = Conv3d::new(
            format!("{name}.conv3"),
            width,
            out_ch,
            [1, 1, 1],
            [1, 1, 1],
            [0, 0, 0],
            1,
        )?;
        let gn3 = GroupNorm::new(format!("{name}.gn3"), out_ch, norm_groups_for(out_ch, norm_cap))?;
        let down = if stride != 1 || in_ch != out_ch {
            Some((
                Conv3d::new(
                    format!("{name}.down.conv"),
                    in_ch,
                    out_ch,
                    [1, 1, 1],
                    s3,
                    [0, 0, 0],
                    1,
                )?,
                GroupNorm::new(
                    format!("{name}.down.gn"),
                    out_ch,
                    norm_groups_for(out_ch, norm_cap),
                )?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            gn1,
            splat_conv,
            splat_gn,
            fc1,
            fc2,
            conv3,
            gn3,
            down,
            gap: GlobalAvgPool,
            width,
            radix,
        })
    }

    pub fn visit_params(&mut self, f: &mut ParamFn) {
        self.conv1.visit_params(f);
        self.gn1.visit_params(f);
        self.splat_conv.visit_params(f);
        self.splat_gn.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
        self.conv3.visit_params(f);
        self.gn3.visit_params(f);
        if let Some((conv, gn)) = &mut self.down {
            conv.visit_params(f);
            gn.visit_params(f);
        }
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv3d> {
        let mut convs = vec![&mut self.conv1, &mut self.splat_conv, &mut self.conv3];
        if let Some((conv, _)) = &mut self.down {
            convs.push(conv);
        }
        convs
    }

    pub fn forward(&self, x: &Array5<f64>) -> Result<(Array5<f64>, SplatCache), NnError> {
        let w = self.width;
        let r = self.radix;

        let (a0, c1) = self.conv1.forward(x)?;
        let (a1, g1) = self.gn1.forward(&a0)?;
        let a = relu(&a1);

        let (v0, sc) = self.splat_conv.forward(&a)?;
        let (v1, sg) = self.splat_gn.forward(&v0)?;
        let v = relu(&v1);
        let (n, _, d, h, wd) = v.dim();

        // Branch sum feeds the gate; per-channel attention mixes branches.
        let mut branch_sum = Array5::<f64>::zeros((n, w, d, h, wd));
        for k in 0..r {
            branch_sum += &v.slice(s![.., k * w..(k + 1) * w, .., .., ..]);
        }
        let (gap_out, gap_cache) = self.gap.forward(&branch_sum);
        let (h0, fc1c) = self.fc1.forward(&gap_out)?;
        let h1 = relu(&h0);
        let (att_logits, fc2c) = self.fc2.forward(&h1)?;
        let att = softmax_radix(
            &att_logits
                .into_shape_with_order((n, r, w))
                .expect("contiguous"),
        );

        let mut merged = Array5::<f64>::zeros((n, w, d, h, wd));
        for ni in 0..n {
            for k in 0..r {
                for c in 0..w {
                    let weight = att[[ni, k, c]];
                    let src = v.slice(s![ni, k * w + c, .., .., ..]);
                    let mut dst = merged.slice_mut(s![ni, c, .., .., ..]);
                    dst.scaled_add(weight, &src);
                }
            }
        }

        let (m0, c3) = self.conv3.forward(&merged)?;
        let (m1, g3) = self.gn3.forward(&m0)?;
        let (short, down) = match &self.down {
            Some((conv, gn)) => {
                let (sc0, cc) = conv.forward(x)?;
                let (sc1, gc) = gn.forward(&sc0)?;
                (sc1, Some((cc, gc)))
            }
            None => (x.clone(), None),
        };
        let out = relu(&(&m1 + &short));
        Ok((
            out.clone(),
            SplatCache {
                c1,
                g1,
                a,
                sc,
                sg,
                v,
                gap_cache,
                fc1c,
                h1,
                fc2c,
                att,
                c3,
                g3,
                down,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SplatCache, dy: &Array5<f64>) -> Array5<f64> {
        let w = self.width;
        let r = self.radix;
        let (n, _, _, _, _) = cache.v.dim();

        let dsum = relu_backward(&cache.out, dy);
        let dm1 = self.gn3.backward(&cache.g3, &dsum);
        let dmerged = self.conv3.backward(&cache.c3, &dm1);

        // merged[n,c,p] = sum_k att[n,k,c] * v[n,k*w+c,p]
        let mut datt = Array3::<f64>::zeros((n, r, w));
        let mut dv = Array5::<f64>::zeros(cache.v.dim());
        for ni in 0..n {
            for k in 0..r {
                for c in 0..w {
                    let dm = dmerged.slice(s![ni, c, .., .., ..]);
                    let vsl = cache.v.slice(s![ni, k * w + c, .., .., ..]);
                    datt[[ni, k, c]] = (&dm * &vsl).sum();
                    let mut dvs = dv.slice_mut(s![ni, k * w + c, .., .., ..]);
                    dvs.scaled_add(cache.att[[ni, k, c]], &dm);
                }
            }
        }

        // Attention branch: softmax -> fc2 -> relu -> fc1 -> gap -> branch sum.
        let datt_logits = softmax_radix_backward(&cache.att, &datt)
            .into_shape_with_order((n, r * w))
            .expect("contiguous");
        let dh1 = self.fc2.backward(&cache.fc2c, &datt_logits);
        let dh0 = relu_backward(&cache.h1, &dh1);
        let dgap = self.fc1.backward(&cache.fc1c, &dh0);
        let dbranch_sum = self.gap.backward(&cache.gap_cache, &dgap);
        for k in 0..r {
            let mut dvs = dv.slice_mut(s![.., k * w..(k + 1) * w, .., .., ..]);
            dvs += &dbranch_sum;
        }

        let dv1 = relu_backward(&cache.v, &dv);
        let dv0 = self.splat_gn.backward(&cache.sg, &dv1);
        let da = self.splat_conv.backward(&cache.sc, &dv0);
        let da1 = relu_backward(&cache.a, &da);
        let da0 = self.gn1.backward(&cache.g1, &da1);
        let mut dx = self.conv1.backward(&cache.c1, &da0);

        match (&mut self.down, &cache.down) {
            (Some((conv, gn)), Some((cc, gc))) => {
                let ds = gn.backward(gc, &dsum);
                dx += &conv.backward(cc, &ds);
            }
            _ => dx += &dsum,
        }
        dx
    }
}
