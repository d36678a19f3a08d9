use std::sync::Arc;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Stride, zero padding and channel grouping of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// `floor((input + 2·pad − kernel) / stride) + 1`, or `None` when the kernel
/// does not fit the padded input.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Output positions `o` with `0 <= o*stride + tap - pad < input`.
fn valid_range(input: usize, out: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let shift = tap as isize - pad as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(stride) };
    let hi_num = input as isize - 1 - shift;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOpts,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.cin / self.opts.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.opts.groups
    }

    fn cols(&self) -> usize {
        self.cin_per_group() * self.kh * self.kw
    }

    /// Visits every (column row, input channel, output row, input row,
    /// output column range) with in-bounds input coordinates, for group `g`.
    fn for_each_row(&self, g: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize))) {
        let s = self.opts.stride;
        let p = self.opts.padding;
        for cil in 0..self.cin_per_group() {
            let ci = g * self.cin_per_group() + cil;
            for ky in 0..self.kh {
                let (oy0, oy1) = valid_range(self.h, self.ho, s, ky, p);
                for kx in 0..self.kw {
                    let r = (cil * self.kh + ky) * self.kw + kx;
                    let ox = valid_range(self.w, self.wo, s, kx, p);
                    for oy in oy0..oy1 {
                        f(r, ci, kx, oy, oy * s + ky - p, ox);
                    }
                }
            }
        }
    }

    /// Column matrix `[cin/groups · kh · kw, ho · wo]` of group `g`.
    fn im2col(&self, x: &[f64], g: usize) -> Vec<f64> {
        let l = self.ho * self.wo;
        let (s, p) = (self.opts.stride, self.opts.padding);
        let mut cols = vec![0.0; self.cols() * l];
        self.for_each_row(g, |r, ci, kx, oy, iy, (ox0, ox1)| {
            let irow = &x[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
            let crow = &mut cols[r * l + oy * self.wo..r * l + (oy + 1) * self.wo];
            for ox in ox0..ox1 {
                crow[ox] = irow[ox * s + kx - p];
            }
        });
        cols
    }

    /// Scatter-adds a column-matrix gradient of group `g` back onto `gx`.
    fn col2im(&self, cols: &[f64], g: usize, gx: &mut [f64]) {
        let l = self.ho * self.wo;
        let (s, p) = (self.opts.stride, self.opts.padding);
        self.for_each_row(g, |r, ci, kx, oy, iy, (ox0, ox1)| {
            let base = (ci * self.h + iy) * self.w;
            let crow = &cols[r * l + oy * self.wo..r * l + (oy + 1) * self.wo];
            for ox in ox0..ox1 {
                gx[base + ox * s + kx - p] += crow[ox];
            }
        });
    }
}

impl Tape {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| xv[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..n {
                    let e = (xv[at(a)] - max).exp();
                    y[at(a)] = e;
                    total += e;
                }
                for a in 0..n {
                    y[at(a)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(shape, y);
        let yv = out.clone();
        Ok(self.record(out, &[x], move |g, _| {
            let y = yv.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * n + a) * inner + i;
                    let dot: f64 = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..n {
                        gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * gv.data()[j] + bv[j];
            }
        }
        let out = Tensor::from_parts(shape, y);
        Ok(self.record(out, &[x, gamma, beta], move |g, need| {
            let gam = gv.data();
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut sum_gy = 0.0;
                    let mut sum_gy_x = 0.0;
                    for j in 0..d {
                        let gy = gr[j] * gam[j];
                        sum_gy += gy;
                        sum_gy_x += gy * xr[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let gy = gr[j] * gam[j];
                        gx[r * d + j] = rstd[r] * (gy - inv_d * sum_gy - xr[j] * inv_d * sum_gy_x);
                    }
                }
                gx
            });
            let ggamma = need[1].then(|| {
                let mut acc = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        acc[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                acc
            });
            let gbeta = need[2].then(|| {
                let mut acc = vec![0.0; d];
                for row in g.chunks(d) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Direct 2D cross-correlation of `x[C_in, H, W]` with
    /// `weight[C_out, C_in/groups, kh, kw]`, plus optional `bias[C_out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (&[cin, h, w], &[cout, cpg, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim(format!("conv2d: expected [C,H,W] input and 4D kernel, got {xs:?} and {ws:?}")));
        };
        let groups = opts.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cpg {
            return Err(Error::dim(format!("conv2d: input {xs:?} and kernel {ws:?} disagree for {groups} groups")));
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, kh, opts.stride, opts.padding),
            conv_out_extent(w, kw, opts.stride, opts.padding),
        ) else {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {})",
                opts.padding
            )));
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!("conv2d: bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let geom = Arc::new(ConvGeom { cin, h, w, cout, kh, kw, ho, wo, opts });
        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let mut out = vec![0.0; cout * ho * wo];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for co in 0..cout {
                out[co * ho * wo..(co + 1) * ho * wo].fill(bv[co]);
            }
        }
        let (l, kc, cog) = (ho * wo, geom.cols(), geom.cout_per_group());
        let cols: Vec<Vec<f64>> = (0..groups).map(|g| geom.im2col(xv.data(), g)).collect();
        for (g, c) in cols.iter().enumerate() {
            let wg = &wv.data()[g * cog * kc..(g + 1) * cog * kc];
            gemm_nn(wg, c, &mut out[g * cog * l..(g + 1) * cog * l], cog, kc, l);
        }
        let out = Tensor::from_parts(vec![cout, ho, wo], out);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(out, &inputs, move |g, need| {
            let wd = wv.data();
            let mut gx = need[0].then(|| vec![0.0; geom.cin * geom.h * geom.w]);
            let mut gw = need[1].then(|| vec![0.0; wd.len()]);
            let mut gcols = vec![0.0; kc * l];
            for (grp, c) in cols.iter().enumerate() {
                let gg = &g[grp * cog * l..(grp + 1) * cog * l];
                if let Some(gw) = gw.as_mut() {
                    gemm_nt(gg, c, &mut gw[grp * cog * kc..(grp + 1) * cog * kc], cog, l, kc);
                }
                if let Some(gx) = gx.as_mut() {
                    gcols.fill(0.0);
                    gemm_tn(&wd[grp * cog * kc..(grp + 1) * cog * kc], gg, &mut gcols, cog, kc, l);
                    geom.col2im(&gcols, grp, gx);
                }
            }
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| g.chunks(l).map(|c| c.iter().sum()).collect()));
            }
            grads
        }))
    }

    /// Transposed convolution with `weight[C_in, C_out, k, k]`, no padding:
    /// output extent `(in − 1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (&[cin, h, w], &[wcin, cout, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim(format!("conv_transpose2d: expected [C,H,W] and 4D kernel, got {xs:?}, {ws:?}")));
        };
        if cin != wcin || stride == 0 {
            return Err(Error::dim(format!("conv_transpose2d: input {xs:?} incompatible with kernel {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!("conv_transpose2d: bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let ho = (h - 1) * stride + kh;
        let wo = (w - 1) * stride + kw;
        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let mut out = vec![0.0; cout * ho * wo];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for co in 0..cout {
                out[co * ho * wo..(co + 1) * ho * wo].fill(bv[co]);
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for ci in 0..cin {
            for co in 0..cout {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wt = wd[((ci * cout + co) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let orow = (co * ho + iy * stride + ky) * wo;
                            let irow = (ci * h + iy) * w;
                            for ix in 0..w {
                                out[orow + ix * stride + kx] += wt * xd[irow + ix];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![cout, ho, wo], out);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(out, &inputs, move |g, need| {
            let (xd, wd) = (xv.data(), wv.data());
            let mut gx = need[0].then(|| vec![0.0; xd.len()]);
            let mut gw = need[1].then(|| vec![0.0; wd.len()]);
            for ci in 0..cin {
                for co in 0..cout {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((ci * cout + co) * kh + ky) * kw + kx;
                            let wt = wd[widx];
                            let mut acc = 0.0;
                            for iy in 0..h {
                                let orow = (co * ho + iy * stride + ky) * wo;
                                let irow = (ci * h + iy) * w;
                                for ix in 0..w {
                                    let gv = g[orow + ix * stride + kx];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[irow + ix] += wt * gv;
                                    }
                                    acc += gv * xd[irow + ix];
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| g.chunks(ho * wo).map(|c| c.iter().sum()).collect()));
            }
            grads
        }))
    }

    /// Mean cross-entropy of `logits[C, N]` against integer `labels[N]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [c, n] = shape[..] else {
            return Err(Error::dim(format!("cross_entropy expects [C, N] logits, got {shape:?}")));
        };
        if labels.len() != n {
            return Err(Error::dim(format!("cross_entropy: {} labels for {n} positions", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::dim(format!("cross_entropy: label {bad} outside {c} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; c * n];
        let mut total = 0.0;
        for j in 0..n {
            let max = (0..c).map(|k| lv[k * n + j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (lv[k * n + j] - max).exp()).sum();
            for k in 0..c {
                probs[k * n + j] = (lv[k * n + j] - max).exp() / z;
            }
            total += z.ln() + max - lv[labels[j] * n + j];
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.record(out, &[logits], move |g, _| {
            let scale = g[0] / n as f64;
            let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (j, &l) in labels.iter().enumerate() {
                gl[l * n + j] -= scale;
            }
            vec![Some(gl)]
        }))
    }
}
