//! Deformable convolution and the patch-embedding stages built on it.
//!
//! A deformable layer predicts a fractional displacement for every output
//! location (and, by default, for every kernel tap) with an ordinary
//! convolution, samples the input at the displaced tap positions with
//! bilinear interpolation, and contracts the samples with the kernel.
//! Offset convolutions start at exactly zero, so a fresh layer behaves like
//! the dense convolution with the same kernel.

use crate::error::{Error, Result};
use crate::layers::{map_to_tokens, tokens_to_map, Conv2d, LayerNorm};
use crate::ops::{conv_out_extent, Conv2dOpts};
use crate::params::{Init, ParamId, ParamStore, Session, WEIGHT_STD};
use crate::sampling::corners;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Kernel footprint of a (deformable) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl DeformGeom {
    /// `kernel`×`kernel`, "same"-style padding `kernel / 2`, dilation 1.
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: kernel / 2,
            dilation: 1,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        conv_out_extent(input, span, self.stride, self.padding)
    }

    fn base(&self, out_idx: usize, tap: usize) -> f64 {
        (out_idx * self.stride + tap * self.dilation) as f64 - self.padding as f64
    }
}

/// Per-location displacements `[2·taps, h, w]` (per tap) or `[2, h, w]`
/// (shared by all taps). Channel `2t` is the row shift of tap `t`, `2t+1`
/// the column shift.
#[derive(Clone, Debug)]
pub struct OffsetField {
    pub offsets: Tensor,
}

impl OffsetField {
    pub fn per_tap(&self) -> bool {
        self.offsets.shape()[0] > 2
    }

    pub fn is_zero(&self) -> bool {
        self.offsets.data().iter().all(|&v| v == 0.0)
    }
}

impl Tape {
    /// Deformable im2col: samples `f[C, H, W]` at every displaced tap of every
    /// output location, giving `[L_out, C·taps]` with column `c·taps + t`.
    pub fn deform_im2col(&mut self, f: Var, offsets: Var, geom: DeformGeom) -> Result<Var> {
        let fs = self.shape(f).to_vec();
        let os = self.shape(offsets).to_vec();
        let &[c, h, w] = &fs[..] else {
            return Err(Error::dim(format!("deform_im2col: input must be [C,H,W], got {fs:?}")));
        };
        let (Some(ho), Some(wo)) = (geom.out_extent(h), geom.out_extent(w)) else {
            return Err(Error::dim(format!(
                "deformable conv: {h}x{w} input smaller than {k}x{k} kernel after padding {p}",
                k = geom.kernel,
                p = geom.padding
            )));
        };
        let taps = geom.taps();
        if os.len() != 3 || !(os[0] == 2 * taps || os[0] == 2) || os[1] != ho || os[2] != wo {
            return Err(Error::dim(format!(
                "deform_im2col: offsets {os:?} do not match output grid {ho}x{wo} with {taps} taps"
            )));
        }
        let shared = os[0] == 2;
        let fv = self.value(f).clone();
        let ov = self.value(offsets).clone();
        let l = ho * wo;
        let width = c * taps;
        let plane = h * w;
        let dims = [h, w];
        let position = move |od: &[f64], loc: usize, t: usize| -> [f64; 2] {
            let (oy, ox) = (loc / wo, loc % wo);
            let (i, j) = (t / geom.kernel, t % geom.kernel);
            let ch = if shared { 0 } else { 2 * t };
            [
                geom.base(oy, i) + od[ch * l + loc],
                geom.base(ox, j) + od[(ch + 1) * l + loc],
            ]
        };
        let mut cols = vec![0.0; l * width];
        {
            let (fd, od) = (fv.data(), ov.data());
            let mut cs = Vec::with_capacity(4);
            for loc in 0..l {
                for t in 0..taps {
                    corners(&position(od, loc, t), &dims, &mut cs);
                    let row = &mut cols[loc * width..(loc + 1) * width];
                    for ch in 0..c {
                        let fc = &fd[ch * plane..(ch + 1) * plane];
                        row[ch * taps + t] = cs.iter().map(|k| k.weight * fc[k.offset]).sum();
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![l, width], cols);
        Ok(self.record(out, &[f, offsets], move |g, need| {
            let (fd, od) = (fv.data(), ov.data());
            let mut gf = need[0].then(|| vec![0.0; fd.len()]);
            let mut go = need[1].then(|| vec![0.0; od.len()]);
            let mut cs = Vec::with_capacity(4);
            for loc in 0..l {
                let grow = &g[loc * width..(loc + 1) * width];
                for t in 0..taps {
                    corners(&position(od, loc, t), &dims, &mut cs);
                    let mut dpos = [0.0f64; 2];
                    for ch in 0..c {
                        let gv = grow[ch * taps + t];
                        if gv == 0.0 {
                            continue;
                        }
                        for k in &cs {
                            if let Some(gf) = gf.as_mut() {
                                gf[ch * plane + k.offset] += k.weight * gv;
                            }
                            let fval = fd[ch * plane + k.offset] * gv;
                            dpos[0] += k.dweight[0] * fval;
                            dpos[1] += k.dweight[1] * fval;
                        }
                    }
                    if let Some(go) = go.as_mut() {
                        let oc = if shared { 0 } else { 2 * t };
                        go[oc * l + loc] += dpos[0];
                        go[(oc + 1) * l + loc] += dpos[1];
                    }
                }
            }
            vec![gf, go]
        }))
    }
}

/// Deformable convolution with a learned offset predictor.
#[derive(Clone, Debug)]
pub struct DeformConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub offset_conv: Conv2d,
    pub geom: DeformGeom,
    pub c_in: usize,
    pub c_out: usize,
    pub shared_offsets: bool,
}

impl DeformConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: DeformGeom,
        shared_offsets: bool,
    ) -> Self {
        let k = geom.kernel;
        let offset_channels = if shared_offsets { 2 } else { 2 * geom.taps() };
        let weight = store.add(&format!("{name}.weight"), &[c_out, c_in, k, k], Init::TruncNormal(WEIGHT_STD));
        let bias = store.add(&format!("{name}.bias"), &[c_out], Init::Zeros);
        let offset_conv = Conv2d::new(
            store,
            &format!("{name}.offset"),
            c_in,
            offset_channels,
            k,
            Conv2dOpts::new(geom.stride, geom.padding),
            Init::Zeros,
        );
        Self {
            weight,
            bias,
            offset_conv,
            geom,
            c_in,
            c_out,
            shared_offsets,
        }
    }

    /// The offsets this layer would apply to `f`.
    pub fn offsets(&self, s: &mut Session, f: Var) -> Result<Var> {
        if self.geom.dilation != 1 {
            return Err(Error::Contract("offset prediction assumes dilation 1".into()));
        }
        self.offset_conv.forward(s, f)
    }

    pub fn offset_field(&self, store: &ParamStore, f: &Tensor) -> Result<OffsetField> {
        let mut s = Session::inference(store);
        let x = s.constant(f.clone());
        let o = self.offsets(&mut s, x)?;
        Ok(OffsetField {
            offsets: s.value(o).clone(),
        })
    }

    /// Output as tokens `[h_out·w_out, C_out]` together with the output grid.
    pub fn forward_tokens(&self, s: &mut Session, f: Var) -> Result<(Var, (usize, usize))> {
        let fs = s.shape(f).to_vec();
        if fs.len() != 3 || fs[0] != self.c_in {
            return Err(Error::dim(format!(
                "deformable conv expects [{}, H, W] input, got {fs:?}",
                self.c_in
            )));
        }
        let (Some(ho), Some(wo)) = (self.geom.out_extent(fs[1]), self.geom.out_extent(fs[2])) else {
            return Err(Error::dim(format!(
                "deformable conv: spatial extent {}x{} underflows kernel {}",
                fs[1], fs[2], self.geom.kernel
            )));
        };
        let offsets = self.offsets(s, f)?;
        let cols = s.deform_im2col(f, offsets, self.geom)?;
        let w = s.param(self.weight);
        let w = s.reshape(w, &[self.c_out, self.c_in * self.geom.taps()])?;
        let wt = s.transpose(w)?;
        let b = s.param(self.bias);
        let y = s.linear(cols, wt, Some(b))?;
        Ok((y, (ho, wo)))
    }

    /// Output as a `[C_out, h_out, w_out]` map.
    pub fn forward(&self, s: &mut Session, f: Var) -> Result<Var> {
        let (y, (ho, wo)) = self.forward_tokens(s, f)?;
        tokens_to_map(s, y, ho, wo)
    }
}

/// Whether token projections deform their sampling grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbedKind {
    Deformable,
    Rigid,
}

impl EmbedKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbedKind::Deformable => "deformable",
            EmbedKind::Rigid => "rigid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "deformable" => Some(EmbedKind::Deformable),
            "rigid" => Some(EmbedKind::Rigid),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum EmbedConv {
    Deform(DeformConvLayer),
    Rigid(Conv2d),
}

impl EmbedConv {
    fn new(store: &mut ParamStore, name: &str, kind: EmbedKind, c_in: usize, c_out: usize, stride: usize) -> Self {
        let geom = DeformGeom::same(3, stride);
        match kind {
            EmbedKind::Deformable => EmbedConv::Deform(DeformConvLayer::new(store, name, c_in, c_out, geom, false)),
            EmbedKind::Rigid => EmbedConv::Rigid(Conv2d::new(
                store,
                name,
                c_in,
                c_out,
                3,
                Conv2dOpts::new(stride, geom.padding),
                Init::TruncNormal(WEIGHT_STD),
            )),
        }
    }

    fn forward_tokens(&self, s: &mut Session, x: Var) -> Result<(Var, (usize, usize))> {
        match self {
            EmbedConv::Deform(d) => d.forward_tokens(s, x),
            EmbedConv::Rigid(c) => {
                let y = c.forward(s, x)?;
                let (ho, wo) = (s.shape(y)[1], s.shape(y)[2]);
                Ok((map_to_tokens(s, y)?, (ho, wo)))
            }
        }
    }
}

/// First embedding: two stacked 3×3 (deformable) convolutions, each followed
/// by layer normalization over channels, with a GELU between them. Strides
/// are `patch/2` then `2`, so the grid shrinks by exactly `patch`.
#[derive(Clone, Debug)]
pub struct PatchEmbedFirst {
    conv1: EmbedConv,
    norm1: LayerNorm,
    conv2: EmbedConv,
    norm2: LayerNorm,
    pub patch: usize,
    pub c_in: usize,
    pub dim: usize,
}

impl PatchEmbedFirst {
    pub fn new(store: &mut ParamStore, name: &str, kind: EmbedKind, c_in: usize, dim: usize, patch: usize) -> Result<Self> {
        if patch < 2 || patch % 2 != 0 {
            return Err(Error::config("patch_size", format!("must be even and >= 2, got {patch}")));
        }
        let mid = (dim / 2).max(1);
        Ok(Self {
            conv1: EmbedConv::new(store, &format!("{name}.conv1"), kind, c_in, mid, patch / 2),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), mid),
            conv2: EmbedConv::new(store, &format!("{name}.conv2"), kind, mid, dim, 2),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            patch,
            c_in,
            dim,
        })
    }

    /// `image[C, H, W]` to tokens `[(H/patch)·(W/patch), dim]`.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<(Var, (usize, usize))> {
        let shape = s.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != self.c_in {
            return Err(Error::dim(format!("patch embedding expects [{}, H, W], got {shape:?}", self.c_in)));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::dim(format!(
                "image {h}x{w} is not divisible by patch size {}",
                self.patch
            )));
        }
        let (t, (h1, w1)) = self.conv1.forward_tokens(s, image)?;
        let t = self.norm1.forward(s, t)?;
        let t = s.gelu(t);
        let m = tokens_to_map(s, t, h1, w1)?;
        let (t, grid) = self.conv2.forward_tokens(s, m)?;
        let t = self.norm2.forward(s, t)?;
        debug_assert_eq!(grid, (h / self.patch, w / self.patch));
        Ok((t, grid))
    }
}

/// Overlapping 3×3 stride-2 convolution followed by layer normalization.
#[derive(Clone, Debug)]
pub struct PatchEmbedDown {
    conv: Conv2d,
    norm: LayerNorm,
    pub c_in: usize,
    pub c_out: usize,
}

impl PatchEmbedDown {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                c_in,
                c_out,
                3,
                Conv2dOpts::new(2, 1),
                Init::TruncNormal(WEIGHT_STD),
            ),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c_out),
            c_in,
            c_out,
        }
    }

    /// Tokens `[h·w, C_in]` on an `h × w` grid to tokens on the halved grid.
    pub fn forward(&self, s: &mut Session, tokens: Var, grid: (usize, usize)) -> Result<(Var, (usize, usize))> {
        let (h, w) = grid;
        if h < 2 || w < 2 {
            return Err(Error::dim(format!("downsampling needs a grid of at least 2x2, got {h}x{w}")));
        }
        let m = tokens_to_map(s, tokens, h, w)?;
        let y = self.conv.forward(s, m)?;
        let (ho, wo) = (s.shape(y)[1], s.shape(y)[2]);
        let t = map_to_tokens(s, y)?;
        let t = self.norm.forward(s, t)?;
        Ok((t, (ho, wo)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn(shape, |_| r.normal())
    }

    #[test]
    fn fresh_layer_has_zero_offsets() {
        let mut store = ParamStore::new(1);
        let layer = DeformConvLayer::new(&mut store, "d", 2, 3, DeformGeom::same(3, 1), false);
        let field = layer.offset_field(&store, &random(&[2, 6, 6], 2)).unwrap();
        assert!(field.per_tap());
        assert_eq!(field.offsets.shape(), &[18, 6, 6]);
        assert!(field.is_zero());
        let shared = DeformConvLayer::new(&mut store, "s", 2, 3, DeformGeom::same(3, 2), true);
        let field = shared.offset_field(&store, &random(&[2, 6, 6], 2)).unwrap();
        assert_eq!(field.offsets.shape(), &[2, 3, 3]);
    }

    #[test]
    fn zero_offsets_match_dense_conv() {
        let mut store = ParamStore::new(3);
        let layer = DeformConvLayer::new(&mut store, "d", 2, 4, DeformGeom::same(3, 2), false);
        let x = random(&[2, 7, 7], 4);
        let mut s = Session::inference(&store);
        let xv = s.constant(x);
        let y = layer.forward(&mut s, xv).unwrap();
        let w = s.param(layer.weight);
        let b = s.param(layer.bias);
        let dense = s.conv2d(xv, w, Some(b), Conv2dOpts::new(2, 1)).unwrap();
        assert_eq!(s.shape(y), &[4, 4, 4]);
        assert!(s.value(y).max_abs_diff(s.value(dense)) < 1e-12);
    }

    #[test]
    fn underflow_is_dimension_error() {
        let mut store = ParamStore::new(3);
        let geom = DeformGeom { kernel: 5, stride: 1, padding: 0, dilation: 1 };
        let layer = DeformConvLayer::new(&mut store, "d", 1, 1, geom, false);
        let mut s = Session::inference(&store);
        let x = s.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(matches!(layer.forward(&mut s, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn first_embedding_shapes() {
        let mut store = ParamStore::new(0);
        let embed = PatchEmbedFirst::new(&mut store, "e", EmbedKind::Deformable, 1, 8, 4).unwrap();
        let mut s = Session::inference(&store);
        let img = s.constant(random(&[1, 64, 64], 1));
        let (t, grid) = embed.forward(&mut s, img).unwrap();
        assert_eq!(grid, (16, 16));
        assert_eq!(s.shape(t), &[256, 8]);
        let bad = s.constant(Tensor::zeros(&[1, 30, 30]));
        assert!(matches!(embed.forward(&mut s, bad), Err(Error::Dimension(_))));
        assert!(PatchEmbedFirst::new(&mut store, "odd", EmbedKind::Rigid, 1, 8, 3).is_err());
    }

    #[test]
    fn down_embedding_minimal_extent() {
        let mut store = ParamStore::new(0);
        let down = PatchEmbedDown::new(&mut store, "p", 4, 8);
        let mut s = Session::inference(&store);
        let t = s.constant(random(&[4, 4], 1));
        let (y, grid) = down.forward(&mut s, t, (2, 2)).unwrap();
        assert_eq!(grid, (1, 1));
        assert_eq!(s.shape(y), &[1, 8]);
    }
}
