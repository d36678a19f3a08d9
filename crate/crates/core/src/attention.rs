//! Multi-head self-attention over a token grid: deformable (DMSA),
//! neighborhood (NMSA), fixed-window (WMSA) and plain full attention, and
//! the pre-norm transformer block that alternates NMSA and DMSA.
//!
//! Tokens are `[L, d]` with `L = h·w` in row-major grid order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::{tokens_to_map, Conv2d, LayerNorm, Linear};
use crate::ops::Conv2dOpts;
use crate::params::{Init, ParamStore, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Kernel of the per-head offset network in DMSA.
pub const OFFSET_KERNEL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Dmsa,
    Nmsa,
    Wmsa,
    Full,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Dmsa => "dmsa",
            AttentionKind::Nmsa => "nmsa",
            AttentionKind::Wmsa => "wmsa",
            AttentionKind::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Dmsa, Self::Nmsa, Self::Wmsa, Self::Full].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Neighborhood side for NMSA (odd).
    pub neighborhood: usize,
    /// Window side for WMSA.
    pub window: usize,
    pub kind: AttentionKind,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, kind: AttentionKind, neighborhood: usize, window: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config("heads", format!("{heads} heads do not divide embedding dim {dim}")));
        }
        if neighborhood == 0 || neighborhood % 2 == 0 {
            return Err(Error::config("neighborhood", format!("must be odd and >= 1, got {neighborhood}")));
        }
        if window == 0 {
            return Err(Error::config("window", "must be >= 1"));
        }
        Ok(Self {
            heads,
            d_k: dim / heads,
            d_v: dim / heads,
            neighborhood,
            window,
            kind,
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn with_kind(mut self, kind: AttentionKind) -> Self {
        self.kind = kind;
        self
    }
}

/// For each grid location, the flat indices of its `K` neighbours.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    pub grid: (usize, usize),
    /// Effective window side per axis after clamping to the grid.
    pub size: (usize, usize),
    index: Arc<[usize]>,
}

impl NeighborhoodIndex {
    pub fn k(&self) -> usize {
        self.size.0 * self.size.1
    }

    pub fn neighbors(&self, loc: usize) -> &[usize] {
        let k = self.k();
        &self.index[loc * k..(loc + 1) * k]
    }

    pub fn flat(&self) -> Arc<[usize]> {
        self.index.clone()
    }
}

/// Centered `k × k` neighbourhoods, shifted inward at the borders so every
/// location keeps exactly `K` in-bounds neighbours. A side larger than the
/// grid is clamped to the grid extent.
pub fn neighborhood_index(grid: (usize, usize), k: usize) -> Result<NeighborhoodIndex> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::config("neighborhood", format!("must be odd and >= 1, got {k}")));
    }
    let (h, w) = grid;
    let (kh, kw) = (k.min(h), k.min(w));
    let start = |p: usize, kk: usize, extent: usize| p.saturating_sub(kk / 2).min(extent - kk);
    let mut index = Vec::with_capacity(h * w * kh * kw);
    for y in 0..h {
        let y0 = start(y, kh, h);
        for x in 0..w {
            let x0 = start(x, kw, w);
            for dy in 0..kh {
                for dx in 0..kw {
                    index.push((y0 + dy) * w + x0 + dx);
                }
            }
        }
    }
    Ok(NeighborhoodIndex {
        grid,
        size: (kh, kw),
        index: index.into(),
    })
}

/// One multi-head self-attention layer with separate Q, K, V and output
/// projections. DMSA adds a per-head offset network over the queries.
#[derive(Clone, Debug)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub offset: Option<Conv2d>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.dim();
        let offset = (cfg.kind == AttentionKind::Dmsa).then(|| {
            Conv2d::new(
                store,
                &format!("{name}.offset"),
                d,
                2 * cfg.heads,
                OFFSET_KERNEL,
                Conv2dOpts::new(1, OFFSET_KERNEL / 2).groups(cfg.heads),
                Init::Zeros,
            )
        });
        Self {
            cfg,
            q: Linear::new(store, &format!("{name}.q"), d, d),
            k: Linear::new(store, &format!("{name}.k"), d, d),
            v: Linear::new(store, &format!("{name}.v"), d, d),
            proj: Linear::new(store, &format!("{name}.proj"), d, d),
            offset,
        }
    }

    pub fn forward(&self, s: &mut Session, f: Var, grid: (usize, usize)) -> Result<Var> {
        let shape = s.shape(f).to_vec();
        if shape.len() != 2 || shape[0] != grid.0 * grid.1 || shape[1] != self.cfg.dim() {
            return Err(Error::dim(format!(
                "attention expects [{}, {}] tokens for a {}x{} grid, got {shape:?}",
                grid.0 * grid.1,
                self.cfg.dim(),
                grid.0,
                grid.1
            )));
        }
        let heads = match self.cfg.kind {
            AttentionKind::Full => self.full(s, f)?,
            AttentionKind::Nmsa => self.nmsa(s, f, grid)?,
            AttentionKind::Wmsa => self.wmsa(s, f, grid)?,
            AttentionKind::Dmsa => self.dmsa(s, f, grid)?,
        };
        self.proj.forward(s, heads)
    }

    fn full(&self, s: &mut Session, f: Var) -> Result<Var> {
        let q = self.q.forward(s, f)?;
        let k = self.k.forward(s, f)?;
        let v = self.v.forward(s, f)?;
        let h = self.cfg.heads;
        let (q, k, v) = (split_heads(s, q, h)?, split_heads(s, k, h)?, split_heads(s, v, h)?);
        let o = attend(s, q, k, v, self.cfg.d_k)?;
        merge_heads(s, o)
    }

    fn nmsa(&self, s: &mut Session, f: Var, grid: (usize, usize)) -> Result<Var> {
        let nb = neighborhood_index(grid, self.cfg.neighborhood)?;
        let (l, kk, h, dk) = (grid.0 * grid.1, nb.k(), self.cfg.heads, self.cfg.d_k);
        let q = self.q.forward(s, f)?;
        let k = self.k.forward(s, f)?;
        let v = self.v.forward(s, f)?;
        let q = split_heads(s, q, h)?;
        let q = s.reshape(q, &[h, l, 1, dk])?;
        let gather = |s: &mut Session, x: Var| -> Result<Var> {
            let x = split_heads(s, x, h)?;
            let x = s.gather_rows(x, nb.flat())?;
            s.reshape(x, &[h, l, kk, dk])
        };
        let k = gather(s, k)?;
        let v = gather(s, v)?;
        let o = attend(s, q, k, v, dk)?;
        let o = s.reshape(o, &[h, l, dk])?;
        merge_heads(s, o)
    }

    fn wmsa(&self, s: &mut Session, f: Var, grid: (usize, usize)) -> Result<Var> {
        let (gh, gw) = grid;
        let (wh, ww) = (self.cfg.window.min(gh), self.cfg.window.min(gw));
        if gh % wh != 0 || gw % ww != 0 {
            return Err(Error::dim(format!("grid {gh}x{gw} is not divisible by window {wh}x{ww}")));
        }
        let (h, dk) = (self.cfg.heads, self.cfg.d_k);
        let n_win = (gh / wh) * (gw / ww);
        let order = window_order(grid, (wh, ww));
        let mut inverse = vec![0; order.len()];
        for (i, &o) in order.iter().enumerate() {
            inverse[o] = i;
        }
        let fw = s.gather_rows(f, order.into())?;
        let q = self.q.forward(s, fw)?;
        let k = self.k.forward(s, fw)?;
        let v = self.v.forward(s, fw)?;
        let to_windows = |s: &mut Session, x: Var| -> Result<Var> {
            let x = s.reshape(x, &[n_win, wh * ww, h, dk])?;
            s.permute(x, &[2, 0, 1, 3])
        };
        let (q, k, v) = (to_windows(s, q)?, to_windows(s, k)?, to_windows(s, v)?);
        let o = attend(s, q, k, v, dk)?;
        let o = s.permute(o, &[1, 2, 0, 3])?;
        let o = s.reshape(o, &[gh * gw, h * dk])?;
        s.gather_rows(o, inverse.into())
    }

    fn dmsa(&self, s: &mut Session, f: Var, grid: (usize, usize)) -> Result<Var> {
        let offset_conv = self.offset.as_ref().ok_or_else(|| Error::Contract("DMSA layer without offset network".into()))?;
        let (gh, gw) = grid;
        let (l, h, d, dk) = (gh * gw, self.cfg.heads, self.cfg.dim(), self.cfg.d_k);
        let q = self.q.forward(s, f)?;
        let qmap = tokens_to_map(s, q, gh, gw)?;
        let off = offset_conv.forward(s, qmap)?;
        let off = s.reshape(off, &[h, 2, l])?;
        let off = s.permute(off, &[0, 2, 1])?;
        let base = s.constant(Tensor::from_fn(&[h, l, 2], |i| {
            let loc = (i / 2) % l;
            if i % 2 == 0 {
                (loc / gw) as f64
            } else {
                (loc % gw) as f64
            }
        }));
        let pos = s.add(base, off)?;
        let pos = s.reshape(pos, &[h * l, 2])?;
        let fmap = tokens_to_map(s, f, gh, gw)?;
        let sampled = s.sample(fmap, pos)?;
        let sampled = s.transpose(sampled)?;
        let deformed = s.reshape(sampled, &[h, l, d])?;
        let k = per_head_linear(s, deformed, &self.k, h, dk)?;
        let v = per_head_linear(s, deformed, &self.v, h, dk)?;
        let q = split_heads(s, q, h)?;
        let o = attend(s, q, k, v, dk)?;
        merge_heads(s, o)
    }
}

/// `[L, h·dk]` to `[h, L, dk]`.
fn split_heads(s: &mut Session, x: Var, heads: usize) -> Result<Var> {
    let shape = s.shape(x).to_vec();
    let x = s.reshape(x, &[shape[0], heads, shape[1] / heads])?;
    s.permute(x, &[1, 0, 2])
}

/// `[h, L, dk]` to `[L, h·dk]`.
fn merge_heads(s: &mut Session, x: Var) -> Result<Var> {
    let shape = s.shape(x).to_vec();
    let x = s.permute(x, &[1, 0, 2])?;
    s.reshape(x, &[shape[1], shape[0] * shape[2]])
}

/// Scaled dot-product attention on batched `[.., M, dk]` queries against
/// `[.., N, dk]` keys and values.
fn attend(s: &mut Session, q: Var, k: Var, v: Var, dk: usize) -> Result<Var> {
    let kt = s.transpose(k)?;
    let scores = s.matmul(q, kt)?;
    let scores = s.scale(scores, 1.0 / (dk as f64).sqrt());
    let axis = s.shape(scores).len() - 1;
    let p = s.softmax(scores, axis)?;
    s.matmul(p, v)
}

/// Applies head `i`'s slice of a `[d, h·dk]` projection to `x[i]` for
/// `x: [h, L, d]`, giving `[h, L, dk]`.
fn per_head_linear(s: &mut Session, x: Var, lin: &Linear, heads: usize, dk: usize) -> Result<Var> {
    let l = s.shape(x)[1];
    let d = s.shape(x)[2];
    let w = s.param(lin.weight);
    let w = s.reshape(w, &[d, heads, dk])?;
    let w = s.permute(w, &[1, 0, 2])?;
    let y = s.matmul(x, w)?;
    let b = s.param(lin.bias);
    let b = s.reshape(b, &[heads, 1, dk])?;
    let ones = s.constant(Tensor::full(&[heads, l, 1], 1.0));
    let b = s.matmul(ones, b)?;
    s.add(y, b)
}

/// Flat token indices listed window by window, row-major inside each window.
pub fn window_order(grid: (usize, usize), window: (usize, usize)) -> Vec<usize> {
    let (gh, gw) = grid;
    let (wh, ww) = window;
    let mut order = Vec::with_capacity(gh * gw);
    for by in 0..gh / wh {
        for bx in 0..gw / ww {
            for y in 0..wh {
                for x in 0..ww {
                    order.push((by * wh + y) * gw + bx * ww + x);
                }
            }
        }
    }
    order
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`
/// with a 4× GELU MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.dim();
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), cfg),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, MLP_RATIO * d),
            fc2: Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * d, d),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, grid: (usize, usize)) -> Result<Var> {
        let y = self.norm1.forward(s, x)?;
        let y = self.attn.forward(s, y, grid)?;
        let x = s.add(x, y)?;
        let y = self.norm2.forward(s, x)?;
        let y = self.fc1.forward(s, y)?;
        let y = s.gelu(y);
        let y = self.fc2.forward(s, y)?;
        s.add(x, y)
    }
}

/// Attention kind of block `index` in an alternating stage: NMSA at even
/// positions, DMSA at odd.
pub fn alternating_kind(index: usize) -> AttentionKind {
    if index % 2 == 0 {
        AttentionKind::Nmsa
    } else {
        AttentionKind::Dmsa
    }
}
