//! Conditional positional encodings: `f + P(f)` where `P` is either the
//! multi-scale deformable depth-wise pair (3×3 and 5×5 branches, summed) or
//! a single dense depth-wise 3×3 convolution.

use crate::deform::DeformGeom;
use crate::error::{Error, Result};
use crate::layers::{map_to_tokens, tokens_to_map, Conv2d};
use crate::ops::Conv2dOpts;
use crate::params::{Init, ParamId, ParamStore, Session, WEIGHT_STD};
use crate::tape::Var;

/// Branch kernel sizes of the multi-scale encoding.
pub const MSDEPE_KERNELS: [usize; 2] = [3, 5];
/// Kernel of each branch's offset predictor.
pub const OFFSET_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosEncKind {
    MsDepe,
    Cpe,
    None,
}

impl PosEncKind {
    pub fn name(self) -> &'static str {
        match self {
            PosEncKind::MsDepe => "msdepe",
            PosEncKind::Cpe => "cpe",
            PosEncKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::MsDepe, Self::Cpe, Self::None].into_iter().find(|k| k.name() == s)
    }
}

/// One deformable depth-wise branch: a per-channel `k × k` kernel whose taps
/// are displaced by an offset field shared across channels.
#[derive(Clone, Debug)]
pub struct DepthwiseDeformBranch {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub offset_conv: Conv2d,
    pub geom: DeformGeom,
    pub dim: usize,
}

impl DepthwiseDeformBranch {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, k: usize) -> Self {
        let geom = DeformGeom::same(k, 1);
        Self {
            kernel: store.add(&format!("{name}.kernel"), &[dim, k * k], Init::TruncNormal(WEIGHT_STD)),
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Zeros),
            offset_conv: Conv2d::new(
                store,
                &format!("{name}.offset"),
                dim,
                2 * k * k,
                OFFSET_KERNEL,
                Conv2dOpts::new(1, OFFSET_KERNEL / 2),
                Init::Zeros,
            ),
            geom,
            dim,
        }
    }

    /// `[d, h, w]` map to `[h·w, d]` tokens.
    pub fn forward(&self, s: &mut Session, map: Var) -> Result<Var> {
        let shape = s.shape(map).to_vec();
        let (d, l, taps) = (self.dim, shape[1] * shape[2], self.geom.taps());
        let offsets = self.offset_conv.forward(s, map)?;
        let cols = s.deform_im2col(map, offsets, self.geom)?;
        let cols = s.reshape(cols, &[l, d, taps])?;
        let cols = s.permute(cols, &[1, 0, 2])?;
        let w = s.param(self.kernel);
        let w = s.reshape(w, &[d, taps, 1])?;
        let y = s.matmul(cols, w)?;
        let y = s.reshape(y, &[d, l])?;
        let y = s.transpose(y)?;
        let b = s.param(self.bias);
        s.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct MsDepe {
    pub branches: Vec<DepthwiseDeformBranch>,
    pub dim: usize,
}

impl MsDepe {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let branches = MSDEPE_KERNELS
            .iter()
            .map(|&k| DepthwiseDeformBranch::new(store, &format!("{name}.k{k}"), dim, k))
            .collect();
        Self { branches, dim }
    }

    pub fn forward(&self, s: &mut Session, f: Var, grid: (usize, usize)) -> Result<Var> {
        check_tokens(s, f, grid, self.dim)?;
        let map = tokens_to_map(s, f, grid.0, grid.1)?;
        let mut out = f;
        for b in &self.branches {
            let delta = b.forward(s, map)?;
            out = s.add(out, delta)?;
        }
        Ok(out)
    }
}

/// Dense depth-wise 3×3 encoding without deformation.
#[derive(Clone, Debug)]
pub struct Cpe {
    pub conv: Conv2d,
    pub dim: usize,
}

impl Cpe {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                dim,
                dim,
                3,
                Conv2dOpts::new(1, 1).groups(dim),
                Init::TruncNormal(WEIGHT_STD),
            ),
            dim,
        }
    }

    pub fn forward(&self, s: &mut Session, f: Var, grid: (usize, usize)) -> Result<Var> {
        check_tokens(s, f, grid, self.dim)?;
        let map = tokens_to_map(s, f, grid.0, grid.1)?;
        let y = self.conv.forward(s, map)?;
        let delta = map_to_tokens(s, y)?;
        s.add(f, delta)
    }
}

#[derive(Clone, Debug)]
pub enum PosEnc {
    MsDepe(MsDepe),
    Cpe(Cpe),
    None,
}

impl PosEnc {
    pub fn new(store: &mut ParamStore, name: &str, kind: PosEncKind, dim: usize) -> Self {
        match kind {
            PosEncKind::MsDepe => PosEnc::MsDepe(MsDepe::new(store, name, dim)),
            PosEncKind::Cpe => PosEnc::Cpe(Cpe::new(store, name, dim)),
            PosEncKind::None => PosEnc::None,
        }
    }

    pub fn forward(&self, s: &mut Session, f: Var, grid: (usize, usize)) -> Result<Var> {
        match self {
            PosEnc::MsDepe(m) => m.forward(s, f, grid),
            PosEnc::Cpe(c) => c.forward(s, f, grid),
            PosEnc::None => Ok(f),
        }
    }
}

fn check_tokens(s: &Session, f: Var, grid: (usize, usize), dim: usize) -> Result<()> {
    let shape = s.shape(f);
    if shape.len() != 2 || shape[0] != grid.0 * grid.1 || shape[1] != dim {
        return Err(Error::dim(format!(
            "positional encoding expects [{}, {dim}] tokens for a {}x{} grid, got {shape:?}",
            grid.0 * grid.1,
            grid.0,
            grid.1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn zero_weights_are_identity() {
        let mut store = ParamStore::new(0);
        let pe = MsDepe::new(&mut store, "pe", 3);
        store.map_matching(|_| true, |_, t| Tensor::zeros(t.shape()));
        let mut r = Rng::new(1);
        let x = Tensor::from_fn(&[20, 3], |_| r.normal());
        let mut s = Session::inference(&store);
        let xv = s.constant(x.clone());
        let y = pe.forward(&mut s, xv, (4, 5)).unwrap();
        assert_eq!(s.value(y), &x);
    }

    #[test]
    fn wrong_token_count() {
        let mut store = ParamStore::new(0);
        let pe = Cpe::new(&mut store, "pe", 3);
        let mut s = Session::inference(&store);
        let x = s.constant(Tensor::zeros(&[10, 3]));
        assert!(matches!(pe.forward(&mut s, x, (4, 4)), Err(Error::Dimension(_))));
    }
}
