//! Small parameterized layers shared by the embedding, attention and network
//! modules, plus helpers to move between `[C, H, W]` maps and `[L, C]` tokens.

use crate::error::Result;
use crate::ops::Conv2dOpts;
use crate::params::{Init, ParamId, ParamStore, Session, WEIGHT_STD};
use crate::tape::Var;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: store.add(&format!("{name}.weight"), &[d_in, d_out], Init::TruncNormal(WEIGHT_STD)),
            bias: store.add(&format!("{name}.bias"), &[d_out], Init::Zeros),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), &[dim], Init::Ones),
            beta: store.add(&format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: Conv2dOpts,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        opts: Conv2dOpts,
        init: Init,
    ) -> Self {
        Self {
            weight: store.add(&format!("{name}.weight"), &[c_out, c_in / opts.groups, kernel, kernel], init),
            bias: store.add(&format!("{name}.bias"), &[c_out], Init::Zeros),
            opts,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.conv2d(x, w, Some(b), self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Non-overlapping upsampler: kernel equals stride.
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            weight: store.add(
                &format!("{name}.weight"),
                &[c_in, c_out, stride, stride],
                Init::TruncNormal(WEIGHT_STD),
            ),
            bias: store.add(&format!("{name}.bias"), &[c_out], Init::Zeros),
            stride,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

/// `[L, C]` tokens on an `h × w` grid to a `[C, h, w]` map.
pub fn tokens_to_map(s: &mut Session, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = s.shape(x)[1];
    let t = s.transpose(x)?;
    s.reshape(t, &[c, h, w])
}

/// `[C, h, w]` map to `[h·w, C]` tokens.
pub fn map_to_tokens(s: &mut Session, x: Var) -> Result<Var> {
    let shape = s.shape(x).to_vec();
    let flat = s.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    s.transpose(flat)
}
