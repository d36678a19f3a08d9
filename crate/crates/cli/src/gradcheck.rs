//! Named gradient checks, grouped by module.

use std::sync::Arc;

use agile_core::attention::{Attention, AttentionConfig, AttentionKind};
use agile_core::deform::{DeformConvLayer, DeformGeom, EmbedKind, PatchEmbedDown, PatchEmbedFirst};
use agile_core::gradcheck::{check, check_module, GradCheckConfig, GradReport};
use agile_core::loss::{combined_loss, LossConfig};
use agile_core::network::{Network, NetworkConfig};
use agile_core::ops::Conv2dOpts;
use agile_core::params::ParamStore;
use agile_core::posenc::{Cpe, MsDepe};
use agile_core::rng::Rng;
use agile_core::{Result, Tensor};

/// Tolerance for single ops and layers.
pub const TOL: f64 = 1e-4;
/// Tolerance for the whole network.
pub const TOL_NETWORK: f64 = 1e-3;

pub struct GradOp {
    pub module: &'static str,
    pub name: &'static str,
    pub tol: f64,
    run: fn(u64) -> Result<GradReport>,
}

impl GradOp {
    pub fn run(&self, trial: u64) -> Result<GradReport> {
        (self.run)(trial)
    }
}

pub const MODULES: &[&str] = &["tensor-core", "grid-sampling", "deform-embed", "attention", "posenc", "network"];

pub fn registry() -> Vec<GradOp> {
    let op = |module, name, tol, run| GradOp { module, name, tol, run };
    vec![
        op("tensor-core", "matmul", TOL, matmul),
        op("tensor-core", "linear-norm-gelu", TOL, linear_norm_gelu),
        op("tensor-core", "conv2d", TOL, conv2d),
        op("tensor-core", "conv-transpose2d", TOL, conv_transpose2d),
        op("tensor-core", "cross-entropy", TOL, cross_entropy),
        op("grid-sampling", "sample2d", TOL, sample2d),
        op("grid-sampling", "sample3d", TOL, sample3d),
        op("deform-embed", "deform-conv", TOL, deform_conv),
        op("deform-embed", "embed-first", TOL, embed_first),
        op("deform-embed", "embed-down", TOL, embed_down),
        op("attention", "dmsa", TOL, |t| attention(AttentionKind::Dmsa, t)),
        op("attention", "nmsa", TOL, |t| attention(AttentionKind::Nmsa, t)),
        op("attention", "wmsa", TOL, |t| attention(AttentionKind::Wmsa, t)),
        op("attention", "full", TOL, |t| attention(AttentionKind::Full, t)),
        op("posenc", "msdepe", TOL, msdepe),
        op("posenc", "cpe", TOL, cpe),
        op("network", "loss", TOL, loss),
        op("network", "network", TOL_NETWORK, network),
    ]
}

pub fn op_names() -> Vec<&'static str> {
    registry().iter().map(|o| o.name).collect()
}

fn normal(shape: &[usize], std: f64, r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * r.normal())
}

/// Away from the integer lattice, where sampling is smooth.
fn off_lattice(shape: &[usize], lo: f64, hi: f64, r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = r.uniform_range(lo, hi);
        if (0.05..=0.95).contains(&(v - v.floor())) {
            break v;
        }
    })
}

fn randomize(store: &mut ParamStore, seed: u64, std: f64, offset_std: f64) {
    store.map_matching(
        |_| true,
        |n, t| {
            let mut r = Rng::derive(seed, n);
            normal(t.shape(), if n.contains(".offset") { offset_std } else { std }, &mut r)
        },
    );
}

fn cfg(trial: u64, step: f64) -> GradCheckConfig {
    GradCheckConfig {
        step,
        seed: trial,
        ..GradCheckConfig::default()
    }
}

fn matmul(trial: u64) -> Result<GradReport> {
    let mut r = Rng::new(trial);
    let a = normal(&[2, 3, 4], 1.0, &mut r);
    let b = normal(&[4, 5], 1.0, &mut r);
    check(&[("a", a), ("b", b)], &cfg(trial, 1e-3), |t, v| t.matmul(v[0], v[1]))
}

fn linear_norm_gelu(trial: u64) -> Result<GradReport> {
    let mut r = Rng::new(trial);
    let inputs = [
        ("x", normal(&[5, 6], 1.0, &mut r)),
        ("w", normal(&[6, 4], 1.0, &mut r)),
        ("b", normal(&[4], 1.0, &mut r)),
        ("gamma", normal(&[4], 1.0, &mut r)),
        ("beta", normal(&[4], 1.0, &mut r)),
    ];
    check(&inputs, &cfg(trial, 1e-3), |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let y = t.layer_norm(y, v[3], v[4])?;
        let y = t.gelu(y);
        t.softmax(y, 0)
    })
}

fn conv2d(trial: u64) -> Result<GradReport> {
    let mut r = Rng::new(trial);
    let x = normal(&[4, 7, 6], 1.0, &mut r);
    let w = normal(&[6, 2, 3, 3], 1.0, &mut r);
    let b = normal(&[6], 1.0, &mut r);
    let opts = Conv2dOpts::new(1 + trial as usize % 2, 1).groups(2);
    check(&[("x", x), ("w", w), ("b", b)], &cfg(trial, 1e-3), move |t, v| t.conv2d(v[0], v[1], Some(v[2]), opts))
}

fn conv_transpose2d(trial: u64) -> Result<GradReport> {
    let mut r = Rng::new(trial);
    let x = normal(&[3, 3, 4], 1.0, &mut r);
    let w = normal(&[3, 2, 2, 2], 1.0, &mut r);
    let b = normal(&[2], 1.0, &mut r);
    check(&[("x", x), ("w", w), ("b", b)], &cfg(trial, 1e-3), |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2))
}

fn cross_entropy(trial: u64) -> Result<GradReport> {
    let mut r = Rng::new(trial);
    let logits = normal(&[3, 6], 1.0, &mut r);
    let labels: Arc<[usize]> = (0..6).map(|_| r.below(3)).collect::<Vec<_>>().into();
    check(&[("logits", logits)], &cfg(trial, 1e-3), move |t, v| t.cross_entropy(v[0], labels.clone()))
}

fn sample2d(trial: u64) -> Result<GradReport> {
    let mut r = Rng::new(trial);
    let f = normal(&[3, 5, 6], 1.0, &mut r);
    let pos = off_lattice(&[8, 2], -1.0, 5.8, &mut r);
    check(&[("f", f), ("pos", pos)], &cfg(trial, 1e-3), |t, v| t.sample(v[0], v[1]))
}

fn sample3d(trial: u64) -> Result<GradReport> {
    let mut r = Rng::new(trial);
    let f = normal(&[2, 3, 4, 4], 1.0, &mut r);
    let pos = off_lattice(&[6, 3], -0.5, 3.5, &mut r);
    check(&[("f", f), ("pos", pos)], &cfg(trial, 1e-3), |t, v| t.sample(v[0], v[1]))
}

// Layers whose offsets are produced internally can land on a cell boundary
// anywhere, so they use a small step.

fn deform_conv(trial: u64) -> Result<GradReport> {
    let mut store = ParamStore::new(trial);
    let geom = DeformGeom::same(3, 1 + trial as usize % 2);
    let layer = DeformConvLayer::new(&mut store, "d", 2, 3, geom, trial == 4);
    randomize(&mut store, trial, 0.3, 0.3);
    let mut r = Rng::new(trial);
    let x = normal(&[2, 8, 8], 1.0, &mut r);
    check_module(&store, &[("f", x)], &cfg(trial, 1e-6), |s, v| layer.forward(s, v[0]))
}

fn embed_first(trial: u64) -> Result<GradReport> {
    let mut store = ParamStore::new(trial);
    let embed = PatchEmbedFirst::new(&mut store, "e", EmbedKind::Deformable, 1, 4, 4)?;
    randomize(&mut store, trial, 0.5, 0.1);
    let mut r = Rng::new(trial);
    let x = Tensor::from_fn(&[1, 8, 8], |_| r.uniform());
    check_module(&store, &[("image", x)], &cfg(trial, 1e-6), |s, v| Ok(embed.forward(s, v[0])?.0))
}

fn embed_down(trial: u64) -> Result<GradReport> {
    let mut store = ParamStore::new(trial);
    let down = PatchEmbedDown::new(&mut store, "p", 3, 6);
    randomize(&mut store, trial, 0.5, 0.0);
    let mut r = Rng::new(trial);
    let x = normal(&[20, 3], 1.0, &mut r);
    check_module(&store, &[("tokens", x)], &cfg(trial, 1e-6), |s, v| Ok(down.forward(s, v[0], (4, 5))?.0))
}

fn attention(kind: AttentionKind, trial: u64) -> Result<GradReport> {
    let mut store = ParamStore::new(trial);
    let a = Attention::new(&mut store, "a", AttentionConfig::new(8, 2, kind, 3, 2)?);
    randomize(&mut store, trial, 0.4, 0.3);
    let mut r = Rng::new(trial);
    let f = normal(&[16, 8], 1.0, &mut r);
    check_module(&store, &[("f", f)], &cfg(trial, 1e-6), |s, v| a.forward(s, v[0], (4, 4)))
}

fn msdepe(trial: u64) -> Result<GradReport> {
    let mut store = ParamStore::new(trial);
    let pe = MsDepe::new(&mut store, "ms", 4);
    randomize(&mut store, trial, 0.5, 0.1);
    let mut r = Rng::new(trial);
    let f = normal(&[64, 4], 1.0, &mut r);
    check_module(&store, &[("f", f)], &cfg(trial, 1e-6), |s, v| pe.forward(s, v[0], (8, 8)))
}

fn cpe(trial: u64) -> Result<GradReport> {
    let mut store = ParamStore::new(trial);
    let pe = Cpe::new(&mut store, "cpe", 4);
    randomize(&mut store, trial, 0.5, 0.0);
    let mut r = Rng::new(trial);
    let f = normal(&[36, 4], 1.0, &mut r);
    check_module(&store, &[("f", f)], &cfg(trial, 1e-3), |s, v| pe.forward(s, v[0], (6, 6)))
}

fn loss(trial: u64) -> Result<GradReport> {
    let mut r = Rng::new(trial);
    let main = normal(&[3, 8, 8], 1.0, &mut r);
    let aux = normal(&[3, 4, 4], 1.0, &mut r);
    let labels: Vec<usize> = (0..64).map(|_| r.below(3)).collect();
    check(&[("logits", main), ("aux", aux)], &cfg(trial, 1e-3), |t, v| {
        combined_loss(t, v[0], &[v[1]], &labels, (8, 8), LossConfig::default())
    })
}

/// Nano on 32×32 with random offset convs; one random entry per parameter.
fn network(trial: u64) -> Result<GradReport> {
    let (net, mut store) = Network::build(&NetworkConfig::nano(), trial)?;
    store.map_matching(
        |n| n.contains(".offset."),
        |n, t| {
            let mut r = Rng::derive(trial, n);
            normal(t.shape(), 0.3, &mut r)
        },
    );
    let mut r = Rng::new(trial);
    let image = Tensor::from_fn(&[1, 32, 32], |_| r.uniform());
    let cfg = GradCheckConfig {
        step: 1e-7,
        max_entries: Some(1),
        seed: trial,
        ..GradCheckConfig::default()
    };
    check_module(&store, &[("image", image)], &cfg, |s, v| Ok(net.forward(s, v[0])?.logits))
}
