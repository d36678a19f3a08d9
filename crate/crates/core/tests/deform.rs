use agile_core::deform::{DeformConvLayer, DeformGeom, EmbedKind, PatchEmbedDown, PatchEmbedFirst};
use agile_core::gradcheck::{check_module, GradCheckConfig};
use agile_core::ops::Conv2dOpts;
use agile_core::params::{ParamStore, Session};
use agile_core::rng::Rng;
use agile_core::{Error, Tensor};

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.normal())
}

fn randomize_offsets(store: &mut ParamStore, seed: u64, std: f64) {
    store.map_matching(
        |n| n.contains(".offset"),
        |n, t| {
            let mut r = Rng::derive(seed, n);
            normal(t.shape(), std, &mut r)
        },
    );
}

#[test]
fn zero_offsets_equal_dense_conv_on_50_instances() {
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut r = Rng::new(i);
        let k = [1, 3, 5][r.below(3)];
        let stride = 1 + r.below(2);
        let c_in = 1 + r.below(3);
        let c_out = 1 + r.below(4);
        let h = k + r.below(6);
        let w = k + r.below(6);
        let shared = r.below(2) == 1;
        let mut store = ParamStore::new(i);
        let layer = DeformConvLayer::new(&mut store, "d", c_in, c_out, DeformGeom::same(k, stride), shared);
        let bias = store.id("d.bias").unwrap();
        store.set(bias, normal(&[c_out], 1.0, &mut r)).unwrap();
        let x = normal(&[c_in, h, w], 1.0, &mut r);
        let mut s = Session::inference(&store);
        let xv = s.constant(x);
        let y = layer.forward(&mut s, xv).unwrap();
        let wv = s.param(layer.weight);
        let bv = s.param(layer.bias);
        let dense = s.conv2d(xv, wv, Some(bv), Conv2dOpts::new(stride, k / 2)).unwrap();
        assert_eq!(s.shape(y), s.shape(dense));
        worst = worst.max(s.value(y).max_abs_diff(s.value(dense)));
    }
    assert!(worst < 1e-12, "worst deviation {worst:e}");
}

#[test]
fn constant_field_is_preserved_in_the_interior() {
    let mut store = ParamStore::new(3);
    let layer = DeformConvLayer::new(&mut store, "d", 1, 1, DeformGeom::same(3, 1), false);
    let mut r = Rng::new(4);
    // Kernel with entries summing to one.
    let raw: Vec<f64> = (0..9).map(|_| r.uniform_range(0.1, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    store.set(layer.weight, Tensor::new(&[1, 1, 3, 3], raw.iter().map(|v| v / total).collect()).unwrap()).unwrap();
    // Offsets bounded by 0.9 px: bias up to 0.5, weights small against a constant input.
    store.map_matching(
        |n| n.contains(".offset"),
        |n, t| {
            let mut r = Rng::derive(9, n);
            let lim = if n.ends_with("bias") { 0.5 } else { 0.04 };
            Tensor::from_fn(t.shape(), |_| r.uniform_range(-lim, lim))
        },
    );
    let value = 0.7;
    let mut s = Session::inference(&store);
    let x = s.constant(Tensor::full(&[1, 12, 12], value));
    let offsets = layer.offsets(&mut s, x).unwrap();
    assert!(s.value(offsets).data().iter().all(|v| v.abs() < 0.9));
    assert!(s.value(offsets).data().iter().any(|v| v.abs() > 0.1));
    let y = layer.forward(&mut s, x).unwrap();
    let y = s.value(y);
    for oy in 2..10 {
        for ox in 2..10 {
            assert!((y.data()[oy * 12 + ox] - value).abs() < 1e-12);
        }
    }
}

#[test]
fn gradcheck_kernel_offsets_and_input() {
    for trial in 0..5u64 {
        let mut store = ParamStore::new(trial);
        let shared = trial == 4;
        let layer = DeformConvLayer::new(&mut store, "d", 2, 3, DeformGeom::same(3, 1 + (trial as usize % 2)), shared);
        randomize_offsets(&mut store, trial, 0.3);
        let mut r = Rng::new(50 + trial);
        let x = normal(&[2, 8, 8], 1.0, &mut r);
        let cfg = GradCheckConfig { step: 1e-6, seed: trial, ..GradCheckConfig::default() };
        let report = check_module(&store, &[("f", x)], &cfg, |s, v| layer.forward(s, v[0])).unwrap();
        assert!(report.passes(1e-4), "trial {trial}:\n{report}");
        let offs = layer.offset_field(&store, &normal(&[2, 8, 8], 1.0, &mut r)).unwrap();
        assert!(!offs.is_zero());
    }
}

#[test]
fn first_embedding_resolutions() {
    let mut store = ParamStore::new(0);
    let embed = PatchEmbedFirst::new(&mut store, "e", EmbedKind::Deformable, 1, 4, 4).unwrap();
    let mut s = Session::inference(&store);
    let img = s.constant(Tensor::full(&[1, 224, 224], 0.5));
    let (_, grid) = embed.forward(&mut s, img).unwrap();
    assert_eq!(grid, (56, 56));
    let img = s.constant(Tensor::full(&[1, 64, 64], 0.5));
    let (t, grid) = embed.forward(&mut s, img).unwrap();
    assert_eq!(grid, (16, 16));
    assert_eq!(s.shape(t), &[256, 4]);
    let bad = s.constant(Tensor::full(&[1, 66, 64], 0.5));
    assert!(matches!(embed.forward(&mut s, bad), Err(Error::Dimension(_))));
}

#[test]
fn first_embedding_at_init_equals_two_dense_convs() {
    for (kind, seed) in [(EmbedKind::Deformable, 1u64), (EmbedKind::Rigid, 2)] {
        let mut store = ParamStore::new(seed);
        let embed = PatchEmbedFirst::new(&mut store, "e", kind, 2, 8, 4).unwrap();
        let mut r = Rng::new(seed);
        let x = normal(&[2, 32, 24], 1.0, &mut r);
        let mut s = Session::inference(&store);
        let xv = s.constant(x);
        let (t, grid) = embed.forward(&mut s, xv).unwrap();
        assert_eq!(grid, (8, 6));

        let p = |s: &mut Session, name: &str| {
            let id = s.store().id(name).unwrap();
            s.param(id)
        };
        let (w1, b1) = (p(&mut s, "e.conv1.weight"), p(&mut s, "e.conv1.bias"));
        let (g1, be1) = (p(&mut s, "e.norm1.gamma"), p(&mut s, "e.norm1.beta"));
        let (w2, b2) = (p(&mut s, "e.conv2.weight"), p(&mut s, "e.conv2.bias"));
        let (g2, be2) = (p(&mut s, "e.norm2.gamma"), p(&mut s, "e.norm2.beta"));
        let y = s.conv2d(xv, w1, Some(b1), Conv2dOpts::new(2, 1)).unwrap();
        let y = s.reshape(y, &[4, 16 * 12]).unwrap();
        let y = s.transpose(y).unwrap();
        let y = s.layer_norm(y, g1, be1).unwrap();
        let y = s.gelu(y);
        let y = s.transpose(y).unwrap();
        let y = s.reshape(y, &[4, 16, 12]).unwrap();
        let y = s.conv2d(y, w2, Some(b2), Conv2dOpts::new(2, 1)).unwrap();
        let y = s.reshape(y, &[8, 48]).unwrap();
        let y = s.transpose(y).unwrap();
        let y = s.layer_norm(y, g2, be2).unwrap();
        let d = s.value(t).max_abs_diff(s.value(y));
        assert!(d < 1e-12, "{kind:?}: {d:e}");
    }
}

#[test]
fn down_embedding_shapes() {
    let mut store = ParamStore::new(0);
    let down = PatchEmbedDown::new(&mut store, "p", 64, 128);
    let mut s = Session::inference(&store);
    let t = s.constant(Tensor::full(&[56 * 56, 64], 0.1));
    let (y, grid) = down.forward(&mut s, t, (56, 56)).unwrap();
    assert_eq!(grid, (28, 28));
    assert_eq!(s.shape(y), &[784, 128]);
    let t = s.constant(Tensor::full(&[4, 64], 0.1));
    let (_, grid) = down.forward(&mut s, t, (2, 2)).unwrap();
    assert_eq!(grid, (1, 1));
    let t = s.constant(Tensor::full(&[2, 64], 0.1));
    assert!(down.forward(&mut s, t, (1, 2)).is_err());
}

#[test]
fn down_embedding_gradcheck() {
    for trial in 0..5u64 {
        let mut store = ParamStore::new(trial);
        let down = PatchEmbedDown::new(&mut store, "p", 3, 6);
        // Larger conv weights keep the layer-norm input away from zero variance.
        store.map_matching(|n| n.ends_with("conv.weight"), |n, t| {
            let mut r = Rng::derive(trial, n);
            normal(t.shape(), 0.5, &mut r)
        });
        let mut r = Rng::new(trial);
        let x = normal(&[20, 3], 1.0, &mut r);
        let cfg = GradCheckConfig { seed: trial, ..GradCheckConfig::default() };
        let report = check_module(&store, &[("tokens", x)], &cfg, |s, v| Ok(down.forward(s, v[0], (4, 5))?.0)).unwrap();
        assert!(report.passes(1e-5), "trial {trial}:\n{report}");
    }
}

#[test]
fn spatial_underflow() {
    let mut store = ParamStore::new(0);
    let geom = DeformGeom { kernel: 5, stride: 1, padding: 1, dilation: 1 };
    let layer = DeformConvLayer::new(&mut store, "d", 1, 1, geom, false);
    let mut s = Session::inference(&store);
    let x = s.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(layer.forward(&mut s, x), Err(Error::Dimension(_))));
}
