use agile_core::data::{gen_split, gen_synthetic};
use agile_core::gradcheck::{check, GradCheckConfig};
use agile_core::loss::{ce_loss, combined_loss, dice_loss, head_loss, supervision_weights, LossConfig, DICE_EPS};
use agile_core::metrics::{dsc, hd95, squared_edt, EvalReport};
use agile_core::network::{Network, NetworkConfig};
use agile_core::ops::downsample_labels;
use agile_core::optim::cosine_lr;
use agile_core::params::ParamStore;
use agile_core::rng::Rng;
use agile_core::train::{train, TrainConfig};
use agile_core::{Error, Tape, Tensor};
use proptest::prelude::*;

fn scalar(t: &Tape, v: agile_core::Var) -> f64 {
    t.value(v).item().unwrap()
}

#[test]
fn dice_of_perfect_prediction_is_near_zero() {
    let labels = [0, 2, 1, 1, 2, 0, 0, 1, 2];
    let logits = Tensor::from_fn(&[3, 3, 3], |i| if labels[i % 9] == i / 9 { 50.0 } else { 0.0 });
    let mut t = Tape::new();
    let x = t.constant(logits);
    let l = dice_loss(&mut t, x, &labels).unwrap();
    let v = scalar(&t, l);
    assert!((0.0..1e-4).contains(&v), "{v}");
}

#[test]
fn dice_of_uniform_prediction_by_hand() {
    let labels = [0, 1, 1, 1];
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 2, 2]));
    let l = dice_loss(&mut t, x, &labels).unwrap();
    let e = DICE_EPS;
    let d0 = (2.0 * 0.5 * 1.0 + e) / (0.5 * 4.0 + 1.0 + e);
    let d1 = (2.0 * 0.5 * 3.0 + e) / (0.5 * 4.0 + 3.0 + e);
    let want = 1.0 - (d0 + d1) / 2.0;
    assert!((scalar(&t, l) - want).abs() < 1e-15);
}

#[test]
fn dice_gradcheck() {
    for trial in 0..5u64 {
        let mut r = Rng::new(trial);
        let logits = Tensor::from_fn(&[2, 4, 4], |_| r.normal());
        let labels: Vec<usize> = (0..16).map(|_| r.below(2)).collect();
        let cfg = GradCheckConfig { seed: trial, ..GradCheckConfig::default() };
        let report = check(&[("logits", logits)], &cfg, |t, v| dice_loss(t, v[0], &labels)).unwrap();
        assert!(report.passes(1e-4), "trial {trial}:\n{report}");
    }
}

#[test]
fn combined_loss_gradcheck_with_aux_heads() {
    let mut r = Rng::new(3);
    let main = Tensor::from_fn(&[3, 8, 8], |_| r.normal());
    let aux = Tensor::from_fn(&[3, 4, 4], |_| r.normal());
    let labels: Vec<usize> = (0..64).map(|_| r.below(3)).collect();
    let report = check(&[("main", main), ("aux", aux)], &GradCheckConfig::default(), |t, v| {
        combined_loss(t, v[0], &[v[1]], &labels, (8, 8), LossConfig::default())
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report}");
}

#[test]
fn dice_class_count_mismatch() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 2, 2]));
    assert!(matches!(dice_loss(&mut t, x, &[0, 1, 3, 0]), Err(Error::Dimension(_))));
}

#[test]
fn lambda_endpoints_match_direct_calls() {
    let mut r = Rng::new(4);
    let logits = Tensor::from_fn(&[3, 8, 8], |_| r.normal());
    let aux = [Tensor::from_fn(&[3, 4, 4], |_| r.normal()), Tensor::from_fn(&[3, 2, 2], |_| r.normal())];
    let labels: Vec<usize> = (0..64).map(|_| r.below(3)).collect();
    for (lambda, direct) in [(1.0, dice_loss as fn(&mut Tape, _, &[usize]) -> _), (0.0, ce_loss)] {
        let cfg = LossConfig::new(lambda).unwrap();
        let mut t = Tape::new();
        let x = t.constant(logits.clone());
        let a: Vec<_> = aux.iter().map(|a| t.constant(a.clone())).collect();
        let plain = combined_loss(&mut t, x, &[], &labels, (8, 8), cfg).unwrap();
        let d = direct(&mut t, x, &labels).unwrap();
        assert!((scalar(&t, plain) - scalar(&t, d)).abs() < 1e-12, "lambda {lambda}");

        let full = combined_loss(&mut t, x, &a, &labels, (8, 8), cfg).unwrap();
        let w = supervision_weights(2);
        let mut want = w[0] * scalar(&t, d);
        for (i, &av) in a.iter().enumerate() {
            let small = downsample_labels(&labels, 8, 8, 2 << i);
            let l = direct(&mut t, av, &small).unwrap();
            want += w[i + 1] * scalar(&t, l);
        }
        assert!((scalar(&t, full) - want).abs() < 1e-12, "lambda {lambda} with aux");
    }
}

#[test]
fn empty_aux_equals_main_head() {
    let mut r = Rng::new(5);
    let logits = Tensor::from_fn(&[2, 4, 4], |_| r.normal());
    let labels: Vec<usize> = (0..16).map(|_| r.below(2)).collect();
    let mut t = Tape::new();
    let x = t.constant(logits);
    let a = combined_loss(&mut t, x, &[], &labels, (4, 4), LossConfig::default()).unwrap();
    let b = head_loss(&mut t, x, &labels, LossConfig::default()).unwrap();
    assert_eq!(scalar(&t, a), scalar(&t, b));
    let d = dice_loss(&mut t, x, &labels).unwrap();
    let c = ce_loss(&mut t, x, &labels).unwrap();
    assert!((scalar(&t, a) - (0.6 * scalar(&t, d) + 0.4 * scalar(&t, c))).abs() < 1e-15);
}

#[test]
fn dsc_cases() {
    let p = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let g = [1, 1, 0, 0, 1, 1, 0, 0, 0, 0];
    assert_eq!(dsc(&p, &g, 1), 0.5);
    assert_eq!(dsc(&p, &p, 1), 1.0);
    assert_eq!(dsc(&[1, 0, 0], &[0, 0, 1], 1), 0.0);
    assert_eq!(dsc(&[0, 0, 0], &[0, 0, 0], 2), 1.0);
}

/// Boundary by explicit neighbour enumeration, distances by exhaustive search.
fn hd95_oracle(p: &[usize], g: &[usize], h: usize, w: usize, c: usize) -> f64 {
    let edge = |m: &[usize]| {
        let mut pts = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if m[(y * w as i64 + x) as usize] != c {
                    continue;
                }
                let mut interior = true;
                for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || m[(ny * w as i64 + nx) as usize] != c {
                        interior = false;
                    }
                }
                if !interior {
                    pts.push((y as f64, x as f64));
                }
            }
        }
        pts
    };
    let (bp, bg) = (edge(p), edge(g));
    let nearest = |a: &[(f64, f64)], b: &[(f64, f64)]| -> Vec<f64> {
        a.iter()
            .map(|&(y, x)| b.iter().map(|&(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut d = nearest(&bp, &bg);
    d.extend(nearest(&bg, &bp));
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    d[lo] + (d[(lo + 1).min(d.len() - 1)] - d[lo]) * (rank - lo as f64)
}

fn random_blobs(r: &mut Rng, h: usize, w: usize) -> Vec<usize> {
    let mut m = vec![0; h * w];
    for _ in 0..1 + r.below(3) {
        let (cy, cx) = (r.uniform_range(0.0, h as f64), r.uniform_range(0.0, w as f64));
        let rad = r.uniform_range(1.0, 9.0);
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rad * rad {
                    m[y * w + x] = 1;
                }
            }
        }
    }
    for _ in 0..r.below(6) {
        m[r.below(h * w)] = 1;
    }
    m[r.below(h * w)] = 1;
    m
}

#[test]
fn hd95_matches_exhaustive_oracle() {
    let mut r = Rng::new(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_blobs(&mut r, 32, 32);
        let g = random_blobs(&mut r, 32, 32);
        let got = hd95(&p, &g, 32, 32, 1).unwrap();
        worst = worst.max((got - hd95_oracle(&p, &g, 32, 32, 1)).abs());
        assert_eq!(got, hd95(&g, &p, 32, 32, 1).unwrap());
    }
    assert!(worst < 1e-9, "{worst:e}");
}

#[test]
fn edt_matches_exhaustive_search() {
    let mut r = Rng::new(1);
    for _ in 0..200 {
        let (h, w) = (1 + r.below(9), 1 + r.below(9));
        let marks: Vec<bool> = (0..h * w).map(|_| r.below(5) == 0).collect();
        let d = squared_edt(&marks, h, w);
        for q in 0..h * w {
            let want = (0..h * w)
                .filter(|&i| marks[i])
                .map(|i| ((q / w) as f64 - (i / w) as f64).powi(2) + ((q % w) as f64 - (i % w) as f64).powi(2))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[q], want, "{h}x{w} at {q}: {marks:?}");
        }
    }
}

#[test]
fn hd95_simple_cases() {
    let mut p = vec![0; 7 * 7];
    let mut g = vec![0; 7 * 7];
    p[3 * 7 + 1] = 1;
    g[3 * 7 + 4] = 1;
    assert_eq!(hd95(&p, &g, 7, 7, 1).unwrap(), 3.0);
    assert_eq!(hd95(&g, &g, 7, 7, 1).unwrap(), 0.0);
    assert!(matches!(hd95(&p, &vec![0; 49], 7, 7, 1), Err(Error::UndefinedMetric(_))));
}

#[test]
fn report_marks_undefined_hd95_absent() {
    let p = vec![0usize; 64];
    let mut g = vec![0usize; 64];
    g[10] = 1;
    let report = EvalReport::from_pairs([(&p[..], &g[..])], 3, 8, 8);
    assert_eq!(report.hd95[1], None);
    assert_eq!(report.dsc[2], 1.0);
    let s = report.summary();
    assert!(s.contains("hd95_class1=absent") && s.contains("dsc_mean=0.5"), "{s}");
}

#[test]
fn generator_is_deterministic() {
    let a = gen_split(3, "train", 4, 3, 64, 64).unwrap();
    let b = gen_split(3, "train", 4, 3, 64, 64).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_split(3, "test", 4, 3, 64, 64).unwrap());
    assert!(a.iter().all(|s| s.label.iter().all(|&l| l < 3)));
}

#[test]
fn generator_covers_every_class() {
    for classes in [2, 3] {
        let ok = (0..1000u64)
            .filter(|&seed| {
                let s = gen_synthetic(seed, classes, 64, 64).unwrap();
                (0..classes).all(|c| s.label.iter().filter(|&&l| l == c).count() >= 20)
            })
            .count();
        assert!(ok >= 950, "{classes} classes: {ok}/1000");
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(3e-3, 0, 2000), 3e-3);
    assert!(cosine_lr(3e-3, 1999, 2000) < 1e-3 * 3e-3);
    let mut prev = f64::INFINITY;
    for s in 0..2000 {
        let lr = cosine_lr(3e-3, s, 2000);
        assert!(lr <= prev);
        prev = lr;
    }
}

fn nano_32() -> (Network, ParamStore) {
    let mut cfg = NetworkConfig::nano();
    cfg.num_classes = 3;
    Network::build(&cfg, 0).unwrap()
}

#[test]
fn repeated_batch_loss_decreases() {
    let (net, mut store) = nano_32();
    let data = gen_split(1, "train", 1, 3, 32, 32).unwrap();
    let cfg = TrainConfig { lr: 3e-3, steps: 20, batch: 1, log_every: 1, ..TrainConfig::default() };
    let log = train(&net, &mut store, &data, &cfg).unwrap();
    assert_eq!(log.rows.len(), 20);
    let losses: Vec<f64> = log.rows.iter().map(|r| r.loss).collect();
    let mean_step = (losses[19] - losses[0]) / 19.0;
    assert!(mean_step <= 0.0, "{losses:?}");
    let first: f64 = losses[..10].iter().sum();
    let second: f64 = losses[10..].iter().sum();
    assert!(second <= first, "{losses:?}");
}

#[test]
fn training_is_bit_reproducible() {
    let data = gen_split(2, "train", 4, 3, 32, 32).unwrap();
    let cfg = TrainConfig { lr: 3e-3, steps: 4, batch: 2, log_every: 1, ..TrainConfig::default() };
    let run = || {
        let (net, mut store) = nano_32();
        let log = train(&net, &mut store, &data, &cfg).unwrap();
        (log.to_csv(), store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    for ((_, x), (_, y)) in sa.iter().zip(sb.iter()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn nan_loss_aborts_naming_the_step() {
    let (net, mut store) = nano_32();
    let id = store.id("head.out.bias").unwrap();
    store.set(id, Tensor::full(&[3], f64::NAN)).unwrap();
    let data = gen_split(1, "train", 2, 3, 32, 32).unwrap();
    let cfg = TrainConfig { steps: 3, batch: 1, ..TrainConfig::default() };
    match train(&net, &mut store, &data, &cfg) {
        Err(e @ Error::NonFinite { step: 0, .. }) => assert!(e.to_string().contains("step 0"), "{e}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric(seed in 0u64..10_000) {
        let mut r = Rng::new(seed);
        let p = random_blobs(&mut r, 16, 16);
        let g = random_blobs(&mut r, 16, 16);
        prop_assert_eq!(dsc(&p, &g, 1), dsc(&g, &p, 1));
        prop_assert_eq!(hd95(&p, &g, 16, 16, 1).unwrap(), hd95(&g, &p, 16, 16, 1).unwrap());
    }

    #[test]
    fn loss_ranges(seed in 0u64..10_000, scale in 0.1f64..20.0) {
        let mut r = Rng::new(seed);
        let logits = Tensor::from_fn(&[3, 4, 4], |_| scale * r.normal());
        let labels: Vec<usize> = (0..16).map(|_| r.below(3)).collect();
        let mut t = Tape::new();
        let x = t.constant(logits);
        let d = dice_loss(&mut t, x, &labels).unwrap();
        let c = ce_loss(&mut t, x, &labels).unwrap();
        let d = scalar(&t, d);
        prop_assert!((0.0..=1.0 + 1e-6).contains(&d));
        prop_assert!(scalar(&t, c) >= 0.0);
    }
}
