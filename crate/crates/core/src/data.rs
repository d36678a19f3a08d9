//! Seeded synthetic segmentation data: one ellipse or rectangle per
//! foreground class on a noisy background.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NOISE_STD: f64 = 0.1;
pub const MIN_EXTENT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H·W` class indices.
    pub label: Arc<[usize]>,
    pub height: usize,
    pub width: usize,
}

/// Mean intensity of class `k` out of `classes`, evenly spread on `[0.2, 0.8]`.
pub fn base_intensity(k: usize, classes: usize) -> f64 {
    0.2 + 0.6 * k as f64 / (classes - 1) as f64
}

pub fn gen_synthetic(seed: u64, num_classes: usize, h: usize, w: usize) -> Result<SegmentationSample> {
    if num_classes < 2 {
        return Err(Error::config("num_classes", format!("must be >= 2, got {num_classes}")));
    }
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::config("image_size", format!("extents must be >= {MIN_EXTENT}, got {h}x{w}")));
    }
    let mut rng = Rng::new(seed);
    let mut label = vec![0usize; h * w];
    let side = h.min(w) as f64;
    for c in 1..num_classes {
        let cy = rng.uniform_range(0.25, 0.75) * h as f64;
        let cx = rng.uniform_range(0.25, 0.75) * w as f64;
        let a = rng.uniform_range(0.12, 0.28) * side;
        let b = rng.uniform_range(0.12, 0.28) * side;
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let ellipse = rng.uniform() < 0.5;
        let (sn, cs) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (cs * dx + sn * dy) / a;
                let v = (-sn * dx + cs * dy) / b;
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    label[y * w + x] = c;
                }
            }
        }
    }
    let image = Tensor::from_fn(&[1, h, w], |p| {
        (base_intensity(label[p], num_classes) + NOISE_STD * rng.normal()).clamp(0.0, 1.0)
    });
    Ok(SegmentationSample {
        image,
        label: label.into(),
        height: h,
        width: w,
    })
}

/// Seed of sample `index` of a named split.
pub fn sample_seed(seed: u64, split: &str, index: usize) -> u64 {
    Rng::derive(seed, &format!("{split}/{index}")).next_u64()
}

/// `count` samples of the named split.
pub fn gen_split(seed: u64, split: &str, count: usize, num_classes: usize, h: usize, w: usize) -> Result<Vec<SegmentationSample>> {
    (0..count)
        .map(|i| gen_synthetic(sample_seed(seed, split, i), num_classes, h, w))
        .collect()
}
