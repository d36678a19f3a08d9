//! Overlap and boundary-distance metrics on integer label masks.

use crate::error::{Error, Result};

/// Dice coefficient of class `c`; `1.0` when the class is absent from both.
pub fn dsc(pred: &[usize], label: &[usize], c: usize) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(label) {
        let (ia, ib) = (a == c, b == c);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Pixels of class `c` with at least one 8-neighbour that is another class
/// or lies outside the image.
pub fn boundary(mask: &[usize], h: usize, w: usize, c: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != c {
                continue;
            }
            let edge = (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 || mask[ny as usize * w + nx as usize] != c
                })
            });
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest marked pixel, by the
/// separable lower-envelope transform.
pub fn squared_edt(marks: &[bool], h: usize, w: usize) -> Vec<f64> {
    let inf = f64::INFINITY;
    let mut grid: Vec<f64> = marks.iter().map(|&m| if m { 0.0 } else { inf }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| grid[y * w + x]));
        edt_1d(&line, &mut out);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line.clear();
        line.extend_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&line, &mut out);
        grid[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    grid
}

fn edt_1d(f: &[f64], d: &mut Vec<f64>) {
    let n = f.len();
    d.clear();
    d.resize(n, f64::INFINITY);
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let inter = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = inter(q, p);
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            let s = inter(q, *v.last().unwrap());
            v.push(q);
            z.push(s);
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// 95th percentile of the pooled nearest-boundary distances in both
/// directions between the class-`c` regions of `pred` and `label`.
pub fn hd95(pred: &[usize], label: &[usize], h: usize, w: usize, c: usize) -> Result<f64> {
    let bp = boundary(pred, h, w, c);
    let bg = boundary(label, h, w, c);
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "HD95 of class {c} needs both masks non-empty (prediction {} boundary px, label {})",
            bp.len(),
            bg.len()
        )));
    }
    let field = |pts: &[(usize, usize)]| {
        let mut marks = vec![false; h * w];
        for &(y, x) in pts {
            marks[y * w + x] = true;
        }
        squared_edt(&marks, h, w)
    };
    let to_g = field(&bg);
    let to_p = field(&bp);
    let mut d: Vec<f64> = bp
        .iter()
        .map(|&(y, x)| to_g[y * w + x].sqrt())
        .chain(bg.iter().map(|&(y, x)| to_p[y * w + x].sqrt()))
        .collect();
    Ok(percentile(&mut d, 95.0))
}

/// Per-class averages over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Indexed by class; entry 0 is background.
    pub dsc: Vec<f64>,
    /// `None` when the class was never defined for HD95.
    pub hd95: Vec<Option<f64>>,
    pub samples: usize,
}

impl EvalReport {
    /// Accumulates `(prediction, label)` pairs on an `h × w` grid.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>,
        classes: usize,
        h: usize,
        w: usize,
    ) -> Self {
        let mut dsc_sum = vec![0.0; classes];
        let mut hd_sum = vec![0.0; classes];
        let mut hd_n = vec![0usize; classes];
        let mut n = 0;
        for (p, g) in pairs {
            n += 1;
            for c in 0..classes {
                dsc_sum[c] += dsc(p, g, c);
                if let Ok(v) = hd95(p, g, h, w, c) {
                    hd_sum[c] += v;
                    hd_n[c] += 1;
                }
            }
        }
        Self {
            dsc: dsc_sum.iter().map(|s| s / n.max(1) as f64).collect(),
            hd95: hd_sum
                .iter()
                .zip(&hd_n)
                .map(|(&s, &k)| (k > 0).then(|| s / k as f64))
                .collect(),
            samples: n,
        }
    }

    /// Mean DSC over foreground classes.
    pub fn dsc_mean(&self) -> f64 {
        let fg = &self.dsc[1..];
        fg.iter().sum::<f64>() / fg.len() as f64
    }

    /// Mean HD95 over foreground classes where it is defined.
    pub fn hd95_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.hd95[1..].iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `key=value` lines, one per class metric plus the two means.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in 1..self.dsc.len() {
            s += &format!("dsc_class{c}={}\n", self.dsc[c]);
        }
        for c in 1..self.hd95.len() {
            match self.hd95[c] {
                Some(v) => s += &format!("hd95_class{c}={v}\n"),
                None => s += &format!("hd95_class{c}=absent\n"),
            }
        }
        s += &format!("dsc_mean={}\n", self.dsc_mean());
        match self.hd95_mean() {
            Some(v) => s += &format!("hd95_mean={v}\n"),
            None => s += "hd95_mean=absent\n",
        }
        s
    }
}
