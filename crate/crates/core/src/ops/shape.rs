use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{strides, Tensor};

/// Source offset for every destination element of `permute(shape, perm)`.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += moved[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= moved[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.record(out, &[x], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("permute: {perm:?} is not a permutation of {shape:?}")));
        }
        let map = permute_map(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&o| src[o]).collect();
        let out = Tensor::from_parts(perm.iter().map(|&p| shape[p]).collect(), data);
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for (gi, &o) in g.iter().zip(&map) {
                gx[o] = *gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {first:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.record(out, parts, move |g, need| {
            let mut grads: Vec<Option<Vec<f64>>> = widths
                .iter()
                .zip(need)
                .map(|(&w, &n)| n.then(|| Vec::with_capacity(outer * w * inner)))
                .collect();
            for o in 0..outer {
                let mut start = o * total * inner;
                for (slot, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(buf) = slot {
                        buf.extend_from_slice(&g[start..start + w * inner]);
                    }
                    start += w * inner;
                }
            }
            grads
        }))
    }

    /// Selects rows along the second-to-last axis: `out[.., m, :] = x[.., index[m], :]`.
    /// Repeated indices scatter-add in backward.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("gather_rows needs rank >= 2"));
        }
        let rows = shape[shape.len() - 2];
        let d = shape[shape.len() - 1];
        let batch: usize = shape[..shape.len() - 2].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("gather_rows: index {bad} out of range for {rows} rows")));
        }
        let m = index.len();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(batch * m * d);
        for b in 0..batch {
            for &i in index.iter() {
                let o = (b * rows + i) * d;
                data.extend_from_slice(&src[o..o + d]);
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = m;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![0.0; batch * rows * d];
            for b in 0..batch {
                for (j, &i) in index.iter().enumerate() {
                    let dst = (b * rows + i) * d;
                    let s = (b * m + j) * d;
                    gx[dst..dst + d].iter_mut().zip(&g[s..s + d]).for_each(|(a, v)| *a += v);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour downsampling of a `[C, H, W]` map by an integer factor.
    pub fn nearest_downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::dim(format!("nearest_downsample expects [C,H,W], got {shape:?}")));
        };
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::dim(format!("nearest_downsample: {h}x{w} not divisible by {factor}")));
        }
        let (ho, wo) = (h / factor, w / factor);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    data.push(src[(ch * h + y * factor) * w + xx * factor]);
                }
            }
        }
        let out = Tensor::from_parts(vec![c, ho, wo], data);
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..ho {
                    for xx in 0..wo {
                        gx[(ch * h + y * factor) * w + xx * factor] = g[(ch * ho + y) * wo + xx];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// Nearest-neighbour downsampling of an integer label mask.
pub fn downsample_labels(labels: &[usize], h: usize, w: usize, factor: usize) -> Vec<usize> {
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(ho * wo);
    for y in 0..ho {
        for x in 0..wo {
            out.push(labels[y * factor * w + x * factor]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = tape.transpose(x).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(tape.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn permute_rank3() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        let yv = tape.value(y).data();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(yv[(k * 2 + i) * 3 + j], (i * 12 + j * 4 + k) as f64);
                }
            }
        }
    }

    #[test]
    fn concat_along_last_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn nearest_downsample_picks_top_left() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
        let y = tape.nearest_downsample(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, 8.0, 10.0]);
        assert!(tape.nearest_downsample(x, 3).is_err());
        assert_eq!(downsample_labels(&(0..16).collect::<Vec<_>>(), 4, 4, 2), vec![0, 2, 8, 10]);
    }
}
