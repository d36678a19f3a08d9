//! Bilinear / trilinear sampling at fractional pixel coordinates.
//!
//! Coordinates are in pixel units with the origin at the first pixel, ordered
//! `(row, col)` in 2D and `(depth, row, col)` in 3D. Corners that fall
//! outside the map contribute zero. At exact integer coordinates the
//! position gradient takes the right-hand branch (the `floor` cell).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A set of `L` sample positions with `D` coordinates each.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    positions: Tensor,
}

impl SampleGrid {
    pub fn new(positions: Tensor) -> Result<Self> {
        match positions.shape() {
            [_, 2] | [_, 3] => Ok(Self { positions }),
            s => Err(Error::dim(format!("sample grid must be [L, 2] or [L, 3], got {s:?}"))),
        }
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn rank(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One in-bounds lattice neighbour of a sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner {
    /// Flat spatial offset into the map.
    pub offset: usize,
    pub weight: f64,
    /// d weight / d coordinate, per axis.
    pub dweight: [f64; 3],
}

/// Collects the in-bounds corners of `pos` on a map with spatial `dims`.
pub(crate) fn corners(pos: &[f64], dims: &[usize], out: &mut Vec<Corner>) {
    out.clear();
    let rank = dims.len();
    let mut base = [0i64; 3];
    let mut frac = [0.0f64; 3];
    for d in 0..rank {
        let fl = pos[d].floor();
        base[d] = fl as i64;
        frac[d] = pos[d] - fl;
    }
    'corner: for bits in 0..(1usize << rank) {
        let mut offset = 0usize;
        let mut w = [0.0f64; 3];
        for d in 0..rank {
            let hi = (bits >> (rank - 1 - d)) & 1 == 1;
            let idx = base[d] + hi as i64;
            if idx < 0 || idx >= dims[d] as i64 {
                continue 'corner;
            }
            offset = offset * dims[d] + idx as usize;
            w[d] = if hi { frac[d] } else { 1.0 - frac[d] };
        }
        let mut weight = 1.0;
        let mut dweight = [0.0f64; 3];
        for d in 0..rank {
            weight *= w[d];
            let sign = if (bits >> (rank - 1 - d)) & 1 == 1 { 1.0 } else { -1.0 };
            dweight[d] = sign * (0..rank).filter(|&e| e != d).map(|e| w[e]).product::<f64>();
        }
        out.push(Corner {
            offset,
            weight,
            dweight,
        });
    }
}

/// Forward sampling without recording: `f[C, spatial...]` at every row of
/// the grid, giving `[C, L]`.
pub fn sample_values(f: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let dims = check_ranks(f.shape(), grid.positions.shape())?;
    Ok(sample_forward(f.data(), f.shape()[0], &dims, grid.positions.data()))
}

fn check_ranks(fshape: &[usize], pshape: &[usize]) -> Result<Vec<usize>> {
    let spatial = fshape.len().saturating_sub(1);
    if !(spatial == 2 || spatial == 3) || pshape.len() != 2 || pshape[1] != spatial {
        return Err(Error::dim(format!(
            "sample: grid {pshape:?} does not match the spatial rank of map {fshape:?}"
        )));
    }
    Ok(fshape[1..].to_vec())
}

fn sample_forward(f: &[f64], channels: usize, dims: &[usize], pos: &[f64]) -> Tensor {
    let rank = dims.len();
    let plane: usize = dims.iter().product();
    let n = pos.len() / rank;
    let mut out = vec![0.0; channels * n];
    let mut cs = Vec::with_capacity(8);
    for i in 0..n {
        corners(&pos[i * rank..(i + 1) * rank], dims, &mut cs);
        for c in 0..channels {
            let fc = &f[c * plane..(c + 1) * plane];
            out[c * n + i] = cs.iter().map(|k| k.weight * fc[k.offset]).sum();
        }
    }
    Tensor::from_parts(vec![channels, n], out)
}

impl Tape {
    /// Samples `f[C, spatial...]` at `positions[L, D]`, returning `[C, L]`.
    /// Differentiable with respect to both the map and the positions.
    pub fn sample(&mut self, f: Var, positions: Var) -> Result<Var> {
        let dims = check_ranks(self.shape(f), self.shape(positions))?;
        let fv = self.value(f).clone();
        let pv = self.value(positions).clone();
        let channels = fv.shape()[0];
        let out = sample_forward(fv.data(), channels, &dims, pv.data());
        Ok(self.record(out, &[f, positions], move |g, need| {
            let rank = dims.len();
            let plane: usize = dims.iter().product();
            let n = pv.shape()[0];
            let fd = fv.data();
            let mut gf = need[0].then(|| vec![0.0; fd.len()]);
            let mut gp = need[1].then(|| vec![0.0; n * rank]);
            let mut cs = Vec::with_capacity(8);
            for i in 0..n {
                corners(&pv.data()[i * rank..(i + 1) * rank], &dims, &mut cs);
                for c in 0..channels {
                    let gv = g[c * n + i];
                    if gv == 0.0 {
                        continue;
                    }
                    for k in &cs {
                        if let Some(gf) = gf.as_mut() {
                            gf[c * plane + k.offset] += k.weight * gv;
                        }
                        if let Some(gp) = gp.as_mut() {
                            let fval = fd[c * plane + k.offset] * gv;
                            for d in 0..rank {
                                gp[i * rank + d] += k.dweight[d] * fval;
                            }
                        }
                    }
                }
            }
            vec![gf, gp]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> Tensor {
        Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    fn at(p: &[f64]) -> f64 {
        let grid = SampleGrid::new(Tensor::new(&[1, 2], p.to_vec()).unwrap()).unwrap();
        sample_values(&map(), &grid).unwrap().data()[0]
    }

    #[test]
    fn exact_grid_point() {
        assert_eq!(at(&[0.0, 1.0]), 2.0);
    }

    #[test]
    fn cell_center_is_corner_mean() {
        assert_eq!(at(&[0.5, 0.5]), 2.5);
    }

    #[test]
    fn outside_is_zero_padded() {
        assert_eq!(at(&[-1.0, -1.0]), 0.0);
        // half a pixel past the right edge blends with the zero pad
        assert_eq!(at(&[0.0, 1.5]), 1.0);
    }

    #[test]
    fn rank_mismatch_is_dimension_error() {
        let grid = SampleGrid::new(Tensor::zeros(&[4, 3])).unwrap();
        assert!(matches!(sample_values(&map(), &grid), Err(Error::Dimension(_))));
        assert!(SampleGrid::new(Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn trilinear_center() {
        let f = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let grid = SampleGrid::new(Tensor::new(&[1, 3], vec![0.5, 0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(sample_values(&f, &grid).unwrap().data()[0], 3.5);
    }
}
