use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += aip * b);
        }
    }
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(grow).for_each(|(c, &g)| *c += aip * g);
        }
    }
}

/// Batch-index bookkeeping for a broadcast batched matmul.
struct BatchPlan {
    out_batch: Vec<usize>,
    /// (a batch offset, b batch offset) for every output batch, in matrix units.
    pairs: Vec<(usize, usize)>,
}

fn plan_batches(a_batch: &[usize], b_batch: &[usize]) -> Option<BatchPlan> {
    let rank = a_batch.len().max(b_batch.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut out_batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return None;
        }
        out_batch.push(x.max(y));
    }
    let sa = crate::tensor::strides(&pa);
    let sb = crate::tensor::strides(&pb);
    let total: usize = out_batch.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank {
            if pa[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        pairs.push((oa, ob));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan { out_batch, pairs })
}

impl Tape {
    /// Batched matrix product `a[..., m, k] · b[..., k, n]` with broadcast
    /// batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim(format!("matmul: cannot contract {sa:?} with {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let plan = plan_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(mismatch)?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let mut out = vec![0.0; plan.pairs.len() * m * n];
        for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
            gemm_nn(
                &av.data()[oa * m * k..(oa + 1) * m * k],
                &bv.data()[ob * k * n..(ob + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = plan.out_batch.clone();
        out_shape.extend([m, n]);
        let out = Tensor::from_parts(out_shape, out);
        let pairs = plan.pairs;
        Ok(self.record(out, &[a, b], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; av.numel()];
                for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[ob * k * n..(ob + 1) * k * n],
                        &mut ga[oa * m * k..(oa + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; bv.numel()];
                for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                    gemm_tn(
                        &av.data()[oa * m * k..(oa + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[ob * k * n..(ob + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// `x[L, d_in] · w[d_in, d_out] + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_product() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.5, -2.0, 3.25, 7.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 3.25, 7.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn broadcast_batch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let b = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[3, 2, 2]);
        assert_eq!(tape.value(y).data(), tape.value(a).data());
        let c = tape.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(tape.matmul(a, c).is_err());
    }
}
