use crate::error::{ensure_same_shape, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("add", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(out, &[a, b], |g, _| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("sub", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(out, &[a, b], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = zip_map(&av, &bv, |x, y| x * y);
        Ok(self.record(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.iter().zip(bv.data()).map(|(g, y)| g * y).collect()),
                need[1].then(|| g.iter().zip(av.data()).map(|(g, x)| g * x).collect()),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("div", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = zip_map(&av, &bv, |x, y| x / y);
        Ok(self.record(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.iter().zip(bv.data()).map(|(g, y)| g / y).collect()),
                need[1].then(|| {
                    g.iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect()
                }),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record(out, &[a], move |g, _| {
            vec![Some(g.iter().map(|v| v * factor).collect())]
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.record(out, &[a], |g, _| vec![Some(g.to_vec())])
    }

    /// `x[..., j] + bias[j]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "add_bias: bias shape {:?} does not match trailing dim of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.record(out, &[x, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; d];
                for row in g.chunks(d) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![need[0].then(|| g.to_vec()), gb]
        }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let out = xv.map(gelu_fwd);
        self.record(out, &[x], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(xv.data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect(),
            )]
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, &[x], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out `axis`; the result drops that axis (rank-1 inputs give `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xv[(o * n + a) * inner..(o * n + a + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for a in 0..n {
                    gx[(o * n + a) * inner..(o * n + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(a, b).unwrap();
        let q = tape.div(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        assert_eq!(tape.value(p).data(), &[3.0, 8.0]);
        assert_eq!(tape.value(q).data(), &[1.0 / 3.0, 0.5]);
        let c = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn sum_axis_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.shape(r), &[2]);
        assert_eq!(tape.value(r).data(), &[6.0, 15.0]);
        let c = tape.sum_axis(x, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 7.0, 9.0]);
        assert!(tape.sum_axis(x, 2).is_err());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_fwd(0.0), 0.0);
        assert!((gelu_fwd(1.0) - 0.841_191_990_607_477).abs() < 1e-12);
        assert!((gelu_fwd(-1.0) + 0.158_808_009_392_523).abs() < 1e-12);
    }

    #[test]
    fn add_bias_broadcasts_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2], &[10.0, 20.0]));
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
    }
}
