//! Central-difference gradient checking.
//!
//! The checked function is reduced to a scalar through a fixed random
//! projection `Σ w ∘ out`, so every output element contributes. The
//! numerical side only ever runs forward passes.

use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Absolute differences at or below this count as exact.
    pub abs_floor: f64,
    /// Entries whose relative error exceeds this are measured again at
    /// `step / 10` and `step * 10`, and the smallest error is kept.
    pub retry_above: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            abs_floor: 1e-8,
            retry_above: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(f, "  {:<20} worst rel err {:.3e} over {} entries", g.name, g.max_rel_err, g.checked)?;
        }
        Ok(())
    }
}

/// Relative error with an absolute floor.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares tape gradients of `f` against central differences for every
/// named input group.
pub fn check<F>(inputs: &[(&str, Tensor)], cfg: &GradCheckConfig, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let proj = projection(tape.shape(out), cfg.seed);
    let loss = project(&mut tape, out, &proj)?;
    let grads = tape.backward(loss)?;
    let groups: Vec<Group> = inputs
        .iter()
        .zip(&vars)
        .map(|((name, t), &v)| Group {
            name: name.to_string(),
            analytic: grads.get_or_zeros(v, t.shape()),
            value: t.clone(),
        })
        .collect();
    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    compare(&groups, cfg, |gi, perturbed| {
        let mut t = Tape::new();
        let vs: Vec<Var> = base
            .iter()
            .enumerate()
            .map(|(i, v)| t.constant(if i == gi { perturbed.clone() } else { v.clone() }))
            .collect();
        let o = f(&mut t, &vs)?;
        let l = project(&mut t, o, &proj)?;
        t.value(l).item()
    })
}

/// Like [`check`], but `f` also reads parameters from `store`; every
/// parameter becomes its own group after the inputs.
pub fn check_module<F>(store: &ParamStore, inputs: &[(&str, Tensor)], cfg: &GradCheckConfig, f: F) -> Result<GradReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut s = Session::training(store);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| s.leaf(t.clone())).collect();
    let out = f(&mut s, &vars)?;
    let proj = projection(s.shape(out), cfg.seed);
    let loss = project(&mut s, out, &proj)?;
    let grads = s.backward(loss)?;
    let pgrads = s.param_grads(&grads);
    let mut groups: Vec<Group> = inputs
        .iter()
        .zip(&vars)
        .map(|((name, t), &v)| Group {
            name: name.to_string(),
            analytic: grads.get_or_zeros(v, t.shape()),
            value: t.clone(),
        })
        .collect();
    let n_inputs = groups.len();
    for (id, g) in store.ids().zip(pgrads) {
        groups.push(Group {
            name: store.name(id).to_string(),
            analytic: g,
            value: store.get(id).clone(),
        });
    }
    let ids: Vec<ParamId> = store.ids().collect();
    compare(&groups, cfg, |gi, perturbed| {
        let mut local;
        let st = if gi >= n_inputs {
            local = store.clone();
            local.set(ids[gi - n_inputs], perturbed.clone())?;
            &local
        } else {
            store
        };
        let mut s = Session::inference(st);
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, (_, v))| s.constant(if i == gi { perturbed.clone() } else { v.clone() }))
            .collect();
        let o = f(&mut s, &vs)?;
        let l = project(&mut s, o, &proj)?;
        s.value(l).item()
    })
}

struct Group {
    name: String,
    analytic: Tensor,
    value: Tensor,
}

fn compare(groups: &[Group], cfg: &GradCheckConfig, eval: impl Fn(usize, &Tensor) -> Result<f64>) -> Result<GradReport> {
    let mut pick = Rng::derive(cfg.seed, "gradcheck-entries");
    let mut out = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        let n = g.value.numel();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(m) if m < n => (0..m).map(|_| pick.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &e in &entries {
            let central = |h: f64| -> Result<f64> {
                let mut buf = g.value.data().to_vec();
                buf[e] = g.value.data()[e] + h;
                let plus = eval(gi, &Tensor::from_parts(g.value.shape().to_vec(), buf.clone()))?;
                buf[e] = g.value.data()[e] - h;
                let minus = eval(gi, &Tensor::from_parts(g.value.shape().to_vec(), buf))?;
                Ok((plus - minus) / (2.0 * h))
            };
            let a = g.analytic.data()[e];
            let mut err = rel_err(a, central(cfg.step)?, cfg.abs_floor);
            for h in [cfg.step / 10.0, cfg.step * 10.0] {
                if err > cfg.retry_above {
                    err = err.min(rel_err(a, central(h)?, cfg.abs_floor));
                }
            }
            worst = worst.max(err);
        }
        out.push(GroupError {
            name: g.name.clone(),
            max_rel_err: worst,
            checked: entries.len(),
        });
    }
    Ok(GradReport { groups: out })
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::derive(seed, "gradcheck-projection");
    Tensor::from_fn(shape, |_| rng.normal())
}

fn project(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    let w = tape.constant(proj.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1e-9, 2e-9, 1e-8), 0.0);
        assert!((rel_err(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A deliberately wrong rule: forward x^2, but route the check through
        // scale(x, 2) whose gradient differs.
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let good = check(&[("x", x.clone())], &GradCheckConfig::default(), |t, v| t.mul(v[0], v[0])).unwrap();
        assert!(good.passes(1e-6));
        let bad = check(&[("x", x)], &GradCheckConfig::default(), |t, v| {
            let sq = t.mul(v[0], v[0])?;
            // Feed the value through a constant so the tape loses the dependency.
            let c = t.constant(t.value(sq).clone());
            let z = t.scale(v[0], 0.0);
            t.add(c, z)
        })
        .unwrap();
        assert!(!bad.passes(1e-2));
    }

    #[test]
    fn retry_steps_past_a_nearby_kink() {
        let f = Tensor::new(&[1, 2, 3], vec![0.0, 5.0, -2.0, 1.0, 3.0, 0.5]).unwrap();
        let pos = Tensor::new(&[1, 2], vec![0.5, 1.0 + 4e-4]).unwrap();
        let run = |retry_above| {
            let cfg = GradCheckConfig { retry_above, ..GradCheckConfig::default() };
            check(&[("f", f.clone()), ("pos", pos.clone())], &cfg, |t, v| t.sample(v[0], v[1])).unwrap()
        };
        assert!(!run(f64::INFINITY).passes(1e-4));
        assert!(run(1e-5).passes(1e-4));
    }
}
