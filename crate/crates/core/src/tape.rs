//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its value, its input handles and
//! a backward rule. Nodes only ever reference earlier nodes, so a single
//! reverse sweep over the node list is a valid topological order. Build a
//! fresh tape for every step; nothing is ever removed from one.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Receives the output gradient and a mask saying which inputs need one;
/// returns one gradient buffer per input (or `None` when not needed).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), false, None)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), true, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation. The backward rule is dropped when no input
    /// needs a gradient.
    pub(crate) fn record<F>(&mut self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let rule: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(value, inputs.to_vec(), requires_grad, rule)
    }

    /// Reverse sweep from a scalar node. Gradients of shared nodes
    /// accumulate additively.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let seed_value = self.value(seed);
        if !seed_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                seed_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        if self.nodes[seed.0].requires_grad {
            grads[seed.0] = Some(vec![1.0]);
        }
        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = rule(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, ig), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(ig), true) = (ig, *need) else {
                    continue;
                };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn populated(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| Var(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gradient_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn only_reachable_nodes_get_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let ab = tape.mul(a, c).unwrap();
        let _unused = tape.mul(b, b).unwrap();
        let g = tape.backward(ab).unwrap();
        let got: Vec<Var> = g.populated().collect();
        assert_eq!(got, vec![a, ab]);
        assert!(g.get(b).is_none());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // y = x*2 + x*3 -> dy/dx = 5
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let p = tape.scale(x, 2.0);
        let q = tape.scale(x, 3.0);
        let y = tape.add(p, q).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }
}
