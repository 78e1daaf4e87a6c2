use crate::error::{Error, Result};

use super::ops::{backward_node, Op};
use super::Tensor;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only tape of op records. Nodes are pushed after their inputs, so
/// insertion order is a topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a leaf with no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse insertion order; only nodes that require gradients are touched.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                backward_node(self, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`]: ∂loss/∂node for every node on a tracked path.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no tracked path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as an owned buffer of length `len`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Adds `f`'s contribution into the gradient buffer of `target`, allocating it
/// on first use. Skips inputs that do not require gradients.
pub(crate) fn accumulate(
    graph: &Graph,
    grads: &mut [Option<Vec<f64>>],
    target: Var,
    f: impl FnOnce(&mut [f64]),
) {
    let node = &graph.nodes[target.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[target.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
    f(buf);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.5]));
        let y = g.scale(x, 3.0);
        let loss = g.sum(y);
        let a = g.backward(loss).unwrap().get(x).unwrap().to_vec();
        let b = g.backward(loss).unwrap().get(x).unwrap().to_vec();
        assert_eq!(a, b);
        assert_eq!(a, vec![3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        // d(x * stop(x))/dx = stop(x)
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn mse_gradient_matches_hand_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![2.0]));
        let zero = g.constant(Tensor::from_vec(vec![0.0]));
        let loss = g.mse(x, zero).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0]);
    }
}
