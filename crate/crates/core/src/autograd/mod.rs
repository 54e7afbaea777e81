//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] is an eager, append-only graph: every operation computes its
//! value immediately and records a backward closure. [`Tape::backward`]
//! consumes the tape and walks the nodes once in reverse creation order,
//! accumulating gradients deterministically (single-threaded, fixed order).
//! Operations whose inputs all have `needs_grad == false` record no closure,
//! so constant subgraphs (frozen feature extractors, fixed filter kernels)
//! cost nothing extra on the way back.
//!
//! Network activations use the layout `[batch, channels, height, width]`;
//! attention maps are 2-D; losses are single-element arrays.

mod ops;

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn FnOnce(&ArrayD<f64>, &mut dyn FnMut(usize, ArrayD<f64>))>;

struct Node {
    value: Arc<ArrayD<f64>>,
    needs_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an input that does not require a gradient.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Records an input whose gradient will be collected by [`backward`].
    ///
    /// [`backward`]: Tape::backward
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    pub fn scalar_constant(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    fn push(&self, value: ArrayD<f64>, needs_grad: bool, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            needs_grad,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Records a computed node. `back` is dropped when no parent needs a
    /// gradient.
    fn push_op(&self, value: ArrayD<f64>, needs_grad: bool, back: BackFn) -> Var {
        self.push(value, needs_grad, needs_grad.then_some(back))
    }

    pub fn value(&self, v: Var) -> Arc<ArrayD<f64>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1);
        *value.iter().next().expect("scalar node")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs the reverse pass from `root` (normally a scalar loss), consuming
    /// the tape. The returned store holds gradients for every node that
    /// received one; query the leaves you care about.
    pub fn backward(self, root: Var) -> Gradients {
        let mut nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.shape()));
        for id in (0..=root.0).rev() {
            let Some(back) = nodes[id].back.take() else {
                continue;
            };
            // Nodes past `root` never received gradients; nodes whose grad is
            // still None are not on a path from the root. Consumed op grads
            // are dropped to keep the peak footprint down; leaf grads stay.
            let Some(grad) = grads[id].take() else {
                continue;
            };
            back(&grad, &mut |parent, contribution| {
                debug_assert!(parent < id, "backward edge must point to an earlier node");
                match &mut grads[parent] {
                    Some(acc) => *acc += &contribution,
                    slot => *slot = Some(contribution),
                }
            });
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn leaf_gradient_of_identity_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let y = tape.scale(x, 1.0);
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap()[[0]], 1.0);
    }

    #[test]
    fn constants_produce_no_gradients() {
        let tape = Tape::new();
        let c = tape.scalar_constant(2.0);
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let y = tape.mul(c, x);
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap()[[0]], 2.0);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = x*x + 3x  =>  dy/dx = 2x + 3
        let tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 4.0));
        let sq = tape.mul(x, x);
        let tri = tape.scale(x, 3.0);
        let y = tape.add(sq, tri);
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap()[[0]], 11.0);
    }
}
