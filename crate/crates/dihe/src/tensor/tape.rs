//! Operation tape for reverse-mode differentiation.
//!
//! Forward ops append nodes; each node carries a closure that maps the
//! output gradient to gradients for its parents. [`Tape::backward`] walks
//! the tape in reverse and accumulates into per-node gradient slots.

use super::{Scalar, Tensor};
use std::cell::RefCell;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Tensor<F>>>;

pub(crate) struct Node<F> {
    pub value: Tensor<F>,
    pub parents: Vec<Var>,
    /// Maps the gradient w.r.t. this node's output to gradients w.r.t. each
    /// parent, in `parents` order. `None` marks a leaf or a gradient barrier.
    pub backward: Option<BackFn<F>>,
    /// Whether any gradient-carrying leaf is reachable from this node.
    /// Backward skips non-requiring subgraphs entirely.
    pub requires: bool,
}

pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`, or `None` if no gradient path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf value (input or parameter). Gradients accumulate here.
    pub fn input(&self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives gradients. Ops feeding only from
    /// constants skip their backward work.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false)
    }

    pub(crate) fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires
    }

    fn push_leaf(&self, value: Tensor<F>, requires: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, requires });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub(crate) fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub(crate) fn push(
        &self,
        value: Tensor<F>,
        parents: Vec<Var>,
        backward: Option<BackFn<F>>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires = backward.is_some() && parents.iter().any(|p| nodes[p.0].requires);
        nodes.push(Node {
            value,
            parents,
            backward,
            requires,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Returns accumulated gradients for
    /// every node reachable backwards from `loss`; barriers (`stop_gradient`,
    /// leaves) end propagation.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert!(!nodes.is_empty(), "backward on empty tape");
        assert!(
            nodes[loss.0].value.is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires && id != loss.0 {
                grads[id] = Some(g);
                continue;
            }
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !nodes[p.0].requires {
                        // Constant subgraph: the closure may have returned a
                        // placeholder; never accumulate into it.
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        nodes[p.0].value.shape(),
                        "gradient shape mismatch for parent node {}",
                        p.0
                    );
                    match &mut grads[p.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a = *a + *b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}
