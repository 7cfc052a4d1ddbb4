//! Reverse pass over the recorded operation graph.
//!
//! A [`Tape`] is the materialized reverse topological order of every node
//! reachable from a root. Node ids grow monotonically at creation time, so a
//! child always carries a larger id than its parents and sorting by id gives
//! a valid schedule in one pass.

use std::collections::HashSet;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered list of operation nodes reachable from one root.
pub struct Tape<S: Scalar> {
    /// Reverse topological order: consumers strictly before producers.
    nodes: Vec<Tensor<S>>,
}

impl<S: Scalar> Tape<S> {
    /// Collect every recorded node reachable from `root`.
    pub fn for_root(root: &Tensor<S>) -> Self {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<S>> = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.0.op.borrow().as_ref() {
                for p in op.parents() {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Run the reverse pass, accumulating `d(root)/d(leaf)` into every
    /// `requires_grad` leaf. Intermediate gradients are dropped as soon as
    /// their node has been processed; with `retain` false the operation
    /// records are freed too, and a later backward on the same graph fails.
    fn run(&self, root: &Tensor<S>, retain: bool) -> Result<()> {
        root.accumulate_grad(&[S::one()]);
        for node in &self.nodes {
            let is_op_node = {
                let guard = node.0.op.borrow();
                match guard.as_ref() {
                    None => false, // leaf: keep its accumulated gradient
                    Some(op) => {
                        if let Some(grad) = node.take_grad() {
                            op.backward(node, &grad);
                        }
                        true
                    }
                }
            };
            if is_op_node && !retain {
                node.0.op.borrow_mut().take();
                node.0.consumed.set(true);
            }
        }
        Ok(())
    }

    /// Check the ordering invariant: every recorded node appears strictly
    /// before all of its parents in the reverse schedule. Used by tests.
    pub fn is_reverse_topological(&self) -> bool {
        let mut position = std::collections::HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            position.insert(n.id(), i);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(op) = n.0.op.borrow().as_ref() {
                for p in op.parents() {
                    match position.get(&p.id()) {
                        Some(&pi) if pi > i => {}
                        _ => return false,
                    }
                }
            }
        }
        true
    }
}

fn backward_impl<S: Scalar>(root: &Tensor<S>, retain: bool) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::shape(
            "backward",
            format!("root must be scalar, got shape {:?}", root.shape()),
        ));
    }
    if root.0.consumed.get() {
        return Err(Error::Numeric(
            "backward called twice on a graph that was not retained".to_string(),
        ));
    }
    Tape::for_root(root).run(root, retain)
}

/// Reverse pass from a scalar root; frees the graph afterwards.
pub fn backward<S: Scalar>(root: &Tensor<S>) -> Result<()> {
    backward_impl(root, false)
}

/// Reverse pass that keeps the graph alive so it can be traversed again;
/// leaf gradients accumulate across passes.
pub fn backward_retain<S: Scalar>(root: &Tensor<S>) -> Result<()> {
    backward_impl(root, true)
}
