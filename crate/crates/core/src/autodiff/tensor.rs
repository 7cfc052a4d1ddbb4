//! Dense tensor handles.
//!
//! A [`Tensor`] is a cheap reference-counted handle to an immutable row-major
//! buffer plus the operation record that produced it. Leaf tensors (inputs,
//! parameters) have no record; composite tensors link back to their parents,
//! forming the graph the tape walks in reverse.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Node ids increase monotonically, so within one graph a child always has a
/// larger id than its parents. The tape sorts on this to get a reverse
/// topological order.
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct TensorInner<S: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<S>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<S>>>,
    pub(crate) op: RefCell<Option<Op<S>>>,
    /// Set once a non-retaining backward pass has freed this node's record.
    pub(crate) consumed: Cell<bool>,
}

/// Shape + row-major real buffer with optional gradient; a node in the
/// reverse-mode differentiation graph.
pub struct Tensor<S: Scalar>(pub(crate) Rc<TensorInner<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_shape<S: Scalar>(data: &[S], shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "tensor",
            format!("empty tensors are rejected (shape {shape:?})"),
        ));
    }
    let numel: usize = shape.iter().product();
    if data.len() != numel {
        return Err(Error::shape(
            "tensor",
            format!("buffer holds {} values, shape {shape:?} needs {numel}", data.len()),
        ));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn new_inner(
        data: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Op<S>>,
    ) -> Self {
        Tensor(Rc::new(TensorInner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op: RefCell::new(op),
            consumed: Cell::new(false),
        }))
    }

    /// Constant leaf (no gradient ever flows into it).
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::new_inner(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf: gradients accumulate into it across backward passes
    /// until [`Tensor::zero_grad`] is called.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::new_inner(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![S::zero(); numel], shape)
    }

    pub fn full(value: S, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![value; numel], shape)
    }

    pub fn scalar(value: S) -> Self {
        Self::new_inner(vec![value], vec![1], false, None)
    }

    /// Result node: records `op` only when some parent needs gradients.
    pub(crate) fn result(data: Vec<S>, shape: Vec<usize>, op: Op<S>) -> Self {
        if op.parents().iter().any(|p| p.requires_grad()) {
            Self::new_inner(data, shape, true, Some(op))
        } else {
            Self::new_inner(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Borrow the underlying buffer.
    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    /// Extract the single value of a scalar tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    /// Current accumulated gradient, if any backward pass has reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf's buffer in place (optimizer updates, finite-difference
    /// perturbation). Composite tensors are immutable.
    pub fn set_data(&self, new: &[S]) {
        assert!(
            self.0.op.borrow().is_none(),
            "set_data is only valid on leaf tensors"
        );
        let mut data = self.0.data.borrow_mut();
        assert_eq!(data.len(), new.len(), "set_data length mismatch");
        data.copy_from_slice(new);
    }

    /// A gradient-free leaf sharing this tensor's current values.
    pub fn detach(&self) -> Tensor<S> {
        Self::new_inner(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// True when all entries are finite.
    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, incoming: &[S]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(incoming) {
                    *dst = *dst + *src;
                }
            }
            None => *slot = Some(incoming.to_vec()),
        }
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow_mut().take()
    }
}
