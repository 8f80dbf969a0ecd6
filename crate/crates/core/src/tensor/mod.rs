//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to a row-major buffer. Tensors that
//! require gradients record the operation that produced them, forming a DAG
//! that [`Tensor::backward`] walks in reverse topological order.
//!
//! Leaves (parameters) accumulate gradients additively across uses and across
//! backward calls; intermediate gradients are transient and never stored on
//! the tensors themselves. An op whose inputs all have `requires_grad ==
//! false` records nothing, so frozen sub-graphs cost no backward work.
//!
//! Most ops treat a tensor as a matrix of `rows × cols`, where `cols` is the
//! last dimension and `rows` is the product of the others.

pub(crate) mod kernels;
mod ops;
pub mod optim;
pub mod param;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell, RefMut};
use core::fmt;

use crate::{Error, Result, Scalar};

pub use ops::{attention, concat_cols, concat_rows};
pub(crate) use ops::Op;

pub use optim::{AdamW, AdamWConfig, ParamGroup};
pub use param::{ParamId, ParamStore, Parameter};

pub struct Tensor<T: Scalar>(Rc<Inner<T>>);

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    node: Option<Node<T>>,
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("leaf", &self.is_leaf())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![T::zero(); numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            node: None,
        }))
    }

    /// Builds an op result, recording the op only if some input needs grad.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: Vec<Tensor<T>>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let tracked = inputs.iter().any(|t| t.requires_grad());
        let node = tracked.then_some(Node { op, inputs });
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(tracked),
            node,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    /// `(rows, cols)` view: `cols` is the last dimension.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.0.shape.split_last() {
            None => (1, 1),
            Some((&c, rest)) => (rest.iter().product(), c),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meaningful on leaves (optimizer
    /// updates, merges, checkpoint loads); mutating a value that a live
    /// graph still references changes what backward sees.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf. Has no effect on op results.
    pub fn set_requires_grad(&self, on: bool) {
        if self.is_leaf() {
            self.0.requires_grad.set(on);
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn set_grad(&self, grad: Option<Vec<T>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.numel(), "gradient length must match tensor");
        }
        *self.0.grad.borrow_mut() = grad;
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A new leaf sharing nothing with `self`, not tracked.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    /// Deep copy that keeps the `requires_grad` flag (for leaves).
    pub fn deep_clone(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone(), self.requires_grad() && self.is_leaf())
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as *const u8 as usize
    }

    /// Reverse-mode sweep from a scalar. Gradients land in every reachable
    /// leaf that requires grad, added to whatever is already stored there.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.is_leaf() {
            accumulate_leaf(self, &[T::one()]);
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: BTreeMap<usize, Vec<T>> = BTreeMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let Some(grad_out) = pending.remove(&t.id()) else { continue };
            let grads = node.op.backward(t, &grad_out, &node.inputs);
            for (input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel());
                if input.is_leaf() {
                    accumulate_leaf(input, &g);
                } else {
                    match pending.get_mut(&input.id()) {
                        Some(acc) => kernels::add_assign(acc, &g),
                        None => {
                            pending.insert(input.id(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the tracked sub-graph (inputs before outputs).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = BTreeSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((t, next)) = stack.pop() {
            let inputs = t.0.node.as_ref().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
            if next < inputs.len() {
                let child = inputs[next].clone();
                stack.push((t, next + 1));
                if child.requires_grad() && seen.insert(child.id()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

fn accumulate_leaf<T: Scalar>(leaf: &Tensor<T>, g: &[T]) {
    let mut slot = leaf.0.grad.borrow_mut();
    match slot.as_mut() {
        Some(acc) => kernels::add_assign(acc, g),
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![1.0; 5], &[2, 3]).is_err());
        let t = Tensor::<f64>::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.rows_cols(), (2, 3));
        assert_eq!(Tensor::<f64>::scalar(2.0).rows_cols(), (1, 1));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(t.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_uses_and_calls() {
        let w = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        // loss = w*w + w  => d/dw = 2w + 1 = 7
        let loss = w.mul(&w).unwrap().add(&w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![7.0]);
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![14.0]);
    }

    #[test]
    fn detached_inputs_record_nothing() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = a.scale(2.0);
        assert!(!b.requires_grad());
        assert!(b.is_leaf());
    }
}
