//! Dense n-dimensional f64 tensor with optional tape membership.
//!
//! A `Tensor` is a cheaply clonable handle (`Rc`) over row-major f64 storage.
//! Tensors that do not participate in a tape are immutable after construction;
//! the only sanctioned mutation points are the optimizer (`data_mut`, after the
//! step's tape has been dropped) and the backward pass (`grad`).

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::NodeId;

/// Identifies which tape a tensor's node handle belongs to. Tapes never share
/// nodes, so a handle from another tape is treated as unbound.
pub(crate) type TapeId = u64;

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Cell<Option<(TapeId, NodeId)>>,
}

/// Row-major dense f64 tensor. Clones share storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_inner(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    /// Constant (non-trainable) tensor from flat row-major data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::ShapeData {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeData {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor::new_inner(data, shape.to_vec(), false))
    }

    /// Trainable tensor (a parameter leaf) from flat row-major data.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.to_vec()),
                requires_grad: true,
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        })
    }

    /// All-zeros constant tensor.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_inner(vec![0.0; numel_of(shape)], shape.to_vec(), false)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_inner(vec![value], Vec::new(), false)
    }

    /// Crate-internal constructor for op outputs (shapes already validated).
    pub(crate) fn op_output(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor::new_inner(data, shape, requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the flat row-major data.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the data. Only valid for tensors not participating in
    /// a live tape (parameters between steps, buffers under construction).
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    /// Copy the data out.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Accumulated gradient, if backward has populated one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn set_grad(&self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.numel());
        *self.inner.grad.borrow_mut() = Some(grad);
    }

    /// Snapshot of the values as a fresh constant tensor with no grad path and
    /// no tape membership.
    pub fn detach(&self) -> Tensor {
        Tensor::new_inner(self.to_vec(), self.inner.shape.clone(), false)
    }

    /// Two handles over the same storage?
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn node_on(&self, tape: TapeId) -> Option<NodeId> {
        match self.inner.node.get() {
            Some((t, id)) if t == tape => Some(id),
            _ => None,
        }
    }

    /// Whether this tensor is currently bound to any tape node.
    pub fn is_taped(&self) -> bool {
        self.inner.node.get().is_some()
    }

    pub(crate) fn bind_node(&self, tape: TapeId, id: NodeId) {
        debug_assert!(self.inner.requires_grad, "binding a no-grad tensor to a tape");
        self.inner.node.set(Some((tape, id)));
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.inner.data.borrow();
        let head: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &head)
            .finish()
    }
}
