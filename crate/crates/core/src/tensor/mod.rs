//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major array of reals plus, when gradient
//! tracking is on, a handle to the operation that produced it. Calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse and
//! accumulates gradients into every tracked leaf; [`autograd::grad`] instead
//! returns the gradient with respect to chosen inputs and can keep the
//! returned gradient itself differentiable (needed for the gradient
//! penalty's second derivative).
//!
//! Tensors are cheap to clone (shared storage) and immutable after
//! construction; a gradient graph belongs to a single training step.

pub mod autograd;
pub mod kernels;
pub mod maps;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use kernels::{HorizontalPad, PaddingMode, VerticalPad};
pub use ops::{batch_norm_core, concat, matmul_bias, scale_shift, UnaryFn};

pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

struct Inner<T: Scalar> {
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    requires_grad: bool,
    node: Option<Node<T>>,
    grad: RefCell<Option<Tensor<T>>>,
}

struct Node<T: Scalar> {
    parents: Vec<Tensor<T>>,
    op: Box<dyn VjpOp<T>>,
}

/// Backward rule of one operation: given the adjoint of the output, produce
/// adjoints for the parents flagged in `needs`. Implementations build their
/// results out of tensor ops, so with gradient tracking left on the returned
/// adjoints are themselves differentiable.
trait VjpOp<T: Scalar> {
    fn name(&self) -> &'static str;
    fn vjp(
        &self,
        grad_out: &Tensor<T>,
        parents: &[Tensor<T>],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.numel().min(6);
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..{}]={:?})",
            self.shape(),
            self.requires_grad(),
            n,
            &self.data()[..n]
        )
    }
}

fn check_shape(len: usize, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Contract(format!(
            "tensor shapes must have positive extents, got {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Contract(format!(
            "data length {len} does not match shape {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(data: Arc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                data,
                shape,
                requires_grad,
                node: None,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Wrap freshly computed data as the output of `op`. Tracking is attached
    /// only when gradients are enabled and some parent is tracked.
    fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op: Box<dyn VjpOp<T>>,
    ) -> Self {
        Self::from_op_shared(Arc::new(data), shape, parents, op)
    }

    fn from_op_shared(
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op: Box<dyn VjpOp<T>>,
    ) -> Self {
        let tracked = autograd::is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = if tracked {
            Some(Node { parents, op })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                data,
                shape,
                requires_grad: tracked,
                node,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Untracked leaf from raw data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::from_parts(Arc::new(data), shape.to_vec(), false))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Arc::new(vec![v]), vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(Arc::new(vec![T::zero(); numel]), shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(Arc::new(vec![v; numel]), shape.to_vec(), false)
    }

    /// A leaf that participates in gradient accumulation, sharing this
    /// tensor's storage.
    pub fn tracked(&self) -> Self {
        Self::from_parts(Arc::clone(&self.inner.data), self.shape().to_vec(), true)
    }

    /// A leaf cut off from any graph, sharing this tensor's storage.
    pub fn detach(&self) -> Self {
        Self::from_parts(Arc::clone(&self.inner.data), self.shape().to_vec(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Gradient accumulated by `backward`, if any.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Accumulate gradients of this scalar into every tracked leaf it
    /// depends on. Errors if the tensor is not a single element.
    pub fn backward(&self) -> Result<()> {
        autograd::backward(self)
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    fn accumulate_grad(&self, g: &Tensor<T>) {
        let mut slot = self.inner.grad.borrow_mut();
        let next = match slot.take() {
            None => g.detach(),
            Some(old) => autograd::no_grad(|| old.add(g).expect("grad shape mismatch")),
        };
        *slot = Some(next);
    }

    /// Convert elements to another scalar type (untracked result).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data().iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor::from_parts(Arc::new(data), self.shape().to_vec(), false)
    }
}
