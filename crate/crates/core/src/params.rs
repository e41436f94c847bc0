//! Named parameter slots shared by the optimizer and the checkpoint code.

use std::cell::RefCell;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One model parameter or persistent buffer (e.g. running statistics).
/// The slot is interiorly mutable so buffers can be refreshed during a
/// forward pass and the optimizer can swap values in place.
pub struct Param<T: Scalar> {
    value: RefCell<Tensor<T>>,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    /// Trainable parameter: the stored tensor is a tracked leaf.
    pub fn new(t: Tensor<T>) -> Self {
        Param {
            value: RefCell::new(t.tracked()),
            trainable: true,
        }
    }

    /// Non-trainable buffer (kept in checkpoints, ignored by the optimizer).
    pub fn buffer(t: Tensor<T>) -> Self {
        Param {
            value: RefCell::new(t.detach()),
            trainable: false,
        }
    }

    pub fn get(&self) -> Tensor<T> {
        self.value.borrow().clone()
    }

    /// Replace the stored tensor. Trainable slots re-leaf the value so any
    /// previously accumulated gradient is dropped with the old leaf.
    pub fn set(&self, t: Tensor<T>) {
        let next = if self.trainable { t.tracked() } else { t.detach() };
        *self.value.borrow_mut() = next;
    }

    /// Store exactly the given tensor, preserving its graph identity.
    /// Gradient checks use this to substitute externally tracked leaves.
    pub fn set_shared(&self, t: Tensor<T>) {
        *self.value.borrow_mut() = t;
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.value.borrow().grad()
    }

    pub fn clear_grad(&self) {
        self.value.borrow().clear_grad();
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }
}

/// Anything with named parameters, walked in a stable order.
pub trait ParamSet<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));

    /// Collect `(name, slot)` pairs in declaration order.
    fn named_params(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name, p)));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Drop any accumulated gradients.
pub fn clear_grads<T: Scalar>(model: &impl ParamSet<T>) {
    model.visit("", &mut |_, p| p.clear_grad());
}

/// Run `f` with every trainable parameter temporarily detached, so a
/// backward pass through the model reaches its inputs but never its weights.
pub fn with_frozen<T: Scalar, R>(model: &impl ParamSet<T>, f: impl FnOnce() -> R) -> R {
    let slots = model.named_params("");
    let originals: Vec<Tensor<T>> = slots.iter().map(|(_, p)| p.get()).collect();
    for (_, p) in &slots {
        if p.trainable() {
            p.set_shared(p.get().detach());
        }
    }
    let out = f();
    for ((_, p), orig) in slots.iter().zip(originals) {
        p.set_shared(orig);
    }
    out
}
