//! Reverse-mode engine: topological traversal, adjoint accumulation, and the
//! differentiable-gradient entry point used by the R1 penalty.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Run `f` with gradient tracking disabled (restored on exit or panic).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = GradModeGuard(prev);
    f()
}

/// Post-order over the tracked subgraph: parents before consumers.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr_id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for p in &node.parents {
                if p.requires_grad() && !visited.contains(&p.ptr_id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn check_scalar<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Propagate adjoints from `root` through the subgraph in `order`, visiting
/// only tensors in `needed`. Returns the adjoint map keyed by tensor ptr.
fn propagate<T: Scalar>(
    root: &Tensor<T>,
    order: &[Tensor<T>],
    needed: &HashSet<usize>,
    create_graph: bool,
) -> Result<HashMap<usize, Tensor<T>>> {
    let mut adjoints: HashMap<usize, Tensor<T>> = HashMap::new();
    adjoints.insert(root.ptr_id(), Tensor::ones(&[1]));
    for t in order.iter().rev() {
        if !needed.contains(&t.ptr_id()) {
            continue;
        }
        let Some(adj) = adjoints.get(&t.ptr_id()).cloned() else {
            continue;
        };
        let Some(node) = t.node() else { continue };
        let needs: Vec<bool> = node
            .parents
            .iter()
            .map(|p| p.requires_grad() && needed.contains(&p.ptr_id()))
            .collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let grads = if create_graph {
            node.op.vjp(&adj, &node.parents, &needs)?
        } else {
            no_grad(|| node.op.vjp(&adj, &node.parents, &needs))?
        };
        debug_assert_eq!(grads.len(), node.parents.len());
        for (p, g) in node.parents.iter().zip(grads) {
            let Some(g) = g else { continue };
            debug_assert_eq!(
                g.shape(),
                p.shape(),
                "vjp of {} produced wrong shape",
                node.op.name()
            );
            match adjoints.remove(&p.ptr_id()) {
                None => {
                    adjoints.insert(p.ptr_id(), g);
                }
                Some(old) => {
                    let sum = if create_graph {
                        old.add(&g)?
                    } else {
                        no_grad(|| old.add(&g))?
                    };
                    adjoints.insert(p.ptr_id(), sum);
                }
            }
        }
    }
    Ok(adjoints)
}

/// Accumulate d(loss)/d(leaf) into every tracked leaf reachable from `loss`.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    check_scalar(loss)?;
    if !loss.requires_grad() {
        return Ok(());
    }
    let order = topo_order(loss);
    let needed: HashSet<usize> = order.iter().map(|t| t.ptr_id()).collect();
    let adjoints = propagate(loss, &order, &needed, false)?;
    for t in &order {
        if t.is_leaf() && t.requires_grad() {
            if let Some(adj) = adjoints.get(&t.ptr_id()) {
                t.accumulate_grad(adj);
            }
        }
    }
    Ok(())
}

/// Gradient of a scalar `output` with respect to `inputs`, without touching
/// any stored `.grad`. Inputs unreachable from the output get a zero tensor.
/// With `create_graph` the returned gradients stay differentiable, so an
/// expression of them (e.g. a squared gradient norm) can be backpropagated
/// again.
pub fn grad<T: Scalar>(
    output: &Tensor<T>,
    inputs: &[&Tensor<T>],
    create_graph: bool,
) -> Result<Vec<Tensor<T>>> {
    check_scalar(output)?;
    let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape());
    if !output.requires_grad() {
        return Ok(inputs.iter().map(|t| zeros(t)).collect());
    }
    let order = topo_order(output);
    let targets: HashSet<usize> = inputs.iter().map(|t| t.ptr_id()).collect();
    // needed = tensors from which some target is reachable via parent edges
    let mut needed: HashSet<usize> = HashSet::new();
    for t in order.iter() {
        let is_target = targets.contains(&t.ptr_id());
        let via_parent = t
            .node()
            .map(|n| n.parents.iter().any(|p| needed.contains(&p.ptr_id())))
            .unwrap_or(false);
        if is_target || via_parent {
            needed.insert(t.ptr_id());
        }
    }
    let adjoints = propagate(output, &order, &needed, create_graph)?;
    Ok(inputs
        .iter()
        .map(|t| adjoints.get(&t.ptr_id()).cloned().unwrap_or_else(|| zeros(t)))
        .collect())
}
