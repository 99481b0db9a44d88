//! Reverse-mode gradient engine.
//!
//! [`grad`] walks the graph below a scalar loss in reverse topological
//! order, invoking each op's backward rule. Because backward rules are
//! written with ordinary tensor ops, the computed gradients carry graph
//! records of their own whenever `create_graph` is set, which makes them
//! differentiable again (gradients of gradients).

use super::Tensor;
use crate::error::TensorError;
use std::collections::{HashMap, HashSet};

/// Gradients of a scalar `loss` with respect to each tensor in `wrt`.
///
/// Tensors the loss does not reach get a zero gradient of matching shape.
/// With `create_graph`, the returned gradients remain attached to a graph
/// and can be differentiated again; otherwise they are detached values.
pub fn grad(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>, TensorError> {
    if !loss.is_scalar() {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }

    let order = topo_order(loss);
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    grads.insert(loss.id(), Tensor::ones(loss.shape()));

    for node in order.iter().rev() {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        let Some(record) = node.record() else {
            continue;
        };
        let parent_grads = (record.backward)(&g);
        debug_assert_eq!(parent_grads.len(), record.parents.len());
        for (parent, pg) in record.parents.iter().zip(parent_grads) {
            if !parent.tracked() {
                continue;
            }
            debug_assert_eq!(parent.shape(), pg.shape(), "backward rule shape");
            match grads.remove(&parent.id()) {
                Some(prev) => {
                    grads.insert(parent.id(), prev.add(&pg)?);
                }
                None => {
                    grads.insert(parent.id(), pg);
                }
            }
        }
    }

    Ok(wrt
        .iter()
        .map(|t| match grads.get(&t.id()) {
            Some(g) if create_graph => g.clone(),
            Some(g) => g.detach(),
            None => Tensor::zeros(t.shape()),
        })
        .collect())
}

/// Post-order over the tracked subgraph reachable from `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    // (tensor, parents_expanded)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(record) = node.record() {
            for parent in &record.parents {
                if parent.tracked() && !visited.contains(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
    }
    order
}
