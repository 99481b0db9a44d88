//! Named, ordered parameter collections and gradient entry points.

use super::{autodiff, Tensor};
use crate::error::TensorError;

/// Ordered collection of named trainable tensors. Order is fixed at
/// construction and preserved by every update, so flattening is stable.
#[derive(Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut map = f.debug_map();
        for (name, t) in &self.entries {
            map.entry(&name, &t.shape());
        }
        map.finish()
    }
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<ParamSet, TensorError> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(TensorError::DuplicateParamName(name.clone()));
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|(_, t)| t).collect()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| TensorError::UnknownParamName(name.to_string()))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenates all entries, in order, into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a ParamSet with this set's names and shapes from a flat
    /// vector; the exact inverse of [`ParamSet::flatten`].
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet, TensorError> {
        if flat.len() != self.numel() {
            return Err(TensorError::ElementCount {
                shape: vec![self.numel()],
                expected: self.numel(),
                got: flat.len(),
            });
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.numel();
            let tensor = Tensor::from_vec(t.shape(), flat[offset..offset + n].to_vec())?;
            entries.push((name.clone(), tensor));
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    /// Applies `f` to every tensor, preserving names and order.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), f(n, t)))
                .collect(),
        }
    }

    /// Detached copy with every tensor re-marked as a differentiable leaf.
    pub fn leaves(&self) -> ParamSet {
        self.map(|_, t| t.with_grad())
    }

    /// Detached copy with no gradient tracking at all.
    pub fn detached(&self) -> ParamSet {
        self.map(|_, t| t.detach())
    }

    /// One full-batch gradient-descent step: self - alpha * grads, built
    /// from differentiable ops so the update itself can be differentiated
    /// through when the inputs are tracked.
    pub fn descend(&self, grads: &ParamSet, alpha: f64) -> Result<ParamSet, TensorError> {
        self.zip_with(grads, |p, g| p.sub(&g.scale(alpha)))
    }

    /// Elementwise sum of two same-shaped sets (used to accumulate
    /// meta-gradients across a task batch).
    pub fn add(&self, other: &ParamSet) -> Result<ParamSet, TensorError> {
        self.zip_with(other, |a, b| a.add(b))
    }

    fn zip_with(
        &self,
        other: &ParamSet,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
    ) -> Result<ParamSet, TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::Invalid(format!(
                "param sets differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((name, a), (other_name, b)) in self.entries.iter().zip(&other.entries) {
            if name != other_name {
                return Err(TensorError::UnknownParamName(other_name.clone()));
            }
            entries.push((name.clone(), f(a, b)?));
        }
        Ok(ParamSet { entries })
    }
}

/// Reverse-mode gradients of a scalar loss with respect to every entry.
///
/// Unreached parameters get zero gradients of matching shape. With
/// `create_graph`, the returned gradients are themselves differentiable.
pub fn gradient(
    loss: &Tensor,
    params: &ParamSet,
    create_graph: bool,
) -> Result<ParamSet, TensorError> {
    let wrt: Vec<&Tensor> = params.tensors();
    let grads = autodiff::grad(loss, &wrt, create_graph)?;
    let mut iter = grads.into_iter();
    Ok(params.map(|_, _| iter.next().expect("gradient arity")))
}

/// Second-order meta-gradient: adapts `theta` for `steps` inner
/// gradient-descent steps on the support loss (retaining the graph), then
/// differentiates the query loss at the adapted parameters back through
/// the inner updates to `theta`.
///
/// Returns the meta-gradient, the adapted parameters (detached), and the
/// query loss value.
pub fn gradient_through_update<E, S, Q>(
    theta: &ParamSet,
    support_loss: S,
    query_loss: Q,
    alpha: f64,
    steps: usize,
) -> Result<(ParamSet, ParamSet, f64), E>
where
    E: From<TensorError>,
    S: Fn(&ParamSet) -> Result<Tensor, E>,
    Q: Fn(&ParamSet) -> Result<Tensor, E>,
{
    if alpha < 0.0 {
        return Err(TensorError::Invalid(format!(
            "inner step size must be non-negative, got {alpha}"
        ))
        .into());
    }
    let theta = theta.leaves();
    let mut phi = theta.clone();
    for _ in 0..steps {
        let loss = support_loss(&phi)?;
        let g = gradient(&loss, &phi, true)?;
        phi = phi.descend(&g, alpha)?;
    }
    let q = query_loss(&phi)?;
    let meta = gradient(&q, &theta, false)?;
    Ok((meta, phi.detached(), q.item()))
}

/// First-order approximation: adapts with detached inner updates and
/// evaluates the query gradient at the adapted parameters, ignoring the
/// inner-loop Jacobians.
pub fn gradient_at_adapted<E, S, Q>(
    theta: &ParamSet,
    support_loss: S,
    query_loss: Q,
    alpha: f64,
    steps: usize,
) -> Result<(ParamSet, ParamSet, f64), E>
where
    E: From<TensorError>,
    S: Fn(&ParamSet) -> Result<Tensor, E>,
    Q: Fn(&ParamSet) -> Result<Tensor, E>,
{
    let mut phi = theta.leaves();
    for _ in 0..steps {
        let loss = support_loss(&phi)?;
        let g = gradient(&loss, &phi, false)?;
        phi = phi.descend(&g, alpha)?.leaves();
    }
    let q = query_loss(&phi)?;
    let meta = gradient(&q, &phi, false)?;
    Ok((meta, phi.detached(), q.item()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_loss(center: f64) -> impl Fn(&ParamSet) -> Result<Tensor, TensorError> {
        move |p: &ParamSet| {
            let x = p.get("x")?;
            let d = x.add_scalar(-center);
            Ok(d.mul(&d)?.sum_all().scale(0.5))
        }
    }

    fn one_param(v: f64) -> ParamSet {
        ParamSet::new(vec![(
            "x".to_string(),
            Tensor::from_vec(&[1], vec![v]).unwrap(),
        )])
        .unwrap()
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_bit_exact() {
        let p = ParamSet::new(vec![
            (
                "w".into(),
                Tensor::from_vec(&[2, 2], vec![1.5, -2.25, 3.0, 0.125]).unwrap(),
            ),
            ("b".into(), Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap()),
        ])
        .unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), 6);
        let q = p.unflatten(&flat).unwrap();
        for ((n1, t1), (n2, t2)) in p.iter().zip(q.iter()).map(|(a, b)| (a, b)) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = ParamSet::new(vec![
            ("w".into(), Tensor::zeros(&[1])),
            ("w".into(), Tensor::zeros(&[1])),
        ]);
        assert!(matches!(r, Err(TensorError::DuplicateParamName(_))));
    }

    #[test]
    fn quadratic_meta_gradient_is_second_order() {
        // Support ½(φ-2)², query ½(φ-4)², θ=0, α=0.5, one step:
        // φ = 1 and dq/dθ = (φ-4)·(1-α) = -1.5.
        let theta = one_param(0.0);
        let (meta, phi, _q) =
            gradient_through_update(&theta, quad_loss(2.0), quad_loss(4.0), 0.5, 1).unwrap();
        assert!((phi.get("x").unwrap().item() - 1.0).abs() < 1e-12);
        assert!((meta.get("x").unwrap().item() - (-1.5)).abs() < 1e-12);
    }

    #[test]
    fn first_order_drops_the_update_jacobian() {
        // Same setup: first order evaluates dq/dφ = (φ-4) = -3.
        let theta = one_param(0.0);
        let (meta, phi, _q) =
            gradient_at_adapted(&theta, quad_loss(2.0), quad_loss(4.0), 0.5, 1).unwrap();
        assert!((phi.get("x").unwrap().item() - 1.0).abs() < 1e-12);
        assert!((meta.get("x").unwrap().item() - (-3.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_reduces_to_plain_query_gradient() {
        let theta = one_param(1.0);
        let (meta, _, _) =
            gradient_through_update(&theta, quad_loss(2.0), quad_loss(4.0), 0.0, 1).unwrap();
        let leaves = theta.leaves();
        let plain = gradient(&quad_loss(4.0)(&leaves).unwrap(), &leaves, false).unwrap();
        let diff = meta.get("x").unwrap().item() - plain.get("x").unwrap().item();
        assert!(diff.abs() < 1e-12);
    }

    #[test]
    fn multi_step_quadratic_chain_rule() {
        // With t steps on ½(φ-c)², φ_t = c + (1-α)^t (θ-c) and the
        // meta-gradient is (φ_t - c')·(1-α)^t.
        let (alpha, t) = (0.25, 3usize);
        let theta = one_param(0.0);
        let (meta, phi, _) =
            gradient_through_update(&theta, quad_loss(2.0), quad_loss(4.0), alpha, t).unwrap();
        let shrink = (1.0 - alpha).powi(t as i32);
        let want_phi = 2.0 + shrink * (0.0 - 2.0);
        let want_meta = (want_phi - 4.0) * shrink;
        assert!((phi.get("x").unwrap().item() - want_phi).abs() < 1e-12);
        assert!((meta.get("x").unwrap().item() - want_meta).abs() < 1e-12);
    }

    #[test]
    fn descend_does_not_mutate_inputs() {
        let p = one_param(3.0);
        let g = one_param(1.0);
        let before = p.flatten();
        let after = p.descend(&g, 0.5).unwrap();
        assert_eq!(p.flatten(), before);
        assert!((after.get("x").unwrap().item() - 2.5).abs() < 1e-15);
    }
}
