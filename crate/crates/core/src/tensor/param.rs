use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub velocity: Tensor,
}

/// Named, ordered collection of parameters. Registration order is stable and
/// defines the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let velocity = Tensor::zeros(tensor.shape());
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            velocity,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Sets every gradient to zeros of the right shape.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.data_mut().iter_mut().for_each(|v| *v = 0.0),
                None => p.grad = Some(Tensor::zeros(p.tensor.shape())),
            }
        }
    }

    /// Drops gradients entirely (as opposed to zeroing them).
    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn reset_velocity(&mut self) {
        for p in &mut self.params {
            p.velocity = Tensor::zeros(p.tensor.shape());
        }
    }

    /// Rescales the stored gradients so their global norm is at most `max_norm`;
    /// returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self
            .params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.scale_assign(s);
            }
        }
        norm
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            let Some(g) = g else { continue };
            let dst = p.grad.get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (d, v) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += scale * v;
            }
        }
    }
}

/// Per-parameter gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients(pub(crate) Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    /// Sum of squared gradient entries.
    pub fn norm_sq(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// One step of SGD with classical momentum:
/// `velocity <- momentum * velocity - lr * grad; tensor <- tensor + velocity`.
pub fn sgd_momentum_step(params: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        let grad = p.grad.as_ref().expect("checked above");
        for ((w, v), g) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(p.velocity.data_mut())
            .zip(grad.data())
        {
            *v = momentum * *v - lr * g;
            *w += *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    fn set_grad(store: &mut ParamStore, id: ParamId, g: f64) {
        store.get_mut(id).grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn clip_rescales_global_norm() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::scalar(0.0)).unwrap();
        let b = store.register("b", Tensor::scalar(0.0)).unwrap();
        set_grad(&mut store, a, 3.0);
        set_grad(&mut store, b, 4.0);
        assert_eq!(store.clip_grad_norm(10.0), 5.0);
        assert_eq!(store.get(a).grad.as_ref().unwrap().item(), 3.0);
        assert_eq!(store.clip_grad_norm(1.0), 5.0);
        assert!((store.get(a).grad.as_ref().unwrap().item() - 0.6).abs() < 1e-15);
        assert!((store.get(b).grad.as_ref().unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn plain_gradient_step() {
        let (mut store, id) = single(5.0);
        set_grad(&mut store, id, 1.0);
        sgd_momentum_step(&mut store, 0.1, 0.0).unwrap();
        assert!((store.get(id).tensor.item() - 4.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion_two_steps() {
        let (mut store, id) = single(0.0);
        set_grad(&mut store, id, 1.0);
        sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
        assert!((store.get(id).velocity.item() + 0.1).abs() < 1e-15);
        sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
        assert!((store.get(id).velocity.item() + 0.19).abs() < 1e-15);
        assert!((store.get(id).tensor.item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let (mut store, id) = single(3.0);
        store.zero_grad();
        sgd_momentum_step(&mut store, 0.1, 0.9).unwrap();
        assert_eq!(store.get(id).tensor.item(), 3.0);
    }

    #[test]
    fn missing_grad_rejected() {
        let (mut store, _) = single(3.0);
        let err = sgd_momentum_step(&mut store, 0.1, 0.9).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(name) if name == "w"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut store, _) = single(1.0);
        assert!(store.register("w", Tensor::scalar(2.0)).is_err());
    }
}
