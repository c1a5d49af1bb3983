//! Central registry of named trainable tensors.
//!
//! Forward/backward code reads values through [`ParamId`] handles, so batches
//! can run in parallel against an immutable store. Per-sample gradient
//! contributions go into [`GradBuffer`]s that are merged in a fixed order at
//! the step barrier, keeping results independent of thread count.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named value plus its gradient accumulator (same shape, zeroed at step
/// start).
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Fresh zero-filled gradient buffer matching this store's layout.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Fold a buffer into the master accumulators (step barrier, one writer).
    pub fn accumulate(&mut self, buf: &GradBuffer) {
        assert_eq!(buf.grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(&buf.grads) {
            p.grad.add_assign(g).expect("grad buffer layout mismatch");
        }
    }

    /// Plain SGD: value -= lr * grad for every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }

    /// Total gradient L2 norm squared, for diagnostics.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum()
    }

    /// Export all parameters as (name, tensor) pairs in registration order.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Load values by name from `entries`. With `strict`, every parameter
    /// must be present; otherwise missing names keep their current value.
    pub fn load(&mut self, entries: &[(String, Tensor)], strict: bool) -> Result<()> {
        for p in &mut self.params {
            match entries.iter().find(|(n, _)| *n == p.name) {
                Some((_, t)) => {
                    if t.shape() != p.value.shape() {
                        return Err(Error::Format(format!(
                            "checkpoint tensor {} has shape {:?}, expected {:?}",
                            p.name,
                            t.shape(),
                            p.value.shape()
                        )));
                    }
                    p.value = t.clone();
                }
                None if strict => {
                    return Err(Error::Format(format!("checkpoint missing tensor {}", p.name)))
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Per-sample (or per-chunk) gradient contributions, index-aligned with the
/// originating store.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn add(&mut self, id: ParamId, contribution: &Tensor) {
        self.grads[id.0]
            .add_assign(contribution)
            .expect("gradient contribution shape mismatch");
    }

    pub fn axpy(&mut self, id: ParamId, scale: f64, contribution: &Tensor) {
        self.grads[id.0]
            .axpy(scale, contribution)
            .expect("gradient contribution shape mismatch");
    }

    /// self += other (same layout).
    pub fn merge(&mut self, other: &GradBuffer) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b).expect("gradient buffer layout mismatch");
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_accumulate() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::filled(&[2], 1.0));
        let b = store.register("b", Tensor::filled(&[3], 2.0));
        let mut buf = store.grad_buffer();
        buf.add(a, &Tensor::filled(&[2], 0.5));
        buf.axpy(b, 2.0, &Tensor::filled(&[3], 1.0));
        store.accumulate(&buf);
        assert_eq!(store.grad(a).data(), &[0.5, 0.5]);
        assert_eq!(store.grad(b).data(), &[2.0, 2.0, 2.0]);
        store.sgd_step(0.1);
        assert!((store.value(a).data()[0] - 0.95).abs() < 1e-15);
        store.zero_grads();
        assert_eq!(store.grad(a).data(), &[0.0, 0.0]);
    }

    #[test]
    fn load_strict_requires_all_names() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::zeros(&[2]));
        let err = store.load(&[], true);
        assert!(err.is_err());
        assert!(store.load(&[], false).is_ok());
    }
}
