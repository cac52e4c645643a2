use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable parameter, then zeroes all
    /// gradients. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(&[1.0, -2.0]));
        let mut opt = AdamState::new(&store, 3e-3);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(a).data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(0.5));
        store.get_mut(a).grad = Tensor::scalar(1.0);
        let mut opt = AdamState::new(&store, 3e-3);
        opt.step(&mut store).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let expected = 0.5 - 3e-3 / (1.0 + 1e-8);
        assert_relative_eq!(store.value(a).item(), expected, epsilon = 1e-15);
        assert_eq!(store.grad(a).item(), 0.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("ok", Tensor::scalar(0.0));
        let bad = store.add("router.w", Tensor::scalar(0.0));
        store.get_mut(bad).grad = Tensor::scalar(f64::NAN);
        let mut opt = AdamState::new(&store, 3e-3);
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("router.w"));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn identical_params_identical_updates() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(0.3));
        let b = store.add("b", Tensor::scalar(0.3));
        let mut opt = AdamState::new(&store, 3e-3);
        for k in 0..5 {
            let g = 0.1 * (k as f64 + 1.0);
            store.get_mut(a).grad = Tensor::scalar(g);
            store.get_mut(b).grad = Tensor::scalar(g);
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.value(a).item().to_bits(), store.value(b).item().to_bits());
    }

    #[test]
    fn frozen_params_are_not_updated() {
        let mut store = ParamStore::new();
        let a = store.add_frozen("a", Tensor::scalar(1.0));
        store.get_mut(a).grad = Tensor::scalar(1.0);
        let mut opt = AdamState::new(&store, 3e-3);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(a).item(), 1.0);
    }
}
