use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| {
            s.values()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Rebuild from saved moments (checkpoint restore).
    pub fn from_parts(lr: f64, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            first,
            second,
        }
    }

    /// Apply one update from the store's accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() != store.len()
            || self
                .first
                .iter()
                .zip(store.values())
                .any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::contract("optimizer buffers do not match parameters"));
        }
        if let Some(i) = store.grads().iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(
                "optimizer_step",
                format!("non-finite gradient for {}", store.names()[i]),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let grads: Vec<Tensor> = store.grads().to_vec();
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescale the store's gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_sq_norm().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in store.grads_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Graph;

    fn store_with(v: f64) -> (ParamStore, crate::numcore::ParamKey) {
        let mut s = ParamStore::new();
        let k = s.insert("w", Tensor::scalar(v));
        (s, k)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, k) = store_with(1.5);
        let mut opt = Adam::new(0.1, &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(k).item(), 1.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, k) = store_with(0.0);
        let mut opt = Adam::new(0.001, &s);
        s.grads_mut()[0].data_mut()[0] = 1.0;
        opt.step(&mut s).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
        assert!((s.value(k).item() + 0.001).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut s, _) = store_with(0.0);
        let mut opt = Adam::new(0.001, &s);
        s.grads_mut()[0].data_mut()[0] = f64::NAN;
        assert!(matches!(opt.step(&mut s), Err(Error::Numeric { .. })));
    }

    #[test]
    fn mismatched_buffers_rejected() {
        let (s, _) = store_with(0.0);
        let mut opt = Adam::new(0.001, &s);
        let mut other = ParamStore::new();
        other.insert("a", Tensor::zeros(2, 2));
        assert!(matches!(opt.step(&mut other), Err(Error::Contract(_))));
    }

    #[test]
    fn reproducible_trajectory() {
        let run = || {
            let (mut s, k) = store_with(2.0);
            let mut opt = Adam::new(0.05, &s);
            let mut trace = Vec::new();
            for _ in 0..20 {
                s.zero_grad();
                let g = Graph::new();
                let w = g.param(&s, k);
                let l = g.square(w);
                s.accumulate(&g.backward(l).unwrap());
                opt.step(&mut s).unwrap();
                trace.push(s.value(k).item().to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(&[3.0, 4.0]));
        s.grads_mut()[0].data_mut().copy_from_slice(&[300.0, 400.0]);
        let before = clip_grad_norm(&mut s, 100.0);
        assert_eq!(before, 500.0);
        assert!((s.grad_sq_norm().sqrt() - 100.0).abs() < 1e-9);
    }
}
