use std::collections::BTreeMap;

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update. Frozen parameters are never touched, even when a
    /// gradient for them is present.
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            for (w, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * gv;
            }
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.moments.iter().map(|(id, (m, v))| (*id, m, v))
    }

    pub fn restore(&mut self, step: u64, moments: impl IntoIterator<Item = (ParamId, Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments.into_iter().map(|(id, m, v)| (id, (m, v))).collect();
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let mk = *mk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let vk = *vk;
                w[k] -= self.lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
            }
        }
    }
}
