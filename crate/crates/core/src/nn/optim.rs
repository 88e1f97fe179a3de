use std::collections::BTreeMap;

use super::graph::BufferUpdate;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Adam optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched,
    /// as are ids for which `frozen` returns true.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
        frozen: impl Fn(ParamId) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (&id, g) in grads {
            if !store.is_trainable(id) || frozen(id) {
                continue;
            }
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Folds batch-norm statistics into running buffers with momentum.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: &[BufferUpdate], momentum: f64) {
    for u in updates {
        for (r, b) in store.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in store.get_mut(u.var_id).data_mut().iter_mut().zip(&u.batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, (0.9, 0.999));
        for _ in 0..500 {
            let x = store.get(id).clone();
            let g = x.map(|v| 2.0 * v);
            let mut grads = BTreeMap::new();
            grads.insert(id, g);
            opt.step(&mut store, &grads, |_| false);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![1], vec![1.0]));
        let mut opt = Adam::new(0.01, (0.9, 0.999));
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::new(vec![1], vec![123.0]));
        opt.step(&mut store, &grads, |_| false);
        assert!((store.get(id).item() - 0.99).abs() < 1e-9);
    }
}
