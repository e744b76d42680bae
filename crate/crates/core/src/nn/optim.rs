//! Adaptive-moment (Adam) optimizer.

use super::graph::{Gradients, Graph};
use super::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            cfg,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Update every trainable parameter that received a gradient in `graph`.
    pub fn step(&mut self, store: &mut ParamStore, graph: &Graph, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step);
        let mut updates: Vec<(ParamId, &[f64])> = graph
            .param_vars()
            .filter(|(p, _)| store.entries()[p.0].trainable)
            .filter_map(|(p, v)| grads.get(v).map(|g| (p, g.data())))
            .collect();
        // HashMap iteration order is not stable; the update itself is
        // order-independent but sorting keeps traces reproducible.
        updates.sort_by_key(|(p, _)| *p);
        for (p, g) in updates {
            let m = &mut self.first[p.0];
            let v = &mut self.second[p.0];
            let w = store.get_mut(p).data_mut();
            for i in 0..w.len() {
                let gi = g[i] + self.cfg.weight_decay * w[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]), true);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut g = Graph::new(true, true);
        let w = g.param(&store, id);
        let sq = g.mul(w, w);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        adam.step(&mut store, &g, &grads);
        // bias-corrected first step is lr·sign(g)
        let v = store.get(id).data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![3.0]), true);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        for _ in 0..500 {
            let mut g = Graph::new(true, true);
            let w = g.param(&store, id);
            let sq = g.mul(w, w);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            adam.step(&mut store, &g, &grads);
        }
        assert!(store.get(id).data()[0].abs() < 1e-2);
    }
}
