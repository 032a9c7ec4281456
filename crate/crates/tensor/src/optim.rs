use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g.data()[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g.data()[i] * g.data()[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum_all(wv);
        let g = tape.backward(loss).unwrap();
        adam.step(&mut store, &g);
        let v = store.get(w).data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![3.0, -2.0]));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let sq = tape.square(wv);
            let loss = tape.sum_all(sq);
            let g = tape.backward(loss).unwrap();
            adam.step(&mut store, &g);
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 1e-3));
    }
}
