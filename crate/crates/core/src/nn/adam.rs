//! Adaptive moment estimation with the customary decay constants.

use super::Module;
use ndarray::ArrayD;
use std::collections::HashMap;

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: HashMap::new(),
        }
    }

    /// One update over every parameter the module exposes.
    pub fn step(&mut self, module: &mut dyn Module) {
        self.step += 1;
        let t = self.step as f64;
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let state = &mut self.state;
        module.visit_params("", &mut |name, mut p| {
            let (m, v) = state.entry(name).or_insert_with(|| {
                (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim()))
            });
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }
}
