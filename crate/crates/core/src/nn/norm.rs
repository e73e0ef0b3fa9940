//! Batch normalization over the (batch, height, width) axes of a 4-d map.

use super::{Module, Param, ParamVisit};
use ndarray::{Array1, Array4, ArrayD, Ix1};
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache {
    inv_std: Array1<f64>,
    normalized: Array4<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn gamma1(&self) -> ndarray::ArrayView1<'_, f64> {
        self.gamma.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    fn beta1(&self) -> ndarray::ArrayView1<'_, f64> {
        self.beta.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    /// Inference: normalize with running statistics.
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (_, c, _, _) = x.dim();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let gamma = self.gamma1();
        let beta = self.beta1();
        let mut out = x.clone();
        for ci in 0..c {
            let inv = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let mean = self.running_mean[ci];
            let (g, b) = (gamma[ci], beta[ci]);
            out.index_axis_mut(ndarray::Axis(1), ci)
                .mapv_inplace(|v| (v - mean) * inv * g + b);
        }
        out
    }

    /// Training: normalize with batch statistics and update running ones.
    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BatchNormCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let m = (n * h * w) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let lane = x.index_axis(ndarray::Axis(1), ci);
            let mu = lane.sum() / m;
            mean[ci] = mu;
            var[ci] = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
        }
        for ci in 0..c {
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var[ci];
        }

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut normalized = x.clone();
        for ci in 0..c {
            let mu = mean[ci];
            let inv = inv_std[ci];
            normalized.index_axis_mut(ndarray::Axis(1), ci).mapv_inplace(|v| (v - mu) * inv);
        }
        let gamma = self.gamma1();
        let beta = self.beta1();
        let mut out = normalized.clone();
        for ci in 0..c {
            let (g, b) = (gamma[ci], beta[ci]);
            out.index_axis_mut(ndarray::Axis(1), ci).mapv_inplace(|v| v * g + b);
        }
        (out, BatchNormCache { inv_std, normalized })
    }

    /// Backward through the batch statistics.
    pub fn backward(&mut self, cache: &BatchNormCache, grad_out: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = grad_out.dim();
        let m = (n * h * w) as f64;
        let gamma = self.gamma1().to_owned();

        let mut grad_in = Array4::zeros((n, c, h, w));
        let mut grad_gamma = Array1::zeros(c);
        let mut grad_beta = Array1::zeros(c);
        for ci in 0..c {
            let dy = grad_out.index_axis(ndarray::Axis(1), ci);
            let xhat = cache.normalized.index_axis(ndarray::Axis(1), ci);
            let sum_dy: f64 = dy.sum();
            let sum_dy_xhat: f64 = dy.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
            grad_beta[ci] = sum_dy;
            grad_gamma[ci] = sum_dy_xhat;

            // dx = (γ/σ) * (dy - mean(dy) - x̂ * mean(dy·x̂))
            let scale = gamma[ci] * cache.inv_std[ci];
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            let mut gi = grad_in.index_axis_mut(ndarray::Axis(1), ci);
            for ((g, &d), &xh) in gi.iter_mut().zip(dy.iter()).zip(xhat.iter()) {
                *g = scale * (d - mean_dy - xh * mean_dy_xhat);
            }
        }
        {
            let mut gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gg += &grad_gamma;
            let mut gb = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &grad_beta;
        }
        grad_in
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        f(format!("{prefix}gamma"), self.gamma.visit());
        f(format!("{prefix}beta"), self.beta.visit());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn train_output_is_normalized_per_channel() {
        let mut bn = BatchNorm2d::new(2);
        let x = Array4::from_shape_fn((3, 2, 4, 4), |(n, c, h, w)| {
            (n * 31 + c * 7 + h * 3 + w) as f64 * 0.1 + c as f64
        });
        let (y, _) = bn.forward_train(&x);
        for ci in 0..2 {
            let lane = y.index_axis(ndarray::Axis(1), ci);
            let m = lane.len() as f64;
            let mean = lane.sum() / m;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        let x = Array4::from_elem((1, 1, 1, 2), 4.0);
        let y = bn.forward(&x);
        // (4 - 2) / sqrt(4 + eps) ~= 1.
        assert!((y[[0, 0, 0, 0]] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gradients_match_finite_differences_through_batch_stats() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value[[0]] = 1.3;
        bn.gamma.value[[1] ] = 0.7;
        bn.beta.value[[0]] = 0.2;
        let x = Array4::from_shape_fn((2, 2, 3, 3), |(n, c, h, w)| {
            ((n + 1) as f64 * 0.9).sin() + (c as f64 - 0.3) * ((h * 3 + w) as f64 * 0.21).cos()
        });
        let (y, cache) = bn.forward_train(&x);
        let grad_in = bn.backward(&cache, &y);

        let loss = |bn: &BatchNorm2d, x: &Array4<f64>| -> f64 {
            let mut b = bn.clone();
            let (y, _) = b.forward_train(x);
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let step = 1e-5;
        for &(n, c, h, w) in &[(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0), (1, 0, 2, 1)] {
            let mut xp = x.clone();
            xp[[n, c, h, w]] += step;
            let mut xm = x.clone();
            xm[[n, c, h, w]] -= step;
            let numeric = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * step);
            let analytic = grad_in[[n, c, h, w]];
            assert!(
                (numeric - analytic).abs() < 1e-6 * numeric.abs().max(1.0),
                "dx at {n},{c},{h},{w}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}
