//! Minimal f64 neural-network toolkit: conv / batch-norm / pooling /
//! linear layers with hand-derived backward passes, Adam, and softmax
//! cross-entropy. No external ML framework; `ndarray::dot` carries the
//! matrix work. Double precision keeps finite-difference gradient checks
//! meaningful.

mod adam;
mod conv;
mod linear;
mod norm;
mod pool;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm2d, BatchNormCache};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d, MaxPoolCache};

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A learnable array and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Param {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }
}

/// Mutable view over one named parameter, used by the optimizer and the
/// checkpoint reader/writer.
pub struct ParamVisit<'a> {
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewMutD<'a, f64>,
}

impl Param {
    pub fn visit(&mut self) -> ParamVisit<'_> {
        ParamVisit { value: self.value.view_mut(), grad: self.grad.view_mut() }
    }
}

/// Anything that owns learnable parameters. Visit order is structural and
/// therefore deterministic, which the optimizer relies on.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, mut p| p.grad.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

/// Kaiming-normal initialization for layers followed by ReLU.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    gaussian(rng, shape, std)
}

/// Xavier-uniform initialization for linear maps without a ReLU.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape matches data")
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    // Box-Muller keeps us independent of distribution-crate version churn.
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape matches data")
}

/// ReLU forward; the returned mask feeds [`relu_backward`].
pub fn relu(x: &Array4<f64>) -> (Array4<f64>, Array4<bool>) {
    let mask = x.mapv(|v| v > 0.0);
    (x.mapv(|v| v.max(0.0)), mask)
}

pub fn relu_backward(grad_out: &Array4<f64>, mask: &Array4<bool>) -> Array4<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(mask, |v, &m| {
        if !m {
            *v = 0.0;
        }
    });
    g
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU (x·σ(x)): smooth, fixes 0, used between the projector's two layers.
pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(x, |gv, &xv| {
        let s = sigmoid(xv);
        *gv *= s * (1.0 + xv * (1.0 - s));
    });
    g
}

/// Mean softmax cross-entropy over a batch of logits; returns the loss and
/// the gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(n, targets.len(), "batch size mismatch");
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, (row, &target)) in logits.outer_iter().zip(targets).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exp: Array1<f64> = row.mapv(|v| (v - max).exp());
        let sum = exp.sum();
        loss += -(row[target] - max - sum.ln());
        let inv_n = 1.0 / n as f64;
        for (k, &e) in exp.iter().enumerate() {
            grad[[i, k]] = (e / sum - if k == target { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (loss / n as f64, grad)
}

/// Row-wise argmax of a logits matrix.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    #[test]
    fn softmax_ce_matches_hand_computation() {
        // Two classes, logits (0, 0): loss = ln 2, grad = (0.5, -0.5)/1.
        let logits = arr2(&[[0.0, 0.0]]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((grad[[0, 1]] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_gradient_is_correct_numerically() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits_d = gaussian(&mut rng, &[3, 5], 1.0);
        let logits = logits_d.into_dimensionality::<ndarray::Ix2>().unwrap();
        let targets = [2usize, 0, 4];
        let (_, grad) = softmax_cross_entropy(&logits, &targets);
        let step = 1e-6;
        for i in 0..3 {
            for k in 0..5 {
                let mut lp = logits.clone();
                lp[[i, k]] += step;
                let mut lm = logits.clone();
                lm[[i, k]] -= step;
                let numeric = (softmax_cross_entropy(&lp, &targets).0
                    - softmax_cross_entropy(&lm, &targets).0)
                    / (2.0 * step);
                assert!((numeric - grad[[i, k]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn silu_fixes_zero_and_matches_numeric_gradient() {
        let x = arr2(&[[0.0, 1.5, -2.0]]);
        let y = silu(&x);
        assert_eq!(y[[0, 0]], 0.0);
        let ones = Array2::ones(x.raw_dim());
        let grad = silu_backward(&x, &ones);
        let step = 1e-6;
        for k in 0..3 {
            let mut xp = x.clone();
            xp[[0, k]] += step;
            let mut xm = x.clone();
            xm[[0, k]] -= step;
            let numeric = (silu(&xp)[[0, k]] - silu(&xm)[[0, k]]) / (2.0 * step);
            assert!((numeric - grad[[0, k]]).abs() < 1e-8);
        }
    }

    #[test]
    fn relu_masks_negative_gradient() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, h, w)| (h as f64 - 0.5) * (w as f64 + 1.0));
        let (y, mask) = relu(&x);
        assert!(y.iter().all(|&v| v >= 0.0));
        let g = relu_backward(&Array4::ones((1, 1, 2, 2)), &mask);
        for (gv, xv) in g.iter().zip(x.iter()) {
            assert_eq!(*gv, if *xv > 0.0 { 1.0 } else { 0.0 });
        }
    }
}
