//! Fully connected layer.

use super::{xavier_uniform, Module, Param, ParamVisit};
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // [out, in]
    pub bias: Param,   // [out]
    pub in_features: usize,
    pub out_features: usize,
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Linear {
        Linear {
            weight: Param::new(xavier_uniform(
                rng,
                &[out_features, in_features],
                in_features,
                out_features,
            )),
            bias: Param::new(ArrayD::zeros(vec![out_features])),
            in_features,
            out_features,
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    fn b(&self) -> ndarray::ArrayView1<'_, f64> {
        self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d bias")
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_features, "linear input width mismatch");
        x.dot(&self.w().t()) + self.b()
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        (self.forward(x), LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let gw = grad_out.t().dot(&cache.input); // [out, in]
        let gb: Array1<f64> = grad_out.sum_axis(ndarray::Axis(0));
        {
            let mut wgrad = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            wgrad += &gw;
            let mut bgrad = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            bgrad += &gb;
        }
        grad_out.dot(&self.w())
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        f(format!("{prefix}weight"), self.weight.visit());
        f(format!("{prefix}bias"), self.bias.visit());
    }
}
