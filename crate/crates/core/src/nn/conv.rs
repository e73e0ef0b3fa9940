//! 2-D convolution via im2col and a single matrix product.

use super::{he_normal, Module, Param, ParamVisit};
use ndarray::{Array2, Array4, Ix4};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param, // [out, in, kh, kw]
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Forward cache: the input is enough, im2col is recomputed in backward.
pub struct ConvCache {
    input: Array4<f64>,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2d {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::new(he_normal(rng, &[out_channels, in_channels, kernel, kernel], fan_in)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, n * oh * ow));
        let pad = self.padding as isize;
        for ci in 0..c {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let mut col_row = cols.row_mut(row);
                    for ni in 0..n {
                        for oy in 0..oh {
                            let iy = oy as isize * self.stride as isize + kh as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = ox as isize * self.stride as isize + kw as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                col_row[(ni * oh + oy) * ow + ox] =
                                    x[[ni, ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
        let (oh, ow) = self.out_spatial(h, w);
        let k = self.kernel;
        let c = self.in_channels;
        let mut x = Array4::zeros((n, c, h, w));
        let pad = self.padding as isize;
        for ci in 0..c {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let col_row = cols.row(row);
                    for ni in 0..n {
                        for oy in 0..oh {
                            let iy = oy as isize * self.stride as isize + kh as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = ox as isize * self.stride as isize + kw as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                x[[ni, ci, iy as usize, ix as usize]] +=
                                    col_row[(ni * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let k = self.kernel;
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight is 4-d")
            .to_shape((self.out_channels, self.in_channels * k * k))
            .expect("contiguous weight")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.out_spatial(h, w);
        let cols = self.im2col(x);
        let out_mat = self.weight_matrix().dot(&cols); // [out, n*oh*ow]
        let out = out_mat
            .into_shape_with_order((self.out_channels, n, oh, ow))
            .expect("conv output reshape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        (out, ConvCache { input: x.clone() })
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = cache.input.dim();
        let (gn, gc, oh, ow) = grad_out.dim();
        assert_eq!((gn, gc), (n, self.out_channels));

        let grad_mat = grad_out
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((self.out_channels, n * oh * ow))
            .expect("grad reshape");

        let cols = self.im2col(&cache.input);
        let grad_weight = grad_mat.dot(&cols.t()); // [out, in*k*k]
        let k = self.kernel;
        let gw4 = grad_weight
            .to_shape((self.out_channels, self.in_channels, k, k))
            .expect("weight grad reshape")
            .to_owned();
        let mut gdyn = self.weight.grad.view_mut().into_dimensionality::<Ix4>().unwrap();
        gdyn += &gw4;

        let grad_cols = self.weight_matrix().t().dot(&grad_mat);
        self.col2im(&grad_cols, n, h, w)
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        f(format!("{prefix}weight"), self.weight.visit());
    }
}
