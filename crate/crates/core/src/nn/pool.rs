//! Max pooling and global average pooling.

use ndarray::{Array2, Array4};

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct MaxPoolCache {
    input_dim: (usize, usize, usize, usize),
    /// Flat input index chosen per output cell.
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, MaxPoolCache) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let mut out = Array4::from_elem((n, c, oh, ow), f64::NEG_INFINITY);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let pad = self.padding as isize;
        let flat = |ni: usize, ci: usize, y: usize, xx: usize| ((ni * c + ci) * h + y) * w + xx;
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            let iy = oy as isize * self.stride as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = ox as isize * self.stride as isize + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[ni, ci, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = flat(ni, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        out[[ni, ci, oy, ox]] = best;
                        argmax[((ni * c + ci) * oh + oy) * ow + ox] = best_idx;
                    }
                }
            }
        }
        (out, MaxPoolCache { input_dim: (n, c, h, w), argmax })
    }

    pub fn backward(&self, cache: &MaxPoolCache, grad_out: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.input_dim;
        let mut grad = vec![0.0f64; n * c * h * w];
        for (slot, &g) in cache.argmax.iter().zip(grad_out.iter()) {
            grad[*slot] += g;
        }
        Array4::from_shape_vec((n, c, h, w), grad).expect("pool grad shape")
    }
}

/// [n, c, h, w] -> [n, c] channel means.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = x.index_axis(ndarray::Axis(0), ni)
                .index_axis(ndarray::Axis(0), ci)
                .sum()
                * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(
    grad_out: &Array2<f64>,
    spatial: (usize, usize),
) -> Array4<f64> {
    let (n, c) = grad_out.dim();
    let (h, w) = spatial;
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| grad_out[[ni, ci]] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_window_maxima() {
        let pool = MaxPool2d { kernel: 2, stride: 2, padding: 0 };
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, h, w)| (h * 4 + w) as f64);
        let y = pool.forward(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
    }

    #[test]
    fn max_pool_backward_routes_to_argmax() {
        let pool = MaxPool2d { kernel: 2, stride: 2, padding: 0 };
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, h, w)| (h * 2 + w) as f64);
        let (_, cache) = pool.forward_train(&x);
        let grad = pool.backward(&cache, &Array4::from_elem((1, 1, 1, 1), 3.0));
        assert_eq!(grad[[0, 0, 1, 1]], 3.0);
        assert_eq!(grad.sum(), 3.0);
    }

    #[test]
    fn avg_pool_matches_channel_means() {
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(n, c, h, w)| (n + c + h + w) as f64);
        let pooled = global_avg_pool(&x);
        for n in 0..2 {
            for c in 0..3 {
                let mean = x
                    .index_axis(ndarray::Axis(0), n)
                    .index_axis(ndarray::Axis(0), c)
                    .mean()
                    .unwrap();
                assert!((pooled[[n, c]] - mean).abs() < 1e-12);
            }
        }
        let g = global_avg_pool_backward(&pooled, (2, 2));
        assert!((g[[0, 0, 0, 0]] - pooled[[0, 0]] / 4.0).abs() < 1e-12);
    }
}
