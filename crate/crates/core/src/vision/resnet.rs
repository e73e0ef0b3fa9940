//! Residual backbone: a standard 18-layer basic-block network whose final
//! block widens to the configured pre-classifier channel count, with the
//! matching batch-norm update and a 1x1 projection on its shortcut so the
//! residual sum stays shape-consistent.

use crate::nn::{relu, relu_backward, BatchNorm2d, Conv2d, MaxPool2d, Module, ParamVisit};
use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

/// Two 3x3 convolutions with batch norm, a ReLU between them, and a
/// residual shortcut (1x1 conv + norm when shape changes).
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

pub struct BlockCache {
    conv1: crate::nn::ConvCache,
    bn1: crate::nn::BatchNormCache,
    mask1: Array4<bool>,
    conv2: crate::nn::ConvCache,
    bn2: crate::nn::BatchNormCache,
    shortcut: Option<(crate::nn::ConvCache, crate::nn::BatchNormCache)>,
    mask_out: Array4<bool>,
}

impl BasicBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> BasicBlock {
        let shortcut = if stride != 1 || in_channels != out_channels {
            Some((
                Conv2d::new(rng, in_channels, out_channels, 1, stride, 0),
                BatchNorm2d::new(out_channels),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(rng, in_channels, mid_channels, 3, stride, 1),
            bn1: BatchNorm2d::new(mid_channels),
            conv2: Conv2d::new(rng, mid_channels, out_channels, 3, 1, 1),
            bn2: BatchNorm2d::new(out_channels),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut main = self.bn1.forward(&self.conv1.forward(x));
        main.mapv_inplace(|v| v.max(0.0));
        let main = self.bn2.forward(&self.conv2.forward(&main));
        let residual = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)),
            None => x.clone(),
        };
        let mut out = main + residual;
        out.mapv_inplace(|v| v.max(0.0));
        out
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BlockCache) {
        let (c1, conv1) = self.conv1.forward_train(x);
        let (b1, bn1) = self.bn1.forward_train(&c1);
        let (r1, mask1) = relu(&b1);
        let (c2, conv2) = self.conv2.forward_train(&r1);
        let (b2, bn2) = self.bn2.forward_train(&c2);
        let (residual, shortcut) = match &mut self.shortcut {
            Some((conv, bn)) => {
                let (sc, conv_cache) = conv.forward_train(x);
                let (sb, bn_cache) = bn.forward_train(&sc);
                (sb, Some((conv_cache, bn_cache)))
            }
            None => (x.clone(), None),
        };
        let (out, mask_out) = relu(&(b2 + residual));
        (out, BlockCache { conv1, bn1, mask1, conv2, bn2, shortcut, mask_out })
    }

    pub fn backward(&mut self, cache: &BlockCache, grad_out: &Array4<f64>) -> Array4<f64> {
        let d_sum = relu_backward(grad_out, &cache.mask_out);
        // Main branch.
        let d_b2 = self.bn2.backward(&cache.bn2, &d_sum);
        let d_c2 = self.conv2.backward(&cache.conv2, &d_b2);
        let d_r1 = relu_backward(&d_c2, &cache.mask1);
        let d_b1 = self.bn1.backward(&cache.bn1, &d_r1);
        let d_main = self.conv1.backward(&cache.conv1, &d_b1);
        // Shortcut branch.
        let d_short = match (&mut self.shortcut, &cache.shortcut) {
            (Some((conv, bn)), Some((conv_cache, bn_cache))) => {
                let d = bn.backward(bn_cache, &d_sum);
                conv.backward(conv_cache, &d)
            }
            _ => d_sum,
        };
        d_main + d_short
    }
}

impl Module for BasicBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        self.conv1.visit_params(&format!("{prefix}conv1."), f);
        self.bn1.visit_params(&format!("{prefix}bn1."), f);
        self.conv2.visit_params(&format!("{prefix}conv2."), f);
        self.bn2.visit_params(&format!("{prefix}bn2."), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params(&format!("{prefix}shortcut.conv."), f);
            bn.visit_params(&format!("{prefix}shortcut.bn."), f);
        }
    }
}

/// Batch-norm running statistics, exposed for checkpointing.
impl BasicBlock {
    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ndarray::Array1<f64>)) {
        f(format!("{prefix}bn1.running_mean"), &mut self.bn1.running_mean);
        f(format!("{prefix}bn1.running_var"), &mut self.bn1.running_var);
        f(format!("{prefix}bn2.running_mean"), &mut self.bn2.running_mean);
        f(format!("{prefix}bn2.running_var"), &mut self.bn2.running_var);
        if let Some((_, bn)) = &mut self.shortcut {
            f(format!("{prefix}shortcut.bn.running_mean"), &mut bn.running_mean);
            f(format!("{prefix}shortcut.bn.running_var"), &mut bn.running_var);
        }
    }
}

/// The full backbone: stem (7x7 stride-2 conv, norm, ReLU, 3x3 stride-2
/// max pool) followed by four two-block stages.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem_conv: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub pool: MaxPool2d,
    pub blocks: Vec<BasicBlock>,
}

pub struct BackboneCache {
    stem_conv: crate::nn::ConvCache,
    stem_bn: crate::nn::BatchNormCache,
    stem_mask: Array4<bool>,
    pool: crate::nn::MaxPoolCache,
    blocks: Vec<BlockCache>,
}

impl Backbone {
    /// `widths` are the per-stage channel counts; `final_channels` is the
    /// widened output of the very last block.
    pub fn new(rng: &mut ChaCha8Rng, widths: [usize; 4], final_channels: usize) -> Backbone {
        let stem_conv = Conv2d::new(rng, 3, widths[0], 7, 2, 3);
        let stem_bn = BatchNorm2d::new(widths[0]);
        let pool = MaxPool2d { kernel: 3, stride: 2, padding: 1 };
        let mut blocks = Vec::with_capacity(8);
        let mut in_ch = widths[0];
        for (stage, &ch) in widths.iter().enumerate() {
            let stride = if stage == 0 { 1 } else { 2 };
            blocks.push(BasicBlock::new(rng, in_ch, ch, ch, stride));
            if stage == 3 {
                // Last block of the last stage carries the widened output
                // and the extra 1x1 shortcut projection.
                blocks.push(BasicBlock::new(rng, ch, ch, final_channels, 1));
            } else {
                blocks.push(BasicBlock::new(rng, ch, ch, ch, 1));
            }
            in_ch = ch;
        }
        Backbone { stem_conv, stem_bn, pool, blocks }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut h = self.stem_bn.forward(&self.stem_conv.forward(x));
        h.mapv_inplace(|v| v.max(0.0));
        let mut h = self.pool.forward(&h);
        for block in &self.blocks {
            h = block.forward(&h);
        }
        h
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BackboneCache) {
        let (c, stem_conv) = self.stem_conv.forward_train(x);
        let (b, stem_bn) = self.stem_bn.forward_train(&c);
        let (r, stem_mask) = relu(&b);
        let (mut h, pool) = self.pool.forward_train(&r);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (next, cache) = block.forward_train(&h);
            h = next;
            blocks.push(cache);
        }
        (h, BackboneCache { stem_conv, stem_bn, stem_mask, pool, blocks })
    }

    pub fn backward(&mut self, cache: &BackboneCache, grad_out: &Array4<f64>) -> Array4<f64> {
        let mut g = grad_out.clone();
        for (block, bcache) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(bcache, &g);
        }
        let g = self.pool.backward(&cache.pool, &g);
        let g = relu_backward(&g, &cache.stem_mask);
        let g = self.stem_bn.backward(&cache.stem_bn, &g);
        self.stem_conv.backward(&cache.stem_conv, &g)
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ndarray::Array1<f64>)) {
        f(format!("{prefix}stem.bn.running_mean"), &mut self.stem_bn.running_mean);
        f(format!("{prefix}stem.bn.running_var"), &mut self.stem_bn.running_var);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_buffers(&format!("{prefix}block{i}."), f);
        }
    }
}

impl Module for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        self.stem_conv.visit_params(&format!("{prefix}stem.conv."), f);
        self.stem_bn.visit_params(&format!("{prefix}stem.bn."), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&format!("{prefix}block{i}."), f);
        }
    }
}
