//! The specialized vision module: a widened residual network trained
//! standalone on epoch images. It exposes the pre-classifier semantic
//! feature both as a spatial map and as its channel-mean vector; the
//! flattened map feeds the 5-way stage classifier.

mod resnet;

pub use resnet::{Backbone, BackboneCache, BasicBlock};

use crate::checkpoint::{self, CheckpointError, CheckpointManifest};
use crate::nn::{
    argmax_rows, global_avg_pool, softmax_cross_entropy, Adam, Linear, Module, ParamVisit,
};
use crate::render::EpochImage;
use crate::stage::Stage;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} at step {step}; aborting")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Network sizing. `width_scale` shrinks every stage uniformly so gradient
/// checks and CI stay affordable; the default reproduces the full
/// architecture with a 1024-channel pre-classifier feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub input_size: (usize, usize, usize),
    pub width_scale: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig { input_size: (3, 224, 224), width_scale: 1.0, num_classes: 5, seed: 0 }
    }
}

impl VisionConfig {
    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Channel count of the widened final convolution (1024 at scale 1).
    pub fn final_conv_out_channels(&self) -> usize {
        self.scaled(1024)
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        [self.scaled(64), self.scaled(128), self.scaled(256), self.scaled(512)]
    }

    /// Spatial size of the pre-classifier map: five 2x downsamplings.
    pub fn feature_spatial(&self) -> (usize, usize) {
        let down = |mut v: usize| {
            for _ in 0..5 {
                v = v.div_ceil(2);
            }
            v
        };
        (down(self.input_size.1), down(self.input_size.2))
    }

    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        use sha2::Digest;
        hex::encode(&sha2::Sha256::digest(canonical.as_bytes())[..8])
    }
}

/// Pre-classifier semantic feature of a batch: channel-mean vector plus
/// (optionally) the spatial map it was pooled from.
#[derive(Debug, Clone)]
pub struct SemanticFeature {
    /// [batch, channels]
    pub pooled: Array2<f64>,
    /// [batch, channels, h, w]
    pub spatial_map: Option<Array4<f64>>,
}

/// Per-epoch training log row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<TrainEpochLog>,
    pub final_loss: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for row in &self.epochs {
            out.push_str(&format!("{},{:.9},{:.6}\n", row.epoch, row.loss, row.accuracy));
        }
        out
    }
}

/// Hyperparameters of the standalone vision training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for VisionTrainConfig {
    fn default() -> Self {
        VisionTrainConfig { epochs: 30, learning_rate: 5e-4, batch_size: 8 }
    }
}

/// Backbone plus flattened-feature classifier and the input normalization
/// constants computed on the training split.
pub struct VisionNet {
    pub config: VisionConfig,
    pub backbone: Backbone,
    pub classifier: Linear,
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
}

pub struct VisionForward {
    backbone: BackboneCache,
    spatial: Array4<f64>,
    classifier: crate::nn::LinearCache,
}

impl VisionNet {
    pub fn new(config: VisionConfig) -> VisionNet {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(&mut rng, config.stage_widths(), config.final_conv_out_channels());
        let (fh, fw) = config.feature_spatial();
        let classifier = Linear::new(
            &mut rng,
            config.final_conv_out_channels() * fh * fw,
            config.num_classes,
        );
        VisionNet {
            config,
            backbone,
            classifier,
            input_mean: Array1::zeros(3),
            input_std: Array1::ones(3),
        }
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<(), VisionError> {
        let (_, c, h, w) = x.dim();
        let want = self.config.input_size;
        if (c, h, w) != want {
            return Err(VisionError::ShapeMismatch(format!(
                "input is ({c}, {h}, {w}), config wants {want:?}"
            )));
        }
        Ok(())
    }

    /// Normalize a raw [0,1] image batch with the stored channel statistics.
    pub fn normalize(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut out = x.clone();
        for c in 0..3 {
            let mean = self.input_mean[c];
            let std = self.input_std[c].max(1e-6);
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| (v - mean) / std);
        }
        out
    }

    /// Inference-mode semantic feature of a raw [0,1] image batch.
    pub fn forward_features(&self, x: &Array4<f64>) -> Result<SemanticFeature, VisionError> {
        self.check_input(x)?;
        let spatial = self.backbone.forward(&self.normalize(x));
        Ok(SemanticFeature { pooled: global_avg_pool(&spatial), spatial_map: Some(spatial) })
    }

    /// Stage logits from the flattened pre-classifier map.
    pub fn classify(&self, feature: &SemanticFeature) -> Result<Array2<f64>, VisionError> {
        let spatial = feature.spatial_map.as_ref().ok_or_else(|| {
            VisionError::ShapeMismatch("classifier needs the spatial feature map".into())
        })?;
        let (n, c, h, w) = spatial.dim();
        if c * h * w != self.classifier.in_features {
            return Err(VisionError::ShapeMismatch(format!(
                "feature {c}x{h}x{w} does not flatten to classifier input {}",
                self.classifier.in_features
            )));
        }
        let flat = spatial
            .view()
            .into_shape_with_order((n, c * h * w))
            .expect("contiguous feature map")
            .to_owned();
        Ok(self.classifier.forward(&flat))
    }

    /// Inference logits for a raw image batch.
    pub fn predict_logits(&self, x: &Array4<f64>) -> Result<Array2<f64>, VisionError> {
        let feature = self.forward_features(x)?;
        self.classify(&feature)
    }

    /// Training-mode forward to logits; input must already be normalized.
    pub fn forward_train(&mut self, normalized: &Array4<f64>) -> (Array2<f64>, VisionForward) {
        let (spatial, backbone) = self.backbone.forward_train(normalized);
        let (n, c, h, w) = spatial.dim();
        let flat = spatial
            .view()
            .into_shape_with_order((n, c * h * w))
            .expect("contiguous feature map")
            .to_owned();
        let (logits, classifier) = self.classifier.forward_train(&flat);
        (logits, VisionForward { backbone, spatial, classifier })
    }

    /// Backward from logit gradients to the (normalized) input gradient.
    pub fn backward(&mut self, cache: &VisionForward, grad_logits: &Array2<f64>) -> Array4<f64> {
        let g_flat = self.classifier.backward(&cache.classifier, grad_logits);
        let (n, c, h, w) = cache.spatial.dim();
        let g_spatial = g_flat
            .into_shape_with_order((n, c, h, w))
            .expect("gradient reshapes back to the feature map");
        self.backbone.backward(&cache.backbone, &g_spatial)
    }

    pub fn save(&mut self, path: &Path, manifest: &CheckpointManifest) -> Result<(), VisionError> {
        let mut arrays = checkpoint::collect_params(self);
        let mut buffers: Vec<(String, ArrayD<f64>)> = Vec::new();
        self.backbone.visit_buffers("", &mut |name, buf| {
            buffers.push((format!("buffer.{name}"), buf.to_owned().into_dyn()));
        });
        arrays.extend(buffers);
        arrays.push(("buffer.input_mean".into(), self.input_mean.to_owned().into_dyn()));
        arrays.push(("buffer.input_std".into(), self.input_std.to_owned().into_dyn()));
        checkpoint::save_checkpoint(path, manifest, &arrays)?;
        Ok(())
    }

    pub fn load(path: &Path, config: VisionConfig) -> Result<(VisionNet, CheckpointManifest), VisionError> {
        let (manifest, arrays) = checkpoint::load_checkpoint(path)?;
        let mut net = VisionNet::new(config);
        let params: Vec<(String, ArrayD<f64>)> =
            arrays.iter().filter(|(n, _)| !n.starts_with("buffer.")).cloned().collect();
        checkpoint::load_into_module(&mut net, &params)?;
        let lookup: std::collections::HashMap<&str, &ArrayD<f64>> =
            arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        let mut missing = None;
        net.backbone.visit_buffers("", &mut |name, buf| {
            let key = format!("buffer.{name}");
            match lookup.get(key.as_str()) {
                Some(src) => {
                    buf.assign(&src.view().into_dimensionality::<Ix1>().expect("1-d buffer"))
                }
                None => missing = Some(key),
            }
        });
        if let Some(name) = missing {
            return Err(CheckpointError::MissingArray(name).into());
        }
        for (field, name) in [
            (&mut net.input_mean, "buffer.input_mean"),
            (&mut net.input_std, "buffer.input_std"),
        ] {
            let src = lookup
                .get(name)
                .ok_or_else(|| CheckpointError::MissingArray(name.into()))?;
            field.assign(&src.view().into_dimensionality::<Ix1>().expect("1-d buffer"));
        }
        Ok((net, manifest))
    }
}

impl Module for VisionNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        self.backbone.visit_params(&format!("{prefix}backbone."), f);
        self.classifier.visit_params(&format!("{prefix}classifier."), f);
    }
}

/// Raw-pixel image as a [3, h, w] array in [0, 1].
pub fn image_to_array(image: &EpochImage) -> Array3<f64> {
    let (w, h) = image.pixels.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        image.pixels.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

pub fn stack_images(images: &[Array3<f64>]) -> Array4<f64> {
    let dims = images[0].dim();
    let mut out = Array4::zeros((images.len(), dims.0, dims.1, dims.2));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out
}

/// Per-channel mean and standard deviation over a dataset of raw images.
pub fn channel_statistics(images: &[Array3<f64>]) -> (Array1<f64>, Array1<f64>) {
    let mut mean = Array1::zeros(3);
    let mut count = 0usize;
    for img in images {
        for c in 0..3 {
            mean[c] += img.index_axis(Axis(0), c).sum();
        }
        count += img.len() / 3;
    }
    mean.mapv_inplace(|v: f64| v / count as f64);
    let mut var = Array1::zeros(3);
    for img in images {
        for c in 0..3 {
            let m = mean[c];
            var[c] += img.index_axis(Axis(0), c).iter().map(|&v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    var.mapv_inplace(|v: f64| (v / count as f64).sqrt());
    (mean, var)
}

/// Train the vision module with Adam on multi-class cross-entropy.
/// Deterministic for a fixed seed: construction, shuffling and every f64
/// reduction run in a fixed order.
pub fn train_vision(
    dataset: &[(Array3<f64>, Stage)],
    config: VisionConfig,
    train: &VisionTrainConfig,
) -> Result<(VisionNet, TrainLog), VisionError> {
    if dataset.is_empty() {
        return Err(VisionError::EmptyDataset);
    }
    let mut net = VisionNet::new(config);
    let images: Vec<Array3<f64>> = dataset.iter().map(|(img, _)| img.clone()).collect();
    let (mean, std) = channel_statistics(&images);
    net.input_mean = mean;
    net.input_std = std;

    let mut optimizer = Adam::new(train.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(net.config.seed ^ 0x5eed_cafe);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;

    // Batches are balanced to within one sample of each other; a ragged
    // trailing batch gives batch norm degenerate statistics.
    let n = dataset.len();
    let num_batches = n.div_ceil(train.batch_size.max(1));
    let base = n / num_batches;
    let extra = n % num_batches;
    let mut bounds = Vec::with_capacity(num_batches + 1);
    bounds.push(0usize);
    for i in 0..num_batches {
        bounds.push(bounds[i] + base + usize::from(i < extra));
    }

    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for pair in bounds.windows(2) {
            let chunk = &order[pair[0]..pair[1]];
            let batch_images: Vec<Array3<f64>> =
                chunk.iter().map(|&i| dataset[i].0.clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| dataset[i].1.index()).collect();
            let x = net.normalize(&stack_images(&batch_images));

            net.zero_grad();
            let (logits, cache) = net.forward_train(&x);
            let (loss, grad) = softmax_cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(VisionError::NonFiniteLoss { step, loss });
            }
            net.backward(&cache, &grad);
            optimizer.step(&mut net);

            for (pred, &want) in argmax_rows(&logits).iter().zip(&targets) {
                if *pred == want {
                    correct += 1;
                }
            }
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let row = TrainEpochLog {
            epoch,
            loss: epoch_loss / batches as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        };
        log.final_loss = row.loss;
        log.epochs.push(row);
    }
    Ok((net, log))
}
