//! Multi-level feature machinery: the interchangeable low-level patch
//! encoder, the shared two-layer projection into the language-embedding
//! space, and the patch-wise fusion that adds the expanded high-level
//! feature token onto every visual token.

use crate::nn::{silu, silu_backward, Linear, Module, ParamVisit};
use crate::render::EpochImage;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("patch count must be >= 1, got {0}")]
    InvalidP(usize),
    #[error("encoder {0:?} is not available in this build (external plug-in)")]
    EncoderUnavailable(String),
    #[error("image incompatible with encoder: {0}")]
    ImageIncompatible(String),
}

/// Contract for the low-level visual encoder: image in, patch tokens out,
/// deterministic at inference.
pub trait LowLevelEncoder: Send + Sync {
    fn id(&self) -> &str;
    /// [patch_count, embed_dim] tokens.
    fn encode(&self, image: &EpochImage) -> Result<Array2<f64>, AlignError>;
    fn embed_dim(&self) -> usize;
}

/// Construction parameters for in-repo encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub patch_px: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        EncoderParams { patch_px: 14, embed_dim: 1024, seed: 0 }
    }
}

/// Non-overlapping patch grid with one shared random linear embedding,
/// fixed under a recorded seed. A stand-in for a pretrained patch encoder
/// with the same token geometry.
pub struct ToyPatchEncoder {
    params: EncoderParams,
    /// [embed_dim, patch_px * patch_px * 3]
    weight: Array2<f64>,
    /// [embed_dim]
    bias: Array1<f64>,
}

impl ToyPatchEncoder {
    pub fn new(params: EncoderParams) -> ToyPatchEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x70c4_17e5);
        let fan_in = params.patch_px * params.patch_px * 3;
        let weight = crate::nn::gaussian(&mut rng, &[params.embed_dim, fan_in], (1.0 / fan_in as f64).sqrt())
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d weight");
        let bias = Array1::zeros(params.embed_dim);
        ToyPatchEncoder { params, weight, bias }
    }
}

impl LowLevelEncoder for ToyPatchEncoder {
    fn id(&self) -> &str {
        "toy-patch"
    }

    fn embed_dim(&self) -> usize {
        self.params.embed_dim
    }

    fn encode(&self, image: &EpochImage) -> Result<Array2<f64>, AlignError> {
        let (w, h) = image.pixels.dimensions();
        let p = self.params.patch_px as u32;
        if p == 0 || w % p != 0 || h % p != 0 {
            return Err(AlignError::ImageIncompatible(format!(
                "{w}x{h} image is not divisible into {p}-px patches"
            )));
        }
        let (rows, cols) = ((h / p) as usize, (w / p) as usize);
        let fan_in = self.params.patch_px * self.params.patch_px * 3;
        let mut patches = Array2::zeros((rows * cols, fan_in));
        for py in 0..rows {
            for px in 0..cols {
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let pixel = image
                            .pixels
                            .get_pixel(px as u32 * p + dx, py as u32 * p + dy)
                            .0;
                        for channel in pixel {
                            patches[[py * cols + px, k]] = channel as f64 / 255.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(patches.dot(&self.weight.t()) + &self.bias)
    }
}

type EncoderFactory = Box<dyn Fn(&EncoderParams) -> Result<Box<dyn LowLevelEncoder>, AlignError> + Send + Sync>;

/// Named encoder registry. `toy-patch` ships in-repo; pretrained encoders
/// are registered by plug-ins and error as unavailable otherwise.
pub struct EncoderRegistry {
    factories: HashMap<String, EncoderFactory>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut registry = EncoderRegistry { factories: HashMap::new() };
        registry.register("toy-patch", |params| {
            Ok(Box::new(ToyPatchEncoder::new(params.clone())))
        });
        registry
    }
}

impl EncoderRegistry {
    pub fn register(
        &mut self,
        id: &str,
        factory: impl Fn(&EncoderParams) -> Result<Box<dyn LowLevelEncoder>, AlignError> + Send + Sync + 'static,
    ) {
        self.factories.insert(id.to_string(), Box::new(factory));
    }

    pub fn create(
        &self,
        id: &str,
        params: &EncoderParams,
    ) -> Result<Box<dyn LowLevelEncoder>, AlignError> {
        match self.factories.get(id) {
            Some(factory) => factory(params),
            None => Err(AlignError::EncoderUnavailable(id.to_string())),
        }
    }
}

/// The shared projection: two affine layers with a smooth zero-fixing
/// nonlinearity between them. The same instance serves both the low-level
/// tokens and the high-level semantic feature.
pub struct ProjectionW {
    pub fc1: Linear,
    pub fc2: Linear,
    pub input_dim: usize,
    pub output_dim: usize,
}

pub struct ProjectionCache {
    pre_activation: Array2<f64>,
    fc1: crate::nn::LinearCache,
    fc2: crate::nn::LinearCache,
}

impl ProjectionW {
    pub fn new(rng: &mut ChaCha8Rng, input_dim: usize, output_dim: usize) -> ProjectionW {
        ProjectionW {
            fc1: Linear::new(rng, input_dim, output_dim),
            fc2: Linear::new(rng, output_dim, output_dim),
            input_dim,
            output_dim,
        }
    }

    fn check(&self, z: &Array2<f64>) -> Result<(), AlignError> {
        if z.ncols() != self.input_dim {
            return Err(AlignError::ShapeMismatch(format!(
                "projection expects trailing dim {}, got {}",
                self.input_dim,
                z.ncols()
            )));
        }
        Ok(())
    }

    /// Rows map independently: [*, input_dim] -> [*, output_dim].
    pub fn project(&self, z: &Array2<f64>) -> Result<Array2<f64>, AlignError> {
        self.check(z)?;
        let hidden = self.fc1.forward(z);
        Ok(self.fc2.forward(&silu(&hidden)))
    }

    pub fn project_train(&self, z: &Array2<f64>) -> Result<(Array2<f64>, ProjectionCache), AlignError> {
        self.check(z)?;
        let (pre, fc1) = self.fc1.forward_train(z);
        let (out, fc2) = self.fc2.forward_train(&silu(&pre));
        Ok((out, ProjectionCache { pre_activation: pre, fc1, fc2 }))
    }

    pub fn backward(&mut self, cache: &ProjectionCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let g = self.fc2.backward(&cache.fc2, grad_out);
        let g = silu_backward(&cache.pre_activation, &g);
        self.fc1.backward(&cache.fc1, &g)
    }
}

impl Module for ProjectionW {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamVisit<'_>)) {
        self.fc1.visit_params(&format!("{prefix}fc1."), f);
        self.fc2.visit_params(&format!("{prefix}fc2."), f);
    }
}

/// Replicate a single token row `p` times along the patch dimension.
pub fn expand(h_f: &Array2<f64>, p: usize) -> Result<Array2<f64>, AlignError> {
    if p < 1 {
        return Err(AlignError::InvalidP(p));
    }
    if h_f.nrows() != 1 {
        return Err(AlignError::ShapeMismatch(format!(
            "expand takes a single-row token, got {} rows",
            h_f.nrows()
        )));
    }
    let row = h_f.row(0);
    let mut out = Array2::zeros((p, h_f.ncols()));
    for mut r in out.axis_iter_mut(Axis(0)) {
        r.assign(&row);
    }
    Ok(out)
}

/// Patch-wise fusion: every visual token gains the (expanded) high-level
/// feature token, element-wise.
pub fn align(h_v: &Array2<f64>, h_f: &Array2<f64>) -> Result<Array2<f64>, AlignError> {
    if h_v.ncols() != h_f.ncols() {
        return Err(AlignError::ShapeMismatch(format!(
            "token dims differ: {} vs {}",
            h_v.ncols(),
            h_f.ncols()
        )));
    }
    let expanded = expand(h_f, h_v.nrows().max(1))?;
    if h_v.nrows() == 0 {
        return Err(AlignError::InvalidP(0));
    }
    Ok(h_v + &expanded)
}

/// How the high-level feature token is wired into the token sequence.
/// The three variants correspond to patch-aligned fusion, appending the
/// raw feature token, and omitting the feature entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    PatchAligned,
    RawFeature,
    NoFeature,
}


impl FusionMode {
    /// Preset name as used by run configs and the ablation grid.
    pub fn preset_name(self) -> &'static str {
        match self {
            FusionMode::PatchAligned => "patch-aligned",
            FusionMode::RawFeature => "raw-hf",
            FusionMode::NoFeature => "wo-feature-embedding",
        }
    }

    pub fn parse(name: &str) -> Option<FusionMode> {
        match name {
            "patch-aligned" => Some(FusionMode::PatchAligned),
            "raw-hf" => Some(FusionMode::RawFeature),
            "wo-feature-embedding" => Some(FusionMode::NoFeature),
            _ => None,
        }
    }
}

/// The three embedding token matrices produced for one image.
pub struct EmbeddingTokens {
    /// [P, D] projected low-level tokens.
    pub visual: Array2<f64>,
    /// [1, D] projected high-level feature token.
    pub feature: Array2<f64>,
    /// [P, D] patch-aligned fusion of the two.
    pub fused: Array2<f64>,
}

impl EmbeddingTokens {
    pub fn build(
        projection: &ProjectionW,
        patch_tokens: &Array2<f64>,
        pooled_feature: &Array2<f64>,
    ) -> Result<EmbeddingTokens, AlignError> {
        let visual = projection.project(patch_tokens)?;
        let feature = projection.project(pooled_feature)?;
        if feature.nrows() != 1 {
            return Err(AlignError::ShapeMismatch(format!(
                "pooled feature must be a single row, got {}",
                feature.nrows()
            )));
        }
        let fused = align(&visual, &feature)?;
        Ok(EmbeddingTokens { visual, feature, fused })
    }
}
