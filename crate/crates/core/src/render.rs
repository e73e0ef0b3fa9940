//! Deterministic rasterization of a 30-second epoch into a fixed-size
//! waveform image: black anti-aliased polyline on a white background,
//! fixed absolute amplitude scale so slow-wave amplitude survives as a
//! visual cue instead of being normalized away.

use crate::epoch::LabeledEpoch;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("epoch has {0} samples; at least 2 are required")]
    DegenerateEpoch(usize),
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Rasterization parameters. Time maps linearly onto x, amplitude onto y
/// with `+amplitude_range_uv` at the top row; out-of-range samples clip to
/// the boundary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width_px: u32,
    pub height_px: u32,
    pub amplitude_range_uv: f64,
    pub line_width_px: u32,
    pub margins_px: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width_px: 224,
            height_px: 224,
            amplitude_range_uv: 150.0,
            line_width_px: 1,
            margins_px: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.width_px < 32 || self.height_px < 32 {
            return Err(RenderError::InvalidConfig(format!(
                "image must be at least 32x32, got {}x{}",
                self.width_px, self.height_px
            )));
        }
        if self.amplitude_range_uv.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(RenderError::InvalidConfig("amplitude range must be positive".into()));
        }
        if self.line_width_px < 1 {
            return Err(RenderError::InvalidConfig("line width must be >= 1".into()));
        }
        if self.margins_px * 2 >= self.width_px.min(self.height_px) {
            return Err(RenderError::InvalidConfig("margins consume the whole image".into()));
        }
        Ok(())
    }

    /// Stable digest of the full config, recorded in image provenance.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hex::encode(&hash[..8])
    }

    fn y_of_amplitude(&self, amp: f64) -> f64 {
        let r = self.amplitude_range_uv;
        let clipped = amp.clamp(-r, r);
        let usable = (self.height_px - 1 - 2 * self.margins_px) as f64;
        self.margins_px as f64 + (r - clipped) / (2.0 * r) * usable
    }

    fn x_of_index(&self, i: usize, n: usize) -> f64 {
        let usable = (self.width_px - 1 - 2 * self.margins_px) as f64;
        self.margins_px as f64 + i as f64 / (n - 1) as f64 * usable
    }
}

/// Rendered epoch raster plus enough provenance to trace it back.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochImage {
    pub pixels: RgbImage,
    pub source_id: String,
    pub epoch_index: usize,
    pub config_digest: String,
}

impl EpochImage {
    /// Content digest over raw pixel bytes.
    pub fn pixel_digest(&self) -> String {
        hex::encode(Sha256::digest(self.pixels.as_raw()))
    }

    /// Lossless PNG encoding of the raster.
    pub fn png_bytes(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.pixels
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encode");
        out.into_inner()
    }

    /// Write the PNG only if the target differs, so re-renders of unchanged
    /// inputs rewrite nothing. Returns whether bytes were written.
    pub fn save_png_if_changed(&self, path: &Path) -> Result<bool, RenderError> {
        let bytes = self.png_bytes();
        if let Ok(existing) = std::fs::read(path) {
            if existing == bytes {
                return Ok(false);
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|source| RenderError::Io { path: parent.to_path_buf(), source })?;
        }
        std::fs::write(path, bytes)
            .map_err(|source| RenderError::Io { path: path.to_path_buf(), source })?;
        Ok(true)
    }
}

/// Image file name for an epoch: `<source_id>_<epoch_index>_<stage>.png`.
pub fn image_file_name(epoch: &LabeledEpoch) -> String {
    format!("{}_{:05}_{}.png", epoch.source_id, epoch.epoch_index, epoch.stage)
}

/// Rasterize one epoch. Pure and deterministic: identical inputs yield
/// bit-identical pixels.
pub fn render_epoch(epoch: &LabeledEpoch, config: &RenderConfig) -> Result<EpochImage, RenderError> {
    config.validate()?;
    let n = epoch.samples.len();
    if n < 2 {
        return Err(RenderError::DegenerateEpoch(n));
    }

    let (w, h) = (config.width_px as usize, config.height_px as usize);
    // Per-pixel ink coverage in [0, 1]; segments accumulate by max so
    // overlaps do not over-darken.
    let mut coverage = vec![0.0f64; w * h];

    let points: Vec<(f64, f64)> = epoch
        .samples
        .iter()
        .enumerate()
        .map(|(i, &amp)| (config.x_of_index(i, n), config.y_of_amplitude(amp)))
        .collect();

    let half_width = config.line_width_px as f64 / 2.0;
    const FEATHER: f64 = 0.7;
    let reach = half_width + FEATHER;

    for seg in points.windows(2) {
        let (x0, y0) = seg[0];
        let (x1, y1) = seg[1];
        let min_x = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let max_x = (x0.max(x1) + reach).ceil().min((w - 1) as f64) as usize;
        let min_y = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let max_y = (y0.max(y1) + reach).ceil().min((h - 1) as f64) as usize;
        let dx = x1 - x0;
        let dy = y1 - y0;
        let len_sq = dx * dx + dy * dy;
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let (cx, cy) = (px as f64, py as f64);
                let t = if len_sq == 0.0 {
                    0.0
                } else {
                    (((cx - x0) * dx + (cy - y0) * dy) / len_sq).clamp(0.0, 1.0)
                };
                let (nx, ny) = (x0 + t * dx, y0 + t * dy);
                let dist = ((cx - nx).powi(2) + (cy - ny).powi(2)).sqrt();
                let cov = ((reach - dist) / FEATHER).clamp(0.0, 1.0);
                let cell = &mut coverage[py * w + px];
                if cov > *cell {
                    *cell = cov;
                }
            }
        }
    }

    let mut pixels = RgbImage::new(config.width_px, config.height_px);
    for (py, row) in coverage.chunks(w).enumerate() {
        for (px, &cov) in row.iter().enumerate() {
            let v = (255.0 * (1.0 - cov)).round() as u8;
            pixels.put_pixel(px as u32, py as u32, Rgb([v, v, v]));
        }
    }

    Ok(EpochImage {
        pixels,
        source_id: epoch.source_id.clone(),
        epoch_index: epoch.epoch_index,
        config_digest: config.digest(),
    })
}
