//! # somnia-core
//!
//! End-to-end sleep-stage scoring from single-channel EEG, built around
//! waveform images rather than raw samples:
//!
//! 1. [`edf`] parses EDF/EDF+ recordings and hypnogram annotations into
//!    calibrated in-memory signals.
//! 2. [`filter`] band-passes the scoring channel (0.5–35 Hz Butterworth,
//!    zero-phase) and [`epoch`] cuts it into labeled 30-second epochs.
//! 3. [`render`] rasterizes each epoch into a fixed-size waveform image.
//! 4. [`vision`] is a widened residual network that learns high-level
//!    semantic features from those images and classifies the five stages.
//! 5. [`align`] projects low-level patch tokens and the high-level feature
//!    into a shared embedding space and fuses them patch-wise.
//! 6. [`cot`] generates stage-wise chain-of-thought training records by
//!    querying a vision-language service (or a deterministic mock).
//! 7. [`lm`] assembles the multimodal token sequence, runs the bound
//!    language model, and extracts the predicted stage from its answer.
//! 8. [`eval`] computes accuracy, per-class F1, macro-F1 and Cohen's kappa,
//!    and emits reports.
//!
//! [`pipeline`] wires the steps together behind a declarative [`config::RunConfig`].

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod cot;
pub mod edf;
pub mod epoch;
pub mod eval;
pub mod filter;
pub mod lm;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod stage;
pub mod synth;
pub mod vision;

pub use stage::{EpochLabel, Stage};
