//! End-to-end orchestration behind the CLI commands: each step validates
//! its configuration, checks its upstream artifacts, runs the module
//! chain, and writes content-addressed outputs so reruns with unchanged
//! inputs rewrite nothing.

use crate::align::{EncoderParams, LowLevelEncoder, ProjectionW, ToyPatchEncoder};
use crate::checkpoint::{self, CheckpointManifest};
use crate::config::{RunConfig, SeedPurpose};
use crate::cot::{
    self, build_cot_dataset, cot_question, direct_question, CotDatasetConfig, CotInput, CotRecord,
    CotSummary, HttpVlmClient, HttpVlmConfig, MockVlmClient, ResponseCache, VlmClient,
};
use crate::edf::{map_stage_labels, parse_edf, select_channel};
use crate::epoch::{self, LabeledEpoch, Manifest, ManifestEntry};
use crate::eval::{self, ConfusionMatrix, MetricsBundle, RunMetadata};
use crate::filter::{apply_filter_with, design_bandpass, FilterMode, FilterSpec};
use crate::lm::{
    extract_stage, fuse_sequence, train_joint, JointExample, JointTrainConfig, LanguageModel,
    ToyLm, ToyLmParams,
};
use crate::render::{image_file_name, render_epoch, EpochImage};
use crate::stage::Stage;
use crate::vision::{train_vision, TrainLog, VisionNet};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("missing upstream artifact {artifact}; run `{hint}` first")]
    MissingUpstream { artifact: PathBuf, hint: String },
    #[error("recordings disagree on sampling rate: {0} vs {1}")]
    MixedSamplingRates(f64, f64),
    #[error("{path}: {source}")]
    Recording {
        path: PathBuf,
        #[source]
        source: crate::edf::EdfError,
    },
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error(transparent)]
    Store(#[from] crate::epoch::EpochStoreError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
    #[error(transparent)]
    Vision(#[from] crate::vision::VisionError),
    #[error(transparent)]
    Align(#[from] crate::align::AlignError),
    #[error(transparent)]
    Cot(#[from] crate::cot::CotError),
    #[error(transparent)]
    Lm(#[from] crate::lm::LmError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Where every artifact of a run lives under the output directory.
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> OutputLayout {
        OutputLayout { root: root.into() }
    }

    pub fn epochs_dir(&self) -> PathBuf {
        self.root.join("epochs")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn vision_checkpoint(&self) -> PathBuf {
        self.root.join("vision.ckpt")
    }

    pub fn vision_log(&self) -> PathBuf {
        self.root.join("vision_train_log.csv")
    }

    pub fn cot_dir(&self) -> PathBuf {
        self.root.join("cot")
    }

    pub fn cot_records(&self) -> PathBuf {
        self.cot_dir().join("records.jsonl")
    }

    pub fn cot_cache(&self) -> PathBuf {
        self.root.join("cot_cache")
    }

    pub fn joint_checkpoint(&self, preset: &str) -> PathBuf {
        self.root.join("joint").join(format!("{preset}.ckpt"))
    }

    pub fn joint_log(&self, preset: &str) -> PathBuf {
        self.root.join("joint").join(format!("{preset}_train_log.csv"))
    }

    pub fn eval_dir(&self, preset: &str) -> PathBuf {
        self.root.join("eval").join(preset)
    }
}

/// Write only when content differs; returns whether bytes hit the disk.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool, PipelineError> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))?;
    Ok(true)
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingUpstream { artifact: path, hint: hint.to_string() })
    }
}

fn sanitize_source_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let cleaned: String =
        stem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    if cleaned.is_empty() {
        "recording".to_string()
    } else {
        cleaned
    }
}

#[derive(Debug, Default)]
pub struct PreprocessSummary {
    pub recordings: usize,
    pub epochs: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Parse, band-pass and segment every configured recording into the epoch
/// store. With `skip_bad`, malformed recordings are logged and skipped
/// instead of failing the run.
pub fn run_preprocess(config: &RunConfig, skip_bad: bool) -> Result<PreprocessSummary, PipelineError> {
    config.validate()?;
    let layout = OutputLayout::new(&config.out_dir);
    let mode = if config.filter.zero_phase { FilterMode::ZeroPhase } else { FilterMode::Causal };

    let mut summary = PreprocessSummary::default();
    let mut manifest_lines = Vec::new();
    let mut store_rate: Option<f64> = None;

    for path in &config.dataset.edf_paths {
        let result = (|| -> Result<Vec<LabeledEpoch>, PipelineError> {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            let recording = parse_edf(&bytes)
                .map_err(|source| PipelineError::Recording { path: path.clone(), source })?;
            let channel = select_channel(&recording, &config.dataset.channel_label)
                .map_err(|source| PipelineError::Recording { path: path.clone(), source })?;
            let spec = FilterSpec::new(
                config.filter.low_cut_hz,
                config.filter.high_cut_hz,
                channel.sampling_rate_hz,
            );
            let coeffs = design_bandpass(&spec)?;
            let filtered = apply_filter_with(&channel.samples, &coeffs, mode)?;
            let labels = map_stage_labels(&recording.annotations)
                .map_err(|source| PipelineError::Recording { path: path.clone(), source })?;
            Ok(epoch::segment_epochs(
                &filtered,
                channel.sampling_rate_hz,
                &labels,
                &sanitize_source_id(path),
            ))
        })();

        match result {
            Ok(epochs) => {
                if let Some(first) = epochs.first() {
                    match store_rate {
                        None => store_rate = Some(first.sampling_rate_hz),
                        Some(rate) if rate != first.sampling_rate_hz => {
                            return Err(PipelineError::MixedSamplingRates(
                                rate,
                                first.sampling_rate_hz,
                            ));
                        }
                        _ => {}
                    }
                }
                summary.recordings += 1;
                summary.epochs += epochs.len();
                manifest_lines.extend(write_epochs_if_changed(&layout.epochs_dir(), &epochs)?);
            }
            Err(e) if skip_bad => summary.skipped.push((path.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }

    let rate = store_rate.unwrap_or(100.0);
    let mut manifest_text = format!("# somnia epoch store\tfs={rate}\n");
    for line in &manifest_lines {
        manifest_text.push_str(line);
        manifest_text.push('\n');
    }
    write_if_changed(&layout.epochs_dir().join("manifest.tsv"), manifest_text.as_bytes())?;
    Ok(summary)
}

fn write_epochs_if_changed(
    dir: &Path,
    epochs: &[LabeledEpoch],
) -> Result<Vec<String>, PipelineError> {
    let mut lines = Vec::with_capacity(epochs.len());
    for e in epochs {
        let mut bytes = Vec::with_capacity(e.samples.len() * 4);
        for &s in &e.samples {
            bytes.extend_from_slice(&(s as f32).to_le_bytes());
        }
        write_if_changed(&dir.join(epoch::epoch_file_name(&e.source_id, e.epoch_index)), &bytes)?;
        lines.push(format!("{}\t{}\t{}", e.source_id, e.epoch_index, e.stage));
    }
    Ok(lines)
}

#[derive(Debug, Default)]
pub struct RenderSummary {
    pub rendered: usize,
    pub unchanged: usize,
}

/// Rasterize every stored epoch; unchanged images are not rewritten.
pub fn run_render(config: &RunConfig) -> Result<RenderSummary, PipelineError> {
    config.validate()?;
    let layout = OutputLayout::new(&config.out_dir);
    let epochs_dir = layout.epochs_dir();
    require(epochs_dir.join("manifest.tsv"), "somnia preprocess")?;
    let manifest = epoch::read_manifest(&epochs_dir)?;

    let images_dir = layout.images_dir();
    let results: Vec<Result<(String, bool), PipelineError>> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let epoch = epoch::load_epoch(&epochs_dir, entry, manifest.sampling_rate_hz)?;
            let image = render_epoch(&epoch, &config.render)?;
            let name = image_file_name(&epoch);
            let wrote = image.save_png_if_changed(&images_dir.join(&name))?;
            Ok((name, wrote))
        })
        .collect();

    let mut summary = RenderSummary::default();
    let mut lines = Vec::with_capacity(manifest.entries.len());
    for (entry, result) in manifest.entries.iter().zip(results) {
        let (name, wrote) = result?;
        if wrote {
            summary.rendered += 1;
        } else {
            summary.unchanged += 1;
        }
        lines.push(format!("{}\t{}\t{}\t{}", entry.source_id, entry.epoch_index, entry.stage, name));
    }
    let mut text = format!("# somnia epoch store\tfs={}\n", manifest.sampling_rate_hz);
    for line in &lines {
        text.push_str(line);
        text.push('\n');
    }
    write_if_changed(&images_dir.join("manifest.tsv"), text.as_bytes())?;
    Ok(summary)
}

fn read_render_manifest(config: &RunConfig) -> Result<(PathBuf, Manifest), PipelineError> {
    let layout = OutputLayout::new(&config.out_dir);
    let images_dir = layout.images_dir();
    require(images_dir.join("manifest.tsv"), "somnia render")?;
    let manifest = epoch::read_manifest(&images_dir)?;
    Ok((images_dir, manifest))
}

fn load_rgb(path: &Path) -> Result<image::RgbImage, PipelineError> {
    let img = image::open(path)
        .map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?
        .to_rgb8();
    Ok(img)
}

fn rgb_to_array(pixels: &image::RgbImage) -> Array3<f64> {
    let (w, h) = pixels.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        pixels.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

fn entry_image_path(images_dir: &Path, entry: &ManifestEntry) -> Result<PathBuf, PipelineError> {
    let rel = entry.image_path.as_ref().ok_or_else(|| PipelineError::MissingUpstream {
        artifact: images_dir.join("manifest.tsv"),
        hint: "somnia render".to_string(),
    })?;
    Ok(images_dir.join(rel))
}

/// The train/test membership used by every downstream stage: a per-class
/// sample of the rendered epochs, deterministic under the run seed.
pub fn split_entries(
    config: &RunConfig,
    manifest: &Manifest,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    Ok(eval::split_dataset(
        &manifest.entries,
        |e: &ManifestEntry| e.stage,
        config.test_per_class,
        config.derived_seed(SeedPurpose::Split),
    )?)
}

#[derive(Debug)]
pub struct VisionTrainSummary {
    pub log: TrainLog,
    pub checkpoint: PathBuf,
}

/// Train the vision module on the training split of the rendered epochs.
pub fn run_train_vision(config: &RunConfig) -> Result<VisionTrainSummary, PipelineError> {
    config.validate()?;
    let layout = OutputLayout::new(&config.out_dir);
    let (images_dir, manifest) = read_render_manifest(config)?;
    let (train_idx, _) = split_entries(config, &manifest)?;

    let mut dataset: Vec<(Array3<f64>, Stage)> = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        let entry = &manifest.entries[i];
        let path = entry_image_path(&images_dir, entry)?;
        dataset.push((rgb_to_array(&load_rgb(&path)?), entry.stage));
    }

    let mut vision_config = config.vision.clone();
    vision_config.seed = config.derived_seed(SeedPurpose::Vision);
    let (mut net, log) = train_vision(&dataset, vision_config, &config.vision_train)?;

    let manifest_out = CheckpointManifest {
        config_digest: config.digest(),
        seed: config.seed,
        epoch_count: config.vision_train.epochs as u32,
        ..Default::default()
    };
    net.save(&layout.vision_checkpoint(), &manifest_out)?;
    write_if_changed(&layout.vision_log(), log.to_csv().as_bytes())?;
    Ok(VisionTrainSummary { log, checkpoint: layout.vision_checkpoint() })
}

fn build_client(
    config: &RunConfig,
    manifest: &Manifest,
    images_dir: &Path,
) -> Result<Box<dyn VlmClient>, PipelineError> {
    match config.cot.client.kind.as_str() {
        "mock-correct" => {
            let mut truths = Vec::with_capacity(manifest.entries.len());
            for entry in &manifest.entries {
                let path = entry_image_path(images_dir, entry)?;
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                truths.push((cot::image_digest(&bytes), entry.stage));
            }
            Ok(Box::new(MockVlmClient::always_correct(truths)))
        }
        "mock-never-labels" => Ok(Box::new(MockVlmClient::never_labels())),
        "http" => Ok(Box::new(HttpVlmClient::new(HttpVlmConfig {
            endpoint: config.cot.client.endpoint.clone(),
            model: config.cot.client.model.clone(),
            api_key_env: config.cot.client.api_key_env.clone(),
            timeout: std::time::Duration::from_secs(config.cot.client.timeout_s),
            max_retries: config.cot.client.max_retries,
            rate_limit_per_min: config.cot.client.rate_limit_per_min,
        }))),
        other => Err(crate::config::ConfigError::UnknownId {
            kind: "cot client",
            id: other.to_string(),
            known: "mock-correct, mock-never-labels, http".into(),
        }
        .into()),
    }
}

#[derive(Debug)]
pub struct CotRunSummary {
    pub records_path: PathBuf,
    pub summary: CotSummary,
}

/// Generate chain-of-thought records for the rendered epochs.
pub fn run_gen_cot(config: &RunConfig) -> Result<CotRunSummary, PipelineError> {
    config.validate()?;
    let layout = OutputLayout::new(&config.out_dir);
    let (images_dir, manifest) = read_render_manifest(config)?;

    let mut inputs = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = entry_image_path(&images_dir, entry)?;
        let rel = entry.image_path.clone().unwrap();
        inputs.push(CotInput {
            image_path: rel.to_string_lossy().to_string(),
            image_png: std::fs::read(&path).map_err(io_err(&path))?,
            ground_truth: entry.stage,
        });
    }

    let client = build_client(config, &manifest, &images_dir)?;
    let cache = ResponseCache::new(layout.cot_cache());
    let dataset_config = CotDatasetConfig {
        per_class_quota: config.cot.per_class_quota,
        seed: config.derived_seed(SeedPurpose::Cot),
        allow_short: config.cot.allow_short,
        max_retries: config.cot.client.max_retries,
        backoff: std::time::Duration::from_millis(if config.cot.client.kind == "http" {
            250
        } else {
            0
        }),
        use_cot_question: config.preset.uses_cot(),
    };
    let (records, summary) = build_cot_dataset(&inputs, &dataset_config, client.as_ref(), &cache)?;

    let records_path = layout.cot_records();
    write_if_changed(&records_path, cot::export_jsonl(&records).as_bytes())?;
    write_if_changed(
        &layout.cot_dir().join("instruction_tuning.json"),
        cot::to_instruction_tuning_json(&records).as_bytes(),
    )?;
    let summary_text = format!(
        "attempted={}\nvalid={}\nper_class_attempted={:?}\nper_class_valid={:?}\n",
        summary.attempted, summary.valid, summary.per_class_attempted, summary.per_class_valid
    );
    write_if_changed(&layout.cot_dir().join("summary.txt"), summary_text.as_bytes())?;
    Ok(CotRunSummary { records_path, summary })
}

fn build_encoder(config: &RunConfig, net: &VisionNet) -> Box<dyn LowLevelEncoder> {
    // The low-level token width must match the pooled feature so both can
    // share the projection.
    let params = EncoderParams {
        patch_px: config.encoder.patch_px,
        embed_dim: net.config.final_conv_out_channels(),
        seed: config.derived_seed(SeedPurpose::Encoder),
    };
    Box::new(ToyPatchEncoder::new(params))
}

fn load_vision(config: &RunConfig) -> Result<VisionNet, PipelineError> {
    let layout = OutputLayout::new(&config.out_dir);
    let path = require(layout.vision_checkpoint(), "somnia train-vision")?;
    let mut vision_config = config.vision.clone();
    vision_config.seed = config.derived_seed(SeedPurpose::Vision);
    let (net, _) = VisionNet::load(&path, vision_config)?;
    Ok(net)
}

/// Frozen visual features of one rendered epoch.
fn visual_features(
    net: &VisionNet,
    encoder: &dyn LowLevelEncoder,
    pixels: image::RgbImage,
    entry: &ManifestEntry,
    render_digest: &str,
) -> Result<(Array2<f64>, Array2<f64>), PipelineError> {
    let epoch_image = EpochImage {
        pixels,
        source_id: entry.source_id.clone(),
        epoch_index: entry.epoch_index,
        config_digest: render_digest.to_string(),
    };
    let patch_tokens = encoder.encode(&epoch_image)?;
    let array = rgb_to_array(&epoch_image.pixels);
    let batch = crate::vision::stack_images(&[array]);
    let feature = net.forward_features(&batch)?;
    let pooled = feature.pooled; // [1, C]
    Ok((patch_tokens, pooled))
}

#[derive(Debug)]
pub struct JointTrainSummary {
    pub log: TrainLog,
    pub checkpoint: PathBuf,
}

/// Jointly fine-tune the shared projection and the toy language model on
/// the valid CoT records of the training split.
pub fn run_train_joint(config: &RunConfig) -> Result<JointTrainSummary, PipelineError> {
    config.validate()?;
    let layout = OutputLayout::new(&config.out_dir);
    let (images_dir, manifest) = read_render_manifest(config)?;
    let records_path = require(layout.cot_records(), "somnia gen-cot")?;
    let net = load_vision(config)?;
    let encoder = build_encoder(config, &net);

    let records = cot::import_jsonl(
        &std::fs::read_to_string(&records_path).map_err(io_err(&records_path))?,
    )?;
    let (train_idx, _) = split_entries(config, &manifest)?;
    let train_images: HashSet<String> = train_idx
        .iter()
        .filter_map(|&i| manifest.entries[i].image_path.as_ref())
        .map(|p| p.to_string_lossy().to_string())
        .collect();
    let entry_of: std::collections::HashMap<String, &ManifestEntry> = manifest
        .entries
        .iter()
        .filter_map(|e| e.image_path.as_ref().map(|p| (p.to_string_lossy().to_string(), e)))
        .collect();

    let render_digest = config.render.digest();
    let mut examples = Vec::new();
    for record in records.iter().filter(|r| r.valid && train_images.contains(&r.image_path)) {
        let entry = entry_of[&record.image_path];
        let pixels = load_rgb(&images_dir.join(&record.image_path))?;
        let (patch_tokens, pooled) = visual_features(&net, encoder.as_ref(), pixels, entry, &render_digest)?;
        examples.push(JointExample {
            patch_tokens,
            pooled_feature: pooled,
            question: record.question.clone(),
            target_text: joint_target_text(config, record),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.derived_seed(SeedPurpose::Joint));
    let lm_params = ToyLmParams {
        embedding_dim: config.lm.embedding_dim,
        seed: config.derived_seed(SeedPurpose::Lm),
    };
    let mut lm = ToyLm::new(lm_params);
    let mut projection = ProjectionW::new(
        &mut rng,
        net.config.final_conv_out_channels(),
        config.lm.embedding_dim,
    );
    let joint_config = JointTrainConfig {
        epochs: config.joint.epochs,
        learning_rate: config.joint.learning_rate,
        seed: config.derived_seed(SeedPurpose::Joint),
        fusion: config.preset.fusion(),
        max_answer_len: config.joint.max_answer_len,
    };
    let log = train_joint(&mut projection, &mut lm, &examples, &joint_config)?;

    let preset = config.preset.name();
    let mut arrays = Vec::new();
    {
        let mut visit = |prefix: &str, module: &mut dyn crate::nn::Module| {
            module.visit_params("", &mut |name, p| {
                arrays.push((format!("{prefix}{name}"), p.value.to_owned()));
            });
        };
        visit("projection.", &mut projection);
        visit("lm.", &mut lm);
    }
    let ckpt_manifest = CheckpointManifest {
        config_digest: config.digest(),
        seed: config.seed,
        epoch_count: config.joint.epochs as u32,
        extra: [("preset".to_string(), preset.to_string())].into_iter().collect(),
    };
    let ckpt_path = layout.joint_checkpoint(preset);
    checkpoint::save_checkpoint(&ckpt_path, &ckpt_manifest, &arrays)?;
    write_if_changed(&layout.joint_log(preset), log.to_csv().as_bytes())?;
    Ok(JointTrainSummary { log, checkpoint: ckpt_path })
}

fn joint_target_text(config: &RunConfig, record: &CotRecord) -> String {
    if config.preset.uses_cot() {
        // The decisive summary sentence concluding the reasoning.
        record.reasoning.lines().last().unwrap_or_default().to_string()
    } else {
        let label = record.final_label.unwrap_or(record.ground_truth);
        format!("The answer is {}.", label.name())
    }
}

fn load_joint(
    config: &RunConfig,
    net: &VisionNet,
) -> Result<(ProjectionW, ToyLm), PipelineError> {
    let layout = OutputLayout::new(&config.out_dir);
    let path = require(layout.joint_checkpoint(config.preset.name()), "somnia train-joint")?;
    let (_, arrays) = checkpoint::load_checkpoint(&path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.derived_seed(SeedPurpose::Joint));
    let mut projection = ProjectionW::new(
        &mut rng,
        net.config.final_conv_out_channels(),
        config.lm.embedding_dim,
    );
    let mut lm = ToyLm::new(ToyLmParams {
        embedding_dim: config.lm.embedding_dim,
        seed: config.derived_seed(SeedPurpose::Lm),
    });
    let strip = |prefix: &str| -> Vec<(String, ndarray::ArrayD<f64>)> {
        arrays
            .iter()
            .filter_map(|(n, a)| n.strip_prefix(prefix).map(|s| (s.to_string(), a.clone())))
            .collect()
    };
    checkpoint::load_into_module(&mut projection, &strip("projection."))?;
    checkpoint::load_into_module(&mut lm, &strip("lm."))?;
    Ok((projection, lm))
}

/// One scored prediction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PredictionRecord {
    pub image_path: String,
    pub ground_truth: Stage,
    pub predicted: Stage,
    /// Whether a stage token was parseable from the raw answer; failures
    /// fall back to Wake and almost always score as errors.
    pub parsed: bool,
    pub raw_answer_path: String,
}

#[derive(Debug)]
pub struct EvaluationSummary {
    pub metrics: MetricsBundle,
    pub confusion: ConfusionMatrix,
    pub parse_failures: usize,
    pub eval_dir: PathBuf,
}

/// Score the held-out split end to end: frozen visual features, fused
/// token sequence, greedy generation, stage extraction, metrics.
pub fn run_evaluate(config: &RunConfig) -> Result<EvaluationSummary, PipelineError> {
    config.validate()?;
    let (images_dir, manifest) = read_render_manifest(config)?;
    let net = load_vision(config)?;
    let encoder = build_encoder(config, &net);
    let (projection, lm) = load_joint(config, &net)?;
    let (_, test_idx) = split_entries(config, &manifest)?;

    let layout = OutputLayout::new(&config.out_dir);
    let preset = config.preset.name();
    let eval_dir = layout.eval_dir(preset);
    let answers_dir = eval_dir.join("answers");
    let question = if config.preset.uses_cot() { cot_question() } else { direct_question() };
    let render_digest = config.render.digest();

    let mut predictions = Vec::with_capacity(test_idx.len());
    let mut truths = Vec::with_capacity(test_idx.len());
    let mut predicted = Vec::with_capacity(test_idx.len());
    let mut parse_failures = 0usize;
    for (k, &i) in test_idx.iter().enumerate() {
        let entry = &manifest.entries[i];
        let rel = entry.image_path.as_ref().unwrap().to_string_lossy().to_string();
        let pixels = load_rgb(&images_dir.join(&rel))?;
        let (patch_tokens, pooled) =
            visual_features(&net, encoder.as_ref(), pixels, entry, &render_digest)?;
        let sequence = fuse_sequence(
            &projection,
            &lm,
            &patch_tokens,
            &pooled,
            &question,
            config.preset.fusion(),
        )?;
        let answer = lm.generate(&sequence, config.joint.max_answer_len);

        let (label, parsed) = match extract_stage(&answer) {
            Ok(prediction) => (prediction.label, true),
            Err(_) => {
                parse_failures += 1;
                (Stage::Wake, false)
            }
        };
        let answer_rel = format!("answers/{k:05}.txt");
        write_if_changed(&answers_dir.join(format!("{k:05}.txt")), answer.as_bytes())?;
        truths.push(entry.stage);
        predicted.push(label);
        predictions.push(PredictionRecord {
            image_path: rel,
            ground_truth: entry.stage,
            predicted: label,
            parsed,
            raw_answer_path: answer_rel,
        });
    }

    let mut dump = String::new();
    for p in &predictions {
        dump.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        dump.push('\n');
    }
    write_if_changed(&eval_dir.join("predictions.jsonl"), dump.as_bytes())?;

    let cm = eval::confusion(&truths, &predicted)?;
    let bundle = eval::metrics(&cm)?;
    let meta = RunMetadata {
        config_digest: config.digest(),
        seed: config.seed,
        label: preset.to_string(),
    };
    write_if_changed(
        &eval_dir.join("metrics.txt"),
        eval::metrics_file_text(&bundle, &meta).as_bytes(),
    )?;
    let cm_rows: Vec<Vec<u64>> = (0..cm.classes())
        .map(|t| (0..cm.classes()).map(|p| cm.get(t, p)).collect())
        .collect();
    write_if_changed(
        &eval_dir.join("cm.json"),
        serde_json::to_string_pretty(&cm_rows).expect("cm serializes").as_bytes(),
    )?;

    Ok(EvaluationSummary { metrics: bundle, confusion: cm, parse_failures, eval_dir })
}

/// Re-emit the report artifacts (table, bar chart, heatmap) from a stored
/// evaluation.
pub fn run_report(config: &RunConfig) -> Result<PathBuf, PipelineError> {
    config.validate()?;
    let layout = OutputLayout::new(&config.out_dir);
    let preset = config.preset.name();
    let eval_dir = layout.eval_dir(preset);
    let metrics_path = require(eval_dir.join("metrics.txt"), "somnia evaluate")?;
    let cm_path = require(eval_dir.join("cm.json"), "somnia evaluate")?;

    let bundle = eval::parse_metrics_file(
        &std::fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?,
    )?;
    let rows: Vec<Vec<u64>> = serde_json::from_str(
        &std::fs::read_to_string(&cm_path).map_err(io_err(&cm_path))?,
    )
    .map_err(|e| PipelineError::Io {
        path: cm_path.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let mut cm = ConfusionMatrix::zeros(rows.len());
    for (t, row) in rows.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            for _ in 0..count {
                cm.add(t, p);
            }
        }
    }
    let meta = RunMetadata {
        config_digest: config.digest(),
        seed: config.seed,
        label: preset.to_string(),
    };
    eval::report(&bundle, &cm, &meta, &eval_dir)?;
    Ok(eval_dir)
}
