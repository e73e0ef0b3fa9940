//! `somnia` — drive the sleep-staging pipeline from a declarative run
//! configuration. Exit codes: 0 success, 1 validation error, 2 runtime
//! failure.

use clap::{Args, Parser, Subcommand};
use somnia_core::config::{AblationPreset, RunConfig};
use somnia_core::pipeline::{self, PipelineError};
use somnia_core::synth::{write_synthetic_dataset, SynthConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "somnia", version, about = "EEG sleep staging from epoch waveform images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ablation preset: patch-aligned, raw-hf, wo-feature-embedding, wo-cot.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, band-pass and segment recordings into the epoch store.
    Preprocess {
        #[command(flatten)]
        common: CommonArgs,
        /// Skip malformed recordings instead of failing the run.
        #[arg(long)]
        skip_bad: bool,
        /// Additional EDF paths, appended to the config's list.
        #[arg(long = "edf")]
        edf: Vec<PathBuf>,
    },
    /// Rasterize stored epochs into waveform images.
    Render {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the vision module on the training split.
    TrainVision {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate stage-wise chain-of-thought records.
    GenCot {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Jointly fine-tune the projection and the toy language model.
    TrainJoint {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score the held-out split end to end.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-emit report artifacts from a stored evaluation.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write the synthetic five-rhythm EDF fixture dataset.
    SynthFixture {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 10)]
        epochs_per_class: usize,
        #[arg(long, default_value_t = 100.0)]
        sampling_rate_hz: f64,
        /// Also write a ready-to-run TOML config pointing at the fixture.
        #[arg(long)]
        emit_config: Option<PathBuf>,
    },
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> CliError {
        match e {
            PipelineError::Config(inner) => CliError::Validation(inner.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| CliError::Validation(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    // Flags win over the file.
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(preset) = &common.preset {
        config.preset = AblationPreset::parse(preset).ok_or_else(|| {
            CliError::Validation(format!(
                "unknown preset {preset:?}; known: patch-aligned, raw-hf, wo-feature-embedding, wo-cot"
            ))
        })?;
    }
    config.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Preprocess { common, skip_bad, edf } => {
            let mut config = load_config(&common)?;
            config.dataset.edf_paths.extend(edf);
            config.validate().map_err(|e| CliError::Validation(e.to_string()))?;
            let summary = pipeline::run_preprocess(&config, skip_bad)?;
            println!(
                "preprocess: {} recordings, {} epochs -> {}",
                summary.recordings,
                summary.epochs,
                config.out_dir.join("epochs").display()
            );
            for (path, reason) in &summary.skipped {
                eprintln!("skipped {}: {reason}", path.display());
            }
            if summary.epochs == 0 {
                eprintln!("warning: no scoreable epochs were produced");
            }
            Ok(())
        }
        Command::Render { common } => {
            let config = load_config(&common)?;
            let summary = pipeline::run_render(&config)?;
            println!(
                "render: {} written, {} unchanged -> {}",
                summary.rendered,
                summary.unchanged,
                config.out_dir.join("images").display()
            );
            Ok(())
        }
        Command::TrainVision { common } => {
            let config = load_config(&common)?;
            let summary = pipeline::run_train_vision(&config)?;
            let last = summary.log.epochs.last();
            println!(
                "train-vision: {} epochs, final loss {:.4}, accuracy {:.3} -> {}",
                summary.log.epochs.len(),
                summary.log.final_loss,
                last.map(|e| e.accuracy).unwrap_or(0.0),
                summary.checkpoint.display()
            );
            Ok(())
        }
        Command::GenCot { common } => {
            let config = load_config(&common)?;
            let summary = pipeline::run_gen_cot(&config)?;
            println!(
                "gen-cot: {} attempted, {} valid -> {}",
                summary.summary.attempted,
                summary.summary.valid,
                summary.records_path.display()
            );
            Ok(())
        }
        Command::TrainJoint { common } => {
            let config = load_config(&common)?;
            let summary = pipeline::run_train_joint(&config)?;
            let last = summary.log.epochs.last();
            println!(
                "train-joint[{}]: {} epochs, final loss {:.4}, answer accuracy {:.3} -> {}",
                config.preset.name(),
                summary.log.epochs.len(),
                summary.log.final_loss,
                last.map(|e| e.accuracy).unwrap_or(0.0),
                summary.checkpoint.display()
            );
            Ok(())
        }
        Command::Evaluate { common } => {
            let config = load_config(&common)?;
            let summary = pipeline::run_evaluate(&config)?;
            println!(
                "evaluate[{}]: accuracy {:.3}, MF1 {:.3}, kappa {:.3} ({} parse failures) -> {}",
                config.preset.name(),
                summary.metrics.accuracy,
                summary.metrics.macro_f1,
                summary.metrics.kappa,
                summary.parse_failures,
                summary.eval_dir.display()
            );
            Ok(())
        }
        Command::Report { common } => {
            let config = load_config(&common)?;
            let dir = pipeline::run_report(&config)?;
            println!("report: artifacts in {}", dir.display());
            Ok(())
        }
        Command::SynthFixture { common, epochs_per_class, sampling_rate_hz, emit_config } => {
            let config = load_config(&common)?;
            let synth = SynthConfig {
                epochs_per_class,
                sampling_rate_hz,
                seed: config.seed,
                ..Default::default()
            };
            let dir = config.out_dir.join("fixture");
            let paths = write_synthetic_dataset(&dir, &synth)
                .map_err(|e| CliError::Runtime(format!("writing fixture: {e}")))?;
            println!("synth-fixture: {} recordings -> {}", paths.len(), dir.display());
            if let Some(config_path) = emit_config {
                let mut run = config.clone();
                run.dataset.edf_paths = paths;
                let text = toml::to_string_pretty(&run)
                    .map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
                std::fs::write(&config_path, text).map_err(|e| {
                    CliError::Runtime(format!("writing {}: {e}", config_path.display()))
                })?;
                println!("wrote run config to {}", config_path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
