//! Command-line entry points. Exit codes: 0 success, 2 for invalid
//! configuration (with field-level messages on stderr), 1 for any other
//! failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use simclr_core::detector::{detect_onset, DetectorConfig, MinDelta};
use simclr_core::telemetry::{read_series, MetricColumn, Split};

use crate::config::{ConfigError, ExperimentConfig};
use crate::trainer::{run as run_experiment, TrainError, TrainerState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID_CONFIG: i32 = 2;

#[derive(Parser)]
#[command(
    name = "simclr-lab",
    about = "Contrastive-learning laboratory: training, loss decomposition telemetry, and overfitting-onset detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. --set loss.temperature=0.1. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment: train, log telemetry, optionally early-stop at the
    /// detected overfitting onset.
    Train(ConfigArgs),
    /// Load a checkpoint and report one validation pass.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file written by a train run.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the onset detector over a column of a metrics file.
    Detect {
        /// Metrics CSV produced by a train run.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value = "positive_term")]
        column: MetricColumn,
        #[arg(long, default_value_t = 11)]
        smoothing_window: usize,
        /// Absolute min_delta; when omitted the default fraction-of-range
        /// rule (0.01) applies.
        #[arg(long)]
        min_delta: Option<f64>,
        #[arg(long, default_value_t = 25)]
        patience: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
    },
    /// Render loss-curve and decomposition figures from a metrics file.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Directory receiving the SVGs and their JSON sidecars.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the self-contained tiny fixture (config + dataset snapshot).
    MakeTinyFixture {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, ConfigError> {
    let config = ExperimentConfig::load(&args.config, &args.set)?;
    config.validate()?;
    Ok(config)
}

fn config_exit(err: &ConfigError) -> i32 {
    match err {
        ConfigError::Io { .. } => EXIT_FAILURE,
        _ => EXIT_INVALID_CONFIG,
    }
}

fn train_exit(err: &TrainError) -> i32 {
    match err {
        TrainError::Config(_) => EXIT_INVALID_CONFIG,
        _ => EXIT_FAILURE,
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Testable entry point taking explicit argv.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version via this path with status 0.
            let code = if e.exit_code() == 0 { EXIT_OK } else { EXIT_INVALID_CONFIG };
            let _ = e.print();
            return code;
        }
    };

    match cli.command {
        Command::Train(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return config_exit(&e);
                }
            };
            match run_experiment(config) {
                Ok(manifest) => {
                    println!(
                        "run {} finished at epoch {} ({}); metrics: {}",
                        manifest.run_id,
                        manifest.final_epoch,
                        manifest.stop_reason,
                        manifest.metrics_path.display()
                    );
                    if let Some(report) = &manifest.onset_positive_term {
                        match report.onset_epoch {
                            Some(e) => println!("positive-term onset at epoch {e}"),
                            None => println!("no positive-term onset detected"),
                        }
                    }
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("{e}");
                    train_exit(&e)
                }
            }
        }
        Command::Evaluate { config, checkpoint } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return config_exit(&e);
                }
            };
            let result = (|| -> Result<(), TrainError> {
                let mut state = TrainerState::new(config)?;
                let sidecar = state.load_checkpoint(&checkpoint)?;
                let row = state.evaluate(sidecar.epoch)?;
                println!(
                    "epoch {} val: total_loss {:.6} positive_term {:.6} negative_term {:.6}",
                    sidecar.epoch, row.total_loss, row.positive_term, row.negative_term
                );
                Ok(())
            })();
            match result {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("{e}");
                    train_exit(&e)
                }
            }
        }
        Command::Detect {
            metrics,
            split,
            column,
            smoothing_window,
            min_delta,
            patience,
            warmup,
        } => {
            let cfg = DetectorConfig {
                smoothing_window,
                min_delta: min_delta.map(MinDelta::Absolute).unwrap_or(
                    DetectorConfig::default().min_delta,
                ),
                patience,
                warmup,
            };
            if let Err(e) = cfg.validate() {
                eprintln!("{e}");
                return EXIT_INVALID_CONFIG;
            }
            let series = match read_series(&metrics, split, column) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return EXIT_FAILURE;
                }
            };
            let name = format!("{split}/{column:?}").to_lowercase();
            match detect_onset(&series, &cfg, &name) {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).unwrap());
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("{e}");
                    EXIT_FAILURE
                }
            }
        }
        Command::Plot { metrics, out_dir } => {
            match crate::plot::render_all(&metrics, &out_dir, &DetectorConfig::default()) {
                Ok(paths) => {
                    println!("{}", paths.loss_curves_svg.display());
                    println!("{}", paths.decomposition_svg.display());
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("{e}");
                    EXIT_FAILURE
                }
            }
        }
        Command::MakeTinyFixture { out_dir } => match crate::fixture::make_tiny_fixture(&out_dir) {
            Ok(paths) => {
                println!("{}", paths.config.display());
                println!("{}", paths.dataset_snapshot.display());
                EXIT_OK
            }
            Err(e) => {
                eprintln!("{e}");
                EXIT_FAILURE
            }
        },
    }
}
