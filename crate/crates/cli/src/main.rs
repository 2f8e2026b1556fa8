//! `promptlab`: run prompt-schedule experiments, gradient-check models,
//! and profile schedules.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure
//! (divergence or a failed gradient check), 4 I/O error.

use clap::{Parser, Subcommand};
use promptlab_cli::config::{load_experiment, load_schedule_doc};
use promptlab_cli::error::{CliError, Result};
use promptlab_cli::report::to_json;
use promptlab_cli::runner::{run_experiment, run_gradcheck, run_profile};
use std::path::{Path, PathBuf};

/// Environment variable naming the directory reports land in when neither
/// `--out` nor the config says otherwise.
const OUT_DIR_ENV: &str = "PROMPTLAB_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "promptlab",
    version,
    about = "Prompt-schedule experiments on a toy dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured protocol for every seed and write a JSON report.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Run only this seed, overriding the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Report destination, overriding the config's `out` field.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients of every trainable parameter against
    /// central finite differences; exits 3 when the check fails.
    Gradcheck {
        /// Experiment config (TOML); the model and dataset sections are used.
        config: PathBuf,
        /// Override the first config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the full JSON result (defaults next to reports).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a schedule's per-layer context lengths and FLOPs estimate.
    Profile {
        /// Schedule document (TOML).
        schedule: PathBuf,
        /// Number of image patches feeding the first layer.
        #[arg(long)]
        patches: usize,
        /// Layer count when the document does not pin one.
        #[arg(long)]
        layers: Option<usize>,
        /// Where to write the machine-readable profile (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Effective output path: the flag wins, then the config, then the default
/// file name inside `$PROMPTLAB_OUT_DIR` (or the working directory).
fn resolve_out(flag: Option<PathBuf>, config_out: Option<&str>, default_name: &str) -> PathBuf {
    if let Some(path) = flag {
        return path;
    }
    if let Some(path) = config_out {
        return PathBuf::from(path);
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) => PathBuf::from(dir).join(default_name),
        None => PathBuf::from(default_name),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::io(format!("{}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let base_dir = config.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut experiment = load_experiment(&config)?;
            if let Some(s) = seed {
                experiment.seeds = vec![s];
            }
            let report = run_experiment(&experiment, &base_dir)?;
            let out_path = resolve_out(out, experiment.out.as_deref(), "report.json");
            write_text(&out_path, &to_json(&report)?)?;
            for row in &report.summary {
                println!(
                    "{:<10} mean accuracy {:.4} (std {:.4}) over {} seed(s)",
                    row.surface,
                    row.mean_accuracy,
                    row.std_accuracy,
                    report.per_seed.len()
                );
            }
            println!("report written to {}", out_path.display());
            Ok(())
        }
        Command::Gradcheck { config, seed, out } => {
            let base_dir = config.parent().unwrap_or(Path::new(".")).to_path_buf();
            let mut experiment = load_experiment(&config)?;
            if let Some(s) = seed {
                experiment.seeds = vec![s];
            }
            let report = run_gradcheck(&experiment, &base_dir)?;
            let out_path = resolve_out(out, None, "gradcheck.json");
            write_text(
                &out_path,
                &serde_json::to_string_pretty(&report)
                    .map_err(|e| CliError::config(e.to_string()))?,
            )?;
            println!(
                "checked {} trainable scalars: max relative error {:.3e} (tolerance {:.0e})",
                report.param_count, report.max_rel_error, report.tolerance
            );
            if report.pass {
                println!("gradcheck PASS");
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "gradient check failed: max relative error {:.3e} is at or above {:.0e}",
                    report.max_rel_error, report.tolerance
                )))
            }
        }
        Command::Profile { schedule, patches, layers, out } => {
            let doc = load_schedule_doc(&schedule)?;
            let (table, profile) = run_profile(&doc, patches, layers)?;
            print!("{table}");
            if let Some(out_path) = out {
                write_text(
                    &out_path,
                    &serde_json::to_string_pretty(&profile)
                        .map_err(|e| CliError::config(e.to_string()))?,
                )?;
                println!("profile written to {}", out_path.display());
            }
            Ok(())
        }
    }
}
