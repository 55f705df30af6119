use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use cardiotraj_cli::commands;
use cardiotraj_cli::config::PipelineConfig;
use cardiotraj_cli::pipeline::run_pipeline;
use cardiotraj_cli::synth::run_synth;
use cardiotraj_cli::validate::run_validate;

/// Shape-trajectory analysis for cardiac surface meshes.
#[derive(Parser)]
#[command(name = "cardiotraj", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full pipeline on a cohort manifest.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = available parallelism).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Compare original and reconstructed EF/AS and fit the scaling law.
    ValidateTransport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a template mesh onto a target mesh.
    Register {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Optional control-point CSV; a grid over the template otherwise.
        #[arg(long)]
        control_points: Option<PathBuf>,
        /// Output momenta CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Scaled transport for a single manifest subject.
    Transport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        control_points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the spline model to an ordered list of frame meshes.
    Spline {
        #[arg(long)]
        config: PathBuf,
        /// Frame meshes in temporal order, first frame = trajectory start.
        #[arg(long, value_delimiter = ',', num_args = 2..)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        control_points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group statistics over pipeline spline fits.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Pipeline output directory holding the fits.
        #[arg(long)]
        out: PathBuf,
    },
}

// Exit codes: 0 success, 1 usage/config error, 2 partial subject failures,
// 3 total failure.
fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            // help and version requests are not errors
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_config(path: &std::path::Path) -> Result<PipelineConfig, ExitCode> {
    PipelineConfig::from_path(path).map_err(|e| {
        eprintln!("config error: {e:#}");
        ExitCode::from(1)
    })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            let seed = config.effective_seed(seed);
            let cohort = run_synth(&config, seed, &out)?;
            println!(
                "generated {} subjects in {}",
                cohort.subjects.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline {
            config,
            manifest,
            out,
            seed,
            workers,
        } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            let seed = config.effective_seed(seed);
            let outcome = run_pipeline(&config, &manifest, &out, seed, workers)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for (subject, error) in &outcome.failed {
                eprintln!("subject {subject} failed: {error}");
            }
            println!(
                "pipeline finished: {}/{} subjects, stats {}",
                outcome.n_subjects - outcome.failed.len(),
                outcome.n_subjects,
                outcome.stats_status
            );
            if outcome.all_failed() {
                Ok(ExitCode::from(3))
            } else if !outcome.failed.is_empty() {
                Ok(ExitCode::from(2))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::ValidateTransport {
            config,
            manifest,
            out,
        } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            let outcome = run_validate(&config, &manifest, &out)?;
            for row in &outcome.rows {
                println!(
                    "{}: original {:.4} +/- {:.4}, RMSE PT {:.4}, RMSE SPT {:.4}",
                    row.metric, row.original_mean, row.original_std, row.rmse_pt, row.rmse_spt
                );
            }
            println!(
                "lambda law: slope {:.4}, R^2 {:.4}",
                outcome.lambda_slope, outcome.lambda_r_squared
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Register {
            config,
            template,
            target,
            control_points,
            out,
        } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            let result = commands::cmd_register(
                &config,
                &template,
                &target,
                control_points.as_deref(),
                &out,
            )?;
            println!(
                "registered: data {:.6e}, regularity {:.6e}, geodesic length {:.6}, {} iterations",
                result.data_term,
                result.reg_term,
                result.geodesic_length(),
                result.iterations
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Transport {
            config,
            manifest,
            subject,
            atlas,
            control_points,
            out,
        } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            commands::cmd_transport(&config, &manifest, &subject, &atlas, &control_points, &out)?;
            println!("transported subject {subject} into {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Spline {
            config,
            frames,
            control_points,
            out,
        } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            let paths: Vec<&std::path::Path> = frames.iter().map(PathBuf::as_path).collect();
            let fit = commands::cmd_spline(&config, &paths, &control_points, &out)?;
            println!(
                "spline fit: cost {:.6e}, force energy {:.6e}, {} iterations",
                fit.total_cost, fit.force_energy, fit.iterations
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Stats {
            config,
            manifest,
            out,
        } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            let n = commands::cmd_stats(&config, &manifest, &out)?;
            println!("wrote {n} comparisons to {}", out.join("stats").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
