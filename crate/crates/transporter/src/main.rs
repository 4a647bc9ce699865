use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transporter::commands::{self, ManipSource};
use transporter::config::RunConfig;
use transporter::report::grad_check_table;
use transporter::{Error, Result};

/// Self-supervised 3D keypoints for articulated objects.
#[derive(Parser)]
#[command(name = "transporter", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field by dotted path, e.g. `train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
    },
    /// Train on a dataset; writes a checkpoint and the loss curve.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run closed-loop manipulation episodes.
    Manip {
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth part keypoints instead of a model.
        #[arg(long)]
        oracle: bool,
        /// Defaults to `manip.episodes` from the config.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long, default_value = "micro")]
        scale: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = || RunConfig::resolve(cli.common.config.as_deref(), &cli.common.set);
    match cli.command {
        Command::GenData { out, seed, scenes } => {
            let s = commands::gen_data(&cfg()?, &out, scenes, seed)?;
            println!(
                "{}: {} scenes, {} sequences ({} pairs, {} triplets), {} frames, {} points",
                out.display(),
                s.scenes,
                s.sequences,
                s.pairs,
                s.triplets,
                s.frames,
                s.points
            );
        }
        Command::Train { data, out } => {
            let cfg = cfg()?;
            let mut epoch = None;
            let mut acc = (0.0, 0usize);
            let o = commands::train(&cfg, &data, &out, |r| {
                if epoch.is_some_and(|e| e != r.epoch) {
                    eprintln!(
                        "epoch {} mean loss {:.6}",
                        epoch.unwrap(),
                        acc.0 / acc.1 as f64
                    );
                    acc = (0.0, 0);
                }
                epoch = Some(r.epoch);
                acc.0 += r.total;
                acc.1 += 1;
            })?;
            if let Some(e) = epoch {
                eprintln!("epoch {e} mean loss {:.6}", acc.0 / acc.1.max(1) as f64);
            }
            println!("{} steps; checkpoint {}", o.steps, o.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => {
            let r = commands::eval(&cfg()?, &checkpoint, &data, &out)?;
            let a = r.aggregate;
            println!(
                "{} pairs: ACKD {:.4} RR@{} {:.4} ADD {:.4}",
                a.pairs, a.ackd, r.tau, a.rr, a.add
            );
        }
        Command::Manip {
            checkpoint,
            oracle,
            episodes,
            out,
        } => {
            let cfg = cfg()?;
            let source = match (&checkpoint, oracle) {
                (Some(p), false) => ManipSource::Checkpoint(p),
                (None, true) => ManipSource::Oracle,
                _ => {
                    return Err(Error::Usage(
                        "pass exactly one of --checkpoint and --oracle".into(),
                    ))
                }
            };
            let r = commands::manip(&cfg, source, episodes.unwrap_or(cfg.manip.episodes), &out)?;
            println!(
                "{} episodes on {}: success_rate {:.3}, mean d {:.4}",
                r.aggregate.episodes,
                r.scene,
                r.aggregate.success_rate,
                r.aggregate.mean_normalized_distance
            );
        }
        Command::GradCheck {
            scale,
            seed,
            corrupt_op,
        } => {
            let rows = commands::grad_check(&scale, corrupt_op.as_deref(), seed)?;
            print!("{}", grad_check_table(&rows));
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Numeric(format!(
                    "{failed} of {} gradient checks failed",
                    rows.len()
                )));
            }
            println!("all {} checks passed", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
