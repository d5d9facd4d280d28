use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use trajrec_core::config::RunConfig;
use trajrec_core::pipeline::{self, Split, Workspace, JOINT_CHECKPOINT};
use trajrec_core::{Error, Result};

#[derive(Parser)]
#[command(name = "trajrec", version, about = "Recover fine-interval map-matched trajectories from sparse GPS traces")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file with dotted keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Workspace directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grid city with vehicle trajectories.
    Synth,
    /// Copy the network into the workspace, filter and split trajectories.
    Prepare,
    /// Map-match every split.
    Match,
    /// Resample matched trajectories at each sparse interval.
    Sparsify,
    /// Count regional flow over the training split.
    Flowgrid,
    /// Joint training over the interval mix.
    Train,
    /// Fine-tune the joint checkpoint on one interval.
    Finetune {
        #[arg(long)]
        interval: i64,
    },
    /// Score a checkpoint, or stored predictions, on a split.
    Eval {
        /// Checkpoint directory; the joint checkpoint by default.
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// JSONL predictions to score instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Sparse interval in seconds; repeatable. All configured intervals by default.
        #[arg(long = "interval")]
        intervals: Vec<i64>,
    },
    /// Recover a sparse trajectory file with a checkpoint.
    Recover {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the explicit prompt of each trajectory as JSON lines.
    Prompt {
        #[arg(long)]
        input: PathBuf,
        /// Interval to describe; each record's own interval by default.
        #[arg(long)]
        interval: Option<i64>,
    },
    /// Print the resolved configuration.
    Config,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let ws = Workspace::from_config(&cfg);
    log::info!("workspace {}", ws.root().display());
    match cli.command {
        Command::Synth => print_json(&pipeline::synth(&cfg, &ws)?),
        Command::Prepare => print_json(&pipeline::prepare(&cfg, &ws)?),
        Command::Match => print_json(&pipeline::match_stage(&cfg, &ws)?),
        Command::Sparsify => print_json(&pipeline::sparsify_stage(&cfg, &ws)?),
        Command::Flowgrid => print_json(&pipeline::flowgrid(&cfg, &ws)?),
        Command::Train => {
            let out = pipeline::train_stage(&cfg, &ws)?;
            println!(
                "best epoch {} of {}, validation loss {:.6}; checkpoint {}",
                out.report.best_epoch,
                out.report.history.len() - 1,
                out.report.best_val_loss,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::Finetune { interval } => {
            let out = pipeline::finetune_stage(&cfg, &ws, interval)?;
            let start = out.report.history[0].val_loss;
            println!(
                "validation loss {:.6} -> {:.6} at {interval}s; checkpoint {}",
                start,
                out.report.best_val_loss,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint, predictions, split, intervals } => {
            let intervals = if intervals.is_empty() { cfg.data.intervals.clone() } else { intervals };
            if let Some(pred) = predictions {
                let [mu] = intervals[..] else {
                    return Err(Error::Config("scoring predictions needs exactly one --interval".into()));
                };
                print!("{}", pipeline::eval_predictions(&cfg, &ws, &pred, split, mu)?);
            } else {
                let ckpt = checkpoint.unwrap_or_else(|| ws.checkpoint(JOINT_CHECKPOINT));
                for out in pipeline::eval_stage(&cfg, &ws, &ckpt, split, &intervals)? {
                    print!("{out}");
                }
            }
            Ok(())
        }
        Command::Recover { checkpoint, input, output } => {
            let ckpt = checkpoint.unwrap_or_else(|| ws.checkpoint(JOINT_CHECKPOINT));
            let n = pipeline::recover_stage(&cfg, &ws, &ckpt, &input, &output)?;
            println!("recovered {n} trajectories into {}", output.display());
            Ok(())
        }
        Command::Prompt { input, interval } => {
            for p in pipeline::prompt_stage(&cfg, &input, interval)? {
                println!("{}", serde_json::to_string(&p)?);
            }
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        e if e.is_data_error() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
