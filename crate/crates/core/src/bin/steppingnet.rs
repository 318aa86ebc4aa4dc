use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use steppingnet::cli::{self, CliError, Config};

#[derive(Parser)]
#[command(name = "steppingnet", version, about = "Train, carve and run nested anytime subnets")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration file; defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `[data] dir`.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unexpanded network used as the distillation teacher.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand the network and carve it into nested subnets.
    Construct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a constructed checkpoint against a teacher.
    Distill {
        /// Constructed checkpoint directory.
        checkpoint: PathBuf,
        /// Teacher checkpoint directory.
        teacher: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-level held-out accuracy and MAC ratio as CSV.
    Eval {
        checkpoint: PathBuf,
        /// Comma-separated levels, e.g. `1,2,4`; all levels by default.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        dataset_dir: Option<PathBuf>,
        /// CSV file to write; standard output by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a start/expand/reduce schedule on held-out inputs.
    AnytimeDemo {
        checkpoint: PathBuf,
        /// `step:level` or `step:op:level` entries, e.g. `0:1,1:2,2:4`.
        #[arg(long)]
        schedule: String,
        /// Number of held-out inputs to replay.
        #[arg(long, default_value_t = 100)]
        inputs: usize,
        #[arg(long)]
        dataset_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(c: &Common) -> Result<Config, CliError> {
    Config::resolve(c.config.as_deref(), c.seed, c.dataset_dir.as_deref())
}

fn percent(acc: &[f64]) -> String {
    acc.iter().map(|a| format!("{:.2}", a * 100.0)).collect::<Vec<_>>().join(" ")
}

fn run(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::PretrainTeacher { common, out } => {
            let o = cli::cmd_pretrain_teacher(&config(&common)?, &out)?;
            eprintln!("teacher accuracy % {}", percent(&o.accuracy));
        }
        Command::Construct { common, out } => {
            let (o, report) = cli::cmd_construct(&config(&common)?, &out)?;
            eprintln!(
                "{} iterations, macs {:?}, budgets {:?}, met {}",
                report.iterations.len(),
                report.final_macs,
                report.budgets,
                report.budgets_met
            );
            if !report.budgets_met {
                eprintln!("warning: budgets not reached within the iteration cap");
            }
            eprintln!("accuracy % per level {}", percent(&o.accuracy));
        }
        Command::Distill { checkpoint, teacher, common, out } => {
            let o = cli::cmd_distill(&checkpoint, &teacher, &config(&common)?, &out)?;
            eprintln!("accuracy % per level {}", percent(&o.accuracy));
        }
        Command::Eval { checkpoint, levels, dataset_dir, out } => {
            cli::cmd_eval(&checkpoint, levels.as_deref(), dataset_dir.as_deref(), out.as_deref())?;
        }
        Command::AnytimeDemo { checkpoint, schedule, inputs, dataset_dir, out } => {
            let rows = cli::cmd_anytime_demo(&checkpoint, &schedule, inputs, dataset_dir.as_deref(), out.as_deref())?;
            eprintln!("{} steps replayed, no path-independence violations", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.error_line());
            ExitCode::FAILURE
        }
    }
}
