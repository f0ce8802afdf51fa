use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use negdistill_cli::{commands, CliResult, Context};

#[derive(Parser)]
#[command(name = "negdistill", version, about = "Self-distillation with shifted negatives for OOD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train student and teacher; writes metrics.csv and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the test and OOD sets with a teacher checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoints/final.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Occupied soft-classes, k-NN accuracy and an occupied-vs-AUROC scatter.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Repeat for several checkpoints.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Color histograms of all configured datasets and their distances.
    Hist {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },
}

fn context(c: &Common) -> CliResult<Context> {
    Context::from_args(&c.config, c.seed, c.out.as_deref())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common, resume } => {
            let ctx = context(&common)?;
            let s = commands::train(&ctx, resume.as_deref())?;
            println!("trained {} steps; checkpoint {}", s.steps, s.final_checkpoint);
        }
        Command::Eval { common, checkpoint } => {
            let ctx = context(&common)?;
            let s = commands::eval(&ctx, checkpoint.as_deref())?;
            println!("in vs in: {:.4}", s.in_vs_in_auroc);
            for r in &s.results {
                println!("{}: {:.4}", r.dataset, r.auroc);
            }
        }
        Command::Diagnose { common, checkpoint } => {
            let ctx = context(&common)?;
            let s = commands::diagnose(&ctx, &checkpoint)?;
            for r in &s.checkpoints {
                println!("{}: occupied {}/{}", r.checkpoint, r.occupied, r.k);
            }
        }
        Command::Hist { common, bins } => {
            let ctx = context(&common)?;
            for d in commands::hist(&ctx, bins)? {
                println!("{} vs {}: {:.6}", d.dataset_a, d.dataset_b, d.distance);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
