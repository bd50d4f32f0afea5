//! `longflow`: command-line front end for the toy long-horizon video world
//! model. Data generation, training, sampling, schedule inspection,
//! evaluation, and strategy comparison, all reproducible from a config
//! snapshot plus a root seed.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config, bad
//! input files), 2 runtime error (numeric failures, compute or output IO).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod commands;
mod report;

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "longflow",
    version,
    about = "Long-horizon video generation on a toy 2-D world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; sidecar files are written next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate episodes and write a training dataset
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run the three-stage curriculum and write checkpoints plus a loss log
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset produced by gen-data
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from an existing checkpoint (global step is preserved)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a clip with one rollout strategy
    Sample {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// recurrent, divide_conquer, or coarse_refine
        #[arg(long)]
        strategy: Option<String>,
        /// Frames to generate past the condition prefix
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Score generated clips against reference episodes
    Eval {
        #[command(flatten)]
        common: Common,
        /// Clip dataset written by sample
        #[arg(long)]
        clip: PathBuf,
        /// Reference dataset written by gen-data
        #[arg(long)]
        reference: PathBuf,
        /// Drift bucket width in frames
        #[arg(long)]
        window: Option<usize>,
        /// Leading condition frames to drop from every episode on both sides
        #[arg(long)]
        skip: Option<usize>,
    },
    /// Print a denoising timetable as CSV
    Schedule {
        /// Run configuration JSON supplying defaults; built-in defaults if absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accepted for interface uniformity; the table is seed-free
        #[arg(long)]
        seed: Option<u64>,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Euler steps (rows minus one)
        #[arg(long)]
        steps: Option<usize>,
        /// Noisy frames (columns)
        #[arg(long)]
        frames: Option<usize>,
        /// Progressive warp sharpness in (0, pi/2]
        #[arg(long)]
        omega: Option<f64>,
        /// Anchor residual noise level; providing it (or --gmax) turns the
        /// last frame into an anchor column
        #[arg(long)]
        alpha1: Option<f64>,
        /// Peak anchor corruption level
        #[arg(long)]
        gmax: Option<f64>,
    },
    /// Run every strategy over several seeds and report drift and flicker
    Compare {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated seed list, e.g. 0,1,2,3,4; default root..root+5
        #[arg(long)]
        seeds: Option<String>,
        /// Frames to generate past the condition prefix
        #[arg(long)]
        horizon: Option<usize>,
        /// Scenario clips generated per seed and strategy
        #[arg(long)]
        clips: Option<usize>,
        /// Drift bucket width in frames
        #[arg(long)]
        window: Option<usize>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&common.config, common.seed, &common.out),
        Command::Train {
            common,
            dataset,
            resume,
        } => commands::train(
            &common.config,
            common.seed,
            &common.out,
            &dataset,
            resume.as_deref(),
        ),
        Command::Sample {
            common,
            checkpoint,
            strategy,
            horizon,
        } => commands::sample(
            &common.config,
            common.seed,
            &common.out,
            &checkpoint,
            strategy.as_deref(),
            horizon,
        ),
        Command::Eval {
            common,
            clip,
            reference,
            window,
            skip,
        } => commands::eval(
            &common.config,
            common.seed,
            &common.out,
            &clip,
            &reference,
            window,
            skip,
        ),
        Command::Schedule {
            config,
            seed: _,
            out,
            steps,
            frames,
            omega,
            alpha1,
            gmax,
        } => commands::schedule(
            config.as_deref(),
            out.as_deref(),
            steps,
            frames,
            omega,
            alpha1,
            gmax,
        ),
        Command::Compare {
            common,
            checkpoint,
            seeds,
            horizon,
            clips,
            window,
        } => commands::compare(
            &common.config,
            common.seed,
            &common.out,
            &checkpoint,
            seeds.as_deref(),
            horizon,
            clips,
            window,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LONGFLOW_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help and usage text go where clap intended them.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.exit)
        }
    }
}
