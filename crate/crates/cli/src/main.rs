//! `difflight` command-line entry point.

mod commands;
mod report;
mod rundir;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use difflight::datapipe::{KmLayout, MissingPattern};

#[derive(Parser)]
#[command(name = "difflight", version, about = "Diffusion planning for traffic signal control under missing data")]
struct Cli {
    /// Write outputs here instead of a directory under the run root
    /// (`DIFFLIGHT_RUN_ROOT`, default `./runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Sources {
    /// Experiment spec (JSON); flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long)]
    pub flows: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode under a scripted policy.
    Simulate {
        #[command(flatten)]
        src: Sources,
        #[arg(long, default_value = "fixed_time")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the offline dataset from the behavior-policy mixture.
    GenData {
        #[command(flatten)]
        src: Sources,
        #[arg(long)]
        episodes_per_policy: Option<usize>,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a missing-data mask.
    Mask {
        #[command(flatten)]
        src: Sources,
        /// Control steps to cover (default: the flow duration).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_pattern)]
        pattern: Option<MissingPattern>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_layout)]
        km_layout: Option<KmLayout>,
    },
    /// Store-and-forward imputation of a masked dataset.
    Impute {
        #[command(flatten)]
        src: Sources,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 12)]
        k: usize,
    },
    /// Train the noise model and inverse dynamics.
    Train {
        #[command(flatten)]
        src: Sources,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Use this mask file instead of generating one.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop control of one episode, streaming per-step records.
    Run {
        #[command(flatten)]
        src: Sources,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value_t = 101)]
        seed: u64,
        #[arg(long)]
        sampling_steps: Option<usize>,
    },
    /// ATT of logged episodes, or of a checkpoint against the baselines.
    Eval {
        #[command(flatten)]
        src: Sources,
        /// Episode log(s) to score.
        #[arg(long)]
        episode: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Train at every rate and evaluate at every rate.
    Matrix {
        #[command(flatten)]
        src: Sources,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Evaluate one checkpoint under several sampling plans.
    SweepSteps {
        #[command(flatten)]
        src: Sources,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        plans: Option<Vec<usize>>,
        #[arg(long)]
        rate: Option<f64>,
    },
}

fn parse_pattern(s: &str) -> Result<MissingPattern, String> {
    MissingPattern::parse(s).map_err(|e| e.to_string())
}

fn parse_layout(s: &str) -> Result<KmLayout, String> {
    match s {
        "spread" => Ok(KmLayout::Spread),
        "adjacent" => Ok(KmLayout::Adjacent),
        _ => Err(format!("unknown layout `{s}` (spread|adjacent)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.as_deref();
    let result = match cli.command {
        Command::Simulate { src, policy, seed } => commands::simulate(out, &src, &policy, seed),
        Command::GenData {
            src,
            episodes_per_policy,
            policies,
            seed,
        } => commands::gen_data(out, &src, episodes_per_policy, policies, seed),
        Command::Mask {
            src,
            steps,
            pattern,
            rate,
            seed,
            km_layout,
        } => commands::mask(out, &src, steps, pattern, rate, seed, km_layout),
        Command::Impute { src, dataset, mask, k } => commands::impute(out, &src, dataset, &mask, k),
        Command::Train {
            src,
            dataset,
            mask,
            rate,
            steps,
            batch_size,
            seed,
        } => commands::train(out, &src, dataset, mask, rate, steps, batch_size, seed),
        Command::Run {
            src,
            checkpoint,
            mask,
            rate,
            seed,
            sampling_steps,
        } => commands::run(out, &src, &checkpoint, mask, rate, seed, sampling_steps),
        Command::Eval {
            src,
            episode,
            checkpoint,
            rate,
        } => commands::eval(out, &src, &episode, checkpoint, rate),
        Command::Matrix { src, dataset, rates } => commands::matrix(out, &src, dataset, rates),
        Command::SweepSteps {
            src,
            checkpoint,
            plans,
            rate,
        } => commands::sweep_steps(out, &src, &checkpoint, plans, rate),
    };
    match result {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
