use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icnn_core::config::RunConfig;
use icnn_core::pipeline;
use icnn_core::Error;

/// Iterative refinement of membrane probability maps on synthetic EM stacks.
#[derive(Debug, Parser)]
#[command(name = "icnn", version)]
struct Cli {
    /// Run configuration file (key=value lines).
    #[arg(long, global = true, env = "ICNN_CONFIG")]
    config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Refinement rounds.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic image and label stack.
    Synth,
    /// Train one base network per fold.
    TrainBase,
    /// Produce out-of-fold probability maps.
    GenMdpm,
    /// Train the refinement networks on the maps.
    TrainIcnn,
    /// Apply the refinement networks round by round.
    Refine,
    /// Score every round and print the summary.
    Eval,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::Diverged(_) | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn build_config(cli: &Cli) -> icnn_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(r) = cli.rounds {
        cfg.rounds = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> icnn_core::Result<String> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Synth => pipeline::cmd_synth(&cfg),
        Command::TrainBase => pipeline::cmd_train_base(&cfg),
        Command::GenMdpm => pipeline::cmd_gen_mdpm(&cfg),
        Command::TrainIcnn => pipeline::cmd_train_icnn(&cfg),
        Command::Refine => pipeline::cmd_refine(&cfg),
        Command::Eval => pipeline::cmd_eval(&cfg).map(|(_, summary)| summary),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
