use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tpad::cli::{Command, Runner};
use tpad::config::RunConfig;

#[derive(Parser)]
#[command(version, about = "Transition-pattern distillation into item embeddings, with a session recommender")]
struct Args {
    /// Full `key = value` config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root, overriding the config.
    #[arg(long, global = true, env = "TPAD_OUT")]
    out: Option<String>,
    /// Embedding variant, overriding the config.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic corpus (or copy the configured one) into the run directory.
    GenData,
    /// Filter, split and extract meta pairs.
    Prepare,
    /// Train the stage-one knowledge tower.
    TrainK0,
    /// Train the transfer tower on meta pairs.
    TrainT,
    /// Distill transition patterns into the knowledge tower.
    TrainK1,
    /// Export per-item summary embeddings for the configured variant.
    Export,
    /// Train the downstream recommender.
    TrainRec,
    /// Evaluate the recommender and write metrics.
    Evaluate,
    /// Seed sweep over the configured variants with paired tests.
    Ablate,
    /// Every stage in order.
    RunAll,
    /// Print the effective config.
    ShowConfig,
}

fn load(args: &Args) -> tpad::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(v) = &args.variant {
        cfg.set("variant", v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &Args) -> tpad::Result<()> {
    let cfg = load(args)?;
    let cmd = match args.cmd {
        Cmd::GenData => Command::GenData,
        Cmd::Prepare => Command::Prepare,
        Cmd::TrainK0 => Command::TrainK0,
        Cmd::TrainT => Command::TrainT,
        Cmd::TrainK1 => Command::TrainK1,
        Cmd::Export => Command::Export,
        Cmd::TrainRec => Command::TrainRec,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Ablate => Command::Ablate,
        Cmd::RunAll => Command::RunAll,
        Cmd::ShowConfig => {
            print!("# config {}\n{}", cfg.hash(), cfg.render());
            return Ok(());
        }
    };
    let runner = Runner::new(cfg)?;
    runner.run(cmd)?;
    println!("{}", runner.dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
