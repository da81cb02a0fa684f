use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mergelab_harness::{run, verify, Command, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "mergelab", version, about = "Model merging vs ensembling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `master_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Target {
    Train,
    Compare,
    Magnitude,
    Templates,
    Bounds,
    Crosstask,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the model pool and write checkpoints.
    Train(#[command(flatten)] Common),
    /// Accuracy of every merge method against the individual models.
    Compare(#[command(flatten)] Common),
    /// Accuracy across parameter magnification factors.
    Magnitude(#[command(flatten)] Common),
    /// Class-mean, classifier-row and merged-row image grids.
    Templates(#[command(flatten)] Common),
    /// Batched inequality checks; exit 1 if an exact one fails.
    Bounds(#[command(flatten)] Common),
    /// Merge two models trained on different tasks.
    Crosstask(#[command(flatten)] Common),
    /// Re-run a command and compare its CSVs byte for byte.
    Verify {
        #[command(subcommand)]
        target: Target,
        #[command(flatten)]
        common: Common,
    },
}

impl From<Target> for Command {
    fn from(t: Target) -> Self {
        match t {
            Target::Train => Command::Train,
            Target::Compare => Command::Compare,
            Target::Magnitude => Command::Magnitude,
            Target::Templates => Command::Templates,
            Target::Bounds => Command::Bounds,
            Target::Crosstask => Command::Crosstask,
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<usize> {
    let (cmd, common, is_verify) = match cli.command {
        Cmd::Train(c) => (Command::Train, c, false),
        Cmd::Compare(c) => (Command::Compare, c, false),
        Cmd::Magnitude(c) => (Command::Magnitude, c, false),
        Cmd::Templates(c) => (Command::Templates, c, false),
        Cmd::Bounds(c) => (Command::Bounds, c, false),
        Cmd::Crosstask(c) => (Command::Crosstask, c, false),
        Cmd::Verify { target, common } => (target.into(), common, true),
    };
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let cfg = load_config(&common)?;
    let outcome = if is_verify { verify(cmd, &cfg)? } else { run(cmd, &cfg)? };
    // a closed stdout (e.g. piped into `head`) is not an error
    let mut stdout = std::io::stdout().lock();
    for line in &outcome.summary {
        let _ = writeln!(stdout, "{line}");
    }
    let _ = writeln!(stdout, "outputs in {}", cfg.out_dir.display());
    Ok(outcome.violations)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(3, HarnessError::exit_code);
            ExitCode::from(code)
        }
    }
}
