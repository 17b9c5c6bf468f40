use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use delib_cli::checkpoint::Checkpoint;
use delib_cli::commands;
use delib_cli::config::{load_verify_config, RunConfig};
use delib_cli::{Failure, EXIT_OK, EXIT_USAGE, EXIT_VERIFY};
use delib_core::decode::GenerateMode;
use delib_core::tasks::load_corpus;
use log::error;

/// Two-pass deliberation network experiments.
///
/// Log verbosity is read from the DELIB_LOG environment variable
/// (error, warn, info, debug, trace; default info).
#[derive(Parser)]
#[command(name = "delib", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/dev/test corpus files for the configured task.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the first pass, then train with the configured scheme.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory holding train.tsv, dev.tsv and test.tsv; generated from
        /// the task when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Initial parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Two-pass decoding of a corpus file with a trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A corpus file.
        #[arg(long)]
        corpus: PathBuf,
        /// Beam width; greedy decoding unless given.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the enumeration-backed check suite.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run only the finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(checks: &[delib_core::verify::CheckResult]) -> Result<(), Failure> {
    for c in checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        Err(Failure::verification(format!("{failed} checks failed")))
    } else {
        Ok(())
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenerateData { config, seed, out } => {
            let cfg = run_config(&config, seed, out)?;
            for p in commands::generate_data(&cfg, &cfg.out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Train { config, seed, out, corpus, checkpoint } => {
            let cfg = run_config(&config, seed, out)?;
            let outcome = commands::train(&cfg, &cfg.out_dir, corpus.as_deref(), checkpoint.as_deref())?;
            if let Some(last) = outcome.records.last() {
                println!("{}", serde_json::to_string(last).map_err(|e| Failure::runtime(e.to_string()))?);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Evaluate { checkpoint, corpus, beam, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let c = load_corpus(&corpus).map_err(|e| Failure::from(e).context(corpus.display()))?;
            let mode = beam.map(|width| GenerateMode::Beam { width });
            let record = commands::evaluate(&ck, &c, mode, out.as_deref())?;
            println!("{}", serde_json::to_string(&record).map_err(|e| Failure::runtime(e.to_string()))?);
        }
        Command::Verify { config, seed, out } => {
            let mut cfg = load_verify_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = commands::verify(&cfg, out.as_deref())?;
            report(&r.checks)?;
        }
        Command::Gradcheck { config, seed, out } => {
            let mut cfg = load_verify_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            report(&commands::gradcheck(&cfg, out.as_deref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DELIB_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(f) => {
            if f.code == EXIT_VERIFY {
                error!("verification failed: {f}");
            } else {
                error!("{f}");
            }
            ExitCode::from(f.code)
        }
    }
}
