//! `accent-audit` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use accent_audit::config::AuditConfig;
use accent_audit::pipeline::Audit;
use accent_audit::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "accent-audit", version, about = "Accent-subspace fairness audit of a toy CTC recognizer")]
struct Cli {
    /// TOML config; defaults are used for anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides `output_dir` from the config.
    #[arg(long, global = true, value_name = "PATH")]
    output_dir: Option<PathBuf>,

    /// Overrides `global_seed` from the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for per-utterance work.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Synthesize the corpus.
    Gen,
    /// Train the recognizer.
    Train,
    /// Sweep layers, k and methods; write the selected and control subspaces.
    Extract,
    /// Attack the eval split under every condition.
    Attack,
    /// Repeat the attacks over the epsilon grid.
    SweepEps,
    /// Evaluate the project-out hook on clean and attacked audio.
    Intervene,
    /// Collect every stage's results into report.json.
    Report,
    /// Run all stages in order.
    FullAudit,
    /// Print the effective config as TOML.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<&'static str> {
        Some(match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Extract => "extract",
            Command::Attack => "attack",
            Command::SweepEps => "sweep-eps",
            Command::Intervene => "intervene",
            Command::Report => "report",
            Command::FullAudit => "full-audit",
            Command::ShowConfig => return None,
        })
    }
}

fn load_config(cli: &Cli) -> accent_audit::Result<AuditConfig> {
    let mut config = match &cli.config {
        Some(path) => AuditConfig::load(path)?,
        None => AuditConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        config.global_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> accent_audit::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let config = load_config(cli)?;
    match cli.command.stage() {
        None => {
            print!("{}", config.to_toml_string()?);
            Ok(())
        }
        Some(stage) => {
            let audit = Audit::new(config)?;
            log::info!("{stage}: config hash {}", audit.hash);
            audit.run_stage(stage)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
