use clap::{Parser, Subcommand};
use patchsmith::config::RunConfig;
use patchsmith::Error;
use std::path::PathBuf;
use std::process::ExitCode;

mod assets;
mod commands;

/// Diffusion-sampled naturalistic adversarial patches against object
/// detectors.
///
/// Configuration is a flat `key = value` document. Each run writes the
/// fully resolved configuration to `<out>/config.resolved`; passing that
/// file back with `--config` reproduces the run. Trained toy models are
/// cached in `$PATCHSMITH_CACHE` (default `<out>/cache`).
///
/// Exit codes: 0 success, 1 other failure, 2 config error, 3 missing asset,
/// 4 numeric failure.
#[derive(Parser, Debug)]
#[command(name = "patchsmith", version)]
struct Cli {
    /// Configuration document.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed (overrides `seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Samples the initial patch and writes patch_init.png and its latent.
    Generate,
    /// Optimizes the patch against the detectors.
    Attack,
    /// Evaluates patches with the normalized mAP protocol.
    Eval {
        /// Also write the patch-by-detector matrix with the random-noise and
        /// unoptimized baselines.
        #[arg(long)]
        matrix: bool,
    },
    /// Runs the t_start / s / cfg_w ablation grid.
    Sweep,
}

fn resolve(cli: &Cli) -> patchsmith::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|_| Error::MissingAsset {
                entry: "--config".into(),
                path: path.clone(),
            })?;
            RunConfig::from_document(&text)?
        }
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(out) = &cli.out {
        cfg.set("output.dir", &out.to_string_lossy())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::InvalidConfig(_) | Error::InvalidParameter(_) | Error::Parse(_) => 2,
        Error::MissingAsset { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Attack => commands::attack(&cfg),
        Command::Eval { matrix } => commands::eval(&cfg, matrix),
        Command::Sweep => commands::sweep(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("patchsmith: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
