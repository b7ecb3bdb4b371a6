mod bench;
mod export;
mod run;

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use conther_core::env::serve_env;
use conther_core::trainer::TrainError;

#[derive(Parser)]
#[command(name = "conther", version, about = "Train, compare and serve context-aware TD3 agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Config file in `[section]` / `key = value` form
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training job into a fresh run directory
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Rerun the config recorded in a run manifest
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        /// Output root (default: $CONTHER_OUT or ./runs)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Step a remote environment server instead of the in-process one
        #[arg(long, value_name = "HOST:PORT")]
        remote: Option<String>,
    },
    /// Train every variant/seed pair and print a comparison table
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run all cells at once as separate processes
        #[arg(long)]
        parallel: bool,
    },
    /// Write loss, reward and success-rate tables for plotting
    ExportPlots {
        /// Run directories
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Serve the configured environment over TCP until interrupted
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:7070")]
        bind: String,
    },
    /// Roll out a trained actor without exploration noise
    Eval {
        /// Run directory holding config.cfg and checkpoints
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure classes mapped onto exit codes.
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::UnknownKey { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            manifest,
            out,
            seed,
            remote,
        } => run::cmd_train(&config, manifest.as_deref(), out, seed, remote.as_deref()).map(|dir| println!("{}", dir.display())),
        Command::Bench {
            config,
            variants,
            seeds,
            out,
            parallel,
        } => bench::cmd_bench(&config, &variants, &seeds, out, parallel),
        Command::ExportPlots { runs, out } => export::cmd_export_plots(&runs, &out),
        Command::Serve { config, bind } => cmd_serve(&config, &bind),
        Command::Eval { run, episodes, seed } => run::cmd_eval(&run, episodes, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_serve(args: &ConfigArgs, bind: &str) -> Result<(), Failure> {
    let cfg = run::load_config(args, None)?;
    let arm = cfg.arm.build()?;
    let listener = TcpListener::bind(bind).map_err(|e| Failure::Runtime(anyhow::anyhow!("cannot bind {bind}: {e}")))?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).map_err(|e| Failure::Runtime(e.into()))?;
    println!("listening on {}", listener.local_addr()?);
    serve_env(listener, arm, cfg.task, &stop).map_err(|e| Failure::Runtime(e.into()))?;
    log::info!("server stopped");
    Ok(())
}
