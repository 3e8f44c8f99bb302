use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use shellm::commands::{self, EvaluationInput};
use shellm::config::{load_config, AppConfig, CliOverrides};
use shellm_core::{BackendKind, PricingConfig};

#[derive(Parser)]
#[command(name = "shellm", version, about = "LLM-backed SSH shell honeypot")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Remote,
    Scripted,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Remote => BackendKind::Remote,
            BackendArg::Scripted => BackendKind::Scripted,
        }
    }
}

#[derive(Args)]
struct BackendFlags {
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// JSON script for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the SSH honeypot.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Interactive session on stdin/stdout, no SSH.
    Chat {
        #[command(flatten)]
        backend: BackendFlags,
    },
    /// Re-run a transcript's commands and diff the outputs.
    Replay {
        transcript: PathBuf,
        #[command(flatten)]
        backend: BackendFlags,
        #[arg(long)]
        json: bool,
    },
    /// Deception metrics from annotations or confusion counts.
    Evaluate {
        /// CSV with session_id,turn_index,command,attacker_label,expert_label.
        #[arg(long, conflicts_with = "counts", required_unless_present = "counts")]
        annotations: Option<PathBuf>,
        /// `tp=41,fp=17,fn=1,tn=167` or a JSON file of counts.
        #[arg(long)]
        counts: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Token cost of stored transcripts.
    Cost {
        /// Transcript directory or a single transcript file.
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn overrides(port: Option<u16>, flags: &BackendFlags) -> CliOverrides {
    CliOverrides {
        port,
        backend: flags.backend.map(Into::into),
        script: flags.script.clone(),
    }
}

fn load(cli_config: Option<&PathBuf>, overrides: CliOverrides) -> Result<AppConfig> {
    let loaded = load_config(cli_config.map(PathBuf::as_path), std::env::vars(), &overrides)?;
    init_logging(&loaded.config.log_level);
    for warning in &loaded.warnings {
        tracing::warn!("{warning}");
    }
    Ok(loaded.config)
}

fn init_logging(level: &str) {
    let level = level.parse().unwrap_or(tracing::Level::INFO);
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve { port, backend } => {
            let config = load(cli.config.as_ref(), overrides(port, &backend))?;
            commands::serve(&config).await
        }
        Command::Chat { backend } => {
            let config = load(cli.config.as_ref(), overrides(None, &backend))?;
            let summary = commands::chat(&config, tokio::io::stdin(), tokio::io::stdout()).await?;
            tracing::info!(turns = summary.turns, transcript = ?summary.transcript, "chat finished");
            Ok(())
        }
        Command::Replay {
            transcript,
            backend,
            json,
        } => {
            let config = load(cli.config.as_ref(), overrides(None, &backend))?;
            let report = commands::replay(&config, &transcript).await?;
            if json {
                print_json(&report)
            } else {
                print!("{}", commands::render_replay(&report));
                Ok(())
            }
        }
        Command::Evaluate {
            annotations,
            counts,
            json,
        } => {
            init_logging("warn");
            let input = match (annotations, counts) {
                (Some(path), _) => EvaluationInput::Annotations(path),
                (None, Some(spec)) => EvaluationInput::Counts(spec),
                (None, None) => anyhow::bail!("one of --annotations or --counts is required"),
            };
            let report = commands::evaluate(&input)?;
            if json {
                print_json(&report)
            } else {
                print!("{}", commands::render_evaluation(&report));
                Ok(())
            }
        }
        Command::Cost { transcripts, json } => {
            // pricing is the only setting used here, so a config file is optional
            let pricing = match &cli.config {
                Some(path) => pricing_from(path)?,
                None => PricingConfig::default(),
            };
            init_logging("warn");
            let summary = commands::cost(&pricing, &transcripts)?;
            if json {
                print_json(&summary)
            } else {
                print!("{}", commands::render_cost(&summary));
                Ok(())
            }
        }
    }
}

fn pricing_from(path: &PathBuf) -> Result<PricingConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
    match table.get("pricing") {
        Some(value) => value.clone().try_into().context("invalid [pricing] section"),
        None => Ok(PricingConfig::default()),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("shellm: error: {message}");
            ExitCode::FAILURE
        }
    }
}
