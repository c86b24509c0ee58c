use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use trustgate_core::config::RunConfig;
use trustgate_core::exec::ExecMode;
use trustgate_core::experiment::{calibrate_oracle, run_acquisition_ablation, simulate};
use trustgate_service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "trustgate", version, about = "Trust-calibrated policy gateway for agent tool calls")]
struct Cli {
    /// Log level on stderr: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the drifting-supervisor simulation and write per-step logs and aggregates.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare uncertainty-driven and random escalation.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report stream-level statistics of the simulated supervisor.
    CalibrateOracle {
        #[command(flatten)]
        run: RunArgs,
        /// Writes the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective run config as TOML.
    ShowConfig {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Serve the gateway over HTTP.
    Serve {
        /// Service config (TOML); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory for the event log and snapshots; in-memory when absent.
        #[arg(long)]
        state_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run config (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds 0..N instead of the configured lists.
    #[arg(long)]
    seeds: Option<u64>,
    /// Runs seeds one after another.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(n) = self.seeds {
            if n == 0 {
                bail!("--seeds must be positive");
            }
            config.seeds = (0..n).collect();
            config.ablation.seeds = config.seeds.clone();
        }
        config.validate()?;
        Ok(config)
    }

    fn mode(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_max_level(cli.log_level).with_writer(std::io::stderr).init();

    match cli.command {
        Command::Simulate { run, out } => {
            let config = run.load()?;
            let sim = simulate(&config, run.mode())?;
            let aggregate = sim.emit(&out)?;
            tracing::info!(out = %out.display(), seeds = config.seeds.len(), "simulation written");
            println!("{}", serde_json::to_string_pretty(&aggregate)?);
        }
        Command::Ablate { run, out } => {
            let config = run.load()?;
            let report = run_acquisition_ablation(&config, run.mode())?;
            report.emit(&out)?;
            for (name, regime) in &report.regimes {
                println!(
                    "{name}: gap {:+.2} ± {:.2} pp over {} seeds",
                    regime.gap_pp.mean,
                    regime.gap_pp.std,
                    report.seeds.len()
                );
            }
        }
        Command::CalibrateOracle { run, out } => {
            let report = serde_json::to_string_pretty(&calibrate_oracle(&run.load()?)?)? + "\n";
            match out {
                Some(path) => std::fs::write(&path, report).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{report}"),
            }
        }
        Command::ShowConfig { run } => print!("{}", run.load()?.to_toml_string()?),
        Command::Serve { config, host, port, state_dir } => {
            let config = match config {
                Some(path) => ServiceConfig::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => ServiceConfig::default(),
            };
            trustgate_service::run(config, SocketAddr::new(host, port), state_dir)?;
        }
    }
    Ok(())
}
