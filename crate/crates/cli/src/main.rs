mod commands;
mod config;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dsb_core::energy_rpc::{self, PROTOCOL_VERSION};
use dsb_core::targets::{Energy, StateSpace};

use commands::Overrides;
use config::{config_error, ConfigError, ExperimentConfig, RpcSpec, PRESETS};

#[derive(Parser)]
#[command(name = "dsb", version, about = "Discrete diffusion samplers and data-to-energy bridges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct EnergyFlags {
    /// Energy server command line, split on whitespace.
    #[arg(long)]
    energy_cmd: Option<String>,
    /// Energy server address (host:port).
    #[arg(long)]
    energy_addr: Option<String>,
}

#[derive(Args)]
struct Common {
    /// Config file or preset name.
    config: String,
    /// Run directory (replaces `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    energy: EnergyFlags,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            energy_cmd: self.energy.energy_cmd.clone(),
            energy_addr: self.energy.energy_addr.clone(),
            ..Overrides::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a diffusion sampler.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Fit a data-to-energy bridge.
    Bridge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        /// Drop the off-policy buffer and MCMC refresh.
        #[arg(long)]
        on_policy: bool,
    },
    /// Recompute the report of a finished run.
    Eval {
        /// Run directory.
        run: PathBuf,
        /// Config to use instead of the run's own.
        #[arg(long)]
        config: Option<String>,
        /// Checkpoint directory (default: <run>/checkpoint, or <run> for MCMC runs).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        energy: EnergyFlags,
    },
    /// Run the MCMC baseline.
    Mcmc {
        #[command(flatten)]
        common: Common,
    },
    /// Check an energy server against the in-process energy.
    ServeFixtureCheck {
        /// Config whose target the server should reproduce (default: sum of symbols).
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 10_000)]
        states: usize,
        #[arg(long, default_value_t = 1e-12)]
        tolerance: f64,
        #[arg(long)]
        timeout_secs: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        energy: EnergyFlags,
    },
    /// List the shipped presets, or print one as TOML.
    Preset { name: Option<String> },
    /// Serve an in-process energy over the energy protocol.
    #[command(hide = true)]
    FixtureServer {
        /// Serve this config's target instead of the sum of symbols.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        c: usize,
        /// Listen on TCP instead of stdio.
        #[arg(long)]
        listen: Option<String>,
        #[arg(long, default_value_t = PROTOCOL_VERSION)]
        protocol_version: u64,
    },
}

fn load(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::load(name)
}

fn rpc_from_flags(energy: &EnergyFlags, timeout_secs: Option<f64>) -> Result<RpcSpec> {
    let command = energy.energy_cmd.as_deref().map(commands::split_command).transpose()?;
    let spec = RpcSpec { command, addr: energy.energy_addr.clone(), timeout_secs };
    spec.endpoint()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, epochs } => {
            let o = Overrides { epochs, ..common.overrides() };
            let dir = commands::train(load(&common.config)?, &o)?;
            println!("{}", dir.display());
        }
        Command::Bridge { common, iterations, on_policy } => {
            let o = Overrides { iterations, on_policy, ..common.overrides() };
            let dir = commands::bridge(load(&common.config)?, &o)?;
            println!("{}", dir.display());
        }
        Command::Mcmc { common } => {
            let dir = commands::mcmc(load(&common.config)?, &common.overrides())?;
            println!("{}", dir.display());
        }
        Command::Eval { run, config, checkpoint, report, energy } => {
            let mut cfg = match config {
                Some(c) => load(&c)?,
                None => commands::run_config(&run)?,
            };
            let o = Overrides { energy_cmd: energy.energy_cmd, energy_addr: energy.energy_addr, ..Overrides::default() };
            o.apply(&mut cfg)?;
            let checkpoint = checkpoint.unwrap_or_else(|| {
                if cfg.mcmc.is_some() {
                    run.clone()
                } else {
                    run.join(run::CHECKPOINT)
                }
            });
            let text = commands::eval(&cfg, &checkpoint)?.to_json()?;
            match report {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::ServeFixtureCheck { config, states, tolerance, timeout_secs, seed, energy } => {
            let rpc = rpc_from_flags(&energy, timeout_secs)?;
            let expected = match config {
                Some(c) => {
                    let cfg = load(&c)?;
                    let spec = cfg.target.as_ref().ok_or_else(|| config_error("missing [target] block"))?;
                    Some(spec.build(None)?)
                }
                None => None,
            };
            let (n, worst) = commands::fixture_check(&rpc, expected.as_deref(), states, tolerance, seed)?;
            println!("ok: {n} states, max |ΔE| = {worst:e}");
        }
        Command::Preset { name: None } => {
            for p in PRESETS {
                println!("{p}");
            }
        }
        Command::Preset { name: Some(name) } => {
            let cfg = config::preset(&name).ok_or_else(|| config_error(format!("unknown preset `{name}`")))?;
            print!("{}", cfg.to_toml()?);
        }
        Command::FixtureServer { config, d, c, listen, protocol_version } => {
            let energy: Box<dyn Energy> = match config {
                Some(path) => {
                    let cfg = load(&path)?;
                    cfg.target.as_ref().ok_or_else(|| config_error("missing [target] block"))?.build(None)?
                }
                None => Box::new(energy_rpc::sum_symbols(StateSpace::new(d, c)?)),
            };
            commands::fixture_server(energy.as_ref(), listen.as_deref(), protocol_version)?;
        }
    }
    Ok(())
}

/// 2 for configuration problems, 3 for anything that aborted a run.
fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>()
            || e.is::<toml::de::Error>()
            || matches!(
                e.downcast_ref::<dsb_core::Error>(),
                Some(dsb_core::Error::Config(_) | dsb_core::Error::Schedule(_) | dsb_core::Error::Capacity { .. })
            )
    });
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
