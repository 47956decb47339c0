use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use hamgp_cli::artifacts::{config_for_chain, sibling, CHAIN_FILE};
use hamgp_cli::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "hamgp",
    version,
    about = "Learn port-Hamiltonian dynamics with reduced-rank GPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle Gibbs sampler and write chain artifacts.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the posterior mean flow field against the truth.
    #[command(name = "eval-flowmap")]
    EvalFlowmap {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate posterior samples forward on a scenario.
    Predict {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        chain: Option<PathBuf>,
        /// `train` or `test`.
        #[arg(long, default_value = "test")]
        scenario: String,
        /// Overrides `prediction.samples`.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Acceptance rates, trace summaries and histograms.
    Diagnose {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print a complete config with every default filled in.
    Init {
        /// input-state, input-output or smoke.
        #[arg(long, default_value = "input-state")]
        preset: String,
    },
}

/// The chain path and the config that produced it.
fn resolve(config: Option<&Path>, chain: Option<PathBuf>) -> Result<(ExperimentConfig, PathBuf)> {
    match chain {
        Some(chain) => Ok((config_for_chain(config, &chain)?, chain)),
        None => {
            let Some(path) = config else {
                anyhow::bail!(
                    "give --chain, or -c to use the chain in the config's output directory"
                );
            };
            let cfg = ExperimentConfig::load(path)?;
            let chain = cfg.output.dir.join(CHAIN_FILE);
            Ok((cfg, chain))
        }
    }
}

fn out_dir(out: Option<PathBuf>, chain: &Path) -> PathBuf {
    out.unwrap_or_else(|| sibling(chain, ""))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let outcome = hamgp_cli::train(&cfg, &dir)?;
            println!(
                "wrote {} records to {}",
                outcome.manifest.records,
                dir.join(CHAIN_FILE).display()
            );
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::EvalFlowmap { config, chain, out } => {
            let (cfg, chain) = resolve(config.as_deref(), chain)?;
            let r = hamgp_cli::eval_flowmap(&cfg, &chain, &out_dir(out, &chain))?;
            println!(
                "flow magnitude RMSE {:.6}, flow angle RMSE {:.6} rad ({} cells, {} excluded from the angle metric, {} samples)",
                r.magnitude_rmse, r.angle_rmse, r.cells, r.angle_excluded_cells, r.mean_model.samples
            );
        }
        Command::Predict {
            config,
            chain,
            scenario,
            samples,
            out,
        } => {
            let (cfg, chain) = resolve(config.as_deref(), chain)?;
            let sc = cfg.scenario_named(&scenario)?.clone();
            let n = samples.unwrap_or(cfg.prediction.samples);
            let r = hamgp_cli::predict(&cfg, &chain, &sc, n, &out_dir(out, &chain))?;
            println!("mean-model state RMSE {:.6}", r.mean_state_rmse);
            for c in &r.energy_checks {
                println!(
                    "{}: max energy increase after input settles {:.3e}",
                    c.label, c.max_energy_increase
                );
            }
        }
        Command::Diagnose { config, chain, out } => {
            let (cfg, chain) = resolve(config.as_deref(), chain)?;
            let r = hamgp_cli::diagnose(&cfg, &chain, &out_dir(out, &chain))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&(&r.acceptance, &r.traces))?
            );
        }
        Command::Config {
            action: ConfigAction::Init { preset },
        } => {
            println!("{}", ExperimentConfig::preset(&preset)?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
