use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hedgelab::analysis::{rerun, run, AgentKind, Command, RunConfig, RunManifest, Strategy};
use hedgelab::deep_mvh::Parametrization;
use hedgelab::HedgeError;

#[derive(Parser)]
#[command(name = "hedgelab", version, about = "Train and compare option hedging agents")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Flags shared by every subcommand; they override values from `--config`.
#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test episodes per evaluation.
    #[arg(long)]
    episodes: Option<usize>,
    /// Drop the option delta from the agents' observations.
    #[arg(long)]
    no_delta_feature: bool,
    #[arg(long, value_parser = parse_parametrization)]
    parametrization: Option<Parametrization>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the DDPG agent.
    TrainDdpg(Common),
    /// Train the deep-MVH policy stack.
    TrainMvh(Common),
    /// Evaluate strategies on test paths.
    Eval {
        #[command(flatten)]
        common: Common,
        /// delta, ddpg or deep_mvh; repeatable.
        #[arg(long = "strategy", value_parser = parse_strategy, default_values = ["delta"])]
        strategies: Vec<Strategy>,
        /// Directory holding `ddpg/` and `deep_mvh/` checkpoints (default: the output directory).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Run the sweep described by the config file.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Train once on the base setup instead of once per cell.
        #[arg(long)]
        frozen_agent: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// SHAP attributions of a trained agent.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Train one agent from several seeds and compare learning curves.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_agent)]
        agent: AgentKind,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// Repeat a run from its manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_parametrization(s: &str) -> Result<Parametrization, String> {
    s.parse().map_err(|e: HedgeError| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: HedgeError| e.to_string())
}

fn parse_agent(s: &str) -> Result<AgentKind, String> {
    s.parse().map_err(|e: HedgeError| e.to_string())
}

fn load_config(c: &Common) -> hedgelab::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.to_string_lossy().into_owned();
    }
    if let Some(n) = c.episodes {
        cfg.test_episodes = n;
    }
    if c.no_delta_feature {
        cfg.include_delta = false;
    }
    if let Some(p) = c.parametrization {
        cfg.parametrization = Some(p);
    }
    Ok(cfg)
}

fn dispatch(cmd: Cmd) -> hedgelab::Result<RunManifest> {
    match cmd {
        Cmd::TrainDdpg(c) => run(&Command::TrainDdpg, &load_config(&c)?),
        Cmd::TrainMvh(c) => run(&Command::TrainMvh, &load_config(&c)?),
        Cmd::Eval {
            common,
            strategies,
            models,
        } => {
            let cfg = load_config(&common)?;
            let models = models.unwrap_or_else(|| PathBuf::from(&cfg.out));
            run(&Command::Eval { strategies, models }, &cfg)
        }
        Cmd::Sweep {
            common,
            frozen_agent,
            workers,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.frozen_agent |= frozen_agent;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            run(&Command::Sweep, &cfg)
        }
        Cmd::Explain {
            common,
            strategy,
            models,
        } => {
            let cfg = load_config(&common)?;
            let models = models.unwrap_or_else(|| PathBuf::from(&cfg.out));
            run(&Command::Explain { strategy, models }, &cfg)
        }
        Cmd::Stability {
            common,
            agent,
            n_seeds,
        } => run(&Command::Stability { agent, n_seeds }, &load_config(&common)?),
        Cmd::Rerun { manifest, out } => rerun(&manifest, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(m) => {
            println!(
                "wrote {} files to {} in {:.1}s",
                m.outputs.len(),
                m.config.out,
                m.wall_clock_secs
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HedgeError::Usage(_) | HedgeError::Config(_) | HedgeError::Toml(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
