//! The operations behind each CLI subcommand. Every run writes its outputs
//! under `config.out` together with a `manifest.json` that can be rerun.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::analysis::config::RunConfig;
use crate::analysis::report::{
    comparison_histogram, emit_histogram, episode_costs, test_paths, write_costs_csv, write_reports_csv, EpisodeCosts,
};
use crate::analysis::stability::{training_stability, write_stability, AgentKind};
use crate::analysis::sweep::{run_sweep, Strategy, SweepSpec};
use crate::ddpg::{self, DdpgAgent};
use crate::deep_mvh::{self, PolicyStack};
use crate::error::{HedgeError, Result};
use crate::explain::{
    collect_step_states, explain_instances, per_step_heatmap, pooled_sample, shap_variable_importance, write_heatmap_csv,
    write_importance_csv, write_phi_csv, ShapConfig,
};
use crate::hedging_env::{DeltaHedger, EnvConfig, Hedger};
use crate::market_sim::SeedToken;
use crate::svg;

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";
const DEFAULT_STABILITY_SEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    TrainMvh,
    TrainDdpg,
    /// `models` holds `deep_mvh/` and `ddpg/` checkpoint directories.
    Eval { strategies: Vec<Strategy>, models: PathBuf },
    Sweep,
    Explain { strategy: Strategy, models: PathBuf },
    /// Seeds come from the config's `seeds` if it lists two or more, else `seed, seed + 1, ...`.
    Stability { agent: AgentKind, n_seeds: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub version: String,
    /// Files written, relative to `config.out`.
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HedgeError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub enum LoadedAgent {
    Mvh(PolicyStack),
    Ddpg(DdpgAgent),
}

impl LoadedAgent {
    pub fn hedger(&self) -> &dyn Hedger {
        match self {
            LoadedAgent::Mvh(s) => s,
            LoadedAgent::Ddpg(a) => a,
        }
    }
}

/// Checkpoint directory of a strategy below `models`.
pub fn checkpoint_dir(models: &Path, strategy: Strategy) -> PathBuf {
    models.join(strategy.label())
}

pub fn load_agent(models: &Path, strategy: Strategy) -> Result<LoadedAgent> {
    let dir = checkpoint_dir(models, strategy);
    match strategy {
        Strategy::DeepMvh => Ok(LoadedAgent::Mvh(PolicyStack::load(&dir)?)),
        Strategy::Ddpg => Ok(LoadedAgent::Ddpg(DdpgAgent::load(&dir)?)),
        Strategy::Delta => Err(HedgeError::Usage("the delta hedge has no checkpoint".into())),
    }
}

struct Outputs<'a> {
    root: &'a Path,
    files: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn write(&mut self, name: impl Into<PathBuf>, body: &[u8]) -> Result<()> {
        let rel = name.into();
        let path = self.root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HedgeError::io(parent, e))?;
        }
        fs::write(&path, body).map_err(|e| HedgeError::io(&path, e))?;
        self.files.push(rel);
        Ok(())
    }

    fn csv<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|e| HedgeError::io(self.root.join(name), e))?;
        self.write(name, &buf)
    }

    /// Records every file below `rel`, sorted by name.
    fn record_dir(&mut self, rel: &str) -> Result<()> {
        let dir = self.root.join(rel);
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| HedgeError::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| Path::new(rel).join(e.file_name()))
            .collect();
        names.sort();
        self.files.extend(names);
        Ok(())
    }
}

fn curve_svg(curve: &[f64], title: &str, x: &str, y: &str) -> String {
    svg::lines(
        &[svg::LineSeries {
            name: title.to_string(),
            values: curve,
        }],
        title,
        x,
        y,
    )
}

fn train_mvh_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let env = cfg.env()?;
    let trained = deep_mvh::train_mvh(&cfg.mvh()?, &env, cfg.seed)?;
    trained.stack.save(&checkpoint_dir(out.root, Strategy::DeepMvh))?;
    out.record_dir(Strategy::DeepMvh.label())?;
    out.csv("deep_mvh_curve.csv", |w| deep_mvh::write_curve_csv(&trained.curve, w))?;
    let chart = curve_svg(&trained.curve, "deep-MVH training", "epoch", "signed log loss");
    out.write("deep_mvh_curve.svg", chart.as_bytes())
}

fn train_ddpg_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let env = cfg.env()?;
    let trained = ddpg::train(&cfg.ddpg()?, &env, cfg.seed)?;
    trained.agent.save(&checkpoint_dir(out.root, Strategy::Ddpg))?;
    out.record_dir(Strategy::Ddpg.label())?;
    out.csv("ddpg_curve.csv", |w| ddpg::write_curve_csv(&trained.curve, w))?;
    let chart = curve_svg(&trained.curve, "DDPG training", "episode", "episode reward");
    out.write("ddpg_curve.svg", chart.as_bytes())
}

/// Evaluates strategies on the same test paths of `cfg.seed`.
pub fn evaluate_strategies(cfg: &RunConfig, env: &EnvConfig, strategies: &[Strategy], models: &Path) -> Result<Vec<EpisodeCosts>> {
    let paths = test_paths(env, cfg.test_episodes, SeedToken::test(cfg.seed))?;
    strategies
        .iter()
        .map(|&s| match s {
            Strategy::Delta => episode_costs(&DeltaHedger { env: *env }, env, &paths),
            _ => episode_costs(load_agent(models, s)?.hedger(), env, &paths),
        })
        .collect()
}

fn eval_cmd(cfg: &RunConfig, strategies: &[Strategy], models: &Path, out: &mut Outputs) -> Result<()> {
    if strategies.is_empty() {
        return Err(HedgeError::Usage("eval needs at least one strategy".into()));
    }
    let env = cfg.env()?;
    let costs = evaluate_strategies(cfg, &env, strategies, models)?;
    let reports = costs
        .iter()
        .map(|c| c.report(cfg.binning()))
        .collect::<Result<Vec<_>>>()?;
    out.csv("eval.csv", |w| write_reports_csv(&reports, w))?;
    out.csv("eval_costs.csv", |w| write_costs_csv(&costs, w))?;
    out.write("eval_reports.json", serde_json::to_string_pretty(&reports)?.as_bytes())?;
    for r in &reports {
        let rel = PathBuf::from(format!("histogram_{}.svg", r.label));
        emit_histogram(r, &out.root.join(&rel))?;
        out.files.push(rel);
    }
    let chart = comparison_histogram(&costs, cfg.binning(), "total hedging cost")?;
    out.write("eval_histogram.svg", chart.as_bytes())
}

/// SHAP variable importance of a trained agent. For deep-MVH, `per_step`
/// holds one row per step network and `values` is their mean.
pub struct Importance {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub per_step: Option<Array2<f64>>,
    pub phi: Option<crate::explain::ShapResult>,
}

/// Background and instances are states the agent itself visits on the background stream of `seed`.
pub fn shap_importance(agent: &LoadedAgent, env: &EnvConfig, background: usize, instances: usize, seed: u64) -> Result<Importance> {
    let features = match agent {
        LoadedAgent::Mvh(s) => s.features,
        LoadedAgent::Ddpg(a) => a.features,
    };
    let names: Vec<String> = features.names().iter().map(|s| s.to_string()).collect();
    let n_episodes = background.max(instances);
    let states = collect_step_states(env, agent.hedger(), features, n_episodes, seed)?;
    match agent {
        LoadedAgent::Mvh(stack) => {
            let heat = per_step_heatmap(stack, &states, background, instances)?;
            let values = heat.mean_axis(Axis(0)).expect("at least one step").to_vec();
            Ok(Importance {
                names,
                values,
                per_step: Some(heat),
                phi: None,
            })
        }
        LoadedAgent::Ddpg(a) => {
            let cfg = ShapConfig::new(pooled_sample(&states, background), names.clone())?;
            let inst = pooled_sample(&states[..], instances);
            let f = |x: ArrayView2<f64>| a.act_raw(x);
            let result = explain_instances(&f, inst.view(), &cfg)?;
            let values = shap_variable_importance(&result)?;
            Ok(Importance {
                names,
                values,
                per_step: None,
                phi: Some(result),
            })
        }
    }
}

fn explain_cmd(cfg: &RunConfig, strategy: Strategy, models: &Path, out: &mut Outputs) -> Result<()> {
    let env = cfg.env()?;
    let agent = load_agent(models, strategy)?;
    let imp = shap_importance(&agent, &env, cfg.shap_background, cfg.shap_instances, cfg.seed)?;
    out.csv("shap_importance.csv", |w| write_importance_csv(&imp.values, &imp.names, w))?;
    if let Some(phi) = &imp.phi {
        out.csv("shap_phi.csv", |w| write_phi_csv(phi, w))?;
    }
    if let Some(heat) = &imp.per_step {
        let names: Vec<&str> = imp.names.iter().map(String::as_str).collect();
        out.csv("shap_heatmap.csv", |w| write_heatmap_csv(heat, &names, w))?;
        let chart = crate::explain::heatmap_svg(heat, &names, "SHAP variable importance by step");
        out.write("shap_heatmap.svg", chart.as_bytes())?;
    }
    Ok(())
}

fn stability_seeds(cfg: &RunConfig, n_seeds: Option<usize>) -> Vec<u64> {
    if cfg.seeds.len() >= 2 && n_seeds.is_none() {
        cfg.seeds.clone()
    } else {
        let n = n_seeds.unwrap_or(DEFAULT_STABILITY_SEEDS) as u64;
        (cfg.seed..cfg.seed + n).collect()
    }
}

fn stability_cmd(cfg: &RunConfig, agent: AgentKind, n_seeds: Option<usize>, out: &mut Outputs) -> Result<()> {
    let seeds = stability_seeds(cfg, n_seeds);
    let run = training_stability(agent, &seeds, &cfg.env()?, &cfg.mvh()?, &cfg.ddpg()?)?;
    let files = write_stability(&run, out.root)?;
    out.files.extend(files);
    let mut summary = Vec::new();
    writeln!(summary, "agent,n_seeds,spread").map_err(|e| HedgeError::io(out.root, e))?;
    writeln!(
        summary,
        "{},{},{}",
        match agent {
            AgentKind::DeepMvh => "deep_mvh",
            AgentKind::Ddpg => "ddpg",
        },
        seeds.len(),
        run.spread()
    )
    .map_err(|e| HedgeError::io(out.root, e))?;
    out.write("stability_summary.csv", &summary)
}

fn command_seeds(command: &Command, cfg: &RunConfig) -> Vec<u64> {
    match command {
        Command::Sweep => cfg.seed_list(),
        Command::Stability { n_seeds, .. } => stability_seeds(cfg, *n_seeds),
        _ => vec![cfg.seed],
    }
}

/// Runs `command` into `config.out` and writes its manifest there.
pub fn run(command: &Command, config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let root = PathBuf::from(&config.out);
    fs::create_dir_all(&root).map_err(|e| HedgeError::io(&root, e))?;
    let mut out = Outputs {
        root: &root,
        files: Vec::new(),
    };
    match command {
        Command::TrainMvh => train_mvh_cmd(config, &mut out)?,
        Command::TrainDdpg => train_ddpg_cmd(config, &mut out)?,
        Command::Eval { strategies, models } => eval_cmd(config, strategies, models, &mut out)?,
        Command::Explain { strategy, models } => explain_cmd(config, *strategy, models, &mut out)?,
        Command::Stability { agent, n_seeds } => stability_cmd(config, *agent, *n_seeds, &mut out)?,
        Command::Sweep => {
            let spec = SweepSpec::from_config(config)?;
            let outcome = run_sweep(&spec, &root)?;
            out.files.extend(outcome.files);
        }
    }
    let manifest = RunManifest {
        command: command.clone(),
        config: config.clone(),
        seeds: command_seeds(command, config),
        version: VERSION.to_string(),
        outputs: out
            .files
            .iter()
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .collect(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| HedgeError::io(&path, e))?;
    Ok(manifest)
}

/// Repeats a recorded run, writing into `out` (or the original directory).
pub fn rerun(manifest_path: &Path, out: Option<&Path>) -> Result<RunManifest> {
    let manifest = RunManifest::load(manifest_path)?;
    let mut config = manifest.config;
    if let Some(dir) = out {
        config.out = dir.to_string_lossy().into_owned();
    }
    run(&manifest.command, &config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> RunConfig {
        RunConfig {
            out: out.to_string_lossy().into_owned(),
            maturity_days: Some(5),
            test_episodes: 100,
            mvh_hidden: Some(vec![4]),
            mvh_epochs: Some(2),
            mvh_samples: Some(200),
            mvh_minibatch: Some(100),
            ddpg_episodes: Some(30),
            ddpg_warmup: Some(64),
            shap_background: 10,
            shap_instances: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn eval_without_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = Command::Eval {
            strategies: vec![Strategy::Delta, Strategy::DeepMvh],
            models: dir.path().join("nowhere"),
        };
        assert!(matches!(run(&cmd, &tiny(dir.path())), Err(HedgeError::MissingCheckpoint(_))));
    }

    #[test]
    fn train_eval_explain_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let m = run(&Command::TrainMvh, &cfg).unwrap();
        assert!(m.outputs.iter().any(|f| f == "deep_mvh/manifest.json"));
        let eval = Command::Eval {
            strategies: vec![Strategy::Delta, Strategy::DeepMvh],
            models: dir.path().to_path_buf(),
        };
        let m = run(&eval, &cfg).unwrap();
        for f in &m.outputs {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let explain = Command::Explain {
            strategy: Strategy::DeepMvh,
            models: dir.path().to_path_buf(),
        };
        let m = run(&explain, &cfg).unwrap();
        assert!(m.outputs.contains(&"shap_heatmap.csv".to_string()));
    }

    #[test]
    fn rerun_reproduces_csv_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run(&Command::TrainDdpg, &tiny(a.path())).unwrap();
        let second = rerun(&a.path().join(MANIFEST_FILE), Some(b.path())).unwrap();
        assert_eq!(first.outputs, second.outputs);
        for f in first.outputs.iter().filter(|f| f.ends_with(".csv")) {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn stability_rejects_a_single_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = Command::Stability {
            agent: AgentKind::DeepMvh,
            n_seeds: Some(1),
        };
        assert!(matches!(run(&cmd, &tiny(dir.path())), Err(HedgeError::Usage(_))));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            sweep_axis: Some("alpha".into()),
            sweep_values: vec![0.0, 0.01],
            strategies: vec!["delta".into()],
            ..tiny(dir.path())
        };
        let m = run(&Command::Sweep, &cfg).unwrap();
        let loaded = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        assert!(m.outputs.contains(&"sweep.csv".to_string()));
    }
}
