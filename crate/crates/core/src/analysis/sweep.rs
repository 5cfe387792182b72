//! Grid sweeps over one environment or training parameter.
//!
//! Each (cell, seed) job trains its own agents on the cell's environment
//! (unless `frozen_agent`), evaluates every strategy on the same test paths
//! and writes into its own directory. Jobs run on a bounded rayon pool and
//! come back in grid order, so outputs do not depend on the worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::config::RunConfig;
use crate::analysis::report::{
    comparison_histogram, episode_costs, report_fields, test_paths, write_costs_csv, Binning, EpisodeCosts,
    EvalReport, REPORT_HEADER,
};
use crate::ddpg::{self, DdpgAgent, DdpgConfig};
use crate::deep_mvh::{self, MvhTrainConfig, PolicyStack};
use crate::error::{HedgeError, Result};
use crate::hedging_env::{DeltaHedger, EnvConfig, Hedger};
use crate::market_sim::SeedToken;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Lambda,
    Sigma,
    /// Trading days to maturity.
    Maturity,
    Gamma,
    /// Deep-MVH and DDPG actor learning rate; the DDPG critic gets ten times the value.
    Lr,
    /// Hidden layers of the deep-MVH step networks and the DDPG actor; the critic gets twice the widths.
    Architecture,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Sigma => "sigma",
            SweepAxis::Maturity => "maturity",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Lr => "lr",
            SweepAxis::Architecture => "architecture",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = HedgeError;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            SweepAxis::Alpha,
            SweepAxis::Lambda,
            SweepAxis::Sigma,
            SweepAxis::Maturity,
            SweepAxis::Gamma,
            SweepAxis::Lr,
            SweepAxis::Architecture,
        ];
        all.into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| HedgeError::Config(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellValue {
    Scalar(f64),
    Layers(Vec<usize>),
}

impl CellValue {
    pub fn label(&self) -> String {
        match self {
            CellValue::Scalar(v) => v.to_string(),
            CellValue::Layers(h) => h.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Delta,
    Ddpg,
    DeepMvh,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::Delta => "delta",
            Strategy::Ddpg => "ddpg",
            Strategy::DeepMvh => "deep_mvh",
        }
    }
}

impl FromStr for Strategy {
    type Err = HedgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(Strategy::Delta),
            "ddpg" => Ok(Strategy::Ddpg),
            "deep_mvh" | "mvh" => Ok(Strategy::DeepMvh),
            other => Err(HedgeError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Environment and training configs of one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSetup {
    pub env: EnvConfig,
    pub mvh: MvhTrainConfig,
    pub ddpg: DdpgConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<CellValue>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub base: CellSetup,
    /// Same test paths in every cell; otherwise each cell gets its own salt.
    pub common_random_numbers: bool,
    pub frozen_agent: bool,
    pub workers: usize,
    pub binning: Binning,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, values: Vec<CellValue>, strategies: Vec<Strategy>, base: CellSetup) -> Self {
        SweepSpec {
            axis,
            values,
            strategies,
            seeds: vec![1],
            episodes: 1000,
            base,
            common_random_numbers: true,
            frozen_agent: false,
            workers: 1,
            binning: Binning::default(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let axis: SweepAxis = cfg
            .sweep_axis
            .as_deref()
            .ok_or_else(|| HedgeError::Config("sweep needs sweep_axis".into()))?
            .parse()?;
        let values = if axis == SweepAxis::Architecture {
            cfg.sweep_architectures.iter().cloned().map(CellValue::Layers).collect()
        } else {
            cfg.sweep_values.iter().copied().map(CellValue::Scalar).collect()
        };
        let strategies = cfg
            .strategies
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Strategy>>>()?;
        let spec = SweepSpec {
            axis,
            values,
            strategies,
            seeds: cfg.seed_list(),
            episodes: cfg.test_episodes,
            base: CellSetup {
                env: cfg.env()?,
                mvh: cfg.mvh()?,
                ddpg: cfg.ddpg()?,
            },
            common_random_numbers: cfg.common_random_numbers,
            frozen_agent: cfg.frozen_agent,
            workers: cfg.workers,
            binning: cfg.binning(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(HedgeError::Config("sweep grid is empty".into()));
        }
        if self.strategies.is_empty() {
            return Err(HedgeError::Config("sweep needs at least one strategy".into()));
        }
        if self.seeds.is_empty() || self.episodes == 0 || self.workers == 0 {
            return Err(HedgeError::Config("sweep needs seeds, episodes and workers".into()));
        }
        let layered = self.axis == SweepAxis::Architecture;
        for v in &self.values {
            if matches!(v, CellValue::Layers(_)) != layered {
                return Err(HedgeError::Config(format!(
                    "value {} does not fit axis {}",
                    v.label(),
                    self.axis.name()
                )));
            }
        }
        Ok(())
    }

    /// Applies one grid value to the base setup.
    pub fn cell(&self, value: &CellValue) -> Result<CellSetup> {
        let mut c = self.base.clone();
        match (self.axis, value) {
            (SweepAxis::Alpha, CellValue::Scalar(v)) => c.env.alpha = *v,
            (SweepAxis::Lambda, CellValue::Scalar(v)) => c.env.lambda_ra = *v,
            (SweepAxis::Sigma, CellValue::Scalar(v)) => c.env.market.sigma = *v,
            (SweepAxis::Gamma, CellValue::Scalar(v)) => c.env.gamma_discount = *v,
            (SweepAxis::Maturity, CellValue::Scalar(v)) => {
                if !(v.fract() == 0.0 && *v >= 1.0) {
                    return Err(HedgeError::Config(format!("maturity must be a whole number of days, got {v}")));
                }
                c.env = c.env.with_steps(*v as usize)?;
            }
            (SweepAxis::Lr, CellValue::Scalar(v)) => {
                c.mvh.lr = *v;
                c.ddpg.actor_lr = *v;
                c.ddpg.critic_lr = 10.0 * v;
            }
            (SweepAxis::Architecture, CellValue::Layers(h)) => {
                c.mvh.hidden = h.clone();
                c.ddpg.actor_hidden = h.clone();
                c.ddpg.critic_hidden = h.iter().map(|w| 2 * w).collect();
            }
            (axis, v) => {
                return Err(HedgeError::Config(format!("value {} does not fit axis {}", v.label(), axis.name())));
            }
        }
        c.env.validate()?;
        c.mvh.validate()?;
        c.ddpg.validate()?;
        Ok(c)
    }

    fn test_seed(&self, cell: usize, seed: u64) -> SeedToken {
        let token = SeedToken::test(seed);
        if self.common_random_numbers {
            token
        } else {
            token.with_salt(cell as u64 + 1)
        }
    }

    /// `cellNN_<axis>=<value>/seed<seed>`.
    pub fn job_dir(&self, cell: usize, seed: u64) -> PathBuf {
        PathBuf::from(format!("cell{cell:02}_{}={}", self.axis.name(), self.values[cell].label()))
            .join(format!("seed{seed}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub cell: usize,
    pub value: CellValue,
    pub seed: u64,
    pub strategy: Strategy,
    /// Error message if the cell failed for this strategy.
    pub outcome: std::result::Result<EvalReport, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    /// Written files, relative to the sweep directory.
    pub files: Vec<PathBuf>,
}

impl SweepOutcome {
    pub fn report(&self, cell: usize, seed: u64, strategy: Strategy) -> Option<&EvalReport> {
        self.records
            .iter()
            .find(|r| r.cell == cell && r.seed == seed && r.strategy == strategy)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepRecord> {
        self.records.iter().filter(|r| r.outcome.is_err())
    }
}

#[derive(Clone, Debug)]
enum Trained {
    Mvh(PolicyStack, Vec<f64>),
    Ddpg(DdpgAgent, Vec<f64>),
}

fn train(strategy: Strategy, setup: &CellSetup, seed: u64) -> Result<Option<Trained>> {
    Ok(match strategy {
        Strategy::Delta => None,
        Strategy::DeepMvh => {
            let out = deep_mvh::train_mvh(&setup.mvh, &setup.env, seed)?;
            Some(Trained::Mvh(out.stack, out.curve))
        }
        Strategy::Ddpg => {
            let out = ddpg::train(&setup.ddpg, &setup.env, seed)?;
            Some(Trained::Ddpg(out.agent, out.curve))
        }
    })
}

fn write_file(root: &Path, rel: PathBuf, body: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    let path = root.join(&rel);
    fs::write(&path, body).map_err(|e| HedgeError::io(&path, e))?;
    files.push(rel);
    Ok(())
}

struct JobResult {
    records: Vec<SweepRecord>,
    files: Vec<PathBuf>,
}

/// Frozen agents, trained once per seed on the base setup.
type FrozenAgents = Vec<(u64, Vec<(Strategy, std::result::Result<Trained, String>)>)>;

fn run_job(spec: &SweepSpec, cell: usize, seed: u64, frozen: &FrozenAgents, root: &Path) -> Result<JobResult> {
    let dir = spec.job_dir(cell, seed);
    fs::create_dir_all(root.join(&dir)).map_err(|e| HedgeError::io(root.join(&dir), e))?;
    let mut files = Vec::new();
    let mut records = Vec::new();
    let value = spec.values[cell].clone();
    let mut record = |strategy, outcome| {
        records.push(SweepRecord {
            cell,
            value: value.clone(),
            seed,
            strategy,
            outcome,
        })
    };

    let setup = match spec.cell(&spec.values[cell]) {
        Ok(s) => s,
        Err(e) => {
            for &s in &spec.strategies {
                record(s, Err(e.to_string()));
            }
            return Ok(JobResult { records, files });
        }
    };
    let paths = match test_paths(&setup.env, spec.episodes, spec.test_seed(cell, seed)) {
        Ok(p) => p,
        Err(e) => {
            for &s in &spec.strategies {
                record(s, Err(e.to_string()));
            }
            return Ok(JobResult { records, files });
        }
    };

    let mut costs: Vec<EpisodeCosts> = Vec::new();
    for &strategy in &spec.strategies {
        let trained = if spec.frozen_agent {
            frozen
                .iter()
                .find(|(s, _)| *s == seed)
                .and_then(|(_, agents)| agents.iter().find(|(k, _)| *k == strategy))
                .map(|(_, t)| t.clone().map(Some))
                .unwrap_or(Ok(None))
        } else {
            train(strategy, &setup, seed).map_err(|e| e.to_string())
        };
        let delta = DeltaHedger { env: setup.env };
        let evaluated = trained.and_then(|t| {
            let hedger: &dyn Hedger = match &t {
                None => &delta,
                Some(Trained::Mvh(stack, _)) => stack,
                Some(Trained::Ddpg(agent, _)) => agent,
            };
            let c = episode_costs(hedger, &setup.env, &paths).map_err(|e| e.to_string())?;
            Ok((t, c))
        });
        match evaluated {
            Ok((t, c)) => {
                if !spec.frozen_agent {
                    let curve = match &t {
                        Some(Trained::Mvh(_, curve)) => {
                            let mut buf = Vec::new();
                            deep_mvh::write_curve_csv(curve, &mut buf).map_err(|e| HedgeError::io(&dir, e))?;
                            Some(buf)
                        }
                        Some(Trained::Ddpg(_, curve)) => {
                            let mut buf = Vec::new();
                            ddpg::write_curve_csv(curve, &mut buf).map_err(|e| HedgeError::io(&dir, e))?;
                            Some(buf)
                        }
                        None => None,
                    };
                    if let Some(buf) = curve {
                        write_file(root, dir.join(format!("curve_{}.csv", strategy.label())), &buf, &mut files)?;
                    }
                }
                let report = c.report(spec.binning).map_err(|e| e.to_string());
                record(strategy, report);
                costs.push(EpisodeCosts {
                    label: strategy.label().to_string(),
                    ..c
                });
            }
            Err(e) => record(strategy, Err(e)),
        }
    }

    if !costs.is_empty() {
        let mut buf = Vec::new();
        write_costs_csv(&costs, &mut buf).map_err(|e| HedgeError::io(&dir, e))?;
        write_file(root, dir.join("costs.csv"), &buf, &mut files)?;
        let title = format!("{} = {}, seed {seed}", spec.axis.name(), spec.values[cell].label());
        let svg = comparison_histogram(&costs, spec.binning, &title)?;
        write_file(root, dir.join("histogram.svg"), svg.as_bytes(), &mut files)?;
    }
    Ok(JobResult { records, files })
}

/// Runs every (cell, seed) job and writes `sweep.csv` to `out_dir`.
/// A failing cell is recorded in the table and the sweep carries on.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path) -> Result<SweepOutcome> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| HedgeError::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| HedgeError::Config(format!("thread pool: {e}")))?;

    let frozen: FrozenAgents = if spec.frozen_agent {
        pool.install(|| {
            spec.seeds
                .par_iter()
                .map(|&seed| {
                    let agents = spec
                        .strategies
                        .iter()
                        .filter(|&&s| s != Strategy::Delta)
                        .map(|&s| {
                            let t = train(s, &spec.base, seed)
                                .map_err(|e| e.to_string())
                                .and_then(|t| t.ok_or_else(|| "no agent".to_string()));
                            (s, t)
                        })
                        .collect();
                    (seed, agents)
                })
                .collect()
        })
    } else {
        Vec::new()
    };

    let jobs: Vec<(usize, u64)> = (0..spec.values.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Result<JobResult>> =
        pool.install(|| jobs.par_iter().map(|&(c, s)| run_job(spec, c, s, &frozen, out_dir)).collect());

    let mut records = Vec::new();
    let mut files = Vec::new();
    for r in results {
        let r = r?;
        records.extend(r.records);
        files.extend(r.files);
    }
    let mut buf = Vec::new();
    write_sweep_csv(spec.axis, &records, &mut buf).map_err(|e| HedgeError::io(out_dir, e))?;
    write_file(out_dir, PathBuf::from("sweep.csv"), &buf, &mut files)?;
    Ok(SweepOutcome { records, files })
}

/// Long format: one row per (cell, seed, strategy). Commas in error messages become semicolons.
pub fn write_sweep_csv<W: Write>(axis: SweepAxis, records: &[SweepRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "axis,value,seed,strategy,status,{REPORT_HEADER},error")?;
    let blanks = ",".repeat(REPORT_HEADER.matches(',').count());
    for r in records {
        let head = format!("{},{},{},{}", axis.name(), r.value.label(), r.seed, r.strategy.label());
        match &r.outcome {
            Ok(rep) => writeln!(out, "{head},ok,{},", report_fields(rep))?,
            Err(e) => writeln!(out, "{head},failed,{blanks},{}", e.replace([',', '"', '\n'], ";"))?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> CellSetup {
        CellSetup {
            env: EnvConfig::reference(),
            mvh: MvhTrainConfig::desk_scale(),
            ddpg: DdpgConfig::desk_scale(),
        }
    }

    fn scalars(v: &[f64]) -> Vec<CellValue> {
        v.iter().copied().map(CellValue::Scalar).collect()
    }

    #[test]
    fn delta_alpha_sweep_is_monotone_and_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SweepSpec::new(
            SweepAxis::Alpha,
            scalars(&[0.0, 0.005, 0.01, 0.02]),
            vec![Strategy::Delta],
            base(),
        );
        spec.episodes = 200;
        let out = run_sweep(&spec, dir.path()).unwrap();
        let means: Vec<f64> = (0..4).map(|c| out.report(c, 1, Strategy::Delta).unwrap().mean).collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
        assert!(out.files.iter().all(|f| dir.path().join(f).is_file()));
        assert_eq!(out.files.len(), 4 * 2 + 1);
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let width = csv.lines().next().unwrap().split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == width));
    }

    #[test]
    fn failing_cell_is_recorded_and_the_rest_still_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SweepSpec::new(SweepAxis::Sigma, scalars(&[0.2, -0.1, 0.4]), vec![Strategy::Delta], base());
        spec.episodes = 50;
        let out = run_sweep(&spec, dir.path()).unwrap();
        assert_eq!(out.failures().count(), 1);
        assert!(out.report(0, 1, Strategy::Delta).is_some());
        assert!(out.report(2, 1, Strategy::Delta).is_some());
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert!(csv.contains(",failed,"));
        let width = csv.lines().next().unwrap().split(',').count();
        let failed = csv.lines().find(|l| l.contains(",failed,")).unwrap();
        assert_eq!(failed.split(',').count(), width);
    }

    #[test]
    fn crn_off_gives_cells_different_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SweepSpec::new(SweepAxis::Gamma, scalars(&[0.9, 0.99]), vec![Strategy::Delta], base());
        spec.episodes = 50;
        let same = run_sweep(&spec, dir.path()).unwrap();
        assert_eq!(
            same.report(0, 1, Strategy::Delta).unwrap().mean,
            same.report(1, 1, Strategy::Delta).unwrap().mean
        );
        spec.common_random_numbers = false;
        let diff = run_sweep(&spec, dir.path()).unwrap();
        assert_ne!(
            diff.report(0, 1, Strategy::Delta).unwrap().mean,
            diff.report(1, 1, Strategy::Delta).unwrap().mean
        );
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut spec = SweepSpec::new(SweepAxis::Maturity, scalars(&[10.0, 20.0]), vec![Strategy::Delta], base());
        spec.episodes = 50;
        spec.seeds = vec![3, 4];
        let one = run_sweep(&spec, a.path()).unwrap();
        spec.workers = 3;
        let three = run_sweep(&spec, b.path()).unwrap();
        assert_eq!(one, three);
        assert_eq!(
            fs::read(a.path().join("sweep.csv")).unwrap(),
            fs::read(b.path().join("sweep.csv")).unwrap()
        );
    }

    #[test]
    fn cell_setup_applies_each_axis() {
        let b = base();
        let spec = |axis| SweepSpec::new(axis, scalars(&[1.0]), vec![Strategy::Delta], base());
        assert_eq!(spec(SweepAxis::Lambda).cell(&CellValue::Scalar(10.0)).unwrap().env.lambda_ra, 10.0);
        let m = spec(SweepAxis::Maturity).cell(&CellValue::Scalar(60.0)).unwrap();
        assert_eq!(m.env.grid.n_steps, 60);
        assert!(spec(SweepAxis::Maturity).cell(&CellValue::Scalar(2.5)).is_err());
        let lr = spec(SweepAxis::Lr).cell(&CellValue::Scalar(1e-3)).unwrap();
        assert_eq!((lr.mvh.lr, lr.ddpg.actor_lr, lr.ddpg.critic_lr), (1e-3, 1e-3, 1e-2));
        let arch = SweepSpec::new(SweepAxis::Architecture, vec![CellValue::Layers(vec![4, 8])], vec![Strategy::Delta], b);
        let c = arch.cell(&CellValue::Layers(vec![4, 8])).unwrap();
        assert_eq!(c.ddpg.critic_hidden, vec![8, 16]);
        assert!(arch.cell(&CellValue::Scalar(1.0)).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = SweepSpec::new(SweepAxis::Alpha, vec![], vec![Strategy::Delta], base());
        assert!(s.validate().is_err());
        s.values = scalars(&[0.0]);
        s.strategies.clear();
        assert!(s.validate().is_err());
        assert!("volatility".parse::<SweepAxis>().is_err());
        assert_eq!("deep_mvh".parse::<Strategy>().unwrap(), Strategy::DeepMvh);
    }
}
