//! Training the same agent from several seeds and comparing the learning curves.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpg::{self, DdpgConfig};
use crate::deep_mvh::{self, MvhTrainConfig};
use crate::error::{HedgeError, Result};
use crate::hedging_env::EnvConfig;
use crate::svg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ddpg,
    DeepMvh,
}

impl std::str::FromStr for AgentKind {
    type Err = HedgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpg" => Ok(AgentKind::Ddpg),
            "deep_mvh" | "mvh" => Ok(AgentKind::DeepMvh),
            other => Err(HedgeError::Config(format!("unknown agent {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRun {
    pub kind: AgentKind,
    pub seeds: Vec<u64>,
    /// Per seed: signed-log epoch losses (deep-MVH) or episode rewards (DDPG).
    pub curves: Vec<Vec<f64>>,
    /// Per seed: last epoch's mean loss (deep-MVH) or the mean cost of the last tenth of episodes (DDPG).
    pub final_losses: Vec<f64>,
}

impl StabilityRun {
    /// Worst over best final loss; NaN unless every final loss is positive.
    pub fn spread(&self) -> f64 {
        let best = self.final_losses.iter().copied().fold(f64::INFINITY, f64::min);
        let worst = self.final_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best > 0.0 {
            worst / best
        } else {
            f64::NAN
        }
    }
}

fn train_one(kind: AgentKind, env: &EnvConfig, mvh: &MvhTrainConfig, ddpg_cfg: &DdpgConfig, seed: u64) -> Result<(Vec<f64>, f64)> {
    match kind {
        AgentKind::DeepMvh => {
            let out = deep_mvh::train_mvh(mvh, env, seed)?;
            let last = *out.epoch_losses.last().expect("at least one epoch");
            Ok((out.curve, last))
        }
        AgentKind::Ddpg => {
            let out = ddpg::train(ddpg_cfg, env, seed)?;
            let tail = (out.curve.len() / 10).max(1);
            let last = -out.curve[out.curve.len() - tail..].iter().sum::<f64>() / tail as f64;
            Ok((out.curve, last))
        }
    }
}

/// Trains `kind` once per seed. Seeds run in parallel on the current rayon pool.
pub fn training_stability(
    kind: AgentKind,
    seeds: &[u64],
    env: &EnvConfig,
    mvh: &MvhTrainConfig,
    ddpg_cfg: &DdpgConfig,
) -> Result<StabilityRun> {
    if seeds.len() < 2 {
        return Err(HedgeError::Usage(format!(
            "a stability run needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let runs = seeds
        .par_iter()
        .map(|&s| train_one(kind, env, mvh, ddpg_cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let (curves, final_losses) = runs.into_iter().unzip();
    Ok(StabilityRun {
        kind,
        seeds: seeds.to_vec(),
        curves,
        final_losses,
    })
}

/// Writes `stability_curves.csv`, `stability_final.csv` and `stability_curves.svg`; returns their names.
pub fn write_stability(run: &StabilityRun, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut curves = Vec::new();
    let write_err = |e| HedgeError::io(dir, e);
    writeln!(curves, "seed,index,value").map_err(write_err)?;
    for (seed, c) in run.seeds.iter().zip(&run.curves) {
        for (i, v) in c.iter().enumerate() {
            writeln!(curves, "{seed},{i},{v}").map_err(write_err)?;
        }
    }
    let mut finals = Vec::new();
    writeln!(finals, "seed,final_loss").map_err(write_err)?;
    for (seed, v) in run.seeds.iter().zip(&run.final_losses) {
        writeln!(finals, "{seed},{v}").map_err(write_err)?;
    }
    let series: Vec<svg::LineSeries<'_>> = run
        .seeds
        .iter()
        .zip(&run.curves)
        .map(|(s, c)| svg::LineSeries {
            name: format!("seed {s}"),
            values: c,
        })
        .collect();
    let (title, x, y) = match run.kind {
        AgentKind::DeepMvh => ("deep-MVH training", "epoch", "signed log loss"),
        AgentKind::Ddpg => ("DDPG training", "episode", "episode reward"),
    };
    let chart = svg::lines(&series, title, x, y);
    let files = [
        ("stability_curves.csv", curves),
        ("stability_final.csv", finals),
        ("stability_curves.svg", chart.into_bytes()),
    ];
    let mut names = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| HedgeError::io(&path, e))?;
        names.push(PathBuf::from(name));
    }
    Ok(names)
}
