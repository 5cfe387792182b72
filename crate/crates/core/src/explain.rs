//! Exact Shapley attributions of a hedging policy's holding.
//!
//! The value of a coalition is the mean policy output over the background
//! rows with the coalition's features replaced by the instance's values
//! (marginal expectation). With five features all 32 coalitions are
//! enumerated, so efficiency holds up to rounding.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::deep_mvh::PolicyStack;
use crate::error::{HedgeError, Result};
use crate::hedging_env::{rollout_batch, EnvConfig, FeatureSet, Hedger};
use crate::market_sim::{simulate_paths, SeedToken, StreamDomain};
use crate::svg;

/// Largest feature count for which all coalitions are enumerated.
pub const MAX_EXACT_FEATURES: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapConfig {
    /// Rows of raw features the absent features are averaged over.
    pub background: Array2<f64>,
    pub feature_names: Vec<String>,
}

impl ShapConfig {
    pub fn new(background: Array2<f64>, feature_names: Vec<String>) -> Result<Self> {
        let cfg = ShapConfig {
            background,
            feature_names,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_features(&self) -> usize {
        self.background.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.background.nrows() == 0 {
            return Err(HedgeError::InvalidInput("empty SHAP background".into()));
        }
        let p = self.background.ncols();
        if p == 0 || p > MAX_EXACT_FEATURES {
            return Err(HedgeError::InvalidInput(format!(
                "exact enumeration supports 1..={MAX_EXACT_FEATURES} features, got {p}"
            )));
        }
        if self.feature_names.len() != p {
            return Err(HedgeError::InvalidInput(format!(
                "{} feature names for {p} background columns",
                self.feature_names.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapResult {
    /// `n_instances x p` attributions in holding units (shares).
    pub phi: Array2<f64>,
    pub base_value: f64,
    /// Policy output at each instance.
    pub outputs: Vec<f64>,
    pub feature_names: Vec<String>,
}

fn check_coalition(coalition: u32, p: usize) -> Result<()> {
    if p < 32 && coalition >> p != 0 {
        return Err(HedgeError::InvalidInput(format!(
            "coalition mask {coalition:#b} names features beyond the {p} available"
        )));
    }
    Ok(())
}

/// Mean of `f` over the background with features in `coalition` (a bit mask) taken from `x`.
pub fn coalition_value<F>(f: &F, x: ArrayView1<f64>, coalition: u32, background: ArrayView2<f64>) -> Result<f64>
where
    F: Fn(ArrayView2<f64>) -> Result<Vec<f64>>,
{
    let p = background.ncols();
    if x.len() != p {
        return Err(HedgeError::InvalidInput(format!("instance has {} features, background {p}", x.len())));
    }
    check_coalition(coalition, p)?;
    let mut rows = background.to_owned();
    for k in (0..p).filter(|k| coalition & (1 << k) != 0) {
        rows.column_mut(k).fill(x[k]);
    }
    let out = f(rows.view())?;
    if out.len() != rows.nrows() {
        return Err(HedgeError::InvalidInput(format!(
            "policy returned {} values for {} rows",
            out.len(),
            rows.nrows()
        )));
    }
    Ok(out.iter().sum::<f64>() / out.len() as f64)
}

/// `|S|! (p - |S| - 1)! / p!` for every coalition size.
fn shapley_weights(p: usize) -> Vec<f64> {
    let fact = |n: usize| (1..=n).map(|v| v as f64).product::<f64>();
    (0..p).map(|s| fact(s) * fact(p - s - 1) / fact(p)).collect()
}

/// Exact Shapley values of `f` at `x`.
pub fn exact_shapley<F>(f: &F, x: ArrayView1<f64>, config: &ShapConfig) -> Result<Vec<f64>>
where
    F: Fn(ArrayView2<f64>) -> Result<Vec<f64>>,
{
    config.validate()?;
    let p = config.n_features();
    let values = (0..1u32 << p)
        .map(|mask| coalition_value(f, x, mask, config.background.view()))
        .collect::<Result<Vec<_>>>()?;
    let weights = shapley_weights(p);
    Ok((0..p)
        .map(|i| {
            let bit = 1u32 << i;
            (0..1u32 << p)
                .filter(|s| s & bit == 0)
                .map(|s| weights[s.count_ones() as usize] * (values[(s | bit) as usize] - values[s as usize]))
                .sum()
        })
        .collect())
}

/// Attributions for every row of `instances`, in parallel.
pub fn explain_instances<F>(f: &F, instances: ArrayView2<f64>, config: &ShapConfig) -> Result<ShapResult>
where
    F: Fn(ArrayView2<f64>) -> Result<Vec<f64>> + Sync,
{
    config.validate()?;
    let p = config.n_features();
    if instances.ncols() != p {
        return Err(HedgeError::InvalidInput(format!(
            "instances have {} features, background {p}",
            instances.ncols()
        )));
    }
    let base_value = coalition_value(f, config.background.row(0), 0, config.background.view())?;
    let rows: Vec<(Vec<f64>, f64)> = (0..instances.nrows())
        .into_par_iter()
        .map(|i| {
            let x = instances.row(i);
            let phi = exact_shapley(f, x, config)?;
            let fx = f(x.insert_axis(Axis(0)))?[0];
            Ok((phi, fx))
        })
        .collect::<Result<_>>()?;
    let mut phi = Array2::zeros((instances.nrows(), p));
    let mut outputs = Vec::with_capacity(rows.len());
    for (i, (v, fx)) in rows.into_iter().enumerate() {
        phi.row_mut(i).assign(&ArrayView1::from(&v));
        outputs.push(fx);
    }
    Ok(ShapResult {
        phi,
        base_value,
        outputs,
        feature_names: config.feature_names.clone(),
    })
}

/// Mean absolute attribution per feature.
pub fn shap_variable_importance(result: &ShapResult) -> Result<Vec<f64>> {
    if result.phi.nrows() == 0 {
        return Err(HedgeError::InvalidInput("no explained instances".into()));
    }
    Ok(result
        .phi
        .axis_iter(Axis(1))
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / c.len() as f64)
        .collect())
}

/// Raw feature rows of the states visited at each step by `hedger` on
/// `n_episodes` evaluation paths (stream `Background`, separate from test paths).
pub fn collect_step_states(
    env: &EnvConfig,
    hedger: &dyn Hedger,
    features: FeatureSet,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    let paths = simulate_paths(
        n_episodes,
        &env.grid,
        &env.market,
        SeedToken::new(seed, StreamDomain::Background),
    )?;
    let records = rollout_batch(env, &paths, hedger)?;
    let p = features.dim();
    Ok((0..env.grid.n_steps)
        .map(|t| {
            let mut rows = Array2::zeros((records.len(), p));
            for (mut row, rec) in rows.outer_iter_mut().zip(&records) {
                row.assign(&ArrayView1::from(&features.raw(&rec.states[t])));
            }
            rows
        })
        .collect())
}

/// Every `stride`-th row across the per-step pools, up to `n` rows.
pub fn pooled_sample(per_step: &[Array2<f64>], n: usize) -> Array2<f64> {
    let total: usize = per_step.iter().map(|a| a.nrows()).sum();
    let p = per_step.first().map_or(0, |a| a.ncols());
    let take = n.min(total);
    let stride = (total / take.max(1)).max(1);
    let mut out = Array2::zeros((take, p));
    let all = per_step.iter().flat_map(|a| a.outer_iter());
    for (dst, src) in out.outer_iter_mut().zip(all.step_by(stride)) {
        let mut dst = dst;
        dst.assign(&src);
    }
    out
}

fn head(rows: &Array2<f64>, n: usize) -> ArrayView2<'_, f64> {
    rows.slice(ndarray::s![..n.min(rows.nrows()), ..])
}

/// SHAP variable importance of each step policy of a deep-MVH stack:
/// row `t` explains `instances` states of step `t` against `background`
/// states of the same step.
pub fn per_step_heatmap(
    stack: &PolicyStack,
    step_states: &[Array2<f64>],
    background: usize,
    instances: usize,
) -> Result<Array2<f64>> {
    if step_states.len() != stack.n_steps() {
        return Err(HedgeError::InvalidInput(format!(
            "{} step pools for a stack of {}",
            step_states.len(),
            stack.n_steps()
        )));
    }
    let names: Vec<String> = stack.features.names().iter().map(|s| s.to_string()).collect();
    let p = names.len();
    let mut heat = Array2::zeros((stack.n_steps(), p));
    for (t, rows) in step_states.iter().enumerate() {
        let cfg = ShapConfig::new(head(rows, background).to_owned(), names.clone())?;
        let f = |x: ArrayView2<f64>| stack.act_raw(t, x);
        let result = explain_instances(&f, head(rows, instances), &cfg)?;
        let vi = shap_variable_importance(&result)?;
        heat.row_mut(t).assign(&ArrayView1::from(&vi));
    }
    Ok(heat)
}

/// Writes `instance,feature,phi` rows.
pub fn write_phi_csv<W: Write>(result: &ShapResult, mut out: W) -> std::io::Result<()> {
    writeln!(out, "instance,feature,phi")?;
    for (i, row) in result.phi.outer_iter().enumerate() {
        for (name, v) in result.feature_names.iter().zip(row) {
            writeln!(out, "{i},{name},{v}")?;
        }
    }
    Ok(())
}

/// Writes `step,feature,importance` rows.
pub fn write_heatmap_csv<W: Write>(heat: &Array2<f64>, names: &[&str], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,feature,importance")?;
    for (t, row) in heat.outer_iter().enumerate() {
        for (name, v) in names.iter().zip(row) {
            writeln!(out, "{t},{name},{v}")?;
        }
    }
    Ok(())
}

/// Writes `feature,importance` rows.
pub fn write_importance_csv<W: Write>(importance: &[f64], names: &[String], mut out: W) -> std::io::Result<()> {
    writeln!(out, "feature,importance")?;
    for (name, v) in names.iter().zip(importance) {
        writeln!(out, "{name},{v}")?;
    }
    Ok(())
}

/// Steps down, features across.
pub fn heatmap_svg(heat: &Array2<f64>, names: &[&str], title: &str) -> String {
    let rows: Vec<String> = (0..heat.nrows()).map(|t| t.to_string()).collect();
    svg::heatmap(heat.view(), &rows, names, title)
}
