//! Summary statistics of total hedging cost over test episodes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};
use crate::hedging_env::{rollout_batch, EnvConfig, Hedger};
use crate::market_sim::{simulate_paths, PathBatch, SeedToken};
use crate::svg;

pub const QUANTILE_LEVELS: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

/// Upper limit on Freedman-Diaconis bins, so heavy tails don't explode the chart.
pub const MAX_BINS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    #[default]
    FreedmanDiaconis,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` increasing edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins `values` over `edges`.
    pub fn count(values: &[f64], edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(HedgeError::InvalidInput("histogram edges must be increasing".into()));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0; bins];
        for &v in values {
            if v < edges[0] || v > edges[bins] {
                continue;
            }
            let k = edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn build(values: &[f64], binning: Binning) -> Result<Self> {
        let edges = bin_edges(values, binning)?;
        Self::count(values, edges)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Equal-width edges spanning the data. A constant sample gets one bin of width 1.
pub fn bin_edges(values: &[f64], binning: Binning) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(HedgeError::InvalidInput("cannot bin an empty sample".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(HedgeError::NonFinite("histogram sample".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![lo - 0.5, hi + 0.5]);
    }
    let bins = match binning {
        Binning::Fixed(0) => return Err(HedgeError::InvalidInput("bin count must be at least 1".into())),
        Binning::Fixed(k) => k,
        Binning::FreedmanDiaconis => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
            let width = 2.0 * iqr / (values.len() as f64).cbrt();
            if width > 0.0 {
                (((hi - lo) / width).ceil() as usize).clamp(1, MAX_BINS)
            } else {
                1
            }
        }
    };
    let step = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|k| lo + step * k as f64).collect();
    edges.push(hi);
    Ok(edges)
}

/// Linear-interpolation quantile (Hyndman-Fan type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let i = h.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    sorted[i] + (h - i as f64) * (sorted[i + 1] - sorted[i])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_episodes: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
    /// Moment skewness `m3 / m2^1.5`.
    pub skew: f64,
    /// Values at [`QUANTILE_LEVELS`].
    pub quantiles: Vec<f64>,
    pub histogram: Histogram,
    pub mean_tc: f64,
}

impl EvalReport {
    /// `costs[i]` is the total hedging cost of episode `i` (positive is a loss), `tcs[i]` its total transaction cost.
    pub fn from_costs(label: &str, costs: &[f64], tcs: &[f64], binning: Binning) -> Result<Self> {
        let n = costs.len();
        if n == 0 {
            return Err(HedgeError::InvalidInput("no episodes to report".into()));
        }
        if tcs.len() != n {
            return Err(HedgeError::InvalidInput(format!("{n} costs but {} transaction costs", tcs.len())));
        }
        let mean = costs.iter().sum::<f64>() / n as f64;
        let m2 = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = costs.iter().map(|c| (c - mean).powi(3)).sum::<f64>() / n as f64;
        let std = if n > 1 { (m2 * n as f64 / (n - 1) as f64).sqrt() } else { 0.0 };
        let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
        let mut sorted = costs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let quantiles = QUANTILE_LEVELS.iter().map(|&p| quantile_sorted(&sorted, p)).collect();
        Ok(EvalReport {
            label: label.to_string(),
            n_episodes: n,
            mean,
            std,
            skew,
            quantiles,
            histogram: Histogram::build(costs, binning)?,
            mean_tc: tcs.iter().sum::<f64>() / n as f64,
        })
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.std / (self.n_episodes as f64).sqrt()
    }
}

/// Per-episode totals of one strategy on one path batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeCosts {
    pub label: String,
    pub costs: Vec<f64>,
    pub tcs: Vec<f64>,
}

impl EpisodeCosts {
    pub fn report(&self, binning: Binning) -> Result<EvalReport> {
        EvalReport::from_costs(&self.label, &self.costs, &self.tcs, binning)
    }
}

pub fn episode_costs(hedger: &dyn Hedger, env: &EnvConfig, paths: &PathBatch) -> Result<EpisodeCosts> {
    let records = rollout_batch(env, paths, hedger)?;
    Ok(EpisodeCosts {
        label: hedger.label(),
        costs: records.iter().map(|r| r.total_hedge_cost).collect(),
        tcs: records.iter().map(|r| r.total_tc).collect(),
    })
}

/// Test paths for `seed`: the `TestPaths` domain never overlaps the training stream.
pub fn test_paths(env: &EnvConfig, n_episodes: usize, seed: SeedToken) -> Result<PathBatch> {
    simulate_paths(n_episodes, &env.grid, &env.market, seed)
}

/// Report of `hedger` on `n_episodes` fresh test paths.
pub fn evaluate(hedger: &dyn Hedger, env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    let paths = test_paths(env, n_episodes, SeedToken::test(seed))?;
    episode_costs(hedger, env, &paths)?.report(Binning::default())
}

/// Writes the report's histogram as an SVG.
pub fn emit_histogram(report: &EvalReport, path: &Path) -> Result<()> {
    if report.histogram.counts.is_empty() {
        return Err(HedgeError::InvalidInput("report has no histogram bins".into()));
    }
    let series = [svg::HistogramSeries {
        name: &report.label,
        counts: &report.histogram.counts,
    }];
    let body = svg::histogram(
        &report.histogram.edges,
        &series,
        &format!("{}: total hedging cost", report.label),
        "total hedging cost",
    );
    std::fs::write(path, body).map_err(|e| HedgeError::io(path, e))
}

/// One overlaid chart of several strategies binned on common edges.
pub fn comparison_histogram(costs: &[EpisodeCosts], binning: Binning, title: &str) -> Result<String> {
    let pooled: Vec<f64> = costs.iter().flat_map(|c| c.costs.iter().copied()).collect();
    let edges = bin_edges(&pooled, binning)?;
    let hists = costs
        .iter()
        .map(|c| Histogram::count(&c.costs, edges.clone()))
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<svg::HistogramSeries<'_>> = costs
        .iter()
        .zip(&hists)
        .map(|(c, h)| svg::HistogramSeries {
            name: &c.label,
            counts: &h.counts,
        })
        .collect();
    Ok(svg::histogram(&edges, &series, title, "total hedging cost"))
}

pub const REPORT_HEADER: &str = "n_episodes,mean,std,skew,q01,q05,q25,q50,q75,q95,q99,mean_tc";

/// Comma-separated values matching [`REPORT_HEADER`].
pub fn report_fields(r: &EvalReport) -> String {
    let mut s = format!("{},{},{},{}", r.n_episodes, r.mean, r.std, r.skew);
    for q in &r.quantiles {
        s.push_str(&format!(",{q}"));
    }
    s.push_str(&format!(",{}", r.mean_tc));
    s
}

/// `strategy,` + [`REPORT_HEADER`] rows.
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "strategy,{REPORT_HEADER}")?;
    for r in reports {
        writeln!(out, "{},{}", r.label, report_fields(r))?;
    }
    Ok(())
}

/// `episode,strategy,total_cost,total_tc` rows.
pub fn write_costs_csv<W: Write>(costs: &[EpisodeCosts], mut out: W) -> std::io::Result<()> {
    writeln!(out, "episode,strategy,total_cost,total_tc")?;
    for c in costs {
        for (i, (cost, tc)) in c.costs.iter().zip(&c.tcs).enumerate() {
            writeln!(out, "{i},{},{cost},{tc}", c.label)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::hedging_env::DeltaHedger;

    #[test]
    fn type7_quantiles_match_hand_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_eq!(quantile_sorted(&x, 0.5), 3.0);
        assert_eq!(quantile_sorted(&x, 0.25), 2.0);
        assert!((quantile_sorted(&x, 0.9) - 7.6).abs() < 1e-12);
        assert_eq!(quantile_sorted(&x, 1.0), 10.0);
        assert_eq!(quantile_sorted(&[4.0], 0.3), 4.0);
    }

    #[test]
    fn moments_of_a_small_sample() {
        let r = EvalReport::from_costs("x", &[1.0, 2.0, 3.0, 10.0], &[0.0; 4], Binning::Fixed(3)).unwrap();
        assert_eq!(r.mean, 4.0);
        assert!((r.std - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // deviations -3, -2, -1, 6; m2 = 12.5
        let m3 = (-27.0 - 8.0 - 1.0 + 216.0) / 4.0;
        assert!((r.skew - m3 / 12.5f64.powf(1.5)).abs() < 1e-12);
        assert_eq!(r.histogram.counts, vec![3, 0, 1]);
    }

    #[test]
    fn constant_sample_gets_one_full_width_bin() {
        let r = EvalReport::from_costs("c", &[2.0; 5], &[0.0; 5], Binning::default()).unwrap();
        assert_eq!(r.histogram.edges, vec![1.5, 2.5]);
        assert_eq!(r.histogram.counts, vec![5]);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.skew, 0.0);
        let svg = svg::histogram(
            &r.histogram.edges,
            &[svg::HistogramSeries { name: "c", counts: &r.histogram.counts }],
            "t",
            "x",
        );
        // Plot area spans x in [60, 620].
        assert!(svg.contains(r#"x="60.00""#) && svg.contains(r#"width="560.00""#));
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        assert!(EvalReport::from_costs("x", &[], &[], Binning::default()).is_err());
        assert!(EvalReport::from_costs("x", &[1.0], &[], Binning::default()).is_err());
        assert!(bin_edges(&[1.0, 2.0], Binning::Fixed(0)).is_err());
        assert!(bin_edges(&[1.0, f64::NAN], Binning::default()).is_err());
    }

    #[test]
    fn delta_evaluation_is_repeatable_and_positive_under_costs() {
        let env = EnvConfig::reference();
        let delta = DeltaHedger { env };
        let a = evaluate(&delta, &env, 200, 5).unwrap();
        let b = evaluate(&delta, &env, 200, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.mean > 0.0 && a.mean_tc > 0.0);
        assert_eq!(a.label, "delta");
    }

    #[test]
    fn emitted_histogram_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport::from_costs("d", &[1.0, 1.5, 3.0, 7.0], &[0.0; 4], Binning::default()).unwrap();
        let (p1, p2) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
        emit_histogram(&r, &p1).unwrap();
        emit_histogram(&r, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
        assert!(matches!(
            emit_histogram(&r, &dir.path().join("missing/x.svg")),
            Err(HedgeError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn counts_sum_to_n_and_quantiles_are_monotone(
            xs in prop::collection::vec(-1e3f64..1e3, 1..300),
            bins in prop::option::of(1usize..40),
        ) {
            let binning = bins.map_or(Binning::FreedmanDiaconis, Binning::Fixed);
            let r = EvalReport::from_costs("p", &xs, &vec![0.0; xs.len()], binning).unwrap();
            prop_assert_eq!(r.histogram.total(), xs.len());
            prop_assert!(r.quantiles.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.histogram.edges.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
