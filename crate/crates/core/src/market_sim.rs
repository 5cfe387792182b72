//! Geometric Brownian motion on a fixed trading grid.
//!
//! Paths are generated with a log-Euler step, which is exact for GBM. Every
//! path draws its shocks from its own ChaCha substream, so path `i` is the
//! same no matter how many paths are requested alongside it.

use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

/// Calendar-day step used throughout: one trading period is one day.
pub const DAY: f64 = 1.0 / 365.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Annualized drift.
    pub mu: f64,
    /// Annualized volatility.
    pub sigma: f64,
    /// Annualized continuously compounded risk-free rate.
    pub rate: f64,
    pub s0: f64,
}

impl MarketParams {
    pub fn new(mu: f64, sigma: f64, rate: f64, s0: f64) -> Result<Self> {
        let p = MarketParams { mu, sigma, rate, s0 };
        p.validate()?;
        Ok(p)
    }

    /// Stock defaults of the reference experiment: 5% drift, 20% vol, zero rate, spot 100.
    pub fn reference() -> Self {
        MarketParams {
            mu: 0.05,
            sigma: 0.2,
            rate: 0.0,
            s0: 100.0,
        }
    }

    /// Zero volatility is accepted so deterministic markets can be simulated.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu, self.sigma, self.rate, self.s0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(HedgeError::InvalidInput(format!(
                "market parameters must be finite: {self:?}"
            )));
        }
        if self.sigma < 0.0 {
            return Err(HedgeError::InvalidInput(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if self.s0 <= 0.0 {
            return Err(HedgeError::InvalidInput(format!(
                "s0 must be positive, got {}",
                self.s0
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradingGrid {
    pub n_steps: usize,
    pub dt: f64,
}

impl TradingGrid {
    pub fn new(n_steps: usize, dt: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(HedgeError::InvalidInput("grid needs at least one step".into()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(HedgeError::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        Ok(TradingGrid { n_steps, dt })
    }

    /// Daily rebalancing for `n_steps` calendar days.
    pub fn daily(n_steps: usize) -> Result<Self> {
        Self::new(n_steps, DAY)
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.n_steps)
    }
}

/// Which consumer a random stream belongs to. Distinct domains never share a key,
/// so training and test draws cannot collide for any seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamDomain {
    TrainPaths,
    TestPaths,
    Exploration,
    Replay,
    Init,
    Dropout,
    Background,
}

impl StreamDomain {
    fn tag(self) -> u64 {
        match self {
            StreamDomain::TrainPaths => 0x7472_6169_6e00_0001,
            StreamDomain::TestPaths => 0x7465_7374_0000_0002,
            StreamDomain::Exploration => 0x6578_706c_0000_0003,
            StreamDomain::Replay => 0x7265_706c_0000_0004,
            StreamDomain::Init => 0x696e_6974_0000_0005,
            StreamDomain::Dropout => 0x6472_6f70_0000_0006,
            StreamDomain::Background => 0x6267_0000_0000_0007,
        }
    }
}

/// Reproducibility token: a user seed, a stream domain and a salt (e.g. the epoch).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedToken {
    pub seed: u64,
    pub domain: StreamDomain,
    pub salt: u64,
}

impl SeedToken {
    pub fn new(seed: u64, domain: StreamDomain) -> Self {
        SeedToken {
            seed,
            domain,
            salt: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self::new(seed, StreamDomain::TrainPaths)
    }

    pub fn test(seed: u64) -> Self {
        Self::new(seed, StreamDomain::TestPaths)
    }

    pub fn with_salt(self, salt: u64) -> Self {
        SeedToken { salt, ..self }
    }

    /// Independent generator for substream `index` (a path number, a worker id, ...).
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.domain.tag().to_le_bytes());
        key[16..24].copy_from_slice(&self.salt.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }
}

/// One exact log-Euler step. `dw` is the Brownian increment, i.e. a standard
/// normal draw already scaled by `sqrt(dt)`.
pub fn gbm_step(s: f64, dt: f64, dw: f64, p: &MarketParams) -> Result<f64> {
    if ![s, dt, dw, p.mu, p.sigma].iter().all(|v| v.is_finite()) {
        return Err(HedgeError::InvalidInput(format!(
            "gbm_step needs finite inputs (s={s}, dt={dt}, dw={dw}, mu={}, sigma={})",
            p.mu, p.sigma
        )));
    }
    if s <= 0.0 || dt <= 0.0 {
        return Err(HedgeError::InvalidInput(format!(
            "gbm_step needs s > 0 and dt > 0 (s={s}, dt={dt})"
        )));
    }
    Ok(s * ((p.mu - 0.5 * p.sigma * p.sigma) * dt + p.sigma * dw).exp())
}

pub fn discount_factor(rate: f64, t: f64) -> f64 {
    (-rate * t).exp()
}

/// Immutable batch of simulated stock paths with the shocks that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    /// `n_paths x (n_steps + 1)`.
    pub prices: Array2<f64>,
    /// Standard normal draws, `n_paths x n_steps`.
    pub shocks: Array2<f64>,
    pub seed: Option<SeedToken>,
    pub grid: TradingGrid,
}

impl PathBatch {
    /// Replays given standard normal shocks through the log-Euler recursion.
    pub fn from_shocks(
        shocks: Array2<f64>,
        grid: &TradingGrid,
        p: &MarketParams,
        seed: Option<SeedToken>,
    ) -> Result<Self> {
        p.validate()?;
        if shocks.ncols() != grid.n_steps {
            return Err(HedgeError::InvalidInput(format!(
                "shock rows have width {} but the grid has {} steps",
                shocks.ncols(),
                grid.n_steps
            )));
        }
        let n_paths = shocks.nrows();
        let mut prices = Array2::zeros((n_paths, grid.n_steps + 1));
        for (mut row, z) in prices.outer_iter_mut().zip(shocks.outer_iter()) {
            let path = price_row(z, grid, p)?;
            row.assign(&ArrayView1::from(&path));
        }
        Ok(PathBatch {
            prices,
            shocks,
            seed,
            grid: *grid,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.prices.nrows()
    }

    /// Writes `path_id,step,time,price` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path_id,step,time,price")?;
        for (i, row) in self.prices.outer_iter().enumerate() {
            for (step, price) in row.iter().enumerate() {
                writeln!(out, "{i},{step},{},{price}", self.grid.time(step))?;
            }
        }
        Ok(())
    }
}

fn price_row(shocks: ArrayView1<f64>, grid: &TradingGrid, p: &MarketParams) -> Result<Vec<f64>> {
    let sqrt_dt = grid.dt.sqrt();
    let mut path = Vec::with_capacity(grid.n_steps + 1);
    let mut s = p.s0;
    path.push(s);
    for &z in shocks.iter() {
        s = gbm_step(s, grid.dt, sqrt_dt * z, p)?;
        path.push(s);
    }
    Ok(path)
}

/// Standard normal shocks for paths `first..first + n_paths` of a seed's stream.
pub fn draw_shocks(n_paths: usize, first: usize, n_steps: usize, seed: &SeedToken) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = (first..first + n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.rng(i as u64);
            (0..n_steps).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    let mut shocks = Array2::zeros((n_paths, n_steps));
    for (mut dst, src) in shocks.outer_iter_mut().zip(rows) {
        dst.assign(&ArrayView1::from(&src));
    }
    shocks
}

pub fn simulate_paths(
    n_paths: usize,
    grid: &TradingGrid,
    p: &MarketParams,
    seed: SeedToken,
) -> Result<PathBatch> {
    if n_paths == 0 {
        return Err(HedgeError::InvalidInput("n_paths must be at least 1".into()));
    }
    p.validate()?;
    let shocks = draw_shocks(n_paths, 0, grid.n_steps, &seed);
    PathBatch::from_shocks(shocks, grid, p, Some(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_grid() -> TradingGrid {
        TradingGrid::daily(30).unwrap()
    }

    #[test]
    fn zero_shock_step_is_the_drift_factor() {
        let p = MarketParams::reference();
        let s = gbm_step(100.0, DAY, 0.0, &p).unwrap();
        assert_eq!(s, 100.0 * (0.03 * DAY).exp());
    }

    #[test]
    fn zero_vol_step_ignores_the_shock() {
        let p = MarketParams::new(0.05, 0.0, 0.0, 100.0).unwrap();
        for dw in [-3.0, 0.0, 2.5] {
            let s = gbm_step(100.0, 0.25, dw, &p).unwrap();
            assert!((s - 100.0 * (0.05f64 * 0.25).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn step_matches_high_precision_closed_form() {
        // mpmath, tests/oracles/scalar_oracles.py
        let expected = 100.208_436_104_747_642_818_470_3;
        let s = gbm_step(100.0, DAY, 0.01, &MarketParams::reference()).unwrap();
        assert!((s - expected).abs() < 1e-12, "{s}");
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let p = MarketParams::reference();
        assert!(gbm_step(f64::NAN, DAY, 0.0, &p).is_err());
        assert!(gbm_step(100.0, DAY, f64::INFINITY, &p).is_err());
        assert!(gbm_step(-1.0, DAY, 0.0, &p).is_err());
        assert!(gbm_step(100.0, 0.0, 0.0, &p).is_err());
    }

    #[test]
    fn discounting() {
        assert_eq!(discount_factor(0.0, 12.3), 1.0);
        assert_eq!(discount_factor(0.05, 1.0), (-0.05f64).exp());
        assert_eq!(discount_factor(0.05, 30.0 / 365.0), (-0.05f64 * 30.0 / 365.0).exp());
    }

    #[test]
    fn zero_vol_path_is_deterministic_growth() {
        let p = MarketParams::new(0.05, 0.0, 0.0, 100.0).unwrap();
        let grid = reference_grid();
        let batch = simulate_paths(1, &grid, &p, SeedToken::train(3)).unwrap();
        for (i, t) in grid.times().into_iter().enumerate() {
            let expected = 100.0 * (0.05 * t).exp();
            assert!((batch.prices[[0, i]] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn rows_do_not_depend_on_batch_size() {
        let p = MarketParams::reference();
        let grid = reference_grid();
        let small = simulate_paths(3, &grid, &p, SeedToken::train(11)).unwrap();
        let large = simulate_paths(50, &grid, &p, SeedToken::train(11)).unwrap();
        for i in 0..3 {
            assert_eq!(small.prices.row(i), large.prices.row(i));
        }
    }

    #[test]
    fn domains_give_different_streams() {
        let grid = reference_grid();
        let a = draw_shocks(1, 0, grid.n_steps, &SeedToken::train(5));
        let b = draw_shocks(1, 0, grid.n_steps, &SeedToken::test(5));
        let c = draw_shocks(1, 0, grid.n_steps, &SeedToken::train(5).with_salt(1));
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_dump_has_one_row_per_path_step() {
        let batch =
            simulate_paths(2, &TradingGrid::daily(3).unwrap(), &MarketParams::reference(), SeedToken::train(1))
                .unwrap();
        let mut buf = Vec::new();
        batch.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "path_id,step,time,price");
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines[1].starts_with("0,0,0,100"));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(MarketParams::new(0.05, -0.1, 0.0, 100.0).is_err());
        assert!(MarketParams::new(0.05, 0.2, 0.0, 0.0).is_err());
        assert!(TradingGrid::new(0, DAY).is_err());
        assert!(TradingGrid::new(5, -1.0).is_err());
        let grid = reference_grid();
        assert!(simulate_paths(0, &grid, &MarketParams::reference(), SeedToken::train(0)).is_err());
    }
}
