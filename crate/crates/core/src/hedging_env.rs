//! Self-financing hedged-portfolio accounting for a fixed option position.
//!
//! All money amounts are discounted back to time zero, so the bank account
//! drops out of the P&L except through transaction costs. Costs are a
//! non-negative amount subtracted from the step P&L. At maturity the option
//! settles at intrinsic value and, with `settle_unwind`, the remaining stock
//! is liquidated at a final transaction cost folded into the last step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bs_pricing::{bs_call_delta, bs_call_price, OptionSpec};
use crate::error::{HedgeError, Result};
use crate::market_sim::{discount_factor, gbm_step, MarketParams, PathBatch, SeedToken, TradingGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub market: MarketParams,
    pub option: OptionSpec,
    pub grid: TradingGrid,
    /// Friction level of the transaction cost.
    pub alpha: f64,
    /// Quadratic cost factor, per share.
    pub beta: f64,
    /// Risk aversion of the stepwise mean-variance cost.
    pub lambda_ra: f64,
    /// Signed number of option contracts held; -1 is short one contract.
    pub option_holding: f64,
    /// Shares per option contract.
    pub contract_multiplier: f64,
    /// Per-step discount applied to the stepwise costs by the learners.
    pub gamma_discount: f64,
    pub settle_unwind: bool,
    /// Inclusive stock-holding range `[lo, hi]` in shares.
    pub holding_bounds: (f64, f64),
}

impl EnvConfig {
    /// The reference experiment: 30 daily steps, ATM call struck at 100, alpha = beta = 0.01.
    pub fn reference() -> Self {
        let grid = TradingGrid::daily(30).expect("static grid");
        EnvConfig {
            market: MarketParams::reference(),
            option: OptionSpec::call(100.0, grid.horizon()).expect("static option"),
            grid,
            alpha: 0.01,
            beta: 0.01,
            lambda_ra: 0.1,
            option_holding: -1.0,
            contract_multiplier: 100.0,
            gamma_discount: 0.99,
            settle_unwind: true,
            holding_bounds: (-20.0, 120.0),
        }
    }

    /// Same setup with trading frictions removed.
    pub fn frictionless(self) -> Self {
        EnvConfig { alpha: 0.0, ..self }
    }

    /// Changes the number of daily steps and keeps the option maturity on the horizon.
    pub fn with_steps(self, n_steps: usize) -> Result<Self> {
        let grid = TradingGrid::new(n_steps, self.grid.dt)?;
        let option = OptionSpec {
            maturity: grid.horizon(),
            ..self.option
        };
        Ok(EnvConfig { grid, option, ..self })
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.option.validate()?;
        let nonneg = [("alpha", self.alpha), ("beta", self.beta), ("lambda_ra", self.lambda_ra)];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HedgeError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.contract_multiplier >= 1.0) {
            return Err(HedgeError::Config(format!(
                "contract_multiplier must be >= 1, got {}",
                self.contract_multiplier
            )));
        }
        if !self.option_holding.is_finite() {
            return Err(HedgeError::Config("option_holding must be finite".into()));
        }
        if !(self.gamma_discount > 0.0 && self.gamma_discount <= 1.0) {
            return Err(HedgeError::Config(format!(
                "gamma_discount must lie in (0, 1], got {}",
                self.gamma_discount
            )));
        }
        let (lo, hi) = self.holding_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(HedgeError::Config(format!("bad holding bounds ({lo}, {hi})")));
        }
        let horizon = self.grid.horizon();
        if (self.option.maturity - horizon).abs() > 1e-9 * horizon {
            return Err(HedgeError::Config(format!(
                "option maturity {} does not match the trading horizon {horizon}",
                self.option.maturity
            )));
        }
        Ok(())
    }

    pub fn transaction_cost(&self, s: f64, d_h: f64) -> f64 {
        transaction_cost(self.alpha, self.beta, s, d_h)
    }

    pub fn clip_holding(&self, h: f64) -> f64 {
        h.clamp(self.holding_bounds.0, self.holding_bounds.1)
    }

    /// Fully priced state at `step` for a given stock price and pre-trade holding.
    pub fn state_at(&self, step: usize, stock: f64, holding: f64) -> Result<HedgeState> {
        let time = self.grid.time(step);
        let tau = if step >= self.grid.n_steps {
            0.0
        } else {
            (self.option.maturity - time).max(0.0)
        };
        let sigma = self.market.sigma;
        let rate = self.market.rate;
        Ok(HedgeState {
            step_index: step,
            time,
            stock,
            option_price: bs_call_price(stock, &self.option, tau, sigma, rate)?,
            delta: bs_call_delta(stock, &self.option, tau, sigma, rate)?,
            holding,
        })
    }

    /// Start of an episode: spot `s0`, no stock held.
    pub fn initial_state(&self) -> Result<HedgeState> {
        self.state_at(0, self.market.s0, 0.0)
    }
}

/// What the agent observes before trading at a grid time. `holding` is the
/// stock position carried into the step, before rebalancing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HedgeState {
    pub step_index: usize,
    pub time: f64,
    pub stock: f64,
    pub option_price: f64,
    pub delta: f64,
    pub holding: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: HedgeState,
    /// Discounted change in value of the whole portfolio.
    pub pnl: f64,
    /// Cost of the rebalancing trade at the start of the step.
    pub tc: f64,
    /// Liquidation cost at maturity, zero before the last step.
    pub unwind_tc: f64,
    pub cost: f64,
    pub reward: f64,
    pub done: bool,
}

/// `alpha * s * (|d_h| + beta * d_h^2)`.
pub fn transaction_cost(alpha: f64, beta: f64, s: f64, d_h: f64) -> f64 {
    alpha * s * (d_h.abs() + beta * d_h * d_h)
}

/// Stepwise mean-variance cost, the second moment standing in for the variance.
pub fn stepwise_cost(pnl: f64, lambda_ra: f64) -> f64 {
    -pnl + 0.5 * lambda_ra * pnl * pnl
}

/// Rebalance to `new_holding`, then let the market move by one standard normal `shock`.
pub fn step(cfg: &EnvConfig, state: &HedgeState, new_holding: f64, shock: f64) -> Result<StepOutcome> {
    let n = cfg.grid.n_steps;
    if state.step_index >= n {
        return Err(HedgeError::Usage(format!(
            "step called on terminal state (step {} of {n})",
            state.step_index
        )));
    }
    let (lo, hi) = cfg.holding_bounds;
    if !new_holding.is_finite() {
        return Err(HedgeError::NonFinite(format!("new holding {new_holding}")));
    }
    if new_holding < lo - 1e-9 || new_holding > hi + 1e-9 {
        return Err(HedgeError::Usage(format!(
            "holding {new_holding} outside bounds [{lo}, {hi}]"
        )));
    }

    let dt = cfg.grid.dt;
    let next_step = state.step_index + 1;
    let stock = gbm_step(state.stock, dt, dt.sqrt() * shock, &cfg.market)?;
    let next = cfg.state_at(next_step, stock, new_holding)?;

    let df_now = discount_factor(cfg.market.rate, state.time);
    let df_next = discount_factor(cfg.market.rate, next.time);
    let s_now = df_now * state.stock;
    let s_next = df_next * next.stock;
    let option_leg = cfg.option_holding * cfg.contract_multiplier * (df_next * next.option_price - df_now * state.option_price);

    let tc = cfg.transaction_cost(s_now, new_holding - state.holding);
    let done = next_step == n;
    let unwind_tc = if done && cfg.settle_unwind {
        cfg.transaction_cost(s_next, new_holding)
    } else {
        0.0
    };
    let pnl = option_leg + new_holding * (s_next - s_now) - tc - unwind_tc;
    let cost = stepwise_cost(pnl, cfg.lambda_ra);
    Ok(StepOutcome {
        next,
        pnl,
        tc,
        unwind_tc,
        cost,
        reward: -cost,
        done,
    })
}

/// Holds `delta * |H_O| * multiplier` shares against the option position.
pub fn delta_hedge_policy(state: &HedgeState, cfg: &EnvConfig) -> f64 {
    -cfg.option_holding.signum() * state.delta * cfg.option_holding.abs() * cfg.contract_multiplier
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// `n_steps + 1` states; the last one is terminal.
    pub states: Vec<HedgeState>,
    /// Post-trade holdings chosen at each step.
    pub actions: Vec<f64>,
    pub pnls: Vec<f64>,
    /// Transaction cost charged in each step, unwind included in the last.
    pub tcs: Vec<f64>,
    pub costs: Vec<f64>,
    /// `-sum(pnl)`: positive is a loss.
    pub total_hedge_cost: f64,
    pub total_tc: f64,
}

impl EpisodeRecord {
    fn with_capacity(n: usize, first: HedgeState) -> Self {
        let mut states = Vec::with_capacity(n + 1);
        states.push(first);
        EpisodeRecord {
            states,
            actions: Vec::with_capacity(n),
            pnls: Vec::with_capacity(n),
            tcs: Vec::with_capacity(n),
            costs: Vec::with_capacity(n),
            total_hedge_cost: 0.0,
            total_tc: 0.0,
        }
    }

    fn push(&mut self, action: f64, out: &StepOutcome) {
        self.states.push(out.next);
        self.actions.push(action);
        self.pnls.push(out.pnl);
        self.tcs.push(out.tc + out.unwind_tc);
        self.costs.push(out.cost);
        self.total_hedge_cost -= out.pnl;
        self.total_tc += out.tc + out.unwind_tc;
    }

    /// `gamma`-discounted sum of stepwise costs.
    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        self.costs
            .iter()
            .enumerate()
            .map(|(t, c)| gamma.powi(t as i32) * c)
            .sum()
    }

    pub fn last_state(&self) -> &HedgeState {
        self.states.last().expect("episode has an initial state")
    }
}

/// Runs one episode on the given standard normal shocks. The policy output is
/// clipped to the holding bounds.
pub fn rollout_with_shocks<P>(cfg: &EnvConfig, mut policy: P, shocks: &[f64]) -> Result<EpisodeRecord>
where
    P: FnMut(&HedgeState) -> f64,
{
    cfg.validate()?;
    let n = cfg.grid.n_steps;
    if shocks.len() != n {
        return Err(HedgeError::InvalidInput(format!(
            "episode needs {n} shocks, got {}",
            shocks.len()
        )));
    }
    let mut state = cfg.initial_state()?;
    let mut record = EpisodeRecord::with_capacity(n, state);
    for &z in shocks {
        let raw = policy(&state);
        if !raw.is_finite() {
            return Err(HedgeError::NonFinite(format!(
                "policy returned {raw} at step {}",
                state.step_index
            )));
        }
        let action = cfg.clip_holding(raw);
        let out = step(cfg, &state, action, z)?;
        record.push(action, &out);
        state = out.next;
    }
    Ok(record)
}

/// Runs episode number `episode` of the seed's stream.
pub fn rollout<P>(cfg: &EnvConfig, policy: P, seed: SeedToken, episode: usize) -> Result<EpisodeRecord>
where
    P: FnMut(&HedgeState) -> f64,
{
    let shocks = crate::market_sim::draw_shocks(1, episode, cfg.grid.n_steps, &seed);
    rollout_with_shocks(cfg, policy, shocks.row(0).as_slice().expect("row-major shocks"))
}

/// A strategy that chooses holdings for many episodes at once.
pub trait Hedger: Sync {
    fn label(&self) -> String;

    /// Target holdings (before clipping) for a batch of states at the same step.
    fn holdings(&self, step: usize, states: &[HedgeState]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug)]
pub struct DeltaHedger {
    pub env: EnvConfig,
}

impl Hedger for DeltaHedger {
    fn label(&self) -> String {
        "delta".into()
    }

    fn holdings(&self, _step: usize, states: &[HedgeState]) -> Result<Vec<f64>> {
        Ok(states.iter().map(|s| delta_hedge_policy(s, &self.env)).collect())
    }
}

/// Steps every path of the batch in lockstep under one hedger.
pub fn rollout_batch(cfg: &EnvConfig, paths: &PathBatch, hedger: &dyn Hedger) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    let n = cfg.grid.n_steps;
    if paths.shocks.ncols() != n {
        return Err(HedgeError::InvalidInput(format!(
            "paths have {} steps, environment has {n}",
            paths.shocks.ncols()
        )));
    }
    let first = cfg.initial_state()?;
    let mut records: Vec<EpisodeRecord> = (0..paths.n_paths())
        .map(|_| EpisodeRecord::with_capacity(n, first))
        .collect();
    let mut states = vec![first; paths.n_paths()];
    for t in 0..n {
        let targets = hedger.holdings(t, &states)?;
        if targets.len() != states.len() {
            return Err(HedgeError::InvalidInput(format!(
                "hedger returned {} holdings for {} states",
                targets.len(),
                states.len()
            )));
        }
        for (i, (state, raw)) in states.iter_mut().zip(targets).enumerate() {
            if !raw.is_finite() {
                return Err(HedgeError::NonFinite(format!("{} returned {raw} at step {t}", hedger.label())));
            }
            let action = cfg.clip_holding(raw);
            let out = step(cfg, state, action, paths.shocks[[i, t]])?;
            records[i].push(action, &out);
            *state = out.next;
        }
    }
    Ok(records)
}

/// Writes `episode,step,time,stock,option_price,delta,holding,pnl,tc,cost` rows.
pub fn write_episodes_csv<W: Write>(records: &[EpisodeRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "episode,step,time,stock,option_price,delta,holding,pnl,tc,cost")?;
    for (e, r) in records.iter().enumerate() {
        for (t, s) in r.states.iter().take(r.actions.len()).enumerate() {
            writeln!(
                out,
                "{e},{t},{},{},{},{},{},{},{},{}",
                s.time, s.stock, s.option_price, s.delta, r.actions[t], r.pnls[t], r.tcs[t], r.costs[t]
            )?;
        }
    }
    Ok(())
}

/// Which observation features an agent receives, and how they are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub include_delta: bool,
}

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet { include_delta: true }
    }
}

impl FeatureSet {
    pub fn names(&self) -> Vec<&'static str> {
        if self.include_delta {
            vec!["time", "stock", "option_price", "delta", "holding"]
        } else {
            vec!["time", "stock", "option_price", "holding"]
        }
    }

    pub fn dim(&self) -> usize {
        if self.include_delta {
            5
        } else {
            4
        }
    }

    /// Unscaled feature vector in `names()` order.
    pub fn raw(&self, s: &HedgeState) -> Vec<f64> {
        let mut v = vec![s.time, s.stock, s.option_price];
        if self.include_delta {
            v.push(s.delta);
        }
        v.push(s.holding);
        v
    }

    /// Scales raw features in place: time by maturity, prices by spot, holding by the multiplier.
    pub fn normalize(&self, raw: &mut [f64], scale: &FeatureScaling) {
        raw[0] /= scale.maturity;
        raw[1] /= scale.spot;
        raw[2] /= scale.spot;
        let last = raw.len() - 1;
        raw[last] /= scale.multiplier;
    }

    pub fn encode(&self, s: &HedgeState, scale: &FeatureScaling) -> Vec<f64> {
        let mut v = self.raw(s);
        self.normalize(&mut v, scale);
        v
    }
}

/// Scales used to bring observations to order one before they reach a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub maturity: f64,
    pub spot: f64,
    pub multiplier: f64,
}

impl FeatureScaling {
    pub fn from_env(env: &EnvConfig) -> Self {
        FeatureScaling {
            maturity: env.option.maturity,
            spot: env.market.s0,
            multiplier: env.contract_multiplier,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frozen_market(mu: f64) -> EnvConfig {
        EnvConfig {
            market: MarketParams::new(mu, 0.0, 0.0, 100.0).unwrap(),
            ..EnvConfig::reference()
        }
    }

    #[test]
    fn transaction_cost_values() {
        assert_eq!(transaction_cost(0.01, 0.01, 100.0, 0.0), 0.0);
        // 0.01 * 100 * (1 + 0.01)
        assert!((transaction_cost(0.01, 0.01, 100.0, 1.0) - 1.01).abs() < 1e-12);
        assert!((transaction_cost(0.01, 0.01, 100.0, -1.0) - 1.01).abs() < 1e-12);
    }

    #[test]
    fn no_trade_no_move_is_theta_bleed() {
        let mut cfg = frozen_market(0.0).frictionless();
        cfg.lambda_ra = 0.0;
        cfg.market.sigma = 0.2;
        let s0 = cfg.initial_state().unwrap();
        // mu = sigma^2 / 2 with zero shock keeps S fixed.
        cfg.market.mu = 0.02;
        let out = step(&cfg, &s0, 0.0, 0.0).unwrap();
        assert!((out.next.stock - 100.0).abs() < 1e-12);
        let theta = -100.0 * (out.next.option_price - s0.option_price);
        assert!((out.pnl - theta).abs() < 1e-12);
        assert!(out.pnl > 0.0, "short option gains from decay");
        assert_eq!(out.cost, -out.pnl);
    }

    #[test]
    fn naked_short_pnl() {
        let cfg = EnvConfig::reference().frictionless();
        let s0 = cfg.initial_state().unwrap();
        let out = step(&cfg, &s0, 0.0, 0.7).unwrap();
        let expected = -100.0 * (out.next.option_price - s0.option_price);
        assert_eq!(out.pnl, expected);
    }

    #[test]
    fn terminal_step_is_rejected() {
        let cfg = EnvConfig::reference();
        let terminal = cfg.state_at(30, 100.0, 0.0).unwrap();
        assert!(matches!(step(&cfg, &terminal, 0.0, 0.0), Err(HedgeError::Usage(_))));
    }

    #[test]
    fn out_of_bounds_holding_is_rejected() {
        let cfg = EnvConfig::reference();
        let s = cfg.initial_state().unwrap();
        assert!(step(&cfg, &s, 500.0, 0.0).is_err());
        assert!(step(&cfg, &s, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn unwind_charged_only_at_maturity() {
        let cfg = EnvConfig::reference().with_steps(2).unwrap();
        let s = cfg.initial_state().unwrap();
        let a = step(&cfg, &s, 50.0, 0.1).unwrap();
        assert_eq!(a.unwind_tc, 0.0);
        assert!(!a.done);
        let b = step(&cfg, &a.next, 40.0, -0.2).unwrap();
        assert!(b.done);
        assert!((b.unwind_tc - cfg.transaction_cost(b.next.stock, 40.0)).abs() < 1e-12);
        assert!((b.tc - cfg.transaction_cost(a.next.stock, -10.0)).abs() < 1e-12);
    }

    #[test]
    fn cost_minimized_at_inverse_lambda() {
        for lambda in [0.1, 1.0, 10.0] {
            let best = stepwise_cost(1.0 / lambda, lambda);
            assert_eq!(stepwise_cost(0.0, lambda), 0.0);
            for d in [-0.5, -1e-3, 1e-3, 0.5] {
                assert!(stepwise_cost(1.0 / lambda + d, lambda) > best);
            }
        }
    }

    #[test]
    fn delta_policy() {
        let cfg = EnvConfig::reference();
        let mut s = cfg.initial_state().unwrap();
        s.delta = 0.5;
        assert_eq!(delta_hedge_policy(&s, &cfg), 50.0);
        s.delta = 1.0;
        assert_eq!(delta_hedge_policy(&s, &cfg), 100.0);
        let atm = cfg.initial_state().unwrap();
        let tau: f64 = 30.0 / 365.0;
        let d1 = 0.5 * 0.2 * tau.sqrt();
        assert!((delta_hedge_policy(&atm, &cfg) - 100.0 * crate::bs_pricing::norm_cdf(d1)).abs() < 1e-12);
    }

    #[test]
    fn zero_vol_delta_hedge_is_perfect() {
        let mut cfg = frozen_market(0.05).frictionless();
        cfg.lambda_ra = 0.0;
        cfg.option.strike = 95.0;
        let rec = rollout(&cfg, |s| delta_hedge_policy(s, &cfg), SeedToken::test(1), 0).unwrap();
        assert!(rec.total_hedge_cost.abs() < 1e-8, "{}", rec.total_hedge_cost);
    }

    #[test]
    fn rollout_is_deterministic_and_batch_consistent() {
        let cfg = EnvConfig::reference();
        let seed = SeedToken::test(9);
        let a = rollout(&cfg, |s| delta_hedge_policy(s, &cfg), seed, 3).unwrap();
        let b = rollout(&cfg, |s| delta_hedge_policy(s, &cfg), seed, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.actions.len(), 30);
        let paths = crate::market_sim::simulate_paths(5, &cfg.grid, &cfg.market, seed).unwrap();
        let batch = rollout_batch(&cfg, &paths, &DeltaHedger { env: cfg }).unwrap();
        assert_eq!(batch[3], a);
    }

    #[test]
    fn non_finite_policy_aborts() {
        let cfg = EnvConfig::reference();
        let err = rollout(&cfg, |_| f64::NAN, SeedToken::test(0), 0).unwrap_err();
        assert!(matches!(err, HedgeError::NonFinite(_)));
    }

    #[test]
    fn features_are_scaled() {
        let cfg = EnvConfig::reference();
        let mut s = cfg.initial_state().unwrap();
        s.holding = 50.0;
        let scale = FeatureScaling::from_env(&cfg);
        let f = FeatureSet::default().encode(&s, &scale);
        assert_eq!(f.len(), 5);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 1.0);
        assert_eq!(f[4], 0.5);
        let g = FeatureSet { include_delta: false }.encode(&s, &scale);
        assert_eq!(g.len(), 4);
        assert_eq!(g[3], 0.5);
    }
}
