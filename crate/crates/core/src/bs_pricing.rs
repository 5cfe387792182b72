//! Black-Scholes book-keeping prices for the hedged call.
//!
//! The formula does not depend on the drift of the simulated stock; only
//! volatility and the risk-free rate enter.

use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Call,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub strike: f64,
    /// Years.
    pub maturity: f64,
    pub kind: OptionKind,
}

impl OptionSpec {
    pub fn call(strike: f64, maturity: f64) -> Result<Self> {
        let spec = OptionSpec {
            strike,
            maturity,
            kind: OptionKind::Call,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strike.is_finite() && self.strike > 0.0) {
            return Err(HedgeError::InvalidInput(format!("strike must be positive, got {}", self.strike)));
        }
        if !(self.maturity.is_finite() && self.maturity > 0.0) {
            return Err(HedgeError::InvalidInput(format!(
                "maturity must be positive, got {}",
                self.maturity
            )));
        }
        Ok(())
    }
}

/// Standard normal CDF through the complementary error function, which keeps
/// full relative precision in the lower tail.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn check_args(s: f64, tau: f64, sigma: f64, rate: f64) -> Result<()> {
    if ![s, tau, sigma, rate].iter().all(|v| v.is_finite()) {
        return Err(HedgeError::InvalidInput(format!(
            "non-finite pricing input (s={s}, tau={tau}, sigma={sigma}, rate={rate})"
        )));
    }
    if s <= 0.0 {
        return Err(HedgeError::InvalidInput(format!("spot must be positive, got {s}")));
    }
    if tau < 0.0 {
        return Err(HedgeError::InvalidInput(format!("time to maturity is negative: {tau}")));
    }
    if sigma < 0.0 {
        return Err(HedgeError::InvalidInput(format!("volatility is negative: {sigma}")));
    }
    Ok(())
}

/// `None` when the price is deterministic (expiry or zero volatility).
fn d1_d2(s: f64, k: f64, tau: f64, sigma: f64, rate: f64) -> Option<(f64, f64)> {
    let vol = sigma * tau.sqrt();
    if vol <= 0.0 {
        return None;
    }
    let d1 = ((s / k).ln() + (rate + 0.5 * sigma * sigma) * tau) / vol;
    Some((d1, d1 - vol))
}

pub fn bs_call_price(s: f64, spec: &OptionSpec, tau: f64, sigma: f64, rate: f64) -> Result<f64> {
    check_args(s, tau, sigma, rate)?;
    let k = spec.strike;
    let df = (-rate * tau).exp();
    Ok(match d1_d2(s, k, tau, sigma, rate) {
        Some((d1, d2)) => s * norm_cdf(d1) - k * df * norm_cdf(d2),
        None => (s - k * df).max(0.0),
    })
}

/// N(d1); at expiry (or zero vol) the indicator of finishing in the money,
/// with 0.5 exactly at the money.
pub fn bs_call_delta(s: f64, spec: &OptionSpec, tau: f64, sigma: f64, rate: f64) -> Result<f64> {
    check_args(s, tau, sigma, rate)?;
    let forward_strike = spec.strike * (-rate * tau).exp();
    Ok(match d1_d2(s, spec.strike, tau, sigma, rate) {
        Some((d1, _)) => norm_cdf(d1),
        None if s > forward_strike => 1.0,
        None if s < forward_strike => 0.0,
        None => 0.5,
    })
}
