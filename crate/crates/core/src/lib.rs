//! Mean-variance hedging of a European call with transaction costs.
//!
//! Two learned hedgers are trained against the Black-Scholes delta hedge:
//! a DDPG actor-critic ([`ddpg`]) and a deep trajectory-based optimal-control
//! stack with one policy network per trading step ([`deep_mvh`]).

pub mod analysis;
pub mod bs_pricing;
pub mod ddpg;
pub mod deep_mvh;
pub mod error;
pub mod explain;
pub mod hedging_env;
pub mod market_sim;
pub mod neural;
pub mod svg;

pub use error::{HedgeError, Result};
