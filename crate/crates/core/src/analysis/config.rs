//! Flat key-value run configuration, read from TOML.
//!
//! Every key is optional. Unset market and environment keys take the
//! reference experiment's values; unset training keys take the values of the
//! chosen `scale` preset (`desk` or `full`). Unknown keys are an error.
//!
//! ```toml
//! seed = 7
//! alpha = 0.0
//! scale = "desk"
//! mvh_epochs = 30
//! sweep_axis = "alpha"
//! sweep_values = [0.0, 0.005, 0.01, 0.02]
//! strategies = ["delta", "deep_mvh"]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::report::Binning;
use crate::ddpg::DdpgConfig;
use crate::deep_mvh::{MvhTrainConfig, Parametrization};
use crate::error::{HedgeError, Result};
use crate::hedging_env::{EnvConfig, FeatureSet};
use crate::market_sim::TradingGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub scale: Scale,
    pub test_episodes: usize,
    /// Histogram bins; unset means Freedman-Diaconis.
    pub bins: Option<usize>,
    pub include_delta: bool,

    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub rate: Option<f64>,
    pub s0: Option<f64>,
    pub strike: Option<f64>,
    /// Trading days to maturity.
    pub maturity_days: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub option_holding: Option<f64>,
    pub multiplier: Option<f64>,
    pub holding_min: Option<f64>,
    pub holding_max: Option<f64>,
    pub settle_unwind: Option<bool>,

    pub mvh_hidden: Option<Vec<usize>>,
    pub mvh_epochs: Option<usize>,
    pub mvh_samples: Option<usize>,
    pub mvh_minibatch: Option<usize>,
    pub mvh_lr: Option<f64>,
    pub mvh_lr_decay_every: Option<usize>,
    pub mvh_dropout: Option<f64>,
    pub mvh_batch_norm: Option<bool>,
    pub parametrization: Option<Parametrization>,
    pub dt_scale: Option<f64>,

    pub ddpg_actor_hidden: Option<Vec<usize>>,
    pub ddpg_critic_hidden: Option<Vec<usize>>,
    pub ddpg_actor_lr: Option<f64>,
    pub ddpg_critic_lr: Option<f64>,
    pub ddpg_episodes: Option<usize>,
    pub ddpg_minibatch: Option<usize>,
    pub ddpg_smoothing: Option<f64>,
    pub ddpg_warmup: Option<usize>,
    pub ou_theta: Option<f64>,
    pub ou_sigma: Option<f64>,
    pub reward_scale: Option<f64>,

    pub sweep_axis: Option<String>,
    pub sweep_values: Vec<f64>,
    /// Hidden layer lists for `sweep_axis = "architecture"`.
    pub sweep_architectures: Vec<Vec<usize>>,
    pub strategies: Vec<String>,
    /// Seeds for sweeps and stability runs; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub common_random_numbers: bool,
    /// Train once on the base environment and evaluate that agent in every cell.
    pub frozen_agent: bool,

    pub shap_background: usize,
    pub shap_instances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out: "out".into(),
            scale: Scale::Desk,
            test_episodes: 1000,
            bins: None,
            include_delta: true,
            mu: None,
            sigma: None,
            rate: None,
            s0: None,
            strike: None,
            maturity_days: None,
            alpha: None,
            beta: None,
            lambda: None,
            gamma: None,
            option_holding: None,
            multiplier: None,
            holding_min: None,
            holding_max: None,
            settle_unwind: None,
            mvh_hidden: None,
            mvh_epochs: None,
            mvh_samples: None,
            mvh_minibatch: None,
            mvh_lr: None,
            mvh_lr_decay_every: None,
            mvh_dropout: None,
            mvh_batch_norm: None,
            parametrization: None,
            dt_scale: None,
            ddpg_actor_hidden: None,
            ddpg_critic_hidden: None,
            ddpg_actor_lr: None,
            ddpg_critic_lr: None,
            ddpg_episodes: None,
            ddpg_minibatch: None,
            ddpg_smoothing: None,
            ddpg_warmup: None,
            ou_theta: None,
            ou_sigma: None,
            reward_scale: None,
            sweep_axis: None,
            sweep_values: Vec::new(),
            sweep_architectures: Vec::new(),
            strategies: vec!["delta".into(), "ddpg".into(), "deep_mvh".into()],
            seeds: Vec::new(),
            workers: 1,
            common_random_numbers: true,
            frozen_agent: false,
            shap_background: 100,
            shap_instances: 200,
        }
    }
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HedgeError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn binning(&self) -> Binning {
        self.bins.map_or(Binning::FreedmanDiaconis, Binning::Fixed)
    }

    pub fn features(&self) -> FeatureSet {
        FeatureSet {
            include_delta: self.include_delta,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn env(&self) -> Result<EnvConfig> {
        let mut env = EnvConfig::reference();
        set(&mut env.market.mu, self.mu);
        set(&mut env.market.sigma, self.sigma);
        set(&mut env.market.rate, self.rate);
        set(&mut env.market.s0, self.s0);
        set(&mut env.option.strike, self.strike);
        set(&mut env.alpha, self.alpha);
        set(&mut env.beta, self.beta);
        set(&mut env.lambda_ra, self.lambda);
        set(&mut env.gamma_discount, self.gamma);
        set(&mut env.option_holding, self.option_holding);
        set(&mut env.contract_multiplier, self.multiplier);
        set(&mut env.holding_bounds.0, self.holding_min);
        set(&mut env.holding_bounds.1, self.holding_max);
        set(&mut env.settle_unwind, self.settle_unwind);
        if let Some(days) = self.maturity_days {
            env.grid = TradingGrid::new(days, env.grid.dt)?;
            env.option.maturity = env.grid.horizon();
        }
        env.validate()?;
        Ok(env)
    }

    pub fn mvh(&self) -> Result<MvhTrainConfig> {
        let mut c = match self.scale {
            Scale::Desk => MvhTrainConfig::desk_scale(),
            Scale::Full => MvhTrainConfig::default(),
        };
        if let Some(h) = &self.mvh_hidden {
            c.hidden = h.clone();
        }
        set(&mut c.epochs, self.mvh_epochs);
        set(&mut c.samples_per_epoch, self.mvh_samples);
        set(&mut c.minibatch, self.mvh_minibatch);
        set(&mut c.lr, self.mvh_lr);
        set(&mut c.lr_decay_every, self.mvh_lr_decay_every);
        set(&mut c.dropout, self.mvh_dropout);
        set(&mut c.batch_norm, self.mvh_batch_norm);
        set(&mut c.parametrization, self.parametrization);
        set(&mut c.dt_scale, self.dt_scale);
        c.features = self.features();
        c.validate()?;
        Ok(c)
    }

    pub fn ddpg(&self) -> Result<DdpgConfig> {
        let mut c = match self.scale {
            Scale::Desk => DdpgConfig::desk_scale(),
            Scale::Full => DdpgConfig::default(),
        };
        if let Some(h) = &self.ddpg_actor_hidden {
            c.actor_hidden = h.clone();
        }
        if let Some(h) = &self.ddpg_critic_hidden {
            c.critic_hidden = h.clone();
        }
        set(&mut c.actor_lr, self.ddpg_actor_lr);
        set(&mut c.critic_lr, self.ddpg_critic_lr);
        set(&mut c.episodes, self.ddpg_episodes);
        set(&mut c.minibatch, self.ddpg_minibatch);
        set(&mut c.target_smoothing, self.ddpg_smoothing);
        set(&mut c.warmup, self.ddpg_warmup);
        set(&mut c.ou_theta, self.ou_theta);
        set(&mut c.ou_sigma, self.ou_sigma);
        set(&mut c.reward_scale, self.reward_scale);
        c.features = self.features();
        c.validate()?;
        Ok(c)
    }

    /// Checks every derived config.
    pub fn validate(&self) -> Result<()> {
        self.env()?;
        self.mvh()?;
        self.ddpg()?;
        if self.test_episodes == 0 {
            return Err(HedgeError::Config("test_episodes must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(HedgeError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_desk_setup() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.env().unwrap(), EnvConfig::reference());
        assert_eq!(c.mvh().unwrap(), MvhTrainConfig::desk_scale());
        assert_eq!(c.ddpg().unwrap(), DdpgConfig::desk_scale());
    }

    #[test]
    fn typed_keys_override_presets() {
        let c = RunConfig::from_toml_str(
            r#"
            scale = "full"
            alpha = 0.0
            maturity_days = 60
            parametrization = "direct"
            mvh_hidden = [4, 4]
            include_delta = false
            strategies = ["delta"]
            "#,
        )
        .unwrap();
        let env = c.env().unwrap();
        assert_eq!(env.alpha, 0.0);
        assert_eq!(env.grid.n_steps, 60);
        assert!((env.option.maturity - 60.0 / 365.0).abs() < 1e-15);
        let mvh = c.mvh().unwrap();
        assert_eq!(mvh.parametrization, Parametrization::Direct);
        assert_eq!(mvh.hidden, vec![4, 4]);
        assert_eq!(mvh.epochs, 100);
        assert!(!mvh.features.include_delta);
        assert!(!c.ddpg().unwrap().features.include_delta);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_errors() {
        assert!(RunConfig::from_toml_str("alhpa = 0.1").is_err());
        assert!(RunConfig::from_toml_str("alpha = \"high\"").is_err());
        assert!(RunConfig::from_toml_str("parametrization = \"log\"").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig {
            alpha: Some(-1.0),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RunConfig {
            workers: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn snapshot_round_trips_through_toml() {
        let c = RunConfig {
            alpha: Some(0.005),
            seeds: vec![1, 2],
            ..RunConfig::default()
        };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }
}
