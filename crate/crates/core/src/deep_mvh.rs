//! Deep trajectory-based stochastic optimal control for mean-variance hedging.
//!
//! One feedforward policy per trading step is chained into a single
//! computational graph: the holding chosen at step `t` is the holding carried
//! into step `t + 1`. The batch mean of the discounted cumulative stepwise
//! cost is differentiated through that chain and all step policies are
//! updated jointly. The market (stock, option price, delta) is exogenous and
//! carries no gradient.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};
use crate::hedging_env::{self, EnvConfig, FeatureScaling, FeatureSet, HedgeState, Hedger};
use crate::market_sim::{discount_factor, draw_shocks, SeedToken, StreamDomain};
use crate::neural::{read_checkpoint, write_checkpoint, AdamState, Architecture, DenseNet, GradientTape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    /// The network gives the trade for the step; holdings accumulate.
    Rate,
    /// The network gives the holding itself, squashed into the bounds.
    Direct,
}

impl std::str::FromStr for Parametrization {
    type Err = HedgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rate" => Ok(Parametrization::Rate),
            "direct" => Ok(Parametrization::Direct),
            other => Err(HedgeError::Config(format!("unknown parametrization {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvhTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// Fresh simulated paths per epoch.
    pub samples_per_epoch: usize,
    pub minibatch: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay_factor` every `lr_decay_every` epochs (0 disables).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub dropout: f64,
    pub batch_norm: bool,
    pub parametrization: Parametrization,
    /// Trading steps per unit of network output in rate mode; the output is
    /// measured in contracts, so one unit trades `contract_multiplier` shares.
    pub dt_scale: f64,
    pub features: FeatureSet,
    /// Minibatch losses above this abort training.
    pub divergence_threshold: f64,
}

impl Default for MvhTrainConfig {
    fn default() -> Self {
        MvhTrainConfig {
            hidden: vec![10, 15, 10],
            epochs: 100,
            samples_per_epoch: 50_000,
            minibatch: 250,
            lr: 1e-3,
            lr_decay_every: 25,
            lr_decay_factor: 0.5,
            dropout: 0.25,
            batch_norm: true,
            parametrization: Parametrization::Rate,
            dt_scale: 1.0,
            features: FeatureSet::default(),
            divergence_threshold: 1e6,
        }
    }
}

impl MvhTrainConfig {
    /// Reduced run: 20 epochs of 10,000 paths, dropout off.
    pub fn desk_scale() -> Self {
        MvhTrainConfig {
            epochs: 20,
            samples_per_epoch: 10_000,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(HedgeError::Config("epochs must be at least 1".into()));
        }
        if self.minibatch == 0 || self.samples_per_epoch < self.minibatch {
            return Err(HedgeError::Config(format!(
                "need samples_per_epoch ({}) >= minibatch ({}) >= 1",
                self.samples_per_epoch, self.minibatch
            )));
        }
        if !(self.lr > 0.0) {
            return Err(HedgeError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HedgeError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
        }
    }
}

/// `n_steps` policy networks, network `t` acting at grid time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStack {
    nets: Vec<DenseNet>,
    pub parametrization: Parametrization,
    pub features: FeatureSet,
    pub scaling: FeatureScaling,
    pub holding_bounds: (f64, f64),
    /// Shares traded per unit output in rate mode.
    pub rate_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StackManifest {
    parametrization: Parametrization,
    features: FeatureSet,
    scaling: FeatureScaling,
    holding_bounds: (f64, f64),
    rate_scale: f64,
    networks: Vec<String>,
}

impl PolicyStack {
    pub fn new<R: Rng + ?Sized>(config: &MvhTrainConfig, env: &EnvConfig, rng: &mut R) -> Result<Self> {
        let arch = Architecture::mlp(
            config.features.dim(),
            &config.hidden,
            1,
            config.batch_norm,
            config.dropout,
        );
        // Every path starts from the same state, so the first network sees a
        // constant batch and batch statistics degenerate; it gets no batch norm.
        let first = Architecture::mlp(config.features.dim(), &config.hidden, 1, false, config.dropout);
        let nets = (0..env.grid.n_steps)
            .map(|t| {
                let mut net = DenseNet::new(if t == 0 { first.clone() } else { arch.clone() }, rng)?;
                // zero output layer: rate mode starts by holding still, direct mode at mid-bounds
                let last = net.architecture().layers.len() - 1;
                let width = net.architecture().layers[last].inputs;
                net.set_layer(last, &vec![0.0; width], &[0.0])?;
                Ok(net)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_nets(nets, config, env))
    }

    pub fn from_nets(nets: Vec<DenseNet>, config: &MvhTrainConfig, env: &EnvConfig) -> Self {
        PolicyStack {
            nets,
            parametrization: config.parametrization,
            features: config.features,
            scaling: FeatureScaling::from_env(env),
            holding_bounds: env.holding_bounds,
            rate_scale: env.contract_multiplier * config.dt_scale,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.nets.len()
    }

    pub fn nets(&self) -> &[DenseNet] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [DenseNet] {
        &mut self.nets
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.nets.len() {
            return Err(HedgeError::InvalidInput(format!(
                "step {step} out of range for a stack of {} policies",
                self.nets.len()
            )));
        }
        Ok(())
    }

    /// Holding implied by network output `out` given the carried holding.
    /// Returns `(holding, d holding / d out, d holding / d prev)`.
    fn map_output(&self, out: f64, prev: f64) -> (f64, f64, f64) {
        let (lo, hi) = self.holding_bounds;
        match self.parametrization {
            Parametrization::Rate => {
                let raw = prev + out * self.rate_scale;
                if raw < lo || raw > hi {
                    (raw.clamp(lo, hi), 0.0, 0.0)
                } else {
                    (raw, self.rate_scale, 1.0)
                }
            }
            Parametrization::Direct => {
                let th = out.tanh();
                let half = 0.5 * (hi - lo);
                (lo + half * (th + 1.0), half * (1.0 - th * th), 0.0)
            }
        }
    }

    fn encode_batch(&self, states: &[HedgeState]) -> Array2<f64> {
        let d = self.features.dim();
        let mut x = Array2::zeros((states.len(), d));
        for (mut row, s) in x.outer_iter_mut().zip(states) {
            let v = self.features.encode(s, &self.scaling);
            row.assign(&ndarray::ArrayView1::from(&v));
        }
        x
    }

    /// New holding at `step` for an observed state carrying `prev_holding` shares.
    pub fn act(&self, step: usize, state: &HedgeState, prev_holding: f64) -> Result<f64> {
        self.check_step(step)?;
        let mut s = *state;
        s.holding = prev_holding;
        let x = self.encode_batch(&[s]);
        let out = self.nets[step].predict(x.view())?;
        Ok(self.map_output(out[[0, 0]], prev_holding).0)
    }

    /// Evaluation-mode holdings for raw (unscaled) feature rows in `FeatureSet::names` order.
    pub fn act_raw(&self, step: usize, raw: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_step(step)?;
        let mut x = raw.to_owned();
        let last = x.ncols() - 1;
        for mut row in x.outer_iter_mut() {
            self.features
                .normalize(row.as_slice_mut().expect("row-major"), &self.scaling);
        }
        let out = self.nets[step].predict(x.view())?;
        Ok(raw
            .outer_iter()
            .zip(out.column(0))
            .map(|(r, &o)| self.map_output(o, r[last]).0)
            .collect())
    }

    /// Writes one network checkpoint per step plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HedgeError::io(dir, e))?;
        let mut names = Vec::with_capacity(self.nets.len());
        for (t, net) in self.nets.iter().enumerate() {
            let name = format!("policy_{t:03}.bin");
            write_checkpoint(net, serde_json::json!({ "step": t }), &dir.join(&name))?;
            names.push(name);
        }
        let manifest = StackManifest {
            parametrization: self.parametrization,
            features: self.features,
            scaling: self.scaling,
            holding_bounds: self.holding_bounds,
            rate_scale: self.rate_scale,
            networks: names,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| HedgeError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(HedgeError::MissingCheckpoint(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| HedgeError::io(&path, e))?;
        let m: StackManifest = serde_json::from_str(&text)?;
        let nets = m
            .networks
            .iter()
            .map(|n| read_checkpoint(&dir.join(n)).map(|(net, _)| net))
            .collect::<Result<Vec<_>>>()?;
        Ok(PolicyStack {
            nets,
            parametrization: m.parametrization,
            features: m.features,
            scaling: m.scaling,
            holding_bounds: m.holding_bounds,
            rate_scale: m.rate_scale,
        })
    }
}

impl Hedger for PolicyStack {
    fn label(&self) -> String {
        "deep_mvh".into()
    }

    fn holdings(&self, step: usize, states: &[HedgeState]) -> Result<Vec<f64>> {
        self.check_step(step)?;
        let x = self.encode_batch(states);
        let out = self.nets[step].predict(x.view())?;
        Ok(states
            .iter()
            .zip(out.column(0))
            .map(|(s, &o)| self.map_output(o, s.holding).0)
            .collect())
    }
}

struct StepTape {
    net: GradientTape,
    /// d holding_t / d output_t per path.
    dh_dout: Vec<f64>,
    /// d holding_t / d holding_{t-1} through the parametrization.
    dh_dprev: Vec<f64>,
    /// d pnl_t / d holding_t and d pnl_t / d holding_{t-1}.
    dpnl_dh: Vec<f64>,
    dpnl_dprev: Vec<f64>,
    /// d loss / d pnl_t, batch-mean weights and discounting included.
    dloss_dpnl: Vec<f64>,
}

/// Everything needed for one reverse pass over a simulated batch.
pub struct TrajectoryTape {
    steps: Vec<StepTape>,
    holding_col: usize,
    multiplier: f64,
    n_params: Vec<usize>,
}

/// Stack gradients, one flat vector per step network.
pub type StackGrads = Vec<Vec<f64>>;

/// Forward mode for [`rollout_loss`].
pub enum RolloutMode<'a> {
    /// Batch-norm batch statistics and dropout masks from the given generator.
    Train(&'a mut dyn rand::RngCore),
    Eval,
}

/// Per-path results of a stack rollout, kept for diagnostics and env checks.
#[derive(Clone, Debug, PartialEq)]
pub struct StackRollout {
    pub holdings: Array2<f64>,
    pub pnls: Array2<f64>,
    pub costs: Array2<f64>,
}

/// Simulates every shock row under the stack and returns the batch mean of the
/// `gamma`-discounted cumulative stepwise cost, with the tape for
/// [`backward_through_trajectory`].
pub fn rollout_loss(
    stack: &mut PolicyStack,
    shocks: ArrayView2<f64>,
    env: &EnvConfig,
    mode: RolloutMode<'_>,
) -> Result<(f64, TrajectoryTape, StackRollout)> {
    env.validate()?;
    let n = env.grid.n_steps;
    if shocks.ncols() != n || stack.n_steps() != n {
        return Err(HedgeError::InvalidInput(format!(
            "shock width {} and stack depth {} must both equal the {n} trading steps",
            shocks.ncols(),
            stack.n_steps()
        )));
    }
    let batch = shocks.nrows();
    if batch == 0 {
        return Err(HedgeError::InvalidInput("empty shock batch".into()));
    }
    let inv_batch = 1.0 / batch as f64;
    let (alpha, beta) = (env.alpha, env.beta);

    let mut rng_holder = mode;
    let mut states = vec![env.initial_state()?; batch];
    let mut holdings = Array2::zeros((batch, n));
    let mut pnls = Array2::zeros((batch, n));
    let mut costs = Array2::zeros((batch, n));
    let mut tapes = Vec::with_capacity(n);
    let mut total = 0.0;

    for t in 0..n {
        let x = stack.encode_batch(&states);
        let (out, net_tape) = match &mut rng_holder {
            RolloutMode::Train(rng) => stack.nets[t].forward_train(x.view(), &mut **rng)?,
            RolloutMode::Eval => stack.nets[t].forward_eval(x.view())?,
        };
        let discount = env.gamma_discount.powi(t as i32);
        let df_now = discount_factor(env.market.rate, env.grid.time(t));
        let df_next = discount_factor(env.market.rate, env.grid.time(t + 1));
        let mut tape = StepTape {
            net: net_tape,
            dh_dout: Vec::with_capacity(batch),
            dh_dprev: Vec::with_capacity(batch),
            dpnl_dh: Vec::with_capacity(batch),
            dpnl_dprev: Vec::with_capacity(batch),
            dloss_dpnl: Vec::with_capacity(batch),
        };
        for (b, state) in states.iter_mut().enumerate() {
            let prev = state.holding;
            let (h, dh_dout, dh_dprev) = stack.map_output(out[[b, 0]], prev);
            let outcome = hedging_env::step(env, state, h, shocks[[b, t]])?;
            if !outcome.cost.is_finite() {
                return Err(HedgeError::NonFinite(format!(
                    "path {b} step {t}: holding {h}, stock {}, pnl {}",
                    outcome.next.stock, outcome.pnl
                )));
            }
            let s_now = df_now * state.stock;
            let s_next = df_next * outcome.next.stock;
            let trade = h - prev;
            let marginal_tc = alpha * s_now * (trade.signum_or_zero() + 2.0 * beta * trade);
            let mut dpnl_dh = (s_next - s_now) - marginal_tc;
            if outcome.done && env.settle_unwind {
                dpnl_dh -= alpha * s_next * (h.signum_or_zero() + 2.0 * beta * h);
            }
            tape.dh_dout.push(dh_dout);
            tape.dh_dprev.push(dh_dprev);
            tape.dpnl_dh.push(dpnl_dh);
            tape.dpnl_dprev.push(marginal_tc);
            tape.dloss_dpnl
                .push(discount * inv_batch * (-1.0 + env.lambda_ra * outcome.pnl));

            holdings[[b, t]] = h;
            pnls[[b, t]] = outcome.pnl;
            costs[[b, t]] = outcome.cost;
            total += discount * outcome.cost;
            *state = outcome.next;
        }
        tapes.push(tape);
    }

    let loss = total * inv_batch;
    let tape = TrajectoryTape {
        steps: tapes,
        holding_col: stack.features.dim() - 1,
        multiplier: stack.scaling.multiplier,
        n_params: stack.nets.iter().map(DenseNet::n_params).collect(),
    };
    Ok((loss, tape, StackRollout { holdings, pnls, costs }))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// Subgradient of `|x|` taking 0 at the kink.
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Exact gradients of the batch-mean loss for every network of the stack.
pub fn backward_through_trajectory(stack: &PolicyStack, tape: TrajectoryTape) -> Result<StackGrads> {
    let n = tape.steps.len();
    if n != stack.n_steps() || tape.n_params.iter().zip(&stack.nets).any(|(&p, net)| p != net.n_params()) {
        return Err(HedgeError::Usage("trajectory tape does not belong to this stack".into()));
    }
    let mut grads: StackGrads = vec![Vec::new(); n];
    // d loss / d holding_t from steps after t
    let mut carry: Option<Vec<f64>> = None;
    for (t, step) in tape.steps.into_iter().enumerate().rev() {
        let batch = step.dh_dout.len();
        let mut g_out = Array2::zeros((batch, 1));
        let mut g_h = vec![0.0; batch];
        for b in 0..batch {
            let later = carry.as_ref().map_or(0.0, |c| c[b]);
            g_h[b] = step.dloss_dpnl[b] * step.dpnl_dh[b] + later;
            g_out[[b, 0]] = g_h[b] * step.dh_dout[b];
        }
        let (g_params, dx) = stack.nets[t].backward(step.net, g_out.view())?;
        grads[t] = g_params;
        let dx_hold = dx.slice(s![.., tape.holding_col]);
        carry = Some(
            (0..batch)
                .map(|b| {
                    step.dloss_dpnl[b] * step.dpnl_dprev[b]
                        + dx_hold[b] / tape.multiplier
                        + g_h[b] * step.dh_dprev[b]
                })
                .collect(),
        );
    }
    Ok(grads)
}

/// Sign-preserving log, `sign(x) * ln(1 + |x|)`, so the curve is defined for negative losses.
pub fn signed_log(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

#[derive(Clone, Debug)]
pub struct MvhTrainOutcome {
    pub stack: PolicyStack,
    /// Per-epoch mean of the signed log minibatch loss.
    pub curve: Vec<f64>,
    /// Per-epoch mean minibatch loss.
    pub epoch_losses: Vec<f64>,
}

pub fn train_mvh(config: &MvhTrainConfig, env: &EnvConfig, seed: u64) -> Result<MvhTrainOutcome> {
    train_mvh_with(config, env, seed, |_, _, _| Ok(()))
}

/// Training with a per-epoch hook (checkpointing, progress). The hook sees
/// the epoch index, the stack after that epoch and its mean loss.
pub fn train_mvh_with<F>(config: &MvhTrainConfig, env: &EnvConfig, seed: u64, mut on_epoch: F) -> Result<MvhTrainOutcome>
where
    F: FnMut(usize, &PolicyStack, f64) -> Result<()>,
{
    config.validate()?;
    env.validate()?;
    let mut init_rng = SeedToken::new(seed, StreamDomain::Init).rng(0);
    let mut stack = PolicyStack::new(config, env, &mut init_rng)?;
    let mut optimizers: Vec<AdamState> = stack
        .nets
        .iter()
        .map(|net| AdamState::new(net.n_params(), config.lr))
        .collect();
    let n = env.grid.n_steps;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        for opt in &mut optimizers {
            opt.lr = lr;
        }
        let shocks = draw_shocks(
            config.samples_per_epoch,
            0,
            n,
            &SeedToken::train(seed).with_salt(epoch as u64),
        );
        let mut dropout_rng = SeedToken::new(seed, StreamDomain::Dropout)
            .with_salt(epoch as u64)
            .rng(0);
        let mut log_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut start = 0;
        while start + config.minibatch <= config.samples_per_epoch {
            let rows = shocks.slice(s![start..start + config.minibatch, ..]);
            let (loss, tape, _) = rollout_loss(&mut stack, rows, env, RolloutMode::Train(&mut dropout_rng))?;
            if !loss.is_finite() || loss > config.divergence_threshold {
                return Err(HedgeError::Diverged {
                    stage: format!("epoch {epoch}, minibatch {batches}"),
                    loss,
                });
            }
            let grads = backward_through_trajectory(&stack, tape)?;
            for ((net, opt), g) in stack.nets.iter_mut().zip(&mut optimizers).zip(&grads) {
                opt.step(net.params_mut(), g)?;
            }
            log_sum += signed_log(loss);
            loss_sum += loss;
            batches += 1;
            start += config.minibatch;
        }
        let mean_loss = loss_sum / batches as f64;
        curve.push(log_sum / batches as f64);
        epoch_losses.push(mean_loss);
        on_epoch(epoch, &stack, mean_loss)?;
    }
    Ok(MvhTrainOutcome {
        stack,
        curve,
        epoch_losses,
    })
}

/// Writes `epoch,mean_log_loss` rows.
pub fn write_curve_csv<W: Write>(curve: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,mean_log_loss")?;
    for (e, v) in curve.iter().enumerate() {
        writeln!(out, "{e},{v}")?;
    }
    Ok(())
}
