//! Deep deterministic policy gradient hedger.
//!
//! One stationary actor maps the normalized state (time included) to a
//! pre-squash control `u`; the holding is `lo + (hi - lo) * (tanh(u) + 1) / 2`.
//! The critic sees the normalized state with the holding appended in
//! contracts (`H / multiplier`).

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};
use crate::hedging_env::{self, EnvConfig, FeatureScaling, FeatureSet, HedgeState, Hedger};
use crate::market_sim::{draw_shocks, SeedToken, StreamDomain};
use crate::neural::{read_checkpoint, write_checkpoint, AdamState, Architecture, DenseNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpgConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Fraction of the way targets move towards the learned networks per update.
    pub target_smoothing: f64,
    pub episodes: usize,
    pub minibatch: usize,
    pub buffer_capacity: usize,
    /// Stored transitions before the first update.
    pub warmup: usize,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    pub ou_dt: f64,
    /// Rewards are multiplied by this before they reach the critic.
    pub reward_scale: f64,
    pub features: FeatureSet,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            actor_hidden: vec![12, 12, 12],
            critic_hidden: vec![24, 24, 24],
            actor_lr: 1e-5,
            critic_lr: 1e-4,
            target_smoothing: 1e-3,
            episodes: 5000,
            minibatch: 64,
            buffer_capacity: 100_000,
            warmup: 1000,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            ou_dt: 1.0,
            reward_scale: 0.01,
            features: FeatureSet::default(),
        }
    }
}

impl DdpgConfig {
    /// Reduced run: 1000 episodes.
    pub fn desk_scale() -> Self {
        DdpgConfig {
            episodes: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(HedgeError::Config("learning rates must be positive".into()));
        }
        if !(self.target_smoothing > 0.0 && self.target_smoothing < 1.0) {
            return Err(HedgeError::Config(format!(
                "target smoothing {} not in (0, 1)",
                self.target_smoothing
            )));
        }
        if self.minibatch == 0 || self.buffer_capacity < self.minibatch {
            return Err(HedgeError::Config(format!(
                "need buffer capacity ({}) >= minibatch ({}) >= 1",
                self.buffer_capacity, self.minibatch
            )));
        }
        if !(self.ou_theta > 0.0 && self.ou_sigma >= 0.0 && self.ou_dt > 0.0) {
            return Err(HedgeError::Config("OU noise needs theta > 0, sigma >= 0, dt > 0".into()));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(HedgeError::Config(format!("reward scale {} must be positive", self.reward_scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Holding in contracts.
    pub action: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, overwriting the oldest item once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        self.sample_indices(n, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Ornstein-Uhlenbeck exploration noise, advanced with the exact Gaussian
/// transition so the stationary standard deviation is `sigma / sqrt(2 theta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuNoise {
    pub value: f64,
    pub theta: f64,
    pub sigma: f64,
    pub dt: f64,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64, dt: f64) -> Self {
        OuNoise {
            value: 0.0,
            theta,
            sigma,
            dt,
        }
    }

    pub fn reset(&mut self) {
        self.value = 0.0;
    }

    pub fn stationary_std(&self) -> f64 {
        self.sigma / (2.0 * self.theta).sqrt()
    }

    /// Advances one step and returns the new value.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let decay = (-self.theta * self.dt).exp();
        let spread = self.sigma * ((1.0 - decay * decay) / (2.0 * self.theta)).sqrt();
        let z: f64 = rng.sample(StandardNormal);
        self.value = self.value * decay + spread * z;
        self.value
    }
}

/// Maps the actor's unbounded output to a holding and back to critic units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMap {
    pub holding_bounds: (f64, f64),
    pub multiplier: f64,
}

impl ActionMap {
    pub fn from_env(env: &EnvConfig) -> Self {
        ActionMap {
            holding_bounds: env.holding_bounds,
            multiplier: env.contract_multiplier,
        }
    }

    pub fn squash(&self, u: f64) -> f64 {
        let (lo, hi) = self.holding_bounds;
        (lo + 0.5 * (hi - lo) * (u.tanh() + 1.0)).clamp(lo, hi)
    }

    /// d holding / d u.
    pub fn squash_slope(&self, u: f64) -> f64 {
        let (lo, hi) = self.holding_bounds;
        let th = u.tanh();
        0.5 * (hi - lo) * (1.0 - th * th)
    }

    pub fn to_critic(&self, holding: f64) -> f64 {
        holding / self.multiplier
    }
}

/// Actor, critic and their slow-moving targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DdpgAgent {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub actor_target: DenseNet,
    pub critic_target: DenseNet,
    pub features: FeatureSet,
    pub scaling: FeatureScaling,
    pub action_map: ActionMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AgentManifest {
    features: FeatureSet,
    scaling: FeatureScaling,
    action_map: ActionMap,
}

const FINAL_LAYER_INIT: f64 = 3e-3;

fn small_output_layer<R: Rng + ?Sized>(net: &mut DenseNet, rng: &mut R) -> Result<()> {
    let last = net.architecture().layers.len() - 1;
    let spec = net.architecture().layers[last];
    let w: Vec<f64> = (0..spec.inputs * spec.outputs)
        .map(|_| rng.random_range(-FINAL_LAYER_INIT..FINAL_LAYER_INIT))
        .collect();
    let b: Vec<f64> = (0..spec.outputs)
        .map(|_| rng.random_range(-FINAL_LAYER_INIT..FINAL_LAYER_INIT))
        .collect();
    net.set_layer(last, &w, &b)
}

impl DdpgAgent {
    pub fn new<R: Rng + ?Sized>(config: &DdpgConfig, env: &EnvConfig, rng: &mut R) -> Result<Self> {
        let d = config.features.dim();
        let mut actor = DenseNet::new(Architecture::mlp(d, &config.actor_hidden, 1, false, 0.0), rng)?;
        let mut critic = DenseNet::new(Architecture::mlp(d + 1, &config.critic_hidden, 1, false, 0.0), rng)?;
        small_output_layer(&mut actor, rng)?;
        small_output_layer(&mut critic, rng)?;
        Ok(DdpgAgent {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            features: config.features,
            scaling: FeatureScaling::from_env(env),
            action_map: ActionMap::from_env(env),
        })
    }

    pub fn encode(&self, state: &HedgeState) -> Vec<f64> {
        self.features.encode(state, &self.scaling)
    }

    /// Holdings for a batch of normalized states, without exploration.
    pub fn act_normalized(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let u = self.actor.predict(x)?;
        Ok(u.column(0).iter().map(|&v| self.action_map.squash(v)).collect())
    }

    /// Holdings for raw (unscaled) feature rows in `FeatureSet::names` order.
    pub fn act_raw(&self, raw: ArrayView2<f64>) -> Result<Vec<f64>> {
        let mut x = raw.to_owned();
        for mut row in x.outer_iter_mut() {
            self.features
                .normalize(row.as_slice_mut().expect("row-major"), &self.scaling);
        }
        self.act_normalized(x.view())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HedgeError::io(dir, e))?;
        for (name, net) in self.named_nets() {
            write_checkpoint(net, serde_json::json!({ "role": name }), &dir.join(format!("{name}.bin")))?;
        }
        let manifest = AgentManifest {
            features: self.features,
            scaling: self.scaling,
            action_map: self.action_map,
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
        let m: AgentManifest = serde_json::from_str(&text)?;
        let net = |name: &str| read_checkpoint(&dir.join(format!("{name}.bin"))).map(|(n, _)| n);
        Ok(DdpgAgent {
            actor: net("actor")?,
            critic: net("critic")?,
            actor_target: net("actor_target")?,
            critic_target: net("critic_target")?,
            features: m.features,
            scaling: m.scaling,
            action_map: m.action_map,
        })
    }

    fn named_nets(&self) -> [(&'static str, &DenseNet); 4] {
        [
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("actor_target", &self.actor_target),
            ("critic_target", &self.critic_target),
        ]
    }
}

impl Hedger for DdpgAgent {
    fn label(&self) -> String {
        "ddpg".into()
    }

    fn holdings(&self, _step: usize, states: &[HedgeState]) -> Result<Vec<f64>> {
        let d = self.features.dim();
        let mut x = Array2::zeros((states.len(), d));
        for (mut row, s) in x.outer_iter_mut().zip(states) {
            row.assign(&ndarray::ArrayView1::from(&self.encode(s)));
        }
        self.act_normalized(x.view())
    }
}

/// Holding for one normalized state; with `explore` the OU noise is advanced
/// once and added to the actor output before squashing.
pub fn select_action<R: Rng + ?Sized>(
    actor: &DenseNet,
    map: &ActionMap,
    state: &[f64],
    noise: &mut OuNoise,
    explore: bool,
    rng: &mut R,
) -> Result<f64> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(HedgeError::NonFinite(format!("state {state:?}")));
    }
    let x = ArrayView2::from_shape((1, state.len()), state)
        .map_err(|e| HedgeError::InvalidInput(e.to_string()))?;
    let mut u = actor.predict(x)?[[0, 0]];
    if explore {
        u += noise.sample(rng);
    }
    Ok(map.squash(u))
}

fn stack_rows<'a, I: Iterator<Item = &'a [f64]>>(rows: I, n: usize, d: usize, extra: Option<&[f64]>) -> Array2<f64> {
    let cols = d + usize::from(extra.is_some());
    let mut x = Array2::zeros((n, cols));
    for (i, r) in rows.enumerate() {
        for (j, &v) in r.iter().enumerate() {
            x[[i, j]] = v;
        }
        if let Some(a) = extra {
            x[[i, d]] = a[i];
        }
    }
    x
}

/// Bellman targets `r + gamma * Q'(s', mu'(s'))`, or `r` for terminal transitions.
pub fn bellman_targets(
    critic_target: &DenseNet,
    actor_target: &DenseNet,
    map: &ActionMap,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = batch.len();
    let d = batch[0].state.len();
    let next = stack_rows(batch.iter().map(|t| t.next_state.as_slice()), n, d, None);
    let next_u = actor_target.predict(next.view())?;
    let next_a: Vec<f64> = next_u.column(0).iter().map(|&u| map.to_critic(map.squash(u))).collect();
    let next_q = critic_target.predict(stack_rows(batch.iter().map(|t| t.next_state.as_slice()), n, d, Some(&next_a)).view())?;
    Ok(batch
        .iter()
        .zip(next_q.column(0))
        .map(|(t, &q)| if t.done { t.reward } else { t.reward + gamma * q })
        .collect())
}

/// Mean squared Bellman error and its gradient in the critic parameters.
pub fn critic_gradient(critic: &DenseNet, batch: &[&Transition], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(HedgeError::InvalidInput(format!(
            "minibatch of {} with {} targets",
            batch.len(),
            targets.len()
        )));
    }
    let n = batch.len();
    let d = batch[0].state.len();
    let actions: Vec<f64> = batch.iter().map(|t| t.action).collect();
    let x = stack_rows(batch.iter().map(|t| t.state.as_slice()), n, d, Some(&actions));
    let (q, tape) = critic.forward_eval(x.view())?;
    let mut dy = Array2::zeros((n, 1));
    let mut loss = 0.0;
    for i in 0..n {
        let err = q[[i, 0]] - targets[i];
        loss += err * err;
        dy[[i, 0]] = 2.0 * err / n as f64;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(HedgeError::NonFinite(format!("critic loss {loss}")));
    }
    let (grads, _) = critic.backward(tape, dy.view())?;
    Ok((loss, grads))
}

/// One ADAM step on the mean squared Bellman error; returns the loss before the step.
pub fn critic_update(
    critic: &mut DenseNet,
    critic_target: &DenseNet,
    actor_target: &DenseNet,
    map: &ActionMap,
    batch: &[&Transition],
    gamma: f64,
    optimizer: &mut AdamState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(HedgeError::InvalidInput("empty minibatch".into()));
    }
    let targets = bellman_targets(critic_target, actor_target, map, batch, gamma)?;
    let (loss, grads) = critic_gradient(critic, batch, &targets)?;
    optimizer.step(critic.params_mut(), &grads)?;
    Ok(loss)
}

/// Mean of `Q(s, mu(s))` over the batch states and the gradient of its
/// negative in the actor parameters.
pub fn actor_gradient(actor: &DenseNet, critic: &DenseNet, map: &ActionMap, batch: &[&Transition]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(HedgeError::InvalidInput("empty minibatch".into()));
    }
    let n = batch.len();
    let d = batch[0].state.len();
    let x = stack_rows(batch.iter().map(|t| t.state.as_slice()), n, d, None);
    let (u, actor_tape) = actor.forward_eval(x.view())?;
    let a: Vec<f64> = u.column(0).iter().map(|&v| map.to_critic(map.squash(v))).collect();
    let xa = stack_rows(batch.iter().map(|t| t.state.as_slice()), n, d, Some(&a));
    let (q, critic_tape) = critic.forward_eval(xa.view())?;
    let objective = q.mean().expect("non-empty");
    let dq = Array2::from_elem((n, 1), 1.0 / n as f64);
    let (_, dx) = critic.backward(critic_tape, dq.view())?;
    let mut du = Array2::zeros((n, 1));
    for i in 0..n {
        du[[i, 0]] = -dx[[i, d]] / map.multiplier * map.squash_slope(u[[i, 0]]);
    }
    let (grads, _) = actor.backward(actor_tape, du.view())?;
    Ok((objective, grads))
}

/// One ADAM step ascending the mean of `Q(s, mu(s))` in the actor parameters;
/// returns the objective before the step. The critic is only read.
pub fn actor_update(
    actor: &mut DenseNet,
    critic: &DenseNet,
    map: &ActionMap,
    batch: &[&Transition],
    optimizer: &mut AdamState,
) -> Result<f64> {
    let (objective, grads) = actor_gradient(actor, critic, map, batch)?;
    optimizer.step(actor.params_mut(), &grads)?;
    Ok(objective)
}

#[derive(Clone, Debug)]
pub struct DdpgTrainOutcome {
    pub agent: DdpgAgent,
    /// Per-episode sum of unscaled rewards (minus the stepwise costs).
    pub curve: Vec<f64>,
}

pub fn train(config: &DdpgConfig, env: &EnvConfig, seed: u64) -> Result<DdpgTrainOutcome> {
    train_with(config, env, seed, |_, _, _| Ok(()))
}

/// Training with a per-episode hook that sees the episode index, the agent and the episode reward.
pub fn train_with<F>(config: &DdpgConfig, env: &EnvConfig, seed: u64, mut on_episode: F) -> Result<DdpgTrainOutcome>
where
    F: FnMut(usize, &DdpgAgent, f64) -> Result<()>,
{
    config.validate()?;
    env.validate()?;
    let mut init_rng = SeedToken::new(seed, StreamDomain::Init).rng(0);
    let mut agent = DdpgAgent::new(config, env, &mut init_rng)?;
    let mut actor_opt = AdamState::new(agent.actor.n_params(), config.actor_lr);
    let mut critic_opt = AdamState::new(agent.critic.n_params(), config.critic_lr);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut replay_rng = SeedToken::new(seed, StreamDomain::Replay).rng(0);
    let mut noise = OuNoise::new(config.ou_theta, config.ou_sigma, config.ou_dt);
    let warmup = config.warmup.max(config.minibatch);
    let rho = 1.0 - config.target_smoothing;
    let n = env.grid.n_steps;
    let shocks = draw_shocks(config.episodes, 0, n, &SeedToken::train(seed));
    let mut curve = Vec::with_capacity(config.episodes);

    for episode in 0..config.episodes {
        let mut explore_rng = SeedToken::new(seed, StreamDomain::Exploration).rng(episode as u64);
        noise.reset();
        let mut state = env.initial_state()?;
        let mut total_reward = 0.0;
        for t in 0..n {
            let s = agent.encode(&state);
            let h = select_action(&agent.actor, &agent.action_map, &s, &mut noise, true, &mut explore_rng)?;
            let out = hedging_env::step(env, &state, env.clip_holding(h), shocks[[episode, t]])?;
            total_reward += out.reward;
            buffer.push(Transition {
                state: s,
                action: agent.action_map.to_critic(out.next.holding),
                reward: out.reward * config.reward_scale,
                next_state: agent.encode(&out.next),
                done: out.done,
            });
            state = out.next;

            if buffer.len() >= warmup {
                let batch = buffer.sample(config.minibatch, &mut replay_rng);
                let critic_loss = critic_update(
                    &mut agent.critic,
                    &agent.critic_target,
                    &agent.actor_target,
                    &agent.action_map,
                    &batch,
                    env.gamma_discount,
                    &mut critic_opt,
                )
                .map_err(|e| diverged(episode, t, e))?;
                let objective = actor_update(&mut agent.actor, &agent.critic, &agent.action_map, &batch, &mut actor_opt)
                    .map_err(|e| diverged(episode, t, e))?;
                if !objective.is_finite() {
                    return Err(HedgeError::Diverged {
                        stage: format!("episode {episode}, step {t}: actor objective (critic loss {critic_loss})"),
                        loss: objective,
                    });
                }
                agent.actor_target.soft_update(&agent.actor, rho)?;
                agent.critic_target.soft_update(&agent.critic, rho)?;
            }
        }
        if !total_reward.is_finite() {
            return Err(HedgeError::NonFinite(format!("episode {episode} reward {total_reward}")));
        }
        curve.push(total_reward);
        on_episode(episode, &agent, total_reward)?;
    }
    Ok(DdpgTrainOutcome { agent, curve })
}

fn diverged(episode: usize, step: usize, e: HedgeError) -> HedgeError {
    match e {
        HedgeError::NonFinite(what) => HedgeError::Diverged {
            stage: format!("episode {episode}, step {step}: {what}"),
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Writes `episode,cumulative_reward` rows.
pub fn write_curve_csv<W: Write>(curve: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "episode,cumulative_reward")?;
    for (e, v) in curve.iter().enumerate() {
        writeln!(out, "{e},{v}")?;
    }
    Ok(())
}
