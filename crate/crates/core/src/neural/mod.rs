//! Small feedforward networks with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector so the optimizer, target-network
//! blending and checkpoints treat every network the same way. Per layer the
//! block is `W (inputs x outputs, row-major)`, `b`, then `gamma`, `beta`
//! when the layer is batch-normalized. A layer computes
//! `dropout(act(bn(x W + b)))`.

mod adam;
mod checkpoint;

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// ReLU hidden layers (optionally batch-normalized, with dropout) and a linear output.
    pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, batch_norm: bool, dropout: f64) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = inputs;
        for &h in hidden {
            layers.push(LayerSpec {
                inputs: width,
                outputs: h,
                activation: Activation::Relu,
                batch_norm,
                dropout,
            });
            width = h;
        }
        layers.push(LayerSpec {
            inputs: width,
            outputs,
            activation: Activation::Identity,
            batch_norm: false,
            dropout: 0.0,
        });
        Architecture { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(HedgeError::Config("architecture has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(HedgeError::Config(format!("layer {i} has a zero dimension")));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(HedgeError::Config(format!("layer {i} dropout {} not in [0, 1)", l.dropout)));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(HedgeError::Config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        Ok(())
    }

    fn layout(&self) -> (Vec<LayerOffsets>, usize) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            let w = at;
            let b = w + l.inputs * l.outputs;
            at = b + l.outputs;
            let bn = if l.batch_norm {
                let gamma = at;
                at += 2 * l.outputs;
                Some(gamma)
            } else {
                None
            };
            offsets.push(LayerOffsets { w, b, bn });
        }
        (offsets, at)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerOffsets {
    w: usize,
    b: usize,
    /// Start of `gamma`; `beta` follows it.
    bn: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    arch: Architecture,
    offsets: Vec<LayerOffsets>,
    params: Vec<f64>,
    running: Vec<Option<RunningStats>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    bn: Option<BnCache>,
    /// Post-normalization, pre-activation values.
    pre_act: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Activations cached by one forward pass. Consumed by [`DenseNet::backward`],
/// so a tape can be back-propagated at most once.
pub struct GradientTape {
    mode: Mode,
    n_params: usize,
    layers: Vec<LayerCache>,
}

impl GradientTape {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

impl DenseNet {
    /// All-zero weights and biases; batch-norm scales start at one.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let (offsets, n) = arch.layout();
        let mut params = vec![0.0; n];
        let mut running = Vec::with_capacity(arch.layers.len());
        for (l, off) in arch.layers.iter().zip(&offsets) {
            if let Some(g) = off.bn {
                params[g..g + l.outputs].fill(1.0);
                running.push(Some(RunningStats {
                    mean: vec![0.0; l.outputs],
                    var: vec![1.0; l.outputs],
                }));
            } else {
                running.push(None);
            }
        }
        Ok(DenseNet {
            arch,
            offsets,
            params,
            running,
        })
    }

    /// He-uniform weights for ReLU layers, Xavier-uniform for linear ones, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        for i in 0..net.arch.layers.len() {
            let l = net.arch.layers[i];
            let limit = match l.activation {
                Activation::Relu => (6.0 / l.inputs as f64).sqrt(),
                Activation::Identity => (6.0 / (l.inputs + l.outputs) as f64).sqrt(),
            };
            let w = net.offsets[i].w;
            for p in &mut net.params[w..w + l.inputs * l.outputs] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn running_stats(&self) -> &[Option<RunningStats>] {
        &self.running
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = &self.arch.layers[layer];
        let w = self.offsets[layer].w;
        ArrayView2::from_shape((l.inputs, l.outputs), &self.params[w..w + l.inputs * l.outputs]).expect("layout")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let l = &self.arch.layers[layer];
        let b = self.offsets[layer].b;
        ArrayView1::from(&self.params[b..b + l.outputs])
    }

    /// Overwrites one layer's weights (`inputs x outputs`) and bias.
    pub fn set_layer(&mut self, layer: usize, weights: &[f64], bias: &[f64]) -> Result<()> {
        let l = self.arch.layers[layer];
        if weights.len() != l.inputs * l.outputs || bias.len() != l.outputs {
            return Err(HedgeError::InvalidInput(format!(
                "layer {layer} expects {}x{} weights and {} biases",
                l.inputs, l.outputs, l.outputs
            )));
        }
        let off = self.offsets[layer];
        self.params[off.w..off.w + weights.len()].copy_from_slice(weights);
        self.params[off.b..off.b + bias.len()].copy_from_slice(bias);
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.arch.inputs() {
            return Err(HedgeError::Config(format!(
                "input width {} does not match network input {}",
                x.ncols(),
                self.arch.inputs()
            )));
        }
        Ok(())
    }

    /// Training-mode pass: batch statistics for batch norm (updating the running
    /// estimates) and fresh inverted-dropout masks drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, GradientTape)> {
        self.check_input(&x)?;
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        let mut a = x.to_owned();
        for i in 0..self.arch.layers.len() {
            let spec = self.arch.layers[i];
            let z = self.affine(i, &a);
            let (pre_act, bn) = match self.offsets[i].bn {
                Some(g) => {
                    let (y, cache, batch_mean, batch_var) = self.bn_train(g, spec.outputs, &z);
                    let stats = self.running[i].as_mut().expect("bn layer has stats");
                    let n = z.nrows() as f64;
                    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    for j in 0..spec.outputs {
                        stats.mean[j] = (1.0 - BN_MOMENTUM) * stats.mean[j] + BN_MOMENTUM * batch_mean[j];
                        stats.var[j] = (1.0 - BN_MOMENTUM) * stats.var[j] + BN_MOMENTUM * batch_var[j] * unbias;
                    }
                    (y, Some(cache))
                }
                None => (z, None),
            };
            let mut out = activate(spec.activation, &pre_act);
            let mask = if spec.dropout > 0.0 {
                let keep = 1.0 - spec.dropout;
                let m = Array2::from_shape_fn(out.raw_dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                out *= &m;
                Some(m)
            } else {
                None
            };
            caches.push(LayerCache {
                input: a,
                bn,
                pre_act,
                mask,
            });
            a = out;
        }
        Ok((
            a,
            GradientTape {
                mode: Mode::Train,
                n_params: self.params.len(),
                layers: caches,
            },
        ))
    }

    /// Evaluation-mode pass with a tape: running batch-norm statistics, no dropout.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, GradientTape)> {
        self.check_input(&x)?;
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        let mut a = x.to_owned();
        for i in 0..self.arch.layers.len() {
            let spec = self.arch.layers[i];
            let z = self.affine(i, &a);
            let (pre_act, bn) = match self.offsets[i].bn {
                Some(g) => {
                    let (y, cache) = self.bn_eval(i, g, spec.outputs, &z);
                    (y, Some(cache))
                }
                None => (z, None),
            };
            let out = activate(spec.activation, &pre_act);
            caches.push(LayerCache {
                input: a,
                bn,
                pre_act,
                mask: None,
            });
            a = out;
        }
        Ok((
            a,
            GradientTape {
                mode: Mode::Eval,
                n_params: self.params.len(),
                layers: caches,
            },
        ))
    }

    /// Evaluation-mode output only.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for i in 0..self.arch.layers.len() {
            let spec = self.arch.layers[i];
            let z = self.affine(i, &a);
            let pre = match self.offsets[i].bn {
                Some(g) => self.bn_eval(i, g, spec.outputs, &z).0,
                None => z,
            };
            a = activate(spec.activation, &pre);
        }
        Ok(a)
    }

    fn affine(&self, layer: usize, a: &Array2<f64>) -> Array2<f64> {
        a.dot(&self.weights(layer)) + &self.bias(layer)
    }

    fn bn_train(&self, g: usize, width: usize, z: &Array2<f64>) -> (Array2<f64>, BnCache, Array1<f64>, Array1<f64>) {
        let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = z - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = &centered * &inv_std;
        let gamma = ArrayView1::from(&self.params[g..g + width]);
        let beta = ArrayView1::from(&self.params[g + width..g + 2 * width]);
        let y = &xhat * &gamma + &beta;
        (y, BnCache { xhat, inv_std }, mean, var)
    }

    fn bn_eval(&self, layer: usize, g: usize, width: usize, z: &Array2<f64>) -> (Array2<f64>, BnCache) {
        let stats = self.running[layer].as_ref().expect("bn layer has stats");
        let mean = ArrayView1::from(&stats.mean);
        let inv_std = Array1::from_iter(stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()));
        let xhat = (z - &mean) * &inv_std;
        let gamma = ArrayView1::from(&self.params[g..g + width]);
        let beta = ArrayView1::from(&self.params[g + width..g + 2 * width]);
        let y = &xhat * &gamma + &beta;
        (y, BnCache { xhat, inv_std })
    }

    /// Reverse pass for upstream gradient `dy` (same shape as the forward output).
    /// Returns the flat parameter gradient and the gradient with respect to the input.
    pub fn backward(&self, tape: GradientTape, dy: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        if tape.n_params != self.params.len() || tape.layers.len() != self.arch.layers.len() {
            return Err(HedgeError::Usage("gradient tape was recorded on a different network".into()));
        }
        let batch = tape.layers[0].input.nrows();
        if dy.nrows() != batch || dy.ncols() != self.arch.outputs() {
            return Err(HedgeError::InvalidInput(format!(
                "upstream gradient has shape {:?}, expected ({batch}, {})",
                dy.shape(),
                self.arch.outputs()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = dy.to_owned();
        for (i, cache) in tape.layers.into_iter().enumerate().rev() {
            let spec = self.arch.layers[i];
            let off = self.offsets[i];
            if let Some(mask) = &cache.mask {
                g *= mask;
            }
            if spec.activation == Activation::Relu {
                g.zip_mut_with(&cache.pre_act, |d, &p| {
                    if p <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            if let (Some(gamma_at), Some(bn)) = (off.bn, &cache.bn) {
                let width = spec.outputs;
                let dgamma = (&g * &bn.xhat).sum_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0));
                let gamma = ArrayView1::from(&self.params[gamma_at..gamma_at + width]).to_owned();
                let dxhat = &g * &gamma;
                g = match tape.mode {
                    Mode::Eval => &dxhat * &bn.inv_std,
                    Mode::Train => {
                        let n = dxhat.nrows() as f64;
                        let sum_dxhat = dxhat.sum_axis(Axis(0));
                        let sum_dxhat_xhat = (&dxhat * &bn.xhat).sum_axis(Axis(0));
                        let inner = &dxhat * n - &sum_dxhat - &(&bn.xhat * &sum_dxhat_xhat);
                        inner * &(&bn.inv_std / n)
                    }
                };
                grads[gamma_at..gamma_at + width].copy_from_slice(dgamma.as_slice().expect("contiguous"));
                grads[gamma_at + width..gamma_at + 2 * width].copy_from_slice(dbeta.as_slice().expect("contiguous"));
            }
            let dw = cache.input.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            grads[off.w..off.w + dw.len()].copy_from_slice(dw.as_standard_layout().as_slice().expect("contiguous"));
            grads[off.b..off.b + db.len()].copy_from_slice(db.as_slice().expect("contiguous"));
            g = g.dot(&self.weights(i).t());
        }
        Ok((grads, g))
    }

    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.arch == other.arch
    }

    /// Blends parameters (and running statistics) towards `source`:
    /// `p_target <- rho * p_target + (1 - rho) * p_source`.
    pub fn soft_update(&mut self, source: &DenseNet, rho: f64) -> Result<()> {
        if !self.same_architecture(source) {
            return Err(HedgeError::Config("soft update between different architectures".into()));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(HedgeError::InvalidInput(format!("blend factor {rho} outside [0, 1]")));
        }
        blend(&mut self.params, &source.params, rho);
        for (t, s) in self.running.iter_mut().zip(&source.running) {
            if let (Some(t), Some(s)) = (t.as_mut(), s.as_ref()) {
                blend(&mut t.mean, &s.mean, rho);
                blend(&mut t.var, &s.var, rho);
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(arch: Architecture, params: Vec<f64>, running: Vec<Option<RunningStats>>) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(HedgeError::Checkpoint(format!(
                "expected {} parameters, found {}",
                net.params.len(),
                params.len()
            )));
        }
        if running.len() != net.running.len()
            || running.iter().zip(&net.running).any(|(a, b)| a.is_some() != b.is_some())
        {
            return Err(HedgeError::Checkpoint("batch-norm statistics do not match the architecture".into()));
        }
        net.params = params;
        net.running = running;
        Ok(net)
    }
}

fn blend(target: &mut [f64], source: &[f64], rho: f64) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = rho * *t + (1.0 - rho) * s;
    }
}

fn activate(act: Activation, z: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Identity => z.clone(),
    }
}

#[cfg(test)]
mod tests;
