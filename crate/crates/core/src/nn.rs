//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Batches are row-major `(batch, features)` matrices. Layer `l` stores its
//! weight as an `(out, in)` matrix, so the forward pass of one layer is
//! `act(a · Wᵀ + b)`.
//!
//! The checkpoint format is JSON with the following fields:
//!
//! | field          | meaning                                               |
//! |----------------|-------------------------------------------------------|
//! | `format`       | always `"vcmi-mlp/1"`                                 |
//! | `layer_sizes`  | `[in, h1, ..., out]`                                  |
//! | `activations`  | one of `softplus`, `leaky_relu`, `identity` per layer |
//! | `weights`      | per layer, the `(out, in)` weight flattened row-major |
//! | `biases`       | per layer, the bias vector                            |
//! | `optimizer`    | optional Adam hyperparameters                         |
//!
//! Floats are written in shortest round-trip form, so save/load is bit-exact.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
const CHECKPOINT_FORMAT: &str = "vcmi-mlp/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
            Activation::Identity => x,
        }
    }

    /// Value and derivative at `x`, sharing the exponential for softplus.
    #[inline]
    fn apply_with_grad(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Softplus => {
                let e = (-x.abs()).exp();
                let value = x.max(0.0) + e.ln_1p();
                let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                (value, sig)
            }
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    (x, 1.0)
                } else {
                    (LEAKY_RELU_SLOPE * x, LEAKY_RELU_SLOPE)
                }
            }
            Activation::Identity => (x, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Multilayer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            weights: mlp.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: mlp.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    fn matches(&self, mlp: &Mlp) -> bool {
        self.weights.len() == mlp.layers.len()
            && self.biases.len() == mlp.layers.len()
            && mlp.layers.iter().enumerate().all(|(i, l)| {
                self.weights[i].dim() == l.weight.dim() && self.biases[i].len() == l.bias.len()
            })
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; the final entry is the output.
    inputs: Vec<Array2<f64>>,
    /// Activation derivative at each layer's pre-activation.
    slopes: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.inputs.last().expect("cache always holds the input")
    }
}

impl Mlp {
    /// Builds a network with fan-in scaled uniform initialisation,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
                let activation = if l + 1 == n_layers { output } else { hidden };
                Layer { weight, bias, activation }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::shape(format!(
                    "layer {i}: bias length {} != output size {}",
                    layer.bias.len(),
                    layer.output_dim()
                )));
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(Error::shape(format!(
                    "layer {i}: input size {} != previous output size {}",
                    layer.input_dim(),
                    layers[i - 1].output_dim()
                )));
            }
            if !layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Data(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut layers = self.layers.iter();
        let first = layers.next().expect("non-empty");
        let mut a = affine(input, first);
        a.mapv_inplace(|v| first.activation.apply(v));
        for layer in layers {
            a = affine(a.view(), layer);
            if layer.activation != Activation::Identity {
                a.mapv_inplace(|v| layer.activation.apply(v));
            }
        }
        Ok(a)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&input)?;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut slopes = Vec::with_capacity(self.layers.len());
        inputs.push(input.to_owned());
        for layer in &self.layers {
            let mut pre = affine(inputs.last().expect("non-empty").view(), layer);
            let mut slope = Array2::zeros(pre.raw_dim());
            Zip::from(&mut pre).and(&mut slope).for_each(|p, s| {
                let (v, g) = layer.activation.apply_with_grad(*p);
                *p = v;
                *s = g;
            });
            inputs.push(pre);
            slopes.push(slope);
        }
        Ok(ForwardCache { inputs, slopes })
    }

    /// Gradients of `sum(upstream ⊙ output)` with respect to every parameter
    /// and to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() || cache.slopes.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = upstream.to_owned();
        for l in (0..n).rev() {
            delta *= &cache.slopes[l];
            weights.push(delta.t().dot(&cache.inputs[l]));
            biases.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&self.layers[l].weight);
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, delta))
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self, optimizer: Option<AdamConfig>) -> MlpCheckpoint {
        MlpCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            layer_sizes: self.layer_sizes(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            weights: self.layers.iter().map(|l| l.weight.iter().copied().collect()).collect(),
            biases: self.layers.iter().map(|l| l.bias.to_vec()).collect(),
            optimizer,
        }
    }

    pub fn from_checkpoint(ckpt: &MlpCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", ckpt.format)));
        }
        let n = ckpt.layer_sizes.len().saturating_sub(1);
        if n == 0
            || ckpt.activations.len() != n
            || ckpt.weights.len() != n
            || ckpt.biases.len() != n
        {
            return Err(Error::Checkpoint("inconsistent layer counts".into()));
        }
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (ckpt.layer_sizes[l], ckpt.layer_sizes[l + 1]);
            let weight = Array2::from_shape_vec((fan_out, fan_in), ckpt.weights[l].clone())
                .map_err(|e| Error::Checkpoint(format!("layer {l} weight: {e}")))?;
            if ckpt.biases[l].len() != fan_out {
                return Err(Error::Checkpoint(format!("layer {l} bias has wrong length")));
            }
            layers.push(Layer {
                weight,
                bias: Array1::from(ckpt.biases[l].clone()),
                activation: ckpt.activations[l],
            });
        }
        Mlp::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn to_json(&self, optimizer: Option<AdamConfig>) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint(optimizer))?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<AdamConfig>)> {
        let ckpt: MlpCheckpoint = serde_json::from_str(text)?;
        Ok((Mlp::from_checkpoint(&ckpt)?, ckpt.optimizer))
    }
}

fn affine(input: ArrayView2<f64>, layer: &Layer) -> Array2<f64> {
    let mut out = input.dot(&layer.weight.t());
    out += &layer.bias;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default)]
    pub optimizer: Option<AdamConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 5e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(mlp: &Mlp, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Gradients::zeros_like(mlp),
            second: Gradients::zeros_like(mlp),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients without
    /// touching the parameters or the moment estimates.
    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.matches(mlp) || !self.first.matches(mlp) {
            return Err(Error::shape("gradient shapes do not match the network"));
        }
        if !grads.is_finite() {
            return Err(Error::Optimizer("non-finite gradient".into()));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        };
        for (l, layer) in mlp.layers.iter_mut().enumerate() {
            Zip::from(&mut layer.weight)
                .and(&grads.weights[l])
                .and(&mut self.first.weights[l])
                .and(&mut self.second.weights[l])
                .for_each(update);
            Zip::from(&mut layer.bias)
                .and(&grads.biases[l])
                .and(&mut self.first.biases[l])
                .and(&mut self.second.biases[l])
                .for_each(update);
        }
        Ok(())
    }
}
