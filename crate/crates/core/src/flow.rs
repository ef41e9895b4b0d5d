//! Continuous flows for the marginals, trained by conditional flow matching.
//!
//! The velocity network takes `[x, t]` (time appended as one raw input
//! coordinate) and is regressed onto the straight-line target `x - ε` at
//! `x_t = (1 - t) ε + t x`, with `ε ~ N(0, I)` and `t ~ U[0, 1]`. Time 1 is
//! data and time 0 is noise, so `encode` integrates from 1 down to 0 and
//! `decode` integrates back up, both with fixed-step RK4.
//!
//! Before the flow sees the data they pass through an invertible linear map
//! (ICA by default, see [`crate::linear`]) and a per-dimension
//! normalisation: a monotone quantile map onto Gaussian scores by default,
//! or an affine mean/scale map. Both are stored in the model so
//! `encode`/`decode` act on raw data.
//!
//! A trained flow ends with a per-dimension affine map fitted to its own
//! training latents, which removes the small mean and scale bias the
//! network leaves behind. It is increasing in every coordinate, so ranks
//! are unaffected.

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{IcaConfig, LinearKind, LinearMap};
use crate::nn::{Activation, Adam, AdamConfig, Gradients, Mlp, MlpCheckpoint};
use crate::ranks::{gauss_quantile, quantile_sorted};

const CHECKPOINT_FORMAT: &str = "vcmi-flow/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    Affine,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    /// RK4 steps used by `encode` and `decode`.
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Below this many samples the flow is skipped and ranks come from raw data.
    pub min_samples: usize,
    /// Linear map applied before the per-dimension normalisation.
    pub linear: LinearKind,
    pub ica: IcaConfig,
    pub normalization: NormalizationKind,
    /// Knots per dimension for the quantile normalisation.
    pub quantile_knots: usize,
    /// Standardise each latent dimension with its training mean and scale.
    pub standardize_latent: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            hidden: vec![64, 64, 64],
            steps: 16,
            batch_size: 512,
            optimizer: AdamConfig::default(),
            max_epochs: 1000,
            patience: 50,
            val_fraction: 0.2,
            min_samples: 100,
            linear: LinearKind::Ica,
            ica: IcaConfig::default(),
            normalization: NormalizationKind::Quantile,
            quantile_knots: 256,
            standardize_latent: true,
        }
    }
}

/// Per-dimension monotone map from raw data into the flow's working space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    Affine { mean: Vec<f64>, scale: Vec<f64> },
    /// Piecewise-linear interpolation through `(knots_x[d][j], knots_z[d][j])`
    /// with linear extrapolation using the end segments.
    Quantile { knots_x: Vec<Vec<f64>>, knots_z: Vec<Vec<f64>> },
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization::Affine { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn fit(data: ArrayView2<f64>, kind: NormalizationKind, knots: usize) -> Result<Self> {
        let n = data.nrows() as f64;
        match kind {
            NormalizationKind::Affine => {
                let mut mean = Vec::with_capacity(data.ncols());
                let mut scale = Vec::with_capacity(data.ncols());
                for (d, col) in data.columns().into_iter().enumerate() {
                    let m = col.sum() / n;
                    let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                    let sd = var.sqrt();
                    if !(sd > 1e-12 * m.abs().max(1.0)) {
                        return Err(Error::Data(format!("column {d} is constant")));
                    }
                    mean.push(m);
                    scale.push(sd);
                }
                Ok(Normalization::Affine { mean, scale })
            }
            NormalizationKind::Quantile => {
                if knots < 2 {
                    return Err(Error::Config("need at least 2 quantile knots".into()));
                }
                let mut knots_x = Vec::with_capacity(data.ncols());
                let mut knots_z = Vec::with_capacity(data.ncols());
                for (d, col) in data.columns().into_iter().enumerate() {
                    let mut sorted = col.to_vec();
                    sorted.sort_by(f64::total_cmp);
                    let len = sorted.len();
                    let mut xs: Vec<f64> = Vec::with_capacity(knots);
                    let mut zs: Vec<f64> = Vec::with_capacity(knots);
                    for j in 0..knots {
                        // Knot j sits at sorted position `pos`, whose rank is (pos + 1) / (n + 1).
                        let p = j as f64 / (knots - 1) as f64;
                        let pos = p * (len - 1) as f64;
                        let x = quantile_sorted(&sorted, p);
                        let z = gauss_quantile((pos + 1.0) / (len + 1) as f64)?;
                        if xs.last().is_none_or(|&last| x > last) {
                            xs.push(x);
                            zs.push(z);
                        }
                    }
                    if xs.len() < 2 {
                        return Err(Error::Data(format!("column {d} is constant")));
                    }
                    knots_x.push(xs);
                    knots_z.push(zs);
                }
                Ok(Normalization::Quantile { knots_x, knots_z })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Normalization::Affine { mean, .. } => mean.len(),
            Normalization::Quantile { knots_x, .. } => knots_x.len(),
        }
    }

    pub fn forward(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        match self {
            Normalization::Affine { mean, scale } => {
                for (d, mut col) in out.columns_mut().into_iter().enumerate() {
                    col.mapv_inplace(|v| (v - mean[d]) / scale[d]);
                }
            }
            Normalization::Quantile { knots_x, knots_z } => {
                for (d, mut col) in out.columns_mut().into_iter().enumerate() {
                    col.mapv_inplace(|v| interpolate(&knots_x[d], &knots_z[d], v));
                }
            }
        }
        out
    }

    pub fn inverse(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        match self {
            Normalization::Affine { mean, scale } => {
                for (d, mut col) in out.columns_mut().into_iter().enumerate() {
                    col.mapv_inplace(|v| v * scale[d] + mean[d]);
                }
            }
            Normalization::Quantile { knots_x, knots_z } => {
                for (d, mut col) in out.columns_mut().into_iter().enumerate() {
                    col.mapv_inplace(|v| interpolate(&knots_z[d], &knots_x[d], v));
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        match self {
            Normalization::Affine { mean, scale } => {
                if mean.len() != scale.len() {
                    return Err(Error::Checkpoint("normalisation lengths differ".into()));
                }
                if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return Err(Error::Checkpoint("normalisation scales must be positive".into()));
                }
            }
            Normalization::Quantile { knots_x, knots_z } => {
                if knots_x.len() != knots_z.len() {
                    return Err(Error::Checkpoint("knot tables differ in length".into()));
                }
                for (xs, zs) in knots_x.iter().zip(knots_z) {
                    let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
                    if xs.len() != zs.len() || xs.len() < 2 || !increasing(xs) || !increasing(zs) {
                        return Err(Error::Checkpoint("knots must be strictly increasing".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Monotone piecewise-linear interpolation with linear extrapolation.
fn interpolate(xs: &[f64], ys: &[f64], v: f64) -> f64 {
    let last = xs.len() - 1;
    let seg = match xs.partition_point(|&k| k <= v) {
        0 => 0,
        p if p > last => last - 1,
        p => p - 1,
    };
    let (x0, x1, y0, y1) = (xs[seg], xs[seg + 1], ys[seg], ys[seg + 1]);
    y0 + (v - x0) * (y1 - y0) / (x1 - x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub skipped_batches: usize,
}

/// `z ↦ (z − shift) / scale` applied after the ODE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScale {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LatentScale {
    fn fit(z: ArrayView2<f64>) -> Result<Self> {
        let shift = z.mean_axis(Axis(0)).ok_or_else(|| Error::Data("no latent rows".into()))?;
        let scale = z.std_axis(Axis(0), 0.0);
        let s = LatentScale { shift: shift.to_vec(), scale: scale.to_vec() };
        s.validate(z.ncols())?;
        Ok(s)
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.shift.len() != d || self.scale.len() != d {
            return Err(Error::shape("latent scale has the wrong dimension"));
        }
        if self.shift.iter().any(|v| !v.is_finite()) || self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Data("latent scale needs finite shifts and positive scales".into()));
        }
        Ok(())
    }

    fn forward(&self, mut z: Array2<f64>) -> Array2<f64> {
        for (j, mut col) in z.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.shift[j]) / self.scale[j]);
        }
        z
    }

    fn inverse(&self, mut z: Array2<f64>) -> Array2<f64> {
        for (j, mut col) in z.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.scale[j] + self.shift[j]);
        }
        z
    }
}

/// A learned transport between one marginal and an approximately standard
/// normal latent.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    velocity: Mlp,
    steps: usize,
    linear: Option<LinearMap>,
    normalization: Normalization,
    latent: Option<LatentScale>,
    /// Set when training was skipped because the sample was too small.
    pub rank_only: bool,
    pub summary: Option<TrainSummary>,
}

impl FlowModel {
    pub fn new(velocity: Mlp, steps: usize, normalization: Normalization) -> Result<Self> {
        let d = normalization.dim();
        if velocity.input_dim() != d + 1 || velocity.output_dim() != d {
            return Err(Error::shape(format!(
                "velocity net is {} -> {}, flow dimension {d} needs {} -> {d}",
                velocity.input_dim(),
                velocity.output_dim(),
                d + 1
            )));
        }
        if steps == 0 {
            return Err(Error::Config("integration steps must be at least 1".into()));
        }
        normalization.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(FlowModel { velocity, steps, linear: None, normalization, latent: None, rank_only: false, summary: None })
    }

    /// A flow whose velocity field is identically zero.
    pub fn zero(normalization: Normalization, steps: usize) -> Result<Self> {
        let d = normalization.dim();
        let layer = crate::nn::Layer {
            weight: Array2::zeros((d, d + 1)),
            bias: Array1::zeros(d),
            activation: Activation::Identity,
        };
        FlowModel::new(Mlp::from_layers(vec![layer])?, steps, normalization)
    }

    pub fn dim(&self) -> usize {
        self.normalization.dim()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("integration steps must be at least 1".into()));
        }
        self.steps = steps;
        Ok(self)
    }

    /// Puts `linear` in front of the normalisation.
    pub fn with_linear(mut self, linear: Option<LinearMap>) -> Result<Self> {
        if let Some(map) = &linear {
            if map.dim() != self.dim() {
                return Err(Error::shape(format!("linear map is {}-d, flow is {}-d", map.dim(), self.dim())));
            }
            map.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.linear = linear;
        Ok(self)
    }

    pub fn linear(&self) -> Option<&LinearMap> {
        self.linear.as_ref()
    }

    /// Sets the affine map applied after the ODE in `encode`.
    pub fn with_latent_scale(mut self, latent: Option<LatentScale>) -> Result<Self> {
        if let Some(l) = &latent {
            l.validate(self.dim())?;
        }
        self.latent = latent;
        Ok(self)
    }

    pub fn latent_scale(&self) -> Option<&LatentScale> {
        self.latent.as_ref()
    }

    fn to_working(&self, data: ArrayView2<f64>) -> Array2<f64> {
        match &self.linear {
            Some(map) => self.normalization.forward(map.forward(data).view()),
            None => self.normalization.forward(data),
        }
    }

    fn from_working(&self, work: ArrayView2<f64>) -> Array2<f64> {
        let x = self.normalization.inverse(work);
        match &self.linear {
            Some(map) => map.inverse(x.view()),
            None => x,
        }
    }

    pub fn velocity_net(&self) -> &Mlp {
        &self.velocity
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    fn check_cols(&self, data: &ArrayView2<f64>) -> Result<()> {
        if data.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "batch has {} columns, flow dimension is {}",
                data.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Velocity at time `t` for every row of `x` (working space).
    pub fn velocity(&self, x: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let n = x.nrows();
        let d = self.dim();
        let mut input = Array2::zeros((n, d + 1));
        input.slice_mut(s![.., ..d]).assign(&x);
        input.column_mut(d).fill(t);
        self.velocity.forward(input.view())
    }

    fn integrate(&self, mut x: Array2<f64>, t0: f64, t1: f64) -> Result<Array2<f64>> {
        let h = (t1 - t0) / self.steps as f64;
        for step in 0..self.steps {
            let t = t0 + h * step as f64;
            let k1 = self.velocity(x.view(), t)?;
            let k2 = self.velocity((&x + &(&k1 * (0.5 * h))).view(), t + 0.5 * h)?;
            let k3 = self.velocity((&x + &(&k2 * (0.5 * h))).view(), t + 0.5 * h)?;
            let k4 = self.velocity((&x + &(&k3 * h)).view(), t + h)?;
            x.zip_mut_with(&k1, |xi, &a| *xi += h / 6.0 * a);
            x.zip_mut_with(&k2, |xi, &a| *xi += h / 3.0 * a);
            x.zip_mut_with(&k3, |xi, &a| *xi += h / 3.0 * a);
            x.zip_mut_with(&k4, |xi, &a| *xi += h / 6.0 * a);
        }
        Ok(x)
    }

    /// Normalised data at t = 1 transported to the latent at t = 0.
    pub fn encode(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_cols(&data)?;
        let z = self.integrate(self.to_working(data), 1.0, 0.0)?;
        Ok(match &self.latent {
            Some(l) => l.forward(z),
            None => z,
        })
    }

    /// Latent at t = 0 transported to data space.
    pub fn decode(&self, latent: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_cols(&latent)?;
        let z = match &self.latent {
            Some(l) => l.inverse(latent.to_owned()),
            None => latent.to_owned(),
        };
        let x = self.integrate(z, 0.0, 1.0)?;
        Ok(self.from_working(x.view()))
    }

    pub fn to_checkpoint(&self) -> FlowCheckpoint {
        FlowCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            network: self.velocity.to_checkpoint(None),
            steps: self.steps,
            linear: self.linear.clone(),
            normalization: self.normalization.clone(),
            latent: self.latent.clone(),
            rank_only: self.rank_only,
            summary: self.summary.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: FlowCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", ckpt.format)));
        }
        let net = Mlp::from_checkpoint(&ckpt.network)?;
        let mut flow = FlowModel::new(net, ckpt.steps, ckpt.normalization)
            .and_then(|f| f.with_linear(ckpt.linear))
            .and_then(|f| f.with_latent_scale(ckpt.latent))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        flow.rank_only = ckpt.rank_only;
        flow.summary = ckpt.summary;
        Ok(flow)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        FlowModel::from_checkpoint(serde_json::from_str(text)?)
    }
}

/// The neural-network checkpoint plus integration and normalisation metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckpoint {
    pub format: String,
    pub network: MlpCheckpoint,
    pub steps: usize,
    #[serde(default)]
    pub linear: Option<LinearMap>,
    pub normalization: Normalization,
    #[serde(default)]
    pub latent: Option<LatentScale>,
    pub rank_only: bool,
    pub summary: Option<TrainSummary>,
}

/// Flow-matching loss and parameter gradients for fixed times and noise.
///
/// `data` is in working (normalised) space; `t` has one entry per row.
pub fn fm_loss_with(
    net: &Mlp,
    data: ArrayView2<f64>,
    t: &[f64],
    noise: ArrayView2<f64>,
) -> Result<(f64, Gradients)> {
    let (n, d) = data.dim();
    if n == 0 {
        return Err(Error::Data("flow-matching loss on an empty batch".into()));
    }
    if t.len() != n || noise.dim() != (n, d) || net.input_dim() != d + 1 {
        return Err(Error::shape("flow-matching inputs disagree in shape"));
    }
    let mut input = Array2::zeros((n, d + 1));
    let mut target = Array2::zeros((n, d));
    for i in 0..n {
        let ti = t[i];
        for j in 0..d {
            let (x, e) = (data[[i, j]], noise[[i, j]]);
            input[[i, j]] = (1.0 - ti) * e + ti * x;
            target[[i, j]] = x - e;
        }
        input[[i, d]] = ti;
    }
    let cache = net.forward_cached(input.view())?;
    let resid = cache.output() - &target;
    let denom = (n * d) as f64;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / denom;
    let upstream = resid * (2.0 / denom);
    let (grads, _) = net.backward(&cache, upstream.view())?;
    Ok((loss, grads))
}

/// Flow-matching loss with times and noise drawn from `rng`.
pub fn fm_loss<R: Rng + ?Sized>(
    flow: &FlowModel,
    data: ArrayView2<f64>,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let (n, d) = data.dim();
    if n == 0 {
        return Err(Error::Data("flow-matching loss on an empty batch".into()));
    }
    if d != flow.dim() {
        return Err(Error::shape(format!("batch has {d} columns, flow has {}", flow.dim())));
    }
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let noise = Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
    fm_loss_with(&flow.velocity, data, &t, noise.view())
}

/// Trains a flow on one marginal sample (rows are samples).
pub fn train_marginal_flow<R: Rng + ?Sized>(
    data: ArrayView2<f64>,
    config: &FlowConfig,
    rng: &mut R,
) -> Result<FlowModel> {
    let (n, d) = data.dim();
    if d == 0 {
        return Err(Error::Data("data has no columns".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in marginal data".into()));
    }
    if config.batch_size == 0 || config.hidden.iter().any(|&h| h == 0) {
        return Err(Error::Config("batch size and hidden widths must be positive".into()));
    }
    if n < config.min_samples {
        let normalization = Normalization::fit(data, config.normalization, config.quantile_knots)?;
        warn!(
            "only {n} samples (< {}); skipping the flow and ranking raw data",
            config.min_samples
        );
        let mut flow = FlowModel::zero(normalization, 1)?;
        flow.rank_only = true;
        return Ok(flow);
    }

    let linear = LinearMap::fit(data, config.linear, &config.ica)?;
    let unmixed = match &linear {
        Some(map) => map.forward(data),
        None => data.to_owned(),
    };
    let normalization = Normalization::fit(unmixed.view(), config.normalization, config.quantile_knots)?;
    let work = normalization.forward(unmixed.view());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
    let val_rows = &order[..n_val];
    let train_rows = &order[n_val..];
    let val = work.select(Axis(0), val_rows);
    let train = work.select(Axis(0), train_rows);

    let val_t: Vec<f64> = (0..n_val).map(|_| rng.random::<f64>()).collect();
    let val_noise = Array2::from_shape_simple_fn((n_val, d), || rng.sample(StandardNormal));

    let mut sizes = Vec::with_capacity(config.hidden.len() + 2);
    sizes.push(d + 1);
    sizes.extend(&config.hidden);
    sizes.push(d);
    let mut net = Mlp::new(&sizes, Activation::Softplus, Activation::Identity, rng)?;
    let mut adam = Adam::new(&net, config.optimizer);

    let val_loss = |net: &Mlp| -> Result<f64> {
        Ok(fm_loss_with(net, val.view(), &val_t, val_noise.view())?.0)
    };
    let initial_val_loss = val_loss(&net)?;
    let mut best_val = initial_val_loss;
    let mut best_net = net.clone();
    let mut since_best = 0;
    let mut epochs = 0;
    let mut skipped = 0;
    let n_train = train.nrows();
    let mut idx: Vec<usize> = (0..n_train).collect();

    for _ in 0..config.max_epochs {
        epochs += 1;
        idx.shuffle(rng);
        for chunk in idx.chunks(config.batch_size) {
            let batch = train.select(Axis(0), chunk);
            let m = batch.nrows();
            let t: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let noise = Array2::from_shape_simple_fn((m, d), || rng.sample(StandardNormal));
            let (loss, grads) = fm_loss_with(&net, batch.view(), &t, noise.view())?;
            if !loss.is_finite() || adam.step(&mut net, &grads).is_err() {
                skipped += 1;
            }
        }
        let v = val_loss(&net)?;
        if v < best_val {
            best_val = v;
            best_net = net.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if !best_net.all_finite() {
        return Err(Error::Optimizer("flow parameters diverged".into()));
    }
    let mut flow = FlowModel::new(best_net, config.steps, normalization)?.with_linear(linear)?;
    if config.standardize_latent {
        let z = flow.integrate(work, 1.0, 0.0)?;
        flow = flow.with_latent_scale(Some(LatentScale::fit(z.view())?))?;
    }
    flow.summary = Some(TrainSummary {
        epochs,
        initial_val_loss,
        best_val_loss: best_val,
        skipped_batches: skipped,
    });
    Ok(flow)
}
