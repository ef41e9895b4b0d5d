//! Neural critics for variational MI bounds.
//!
//! The critic `T(x, y)` is a densely connected MLP: a trunk of three
//! leaky-ReLU layers, and a linear head that sees both the raw input and the
//! trunk output.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, ForwardCache, Gradients, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticObjective {
    /// Donsker-Varadhan bound, as trained by MINE.
    DvMine,
    InfoNce,
    /// DV with the partition term's `exp(T)` clipped to `[e^-τ, e^τ]`.
    Smile { tau: f64 },
}

impl CriticObjective {
    pub fn name(&self) -> String {
        match self {
            CriticObjective::DvMine => "mine".into(),
            CriticObjective::InfoNce => "infonce".into(),
            CriticObjective::Smile { tau } => format!("smile-{tau}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    trunk: Mlp,
    head: Mlp,
}

pub struct CriticCache {
    trunk: ForwardCache,
    head: ForwardCache,
}

pub struct CriticGradients {
    pub trunk: Gradients,
    pub head: Gradients,
}

impl CriticGradients {
    pub fn is_finite(&self) -> bool {
        self.trunk.is_finite() && self.head.is_finite()
    }
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, width: usize, rng: &mut R) -> Result<Self> {
        let trunk = Mlp::new(
            &[input_dim, width, width, width],
            Activation::LeakyRelu,
            Activation::LeakyRelu,
            rng,
        )?;
        let head = Mlp::new(&[input_dim + width, 1], Activation::Identity, Activation::Identity, rng)?;
        Ok(Critic { trunk, head })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    pub fn head_mut(&mut self) -> &mut Mlp {
        &mut self.head
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array1<f64>> {
        let h = self.trunk.forward(input)?;
        let joined = concatenate(Axis(1), &[input, h.view()]).expect("same row count");
        Ok(self.head.forward(joined.view())?.column(0).to_owned())
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<(Array1<f64>, CriticCache)> {
        let trunk = self.trunk.forward_cached(input)?;
        let joined =
            concatenate(Axis(1), &[input, trunk.output().view()]).expect("same row count");
        let head = self.head.forward_cached(joined.view())?;
        let out = head.output().column(0).to_owned();
        Ok((out, CriticCache { trunk, head }))
    }

    /// Gradients of `Σ_i upstream_i · T(input_i)`.
    pub fn backward(&self, cache: &CriticCache, upstream: ArrayView1<f64>) -> Result<CriticGradients> {
        let up = upstream.insert_axis(Axis(1));
        let (head, joined_grad) = self.head.backward(&cache.head, up)?;
        let d = self.input_dim();
        let (trunk, _) = self.trunk.backward(&cache.trunk, joined_grad.slice(s![.., d..]))?;
        Ok(CriticGradients { trunk, head })
    }
}

/// Objective value and its gradient with respect to each critic output.
///
/// `joint` are the scores on paired rows. For the DV family `marginal` are
/// scores on shuffled pairs; for InfoNCE `marginal` is the row-major `B×B`
/// score matrix `S_ij = T(x_i, y_j)` and `joint` is ignored.
pub fn objective_value(
    objective: CriticObjective,
    joint: ArrayView1<f64>,
    marginal: ArrayView1<f64>,
) -> (f64, Array1<f64>, Array1<f64>) {
    match objective {
        CriticObjective::DvMine | CriticObjective::Smile { .. } => {
            let tau = match objective {
                CriticObjective::Smile { tau } => tau,
                _ => f64::INFINITY,
            };
            let nj = joint.len() as f64;
            let nm = marginal.len() as f64;
            let clipped = marginal.mapv(|t| t.clamp(-tau, tau));
            let max = clipped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w = clipped.mapv(|t| (t - max).exp());
            let sum = w.sum();
            let log_mean_exp = max + (sum / nm).ln();
            let value = joint.mean().unwrap_or(0.0) - log_mean_exp;
            let g_joint = Array1::from_elem(joint.len(), 1.0 / nj);
            let g_marg = Array1::from_shape_fn(marginal.len(), |i| {
                let inside = marginal[i].abs() < tau;
                if inside { -w[i] / sum } else { 0.0 }
            });
            (value, g_joint, g_marg)
        }
        CriticObjective::InfoNce => {
            let b = (marginal.len() as f64).sqrt().round() as usize;
            let scores = marginal.into_shape_with_order((b, b)).expect("square score matrix");
            let mut value = 0.0;
            let mut grad = Array2::zeros((b, b));
            for i in 0..b {
                let row = scores.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w = row.mapv(|t| (t - max).exp());
                let sum = w.sum();
                value += row[i] - (max + sum.ln());
                for j in 0..b {
                    grad[[i, j]] = -w[j] / sum / b as f64;
                }
                grad[[i, i]] += 1.0 / b as f64;
            }
            let value = value / b as f64 + (b as f64).ln();
            (value, Array1::zeros(joint.len()), grad.into_shape_with_order(b * b).expect("flat"))
        }
    }
}

fn pair_rows(x: ArrayView2<f64>, y: ArrayView2<f64>, perm: Option<&[usize]>) -> Array2<f64> {
    let y_rows = match perm {
        Some(p) => y.select(Axis(0), p),
        None => y.to_owned(),
    };
    concatenate(Axis(1), &[x, y_rows.view()]).expect("same row count")
}

/// All `B²` pairs `(x_i, y_j)`, row-major in `(i, j)`.
fn all_pairs(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let b = x.nrows();
    let (dx, dy) = (x.ncols(), y.ncols());
    let mut out = Array2::zeros((b * b, dx + dy));
    for i in 0..b {
        for j in 0..b {
            let mut row = out.row_mut(i * b + j);
            row.slice_mut(s![..dx]).assign(&x.row(i));
            row.slice_mut(s![dx..]).assign(&y.row(j));
        }
    }
    out
}

/// Objective value and critic gradients on one batch.
pub fn batch_objective<R: Rng + ?Sized>(
    critic: &Critic,
    objective: CriticObjective,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    rng: &mut R,
) -> Result<(f64, CriticGradients)> {
    let b = x.nrows();
    match objective {
        CriticObjective::InfoNce => {
            let pairs = all_pairs(x, y);
            let (scores, cache) = critic.forward_cached(pairs.view())?;
            let (value, _, g) = objective_value(objective, Array1::zeros(0).view(), scores.view());
            // Ascend the objective: backpropagate the negated gradient.
            let grads = critic.backward(&cache, (-g).view())?;
            Ok((value, grads))
        }
        _ => {
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(rng);
            let joint_in = pair_rows(x, y, None);
            let marg_in = pair_rows(x, y, Some(&perm));
            let stacked = concatenate(Axis(0), &[joint_in.view(), marg_in.view()]).expect("same width");
            let (scores, cache) = critic.forward_cached(stacked.view())?;
            let (value, gj, gm) =
                objective_value(objective, scores.slice(s![..b]), scores.slice(s![b..]));
            let up = -concatenate(Axis(0), &[gj.view(), gm.view()]).expect("1-d");
            Ok((value, critic.backward(&cache, up.view())?))
        }
    }
}

/// Objective on held-out rows, averaged over batches of at most `batch`.
pub fn evaluate_objective<R: Rng + ?Sized>(
    critic: &Critic,
    objective: CriticObjective,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    let n = x.nrows();
    match objective {
        CriticObjective::InfoNce => {
            let mut total = 0.0;
            let mut weight = 0.0;
            let mut start = 0;
            while start < n {
                let end = (start + batch).min(n);
                let (xb, yb) = (x.slice(s![start..end, ..]), y.slice(s![start..end, ..]));
                let scores = critic.forward(all_pairs(xb, yb).view())?;
                let (v, _, _) = objective_value(objective, Array1::zeros(0).view(), scores.view());
                total += v * (end - start) as f64;
                weight += (end - start) as f64;
                start = end;
            }
            Ok(total / weight)
        }
        _ => {
            let joint = critic.forward(pair_rows(x, y, None).view())?;
            // Several shuffles reduce the variance of the partition term.
            let mut marg = Vec::with_capacity(4 * n);
            for _ in 0..4 {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(rng);
                marg.extend(critic.forward(pair_rows(x, y, Some(&perm)).view())?);
            }
            Ok(objective_value(objective, joint.view(), Array1::from(marg).view()).0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub width: usize,
    pub batch_size: usize,
    /// InfoNCE scores every pair in a batch, so it uses its own, smaller batch.
    pub infonce_batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub val_fraction: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            width: 64,
            batch_size: 512,
            infonce_batch_size: 128,
            epochs: 40,
            optimizer: AdamConfig::default(),
            val_fraction: 0.2,
        }
    }
}

fn standardize(train: &Array2<f64>, other: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let sd = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    ((train - &mean) / &sd, (other - &mean) / &sd)
}

/// Trains a critic on the training rows and returns the objective on the
/// held-out rows.
pub fn train_and_evaluate<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    objective: CriticObjective,
    config: &CriticConfig,
    rng: &mut R,
) -> Result<f64> {
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_rows, train_rows) = order.split_at(n_val);
    let (xt, xv) = standardize(&x.select(Axis(0), train_rows), &x.select(Axis(0), val_rows));
    let (yt, yv) = standardize(&y.select(Axis(0), train_rows), &y.select(Axis(0), val_rows));

    let batch = match objective {
        CriticObjective::InfoNce => config.infonce_batch_size,
        _ => config.batch_size,
    }
    .max(2);
    let mut critic = Critic::new(x.ncols() + y.ncols(), config.width, rng)?;
    let mut adam_trunk = Adam::new(critic.trunk(), config.optimizer);
    let mut adam_head = Adam::new(critic.head(), config.optimizer);
    let mut idx: Vec<usize> = (0..xt.nrows()).collect();
    for _ in 0..config.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = xt.select(Axis(0), chunk);
            let yb = yt.select(Axis(0), chunk);
            let (value, grads) = batch_objective(&critic, objective, xb.view(), yb.view(), rng)?;
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::Estimator(format!("{} critic diverged", objective.name())));
            }
            adam_trunk.step(critic.trunk_mut(), &grads.trunk)?;
            adam_head.step(critic.head_mut(), &grads.head)?;
        }
    }
    let value = evaluate_objective(&critic, objective, xv.view(), yv.view(), batch, rng)?;
    if !value.is_finite() {
        return Err(Error::Estimator(format!("{} estimate is not finite", objective.name())));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dv_of_constant_critic_is_zero() {
        let j = Array1::from_elem(5, 0.7);
        let m = Array1::from_elem(5, 0.7);
        let (v, gj, gm) = objective_value(CriticObjective::DvMine, j.view(), m.view());
        assert!(v.abs() < 1e-15);
        assert!((gj.sum() - 1.0).abs() < 1e-15);
        assert!((gm.sum() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn smile_clips_partition_term() {
        let j = Array1::from(vec![0.0]);
        let m = Array1::from(vec![10.0, -10.0]);
        let (v, _, gm) = objective_value(CriticObjective::Smile { tau: 1.0 }, j.view(), m.view());
        let expected = -(((1.0f64).exp() + (-1.0f64).exp()) / 2.0).ln();
        assert!((v - expected).abs() < 1e-14);
        assert_eq!(gm, Array1::from(vec![0.0, 0.0]));
    }

    #[test]
    fn infonce_with_perfect_diagonal_reaches_log_b() {
        let b = 4;
        let s = Array1::from_shape_fn(b * b, |k| if k / b == k % b { 60.0 } else { 0.0 });
        let (v, _, _) = objective_value(CriticObjective::InfoNce, Array1::zeros(0).view(), s.view());
        assert!(v <= (b as f64).ln());
        assert!((v - (b as f64).ln()).abs() < 1e-12);
    }

    fn param_mut(c: &mut Critic, head: bool, l: usize, i: usize, j: usize) -> &mut f64 {
        let net = if head { c.head_mut() } else { c.trunk_mut() };
        &mut net.layers_mut()[l].weight[[i, j]]
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut critic = Critic::new(3, 5, &mut rng).unwrap();
        let input = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let up = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
        let loss = |c: &Critic| c.forward(input.view()).unwrap().dot(&up);
        let (_, cache) = critic.forward_cached(input.view()).unwrap();
        let grads = critic.backward(&cache, up.view()).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for head in [false, true] {
            let analytic = if head { &grads.head.weights } else { &grads.trunk.weights };
            for (l, g) in analytic.iter().enumerate() {
                for ((i, j), &an) in g.indexed_iter() {
                    let orig = *param_mut(&mut critic, head, l, i, j);
                    *param_mut(&mut critic, head, l, i, j) = orig + h;
                    let plus = loss(&critic);
                    *param_mut(&mut critic, head, l, i, j) = orig - h;
                    let minus = loss(&critic);
                    *param_mut(&mut critic, head, l, i, j) = orig;
                    let fd = (plus - minus) / (2.0 * h);
                    worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn infonce_never_exceeds_log_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((300, 2), |_| rng.random_range(-1.0..1.0));
        let y = x.mapv(|v| v * 2.0);
        let cfg = CriticConfig { epochs: 3, infonce_batch_size: 16, ..CriticConfig::default() };
        let v = train_and_evaluate(x.view(), y.view(), CriticObjective::InfoNce, &cfg, &mut rng)
            .unwrap();
        assert!(v <= 16f64.ln(), "{v}");
    }
}
