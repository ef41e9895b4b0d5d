//! End-to-end mutual information estimators.
//!
//! * [`vce_estimate`]: flows, element-wise ranks, a selected Gaussian copula
//!   mixture, and the mean log copula density.
//! * [`vce_prime_estimate`]: the same ranks, with the copula density taken
//!   from a classifier between data ranks and independent uniform ranks.
//! * [`gaussian_copula_mi`]: the closed-form nonparanormal baseline.
//! * [`critic_estimate`]: DV / InfoNCE / SMILE critics.
//!
//! All values are in nats.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copula::{select_copula, CandidateRecord, CopulaConfig, CopulaModel, Selection};
use crate::critic::{train_and_evaluate, CriticConfig, CriticObjective};
use crate::error::{Error, Result};
use crate::flow::{train_marginal_flow, FlowConfig, FlowModel};
use crate::nn::{Activation, Adam, AdamConfig, Mlp};
use crate::ranks::{
    empirical_rank, gauss_quantile, rank_diagnostics, RankMatrix, RankSource, RankedPair,
};

/// Paired samples `(x_i, y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    x: Array2<f64>,
    y: Array2<f64>,
}

impl PairedDataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::shape(format!("x has {} rows, y has {}", x.nrows(), y.nrows())));
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::Data("both blocks need at least one column".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample value".into()));
        }
        Ok(PairedDataset { x, y })
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView2<'_, f64> {
        self.y.view()
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.x.ncols(), self.y.ncols())
    }

    pub fn select_rows(&self, rows: &[usize]) -> PairedDataset {
        PairedDataset { x: self.x.select(Axis(0), rows), y: self.y.select(Axis(0), rows) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Vce,
    VcePrime,
    GaussianCopula,
    Critic { objective: CriticObjective },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Vce => write!(f, "vce"),
            Method::VcePrime => write!(f, "vce-prime"),
            Method::GaussianCopula => write!(f, "gaussian-copula"),
            Method::Critic { objective } => write!(f, "{}", objective.name()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts `vce`, `vce-prime`, `gaussian-copula`, `mine`, `infonce`,
    /// `smile` (τ = 5) and `smile-<τ>`.
    fn from_str(s: &str) -> Result<Self> {
        let critic = |objective| Ok(Method::Critic { objective });
        match s.trim().to_ascii_lowercase().as_str() {
            "vce" => Ok(Method::Vce),
            "vce-prime" | "vce'" => Ok(Method::VcePrime),
            "gaussian-copula" | "nonparanormal" => Ok(Method::GaussianCopula),
            "mine" | "dv" => critic(CriticObjective::DvMine),
            "infonce" => critic(CriticObjective::InfoNce),
            "smile" => critic(CriticObjective::Smile { tau: 5.0 }),
            other => match other.strip_prefix("smile-").map(str::parse::<f64>) {
                Some(Ok(tau)) if tau > 0.0 => critic(CriticObjective::Smile { tau }),
                _ => Err(Error::Config(format!("unknown estimator {s:?}"))),
            },
        }
    }
}

/// Everything an estimate reports besides its value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub selected_k: Option<usize>,
    pub val_nll: Option<f64>,
    pub t_stat_x: Option<f64>,
    pub t_stat_y: Option<f64>,
    /// Max-norm `decode(encode(x)) − x` on a probe batch, in data units.
    pub round_trip_x: Option<f64>,
    pub round_trip_y: Option<f64>,
    /// Mean log copula density on the rows held out during selection.
    pub held_out_estimate: Option<f64>,
    pub flow_epochs: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub method: Method,
    pub value: f64,
    pub diagnostics: Diagnostics,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl MIEstimate {
    fn new(method: Method, value: f64, diagnostics: Diagnostics) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Estimator(format!("{method} produced a non-finite value")));
        }
        Ok(MIEstimate { method, value, diagnostics, seed: None, config_hash: None })
    }

    /// Single-line JSON record.
    pub fn to_record(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_record(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VceConfig {
    pub flow: FlowConfig,
    pub copula: CopulaConfig,
    /// Rank `t` statistics above this attach a quality warning.
    pub t_warning: f64,
    /// Divide the fitted copula by its own block marginals before averaging.
    pub block_correction: bool,
    /// Rows used for the flow round-trip check.
    pub round_trip_rows: usize,
}

impl Default for VceConfig {
    fn default() -> Self {
        VceConfig {
            flow: FlowConfig::default(),
            copula: CopulaConfig::default(),
            t_warning: 0.2,
            block_correction: false,
            round_trip_rows: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowPair {
    pub x: FlowModel,
    pub y: FlowModel,
}

/// Ranks of both blocks together with the flows and their diagnostics.
#[derive(Debug, Clone)]
pub struct RankStage {
    pub ranks: RankedPair,
    pub flows: FlowPair,
    pub t_stat_x: f64,
    pub t_stat_y: f64,
    pub round_trip_x: f64,
    pub round_trip_y: f64,
    pub seconds: f64,
}

fn round_trip_error(flow: &FlowModel, data: ArrayView2<f64>, rows: usize) -> Result<f64> {
    let probe = data.slice(s![..rows.min(data.nrows()), ..]);
    let back = flow.decode(flow.encode(probe)?.view())?;
    Ok((&back - &probe).iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

fn train_and_rank(
    data: ArrayView2<f64>,
    config: &FlowConfig,
    round_trip_rows: usize,
    seed: u64,
) -> Result<(FlowModel, RankMatrix, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flow = train_marginal_flow(data, config, &mut rng)?;
    let latents = flow.encode(data)?;
    let source = if flow.rank_only { RankSource::RawData } else { RankSource::FromFlow };
    let ranks = empirical_rank(latents.view(), source)?;
    let rt = if flow.rank_only { 0.0 } else { round_trip_error(&flow, data, round_trip_rows)? };
    Ok((flow, ranks, rt))
}

/// Trains `f_X` and `f_Y` (concurrently when threads are available) and ranks
/// both blocks.
pub fn compute_ranks<R: Rng + ?Sized>(
    data: &PairedDataset,
    config: &VceConfig,
    rng: &mut R,
) -> Result<RankStage> {
    let start = Instant::now();
    let (seed_x, seed_y) = (rng.random::<u64>(), rng.random::<u64>());
    let (rx, ry) = rayon::join(
        || train_and_rank(data.x(), &config.flow, config.round_trip_rows, seed_x),
        || train_and_rank(data.y(), &config.flow, config.round_trip_rows, seed_y),
    );
    let (fx, ux, rtx) = rx?;
    let (fy, uy, rty) = ry?;
    let t_x = rank_diagnostics(&ux)?.t_stat;
    let t_y = rank_diagnostics(&uy)?.t_stat;
    Ok(RankStage {
        ranks: RankedPair::new(ux, uy)?,
        flows: FlowPair { x: fx, y: fy },
        t_stat_x: t_x,
        t_stat_y: t_y,
        round_trip_x: rtx,
        round_trip_y: rty,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-row log copula density used for the estimate.
fn scores_for_estimate(model: &CopulaModel, z: ArrayView2<f64>, block_correction: bool) -> Result<Array1<f64>> {
    if block_correction {
        model.pointwise_mi_scores(z)
    } else {
        model.log_density_scores(z)
    }
}

fn stage_diagnostics(stage: &RankStage, t_warning: f64) -> Diagnostics {
    let mut warnings = Vec::new();
    for (name, t) in [("x", stage.t_stat_x), ("y", stage.t_stat_y)] {
        if t > t_warning {
            warnings.push(format!("rank t statistic for {name} is {t:.3} (> {t_warning})"));
        }
    }
    for (name, f) in [("x", &stage.flows.x), ("y", &stage.flows.y)] {
        if f.rank_only {
            warnings.push(format!("too few samples for a flow on {name}; raw data ranked"));
        }
    }
    Diagnostics {
        t_stat_x: Some(stage.t_stat_x),
        t_stat_y: Some(stage.t_stat_y),
        round_trip_x: Some(stage.round_trip_x),
        round_trip_y: Some(stage.round_trip_y),
        flow_epochs: Some((
            stage.flows.x.summary.as_ref().map_or(0, |s| s.epochs),
            stage.flows.y.summary.as_ref().map_or(0, |s| s.epochs),
        )),
        warnings,
        ..Diagnostics::default()
    }
}

/// Copula selection and the VCE value for ranks that are already computed.
pub fn vce_from_ranks<R: Rng + ?Sized>(
    stage: &RankStage,
    config: &VceConfig,
    rng: &mut R,
) -> Result<(MIEstimate, Selection)> {
    let start = Instant::now();
    let selection = select_copula(&stage.ranks, &config.copula, rng)?;
    let z = stage.ranks.joined_scores();
    let per_row = scores_for_estimate(&selection.model, z.view(), config.block_correction)?;
    let value = per_row.mean().expect("non-empty");
    let mut diag = stage_diagnostics(stage, config.t_warning);
    diag.selected_k = Some(selection.k);
    diag.val_nll = selection.model.meta.val_nll;
    diag.held_out_estimate = selection.model.meta.val_nll.map(|v| -v);
    diag.candidates = selection.candidates.clone();
    diag.wall_time = stage.seconds + start.elapsed().as_secs_f64();
    Ok((MIEstimate::new(Method::Vce, value, diag)?, selection))
}

/// Full VCE run with the fitted models kept.
#[derive(Debug, Clone)]
pub struct VceRun {
    pub estimate: MIEstimate,
    pub stage: RankStage,
    pub selection: Selection,
}

pub fn vce_run<R: Rng + ?Sized>(data: &PairedDataset, config: &VceConfig, rng: &mut R) -> Result<VceRun> {
    if data.len() < 50 {
        return Err(Error::Data(format!("VCE needs at least 50 rows, got {}", data.len())));
    }
    let stage = compute_ranks(data, config, rng)?;
    let (estimate, selection) = vce_from_ranks(&stage, config, rng)?;
    Ok(VceRun { estimate, stage, selection })
}

pub fn vce_estimate<R: Rng + ?Sized>(
    data: &PairedDataset,
    config: &VceConfig,
    rng: &mut R,
) -> Result<MIEstimate> {
    Ok(vce_run(data, config, rng)?.estimate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![128, 128],
            batch_size: 512,
            optimizer: AdamConfig::default(),
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcePrimeConfig {
    pub vce: VceConfig,
    pub classifier: ClassifierConfig,
}

impl Default for VcePrimeConfig {
    fn default() -> Self {
        VcePrimeConfig { vce: VceConfig::default(), classifier: ClassifierConfig::default() }
    }
}

/// Mean logistic loss and the gradient with respect to each logit.
pub fn logistic_loss(logits: &Array1<f64>, labels: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = ndarray::Zip::from(logits).and(labels).map_collect(|&s, &y| {
        // softplus(s) − y·s, computed stably.
        loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s;
        (1.0 / (1.0 + (-s).exp()) - y) / n
    });
    (loss / n, grad)
}

/// Trains a classifier with logistic loss to separate `positive` (label 1)
/// from `negative` (label 0) rows; returns it and the number of epochs run.
pub fn train_classifier<R: Rng + ?Sized>(
    positive: ArrayView2<f64>,
    negative: ArrayView2<f64>,
    config: &ClassifierConfig,
    rng: &mut R,
) -> Result<(Mlp, usize)> {
    let d = positive.ncols();
    if negative.ncols() != d {
        return Err(Error::shape("classes have different widths"));
    }
    let features = concatenate(Axis(0), &[positive, negative]).expect("same width");
    let labels: Array1<f64> = (0..features.nrows())
        .map(|i| if i < positive.nrows() { 1.0 } else { 0.0 })
        .collect();
    let n = features.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_rows, train_rows) = order.split_at(n_val);
    let (xv, yv) = (features.select(Axis(0), val_rows), labels.select(Axis(0), val_rows));
    let (xt, yt) = (features.select(Axis(0), train_rows), labels.select(Axis(0), train_rows));

    let mut sizes = vec![d];
    sizes.extend(&config.hidden);
    sizes.push(1);
    let mut net = Mlp::new(&sizes, Activation::Softplus, Activation::Identity, rng)?;
    let mut adam = Adam::new(&net, config.optimizer);
    let val_loss = |net: &Mlp| -> Result<f64> {
        Ok(logistic_loss(&net.forward(xv.view())?.column(0).to_owned(), &yv).0)
    };
    let mut best = (val_loss(&net)?, net.clone());
    let mut since = 0;
    let mut epochs = 0;
    let mut idx: Vec<usize> = (0..xt.nrows()).collect();
    for _ in 0..config.max_epochs {
        epochs += 1;
        idx.shuffle(rng);
        for chunk in idx.chunks(config.batch_size.max(1)) {
            let xb = xt.select(Axis(0), chunk);
            let yb = yt.select(Axis(0), chunk);
            let cache = net.forward_cached(xb.view())?;
            let (loss, g) = logistic_loss(&cache.output().column(0).to_owned(), &yb);
            if !loss.is_finite() {
                return Err(Error::Estimator("classifier loss diverged".into()));
            }
            let (grads, _) = net.backward(&cache, g.insert_axis(Axis(1)).view())?;
            adam.step(&mut net, &grads)?;
        }
        let v = val_loss(&net)?;
        if !v.is_finite() {
            return Err(Error::Estimator("classifier validation loss diverged".into()));
        }
        if v < best.0 {
            best = (v, net.clone());
            since = 0;
        } else {
            since += 1;
            if since >= config.patience {
                break;
            }
        }
    }
    Ok((best.1, epochs))
}

/// Mean classifier logit on `positive` after training against `negative`.
pub fn classifier_log_ratio<R: Rng + ?Sized>(
    positive: ArrayView2<f64>,
    negative: ArrayView2<f64>,
    config: &ClassifierConfig,
    rng: &mut R,
) -> Result<f64> {
    let (net, _) = train_classifier(positive, negative, config, rng)?;
    let logits = net.forward(positive)?;
    let value = logits.mean().expect("non-empty");
    if !value.is_finite() {
        return Err(Error::Estimator("classifier produced non-finite logits".into()));
    }
    Ok(value)
}

fn uniform_reference_scores<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((n, d));
    for v in out.iter_mut() {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        *v = gauss_quantile(u)?;
    }
    Ok(out)
}

/// VCE' on ranks that are already computed. The classifier sees Gaussian
/// scores of the ranks; the reference copula is the independence copula.
pub fn vce_prime_from_ranks<R: Rng + ?Sized>(
    stage: &RankStage,
    config: &VcePrimeConfig,
    rng: &mut R,
) -> Result<MIEstimate> {
    let start = Instant::now();
    let z = stage.ranks.joined_scores();
    let reference = uniform_reference_scores(z.nrows(), z.ncols(), rng)?;
    let value = classifier_log_ratio(z.view(), reference.view(), &config.classifier, rng)?;
    let mut diag = stage_diagnostics(stage, config.vce.t_warning);
    diag.wall_time = stage.seconds + start.elapsed().as_secs_f64();
    MIEstimate::new(Method::VcePrime, value, diag)
}

pub fn vce_prime_estimate<R: Rng + ?Sized>(
    data: &PairedDataset,
    config: &VcePrimeConfig,
    rng: &mut R,
) -> Result<MIEstimate> {
    if data.len() < 200 {
        return Err(Error::Data(format!("VCE' needs at least 200 rows, got {}", data.len())));
    }
    let stage = compute_ranks(data, &config.vce, rng)?;
    vce_prime_from_ranks(&stage, config, rng)
}

fn log_det_spd(a: &Array2<f64>) -> Option<f64> {
    let m = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let chol = nalgebra::Cholesky::new(m)?;
    Some(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Nonparanormal MI: `−½ log[det R / (det R_XX det R_YY)]` for the
/// correlation matrix `R` of rank-Gaussianised columns.
pub fn gaussian_copula_mi(data: &PairedDataset) -> Result<MIEstimate> {
    let start = Instant::now();
    let (d_x, d_y) = data.dims();
    let n = data.len();
    if n <= d_x + d_y + 1 {
        return Err(Error::Data(format!("{n} rows are too few for {} dimensions", d_x + d_y)));
    }
    let ux = empirical_rank(data.x(), RankSource::RawData)?;
    let uy = empirical_rank(data.y(), RankSource::RawData)?;
    let z = RankedPair::new(ux, uy)?.joined_scores();
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let c = &z - &mean;
    let cov = c.t().dot(&c) / n as f64;
    let sd = cov.diag().mapv(f64::sqrt);
    let corr = Array2::from_shape_fn(cov.dim(), |(i, j)| cov[[i, j]] / (sd[i] * sd[j]));
    let singular = || Error::Estimator("rank correlation matrix is singular".into());
    let ld = log_det_spd(&corr).ok_or_else(singular)?;
    let lx = log_det_spd(&corr.slice(s![..d_x, ..d_x]).to_owned()).ok_or_else(singular)?;
    let ly = log_det_spd(&corr.slice(s![d_x.., d_x..]).to_owned()).ok_or_else(singular)?;
    let value = -0.5 * (ld - lx - ly);
    let diag = Diagnostics { wall_time: start.elapsed().as_secs_f64(), ..Diagnostics::default() };
    MIEstimate::new(Method::GaussianCopula, value, diag)
}

/// Variational critic estimate, evaluated on held-out rows.
pub fn critic_estimate<R: Rng + ?Sized>(
    data: &PairedDataset,
    objective: CriticObjective,
    config: &CriticConfig,
    rng: &mut R,
) -> Result<MIEstimate> {
    if data.len() < 500 {
        return Err(Error::Data(format!("critic estimators need at least 500 rows, got {}", data.len())));
    }
    let start = Instant::now();
    let value = train_and_evaluate(data.x(), data.y(), objective, config, rng)?;
    let diag = Diagnostics { wall_time: start.elapsed().as_secs_f64(), ..Diagnostics::default() };
    MIEstimate::new(Method::Critic { objective }, value, diag)
}

/// Settings for every estimator, so a caller can dispatch on [`Method`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub vce: VceConfig,
    pub classifier: ClassifierConfig,
    pub critic: CriticConfig,
}

pub fn estimate<R: Rng + ?Sized>(
    method: Method,
    data: &PairedDataset,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<MIEstimate> {
    match method {
        Method::Vce => vce_estimate(data, &config.vce, rng),
        Method::VcePrime => vce_prime_estimate(
            data,
            &VcePrimeConfig { vce: config.vce.clone(), classifier: config.classifier.clone() },
            rng,
        ),
        Method::GaussianCopula => gaussian_copula_mi(data),
        Method::Critic { objective } => critic_estimate(data, objective, &config.critic, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian_pairs(n: usize, d: usize, rho: f64, seed: u64) -> PairedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let e = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let y = &x * rho + &e * (1.0 - rho * rho).sqrt();
        PairedDataset::new(x, y).unwrap()
    }

    #[test]
    fn dataset_validation() {
        assert!(PairedDataset::new(Array2::zeros((3, 1)), Array2::zeros((4, 1))).is_err());
        let mut x = Array2::zeros((3, 1));
        x[[1, 0]] = f64::NAN;
        assert!(PairedDataset::new(x, Array2::zeros((3, 1))).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for name in ["vce", "vce-prime", "gaussian-copula", "mine", "infonce", "smile-2.5"] {
            let m: Method = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        assert_eq!("smile".parse::<Method>().unwrap().to_string(), "smile-5");
        assert!("knn".parse::<Method>().is_err());
    }

    #[test]
    fn gaussian_copula_bivariate() {
        let data = gaussian_pairs(100_000, 1, 0.5, 1);
        let v = gaussian_copula_mi(&data).unwrap().value;
        assert!((v - 0.1438).abs() < 0.01, "{v}");
    }

    #[test]
    fn gaussian_copula_null_bias_is_small() {
        let data = gaussian_pairs(10_000, 4, 0.0, 2);
        let v = gaussian_copula_mi(&data).unwrap().value;
        assert!(v.abs() <= 0.05 * 4.0, "{v}");
    }

    #[test]
    fn gaussian_copula_is_monotone_invariant() {
        let data = gaussian_pairs(2000, 2, 0.4, 3);
        let warped = PairedDataset::new(data.x().mapv(|v| v.powi(3) + v), data.y().mapv(f64::exp))
            .unwrap();
        let a = gaussian_copula_mi(&data).unwrap().value;
        let b = gaussian_copula_mi(&warped).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gaussian_copula_needs_rows() {
        let data = gaussian_pairs(4, 2, 0.4, 3);
        assert!(gaussian_copula_mi(&data).is_err());
    }

    #[test]
    fn logistic_loss_gradient() {
        let s = Array1::from(vec![0.3, -1.2, 2.0]);
        let y = Array1::from(vec![1.0, 0.0, 0.0]);
        let (l, g) = logistic_loss(&s, &y);
        let h = 1e-6;
        for i in 0..3 {
            let mut sp = s.clone();
            sp[i] += h;
            let mut sm = s.clone();
            sm[i] -= h;
            let fd = (logistic_loss(&sp, &y).0 - logistic_loss(&sm, &y).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
        let direct: f64 = [(1.0 + (-0.3f64).exp()).ln(), (1.0 + (-1.2f64).exp()).ln(), (1.0 + 2.0f64.exp()).ln()]
            .iter()
            .sum::<f64>()
            / 3.0;
        assert!((l - direct).abs() < 1e-14);
    }

    #[test]
    fn shuffled_labels_give_zero_log_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = gaussian_pairs(2000, 2, 0.8, 5);
        let mut pooled = concatenate(Axis(1), &[data.x(), data.y()]).unwrap();
        let reference = uniform_reference_scores(2000, 4, &mut rng).unwrap();
        pooled = concatenate(Axis(0), &[pooled.view(), reference.view()]).unwrap();
        let mut rows: Vec<usize> = (0..4000).collect();
        rows.shuffle(&mut rng);
        let pos = pooled.select(Axis(0), &rows[..2000]);
        let neg = pooled.select(Axis(0), &rows[2000..]);
        let cfg = ClassifierConfig { hidden: vec![32], ..ClassifierConfig::default() };
        let v = classifier_log_ratio(pos.view(), neg.view(), &cfg, &mut rng).unwrap();
        assert!(v.abs() < 0.05, "{v}");
    }

    #[test]
    fn critic_needs_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = gaussian_pairs(100, 1, 0.3, 0);
        assert!(critic_estimate(&data, CriticObjective::DvMine, &CriticConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn record_round_trip() {
        let est = MIEstimate {
            method: Method::Critic { objective: CriticObjective::Smile { tau: 1.5 } },
            value: 0.1 + 0.2,
            diagnostics: Diagnostics { selected_k: Some(4), ..Diagnostics::default() },
            seed: Some(3),
            config_hash: Some("abc".into()),
        };
        let line = est.to_record().unwrap();
        assert!(!line.contains('\n'));
        assert_eq!(MIEstimate::from_record(&line).unwrap(), est);
    }

    #[test]
    fn vce_small_sample_uses_raw_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = gaussian_pairs(80, 1, 0.9, 6);
        let est = vce_estimate(&data, &VceConfig::default(), &mut rng).unwrap();
        assert!(est.diagnostics.warnings.iter().any(|w| w.contains("raw data")));
        assert!(est.value > 0.3, "{}", est.value);
        assert!(est.diagnostics.selected_k.is_some());
    }
}
