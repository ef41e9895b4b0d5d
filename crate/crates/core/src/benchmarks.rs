//! Synthetic tasks with known mutual information.
//!
//! A task draws a base joint sample, applies a per-block transform, then
//! optional mixing matrices `x ↦ A x`, `y ↦ B y`. Transforms and mixing are
//! injective and smooth, so every task shares its base distribution's MI.
//!
//! | family | base | per-block transform |
//! |---|---|---|
//! | `gaussian` | `y_i = ρ x_i + √(1−ρ²) e_i` per pair | none |
//! | `tanh-exp` | gaussian | `tanh(x)`, `exp(y)` |
//! | `cube` | gaussian | `x³`, `y³` |
//! | `spiral` | gaussian | rotation of the first two coordinates by `speed·‖v‖` |
//! | `swiss-roll` | 1+1 gaussian plus an independent thickness coordinate per block | thick Swiss roll in the plane |
//! | `student-t` | joint t with scale `[[I, ρI], [ρI, I]]` | none |
//! | `mog1` | ½ N(0, Σ₊) + ½ N(0, Σ₋), cross blocks `±ρI` | none |
//! | `mog2` | four components, means `(s·m·1, t·m·1)` for `s, t = ±1`, cross block `s·t·ρ·I` | none |
//!
//! The mixture parameters are our own choices, not reproductions of any
//! published benchmark.
//!
//! Task names follow `family[:key=value,...]` with keys `d` (per-block
//! dimension), `rho`, `nu`, `mixing` (bool), `mixing_seed`, `speed`, `m`.

use std::io::Write;

use nalgebra::DMatrix;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::estimators::PairedDataset;
use crate::ranks::gauss_cdf;

/// Samples drawn by the Monte-Carlo oracle.
pub const ORACLE_SAMPLES: usize = 1_000_000;
/// Seed used for oracle truths in sweeps and reports.
pub const ORACLE_SEED: u64 = 0x0_5EED;
pub const RHO_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const DEFAULT_DIM_CAP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Gaussian,
    TanhExp,
    Cube,
    Spiral,
    SwissRoll,
    StudentT,
    Mog1,
    Mog2,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::TanhExp => "tanh-exp",
            Family::Cube => "cube",
            Family::Spiral => "spiral",
            Family::SwissRoll => "swiss-roll",
            Family::StudentT => "student-t",
            Family::Mog1 => "mog1",
            Family::Mog2 => "mog2",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        Ok(match s {
            "gaussian" => Family::Gaussian,
            "tanh-exp" => Family::TanhExp,
            "cube" => Family::Cube,
            "spiral" => Family::Spiral,
            "swiss-roll" => Family::SwissRoll,
            "student-t" => Family::StudentT,
            "mog1" => Family::Mog1,
            "mog2" => Family::Mog2,
            other => return Err(Error::Task(format!("unknown task family {other:?}"))),
        })
    }
}

/// Parameters from which a task is built; also its textual name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: Family,
    /// Per-block dimension of the base distribution.
    pub d: usize,
    pub rho: f64,
    pub nu: f64,
    pub mixing: bool,
    pub mixing_seed: u64,
    pub speed: f64,
    /// Mean offset of the `mog2` components.
    pub m: f64,
}

impl TaskSpec {
    pub fn new(family: Family) -> TaskSpec {
        let (d, rho) = match family {
            Family::SwissRoll => (1, 0.8),
            Family::Mog1 => (4, 0.8),
            Family::Mog2 => (4, 0.6),
            _ => (8, 0.6),
        };
        TaskSpec { family, d, rho, nu: 3.0, mixing: false, mixing_seed: 0, speed: 1.0, m: 1.5 }
    }

    pub fn with_d(mut self, d: usize) -> Self {
        self.d = d;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_mixing(mut self, mixing: bool) -> Self {
        self.mixing = mixing;
        self
    }

    /// Parses `family[:key=value,...]`.
    pub fn parse(text: &str) -> Result<TaskSpec> {
        let (family, rest) = match text.split_once(':') {
            Some((f, r)) => (f.trim(), r),
            None => (text.trim(), ""),
        };
        let mut spec = TaskSpec::new(Family::parse(family)?);
        for pair in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Task(format!("expected key=value, got {pair:?}")))?;
            let bad = || Error::Task(format!("invalid value {value:?} for {key}"));
            match key.trim() {
                "d" => spec.d = value.parse().map_err(|_| bad())?,
                "rho" => spec.rho = value.parse().map_err(|_| bad())?,
                "nu" => spec.nu = value.parse().map_err(|_| bad())?,
                "mixing" => spec.mixing = value.parse().map_err(|_| bad())?,
                "mixing_seed" => spec.mixing_seed = value.parse().map_err(|_| bad())?,
                "speed" => spec.speed = value.parse().map_err(|_| bad())?,
                "m" => spec.m = value.parse().map_err(|_| bad())?,
                other => return Err(Error::Task(format!("unknown task key {other:?}"))),
            }
        }
        Ok(spec)
    }

    /// Canonical name; parsing it gives back the same spec.
    pub fn name(&self) -> String {
        let mut parts = vec![format!("d={}", self.d), format!("rho={}", self.rho)];
        match self.family {
            Family::StudentT => parts.push(format!("nu={}", self.nu)),
            Family::Spiral => parts.push(format!("speed={}", self.speed)),
            Family::Mog2 => parts.push(format!("m={}", self.m)),
            _ => {}
        }
        if self.mixing {
            parts.push("mixing=true".into());
            parts.push(format!("mixing_seed={}", self.mixing_seed));
        }
        format!("{}:{}", self.family.name(), parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Array1<f64>>,
    pub covs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseDistribution {
    /// `d` independent pairs with correlation `rho`.
    Gaussian { d: usize, rho: f64 },
    StudentT { d: usize, rho: f64, nu: f64 },
    Mixture { d: usize, mixture: GaussianMixture },
}

impl BaseDistribution {
    pub fn dims(&self) -> usize {
        match self {
            BaseDistribution::Gaussian { d, .. }
            | BaseDistribution::StudentT { d, .. }
            | BaseDistribution::Mixture { d, .. } => *d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    None,
    TanhExp,
    Cube,
    Spiral { speed: f64 },
    SwissRoll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    Analytic,
    McOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub value: f64,
    /// Standard error; zero for analytic truths.
    pub sigma: f64,
    pub kind: TruthKind,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTask {
    pub spec: TaskSpec,
    pub d_x: usize,
    pub d_y: usize,
    pub base: BaseDistribution,
    pub transform: Transform,
    /// `(A, B)`, applied as `x ↦ A x`, `y ↦ B y`.
    pub mixing: Option<(Array2<f64>, Array2<f64>)>,
}

/// `Q·diag(s)` with `Q` Haar-orthogonal and `s` log-uniform on `[0.5, 2]`,
/// so the condition number is at most 4.
pub fn random_mixing_matrix<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array2<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let scales: Vec<f64> = (0..d).map(|_| (rng.random_range(-1.0..1.0) * 2f64.ln()).exp()).collect();
    Array2::from_shape_fn((d, d), |(i, j)| {
        // Sign fix makes Q Haar-distributed.
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * sign * scales[j]
    })
}

fn mog1(d: usize, rho: f64) -> GaussianMixture {
    let cov = |r: f64| {
        let mut c = Array2::eye(2 * d);
        for i in 0..d {
            c[[i, d + i]] = r;
            c[[d + i, i]] = r;
        }
        c
    };
    GaussianMixture {
        weights: vec![0.5, 0.5],
        means: vec![Array1::zeros(2 * d), Array1::zeros(2 * d)],
        covs: vec![cov(rho), cov(-rho)],
    }
}

fn mog2(d: usize, rho: f64, m: f64) -> GaussianMixture {
    let mut mixture = GaussianMixture { weights: vec![], means: vec![], covs: vec![] };
    for (s, t) in [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)] {
        let mut mean = Array1::zeros(2 * d);
        mean.slice_mut(s![..d]).fill(s * m);
        mean.slice_mut(s![d..]).fill(t * m);
        let mut c = Array2::eye(2 * d);
        for i in 0..d {
            c[[i, d + i]] = s * t * rho;
            c[[d + i, i]] = s * t * rho;
        }
        mixture.weights.push(0.25);
        mixture.means.push(mean);
        mixture.covs.push(c);
    }
    mixture
}

impl BenchmarkTask {
    pub fn from_spec(spec: &TaskSpec) -> Result<BenchmarkTask> {
        if spec.d == 0 {
            return Err(Error::Task("dimension must be positive".into()));
        }
        if !(spec.rho.abs() < 1.0) {
            return Err(Error::Task(format!("|rho| must be below 1, got {}", spec.rho)));
        }
        let d = spec.d;
        let (base, transform) = match spec.family {
            Family::Gaussian => (BaseDistribution::Gaussian { d, rho: spec.rho }, Transform::None),
            Family::TanhExp => (BaseDistribution::Gaussian { d, rho: spec.rho }, Transform::TanhExp),
            Family::Cube => (BaseDistribution::Gaussian { d, rho: spec.rho }, Transform::Cube),
            Family::Spiral => {
                if d < 2 {
                    return Err(Error::Task("spiral needs at least 2 dimensions per block".into()));
                }
                (BaseDistribution::Gaussian { d, rho: spec.rho }, Transform::Spiral { speed: spec.speed })
            }
            Family::SwissRoll => {
                if d != 1 {
                    return Err(Error::Task("swiss-roll is built from a 1+1 base (d=1)".into()));
                }
                (BaseDistribution::Gaussian { d: 1, rho: spec.rho }, Transform::SwissRoll)
            }
            Family::StudentT => {
                if !(spec.nu > 0.0) {
                    return Err(Error::Task("degrees of freedom must be positive".into()));
                }
                (BaseDistribution::StudentT { d, rho: spec.rho, nu: spec.nu }, Transform::None)
            }
            Family::Mog1 => (BaseDistribution::Mixture { d, mixture: mog1(d, spec.rho) }, Transform::None),
            Family::Mog2 => {
                (BaseDistribution::Mixture { d, mixture: mog2(d, spec.rho, spec.m) }, Transform::None)
            }
        };
        let block = if transform == Transform::SwissRoll { 2 } else { d };
        let mixing = spec.mixing.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.mixing_seed);
            (random_mixing_matrix(block, &mut rng), random_mixing_matrix(block, &mut rng))
        });
        Ok(BenchmarkTask { spec: spec.clone(), d_x: block, d_y: block, base, transform, mixing })
    }

    pub fn parse(name: &str) -> Result<BenchmarkTask> {
        BenchmarkTask::from_spec(&TaskSpec::parse(name)?)
    }

    pub fn name(&self) -> String {
        self.spec.name()
    }

    /// The same base distribution without transforms or mixing.
    pub fn base_task(&self) -> BenchmarkTask {
        BenchmarkTask {
            spec: TaskSpec { family: Family::Gaussian, mixing: false, ..self.spec.clone() },
            d_x: self.base.dims(),
            d_y: self.base.dims(),
            base: self.base.clone(),
            transform: Transform::None,
            mixing: None,
        }
    }
}

fn cholesky(cov: &Array2<f64>) -> Result<Array2<f64>> {
    let m = DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| cov[[i, j]]);
    let l = nalgebra::Cholesky::new(m)
        .ok_or_else(|| Error::Task("covariance is not positive definite".into()))?
        .l();
    Ok(Array2::from_shape_fn(cov.dim(), |(i, j)| l[(i, j)]))
}

fn pair_cov(d: usize, rho: f64) -> Array2<f64> {
    let mut c = Array2::eye(2 * d);
    for i in 0..d {
        c[[i, d + i]] = rho;
        c[[d + i, i]] = rho;
    }
    c
}

/// Base joint sample, `n × 2d`, columns `[x, y]`.
fn sample_base<R: Rng + ?Sized>(base: &BaseDistribution, n: usize, rng: &mut R) -> Result<Array2<f64>> {
    Ok(match base {
        BaseDistribution::Gaussian { d, rho } => {
            let d = *d;
            let c = (1.0 - rho * rho).sqrt();
            let mut out = Array2::zeros((n, 2 * d));
            for mut row in out.rows_mut() {
                for i in 0..d {
                    let x: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    row[i] = x;
                    row[d + i] = rho * x + c * e;
                }
            }
            out
        }
        BaseDistribution::StudentT { d, rho, nu } => {
            let l = cholesky(&pair_cov(*d, *rho))?;
            let chi = ChiSquared::new(*nu).map_err(|e| Error::Task(e.to_string()))?;
            let mut out = Array2::zeros((n, 2 * d));
            for mut row in out.rows_mut() {
                let g = Array1::from_shape_simple_fn(2 * d, || rng.sample::<f64, _>(StandardNormal));
                let w: f64 = chi.sample(rng);
                row.assign(&(l.dot(&g) / (w / nu).sqrt()));
            }
            out
        }
        BaseDistribution::Mixture { d, mixture } => {
            let factors: Vec<Array2<f64>> = mixture.covs.iter().map(cholesky).collect::<Result<_>>()?;
            let mut out = Array2::zeros((n, 2 * d));
            for mut row in out.rows_mut() {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = mixture.weights.len() - 1;
                for (i, w) in mixture.weights.iter().enumerate() {
                    acc += w;
                    if r < acc {
                        k = i;
                        break;
                    }
                }
                let g = Array1::from_shape_simple_fn(2 * d, || rng.sample::<f64, _>(StandardNormal));
                row.assign(&(factors[k].dot(&g) + &mixture.means[k]));
            }
            out
        }
    })
}

/// Thick Swiss roll: `θ = 1.5π(1 + 2Φ(v))`, radius `θ + 2 tanh(w)`. Arms are
/// `2π` apart and the thickness stays below 2, so the map is injective.
fn swiss_roll(v: ArrayView1<f64>, w: ArrayView1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((v.len(), 2));
    for i in 0..v.len() {
        let theta = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * gauss_cdf(v[i]));
        let r = theta + 2.0 * w[i].tanh();
        out[[i, 0]] = r * theta.cos();
        out[[i, 1]] = r * theta.sin();
    }
    out
}

fn spiral(block: ArrayView2<f64>, speed: f64) -> Array2<f64> {
    let mut out = block.to_owned();
    for mut row in out.rows_mut() {
        let radius = row.dot(&row).sqrt();
        let (sin, cos) = (speed * radius).sin_cos();
        let (a, b) = (row[0], row[1]);
        row[0] = cos * a - sin * b;
        row[1] = sin * a + cos * b;
    }
    out
}

/// Draws `n` paired samples.
pub fn sample_task<R: Rng + ?Sized>(task: &BenchmarkTask, n: usize, rng: &mut R) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::Task("sample size must be positive".into()));
    }
    let joint = sample_base(&task.base, n, rng)?;
    let d = task.base.dims();
    let (bx, by) = (joint.slice(s![.., ..d]), joint.slice(s![.., d..]));
    let (mut x, mut y) = match task.transform {
        Transform::None => (bx.to_owned(), by.to_owned()),
        Transform::TanhExp => (bx.mapv(f64::tanh), by.mapv(f64::exp)),
        Transform::Cube => (bx.mapv(|v| v * v * v), by.mapv(|v| v * v * v)),
        Transform::Spiral { speed } => (spiral(bx, speed), spiral(by, speed)),
        Transform::SwissRoll => {
            let wx = Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal));
            let wy = Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal));
            (swiss_roll(bx.column(0), wx.view()), swiss_roll(by.column(0), wy.view()))
        }
    };
    if let Some((a, b)) = &task.mixing {
        x = x.dot(&a.t());
        y = y.dot(&b.t());
    }
    PairedDataset::new(x, y)
}

fn mvn_log_pdf_batch(z: ArrayView2<f64>, mean: ArrayView1<f64>, cov: &Array2<f64>) -> Result<Array1<f64>> {
    let l = cholesky(cov)?;
    let d = mean.len();
    let lm = DMatrix::from_fn(d, d, |i, j| l[[i, j]]);
    let inv = lm
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Task("singular covariance".into()))?;
    let whitener = Array2::from_shape_fn((d, d), |(i, j)| inv[(j, i)]);
    let log_det: f64 = (0..d).map(|i| 2.0 * l[[i, i]].ln()).sum();
    let w = (&z - &mean).dot(&whitener);
    let c = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    Ok(w.rows().into_iter().map(|r| c - 0.5 * r.dot(&r)).collect())
}

fn mixture_log_pdf(z: ArrayView2<f64>, mixture: &GaussianMixture, range: std::ops::Range<usize>) -> Result<Array1<f64>> {
    let mut logs = Array2::zeros((z.nrows(), mixture.weights.len()));
    for k in 0..mixture.weights.len() {
        let mean = mixture.means[k].slice(s![range.clone()]);
        let cov = mixture.covs[k].slice(s![range.clone(), range.clone()]).to_owned();
        let mut col = logs.column_mut(k);
        col.assign(&mvn_log_pdf_batch(z, mean, &cov)?);
        col += mixture.weights[k].ln();
    }
    Ok(logs
        .rows()
        .into_iter()
        .map(|r| {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect())
}

/// Log density of a centred multivariate t with unit-diagonal scale blocks.
fn t_log_pdf(z: ArrayView2<f64>, scale: &Array2<f64>, nu: f64) -> Result<Array1<f64>> {
    let p = z.ncols() as f64;
    let gauss = mvn_log_pdf_batch(z, Array1::zeros(z.ncols()).view(), scale)?;
    // Recover the Mahalanobis term and log-det from the Gaussian log density.
    let l = cholesky(scale)?;
    let log_det: f64 = (0..z.ncols()).map(|i| 2.0 * l[[i, i]].ln()).sum();
    let c0 = -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + log_det);
    let head = ln_gamma((nu + p) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * p * (nu * std::f64::consts::PI).ln()
        - 0.5 * log_det;
    Ok(gauss.mapv(|g| {
        let maha = -2.0 * (g - c0);
        head - 0.5 * (nu + p) * (maha / nu).ln_1p()
    }))
}

/// Pointwise MI `log p(x, y) − log p(x) − log p(y)` of the base distribution
/// at base samples.
fn base_pointwise_mi(base: &BaseDistribution, joint: ArrayView2<f64>) -> Result<Array1<f64>> {
    let d = base.dims();
    let (x, y) = (joint.slice(s![.., ..d]), joint.slice(s![.., d..]));
    match base {
        BaseDistribution::Gaussian { d, rho } => {
            let j = mvn_log_pdf_batch(joint, Array1::zeros(2 * d).view(), &pair_cov(*d, *rho))?;
            let eye = Array2::eye(*d);
            let zero = Array1::zeros(*d);
            Ok(j - mvn_log_pdf_batch(x, zero.view(), &eye)? - mvn_log_pdf_batch(y, zero.view(), &eye)?)
        }
        BaseDistribution::StudentT { d, rho, nu } => {
            let eye = Array2::eye(*d);
            Ok(t_log_pdf(joint, &pair_cov(*d, *rho), *nu)? - t_log_pdf(x, &eye, *nu)? - t_log_pdf(y, &eye, *nu)?)
        }
        BaseDistribution::Mixture { d, mixture } => Ok(mixture_log_pdf(joint, mixture, 0..2 * d)?
            - mixture_log_pdf(x, mixture, 0..*d)?
            - mixture_log_pdf(y, mixture, *d..2 * d)?),
    }
}

/// Monte-Carlo estimate of the base distribution's MI from `samples` draws,
/// with its standard error.
pub fn mc_oracle<R: Rng + ?Sized>(base: &BaseDistribution, samples: usize, rng: &mut R) -> Result<GroundTruth> {
    if samples < 2 {
        return Err(Error::Task("oracle needs at least 2 samples".into()));
    }
    let chunk = 100_000;
    let (mut sum, mut sum_sq, mut done) = (0.0, 0.0, 0usize);
    while done < samples {
        let m = chunk.min(samples - done);
        let joint = sample_base(base, m, rng)?;
        let pmi = base_pointwise_mi(base, joint.view())?;
        sum += pmi.sum();
        sum_sq += pmi.iter().map(|v| v * v).sum::<f64>();
        done += m;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(GroundTruth { value: mean, sigma: (var / n).sqrt(), kind: TruthKind::McOracle, samples })
}

/// Ground-truth MI of a task: analytic for Gaussian bases, otherwise a
/// Monte-Carlo oracle over [`ORACLE_SAMPLES`] draws. Transforms and mixing
/// never enter.
pub fn ground_truth_mi<R: Rng + ?Sized>(task: &BenchmarkTask, rng: &mut R) -> Result<GroundTruth> {
    match &task.base {
        BaseDistribution::Gaussian { d, rho } => Ok(GroundTruth {
            // `+ 0.0` turns the ρ = 0 result from -0 into 0.
            value: -(*d as f64) / 2.0 * (1.0 - rho * rho).ln() + 0.0,
            sigma: 0.0,
            kind: TruthKind::Analytic,
            samples: 0,
        }),
        base => mc_oracle(base, ORACLE_SAMPLES, rng),
    }
}

/// Names accepted by [`sweep_grid`].
pub const SWEEP_FAMILIES: [&str; 11] = [
    "gaussian-rho",
    "tanh-exp-rho",
    "cube-rho",
    "student-t-rho",
    "swiss-roll",
    "spiral-dim",
    "cube-dim",
    "student-t-dim",
    "mog1-dim",
    "mog2-dim",
    "mog-dim",
];

/// Task grids: `*-rho` families sweep `ρ` at a fixed dimension; `*-dim`
/// families sweep the per-block dimension over powers of two at fixed `ρ`.
/// `dim_cap` bounds the total dimension `d_X + d_Y`.
pub fn sweep_grid(family: &str, dim_cap: usize) -> Result<Vec<TaskSpec>> {
    if dim_cap < 2 {
        return Err(Error::Task("dimension cap must be at least 2".into()));
    }
    let rho_sweep = |f: Family, full_total: usize, mixing: bool| -> Vec<TaskSpec> {
        let d = (full_total.min(dim_cap) / 2).max(1);
        RHO_GRID
            .iter()
            .map(|&rho| TaskSpec::new(f).with_d(d).with_rho(rho).with_mixing(mixing))
            .collect()
    };
    let dim_sweep = |f: Family, min_d: usize| -> Vec<TaskSpec> {
        let rho = match f {
            Family::Mog1 | Family::Mog2 => TaskSpec::new(f).rho,
            _ => 0.5,
        };
        std::iter::successors(Some(1usize), |d| Some(d * 2))
            .take_while(|d| 2 * d <= dim_cap)
            .filter(|&d| d >= min_d)
            .map(|d| TaskSpec::new(f).with_d(d).with_rho(rho))
            .collect()
    };
    Ok(match family {
        "gaussian-rho" => rho_sweep(Family::Gaussian, 64, false),
        "tanh-exp-rho" => rho_sweep(Family::TanhExp, 32, true),
        "cube-rho" => rho_sweep(Family::Cube, 32, true),
        "student-t-rho" => rho_sweep(Family::StudentT, 32, false),
        "swiss-roll" => RHO_GRID.iter().map(|&r| TaskSpec::new(Family::SwissRoll).with_rho(r)).collect(),
        "spiral-dim" => dim_sweep(Family::Spiral, 2),
        "cube-dim" => dim_sweep(Family::Cube, 1),
        "student-t-dim" => dim_sweep(Family::StudentT, 1),
        "mog1-dim" => dim_sweep(Family::Mog1, 1),
        "mog2-dim" => dim_sweep(Family::Mog2, 1),
        "mog-dim" => {
            let mut all = dim_sweep(Family::Mog1, 1);
            all.extend(dim_sweep(Family::Mog2, 1));
            all
        }
        other => return Err(Error::Task(format!("unknown sweep family {other:?}"))),
    })
}

/// Writes one row per `(task, seed)`: `family,d,rho,truth,truth_sigma,seed`.
pub fn write_task_csv<W: Write>(
    mut out: W,
    tasks: &[(TaskSpec, GroundTruth)],
    seeds: &[u64],
) -> Result<()> {
    writeln!(out, "family,d,rho,truth,truth_sigma,seed")?;
    for (spec, truth) in tasks {
        for seed in seeds {
            writeln!(
                out,
                "{},{},{},{:.17e},{:.17e},{}",
                spec.family.name(),
                spec.d,
                spec.rho,
                truth.value,
                truth.sigma,
                seed
            )?;
        }
    }
    Ok(())
}

/// Joins blocks into a single `n × (d_X + d_Y)` matrix.
pub fn joined(data: &PairedDataset) -> Array2<f64> {
    concatenate(Axis(1), &[data.x(), data.y()]).expect("same row count")
}

/// Median of absolute values.
pub fn median_abs(values: ArrayView1<f64>) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::digamma;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Closed-form MI of a t distribution with unit-diagonal scale blocks.
    fn t_mi(nu: f64, d: usize, rho: f64) -> f64 {
        let p1 = d as f64;
        let p = 2.0 * p1;
        let gauss = -(p1 / 2.0) * (1.0 - rho * rho).ln();
        gauss + ln_gamma(nu / 2.0) + ln_gamma((nu + p) / 2.0) - 2.0 * ln_gamma((nu + p1) / 2.0)
            + (nu + p1) * digamma((nu + p1) / 2.0)
            - (nu + p) / 2.0 * digamma((nu + p) / 2.0)
            - nu / 2.0 * digamma(nu / 2.0)
    }

    #[test]
    fn names_round_trip() {
        for name in [
            "gaussian:d=8,rho=0.6",
            "cube:d=8,rho=0.6,mixing=true,mixing_seed=3",
            "student-t:d=4,rho=0.5,nu=3",
            "mog2:d=2,rho=0.6,m=1.5",
            "spiral:d=4,rho=0.5,speed=1",
        ] {
            assert_eq!(TaskSpec::parse(name).unwrap().name(), name);
        }
        assert!(TaskSpec::parse("gaussian:q=1").is_err());
        assert!(TaskSpec::parse("plates").is_err());
        assert_eq!(TaskSpec::parse("gaussian").unwrap(), TaskSpec::new(Family::Gaussian));
    }

    #[test]
    fn gaussian_truths() {
        let t = BenchmarkTask::parse("gaussian:d=1,rho=0").unwrap();
        assert_eq!(ground_truth_mi(&t, &mut rng(0)).unwrap().value, 0.0);
        let t = BenchmarkTask::parse("gaussian:d=8,rho=0.6").unwrap();
        let v = ground_truth_mi(&t, &mut rng(0)).unwrap().value;
        assert!((v - 8.0 * -0.5 * 0.64f64.ln()).abs() < 1e-15);
        assert!((v - 1.785).abs() < 1e-3);
    }

    #[test]
    fn transformed_truth_is_base_truth() {
        for name in [
            "cube:d=2,rho=0.6,mixing=true",
            "tanh-exp:d=2,rho=0.3",
            "student-t:d=2,rho=0.5",
            "mog1:d=2,rho=0.8",
        ] {
            let task = BenchmarkTask::parse(name).unwrap();
            let mut small = task.clone();
            let base = task.base_task();
            small.mixing = None;
            let a = match &task.base {
                BaseDistribution::Gaussian { .. } => ground_truth_mi(&task, &mut rng(1)).unwrap(),
                b => mc_oracle(b, 20_000, &mut rng(1)).unwrap(),
            };
            let b = match &base.base {
                BaseDistribution::Gaussian { .. } => ground_truth_mi(&base, &mut rng(1)).unwrap(),
                b => mc_oracle(b, 20_000, &mut rng(1)).unwrap(),
            };
            assert_eq!(a.value.to_bits(), b.value.to_bits(), "{name}");
        }
    }

    #[test]
    fn oracle_matches_gaussian_formula() {
        let base = BaseDistribution::Gaussian { d: 2, rho: 0.6 };
        let truth = -(1.0 - 0.36f64).ln();
        let mc = mc_oracle(&base, 200_000, &mut rng(2)).unwrap();
        assert!((mc.value - truth).abs() < 3.0 * mc.sigma, "{} ± {} vs {truth}", mc.value, mc.sigma);
    }

    #[test]
    fn oracle_matches_student_t_closed_form() {
        for (nu, d, rho) in [(3.0, 2, 0.5), (1.0, 1, 0.0), (5.0, 3, 0.7)] {
            let base = BaseDistribution::StudentT { d, rho, nu };
            let mc = mc_oracle(&base, 200_000, &mut rng(3)).unwrap();
            let exact = t_mi(nu, d, rho);
            assert!((mc.value - exact).abs() < 3.0 * mc.sigma, "nu={nu}: {} ± {} vs {exact}", mc.value, mc.sigma);
        }
    }

    #[test]
    fn cube_task_is_elementwise_cube_of_gaussian() {
        let g = BenchmarkTask::parse("gaussian:d=1,rho=0.4").unwrap();
        let c = BenchmarkTask::parse("cube:d=1,rho=0.4").unwrap();
        let a = sample_task(&g, 100, &mut rng(4)).unwrap();
        let b = sample_task(&c, 100, &mut rng(4)).unwrap();
        assert_eq!(a.x().mapv(|v| v * v * v), b.x());
        assert_eq!(a.y().mapv(|v| v * v * v), b.y());
    }

    #[test]
    fn independent_gaussian_blocks_are_uncorrelated() {
        let t = BenchmarkTask::parse("gaussian:d=2,rho=0").unwrap();
        let data = sample_task(&t, 10_000, &mut rng(5)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let (a, b) = (data.x().column(i).to_owned(), data.y().column(j).to_owned());
                let r = a.dot(&b) / (a.dot(&a) * b.dot(&b)).sqrt();
                assert!(r.abs() < 0.05);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let t = BenchmarkTask::parse("mog2:d=2").unwrap();
        let a = sample_task(&t, 50, &mut rng(6)).unwrap();
        let b = sample_task(&t, 50, &mut rng(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cauchy_tails_grow_with_n() {
        // Sample kurtosis of a ν = 1 marginal grows without bound, while a
        // median-based scale stays put.
        let t = BenchmarkTask::parse("student-t:d=2,rho=0.5,nu=1").unwrap();
        let small = sample_task(&t, 1_000, &mut rng(7)).unwrap();
        let large = sample_task(&t, 100_000, &mut rng(7)).unwrap();
        let kurt = |v: ArrayView1<f64>| {
            let m = v.mean().unwrap();
            let c = v.mapv(|x| x - m);
            let m2 = c.mapv(|x| x * x).mean().unwrap();
            c.mapv(|x| x.powi(4)).mean().unwrap() / (m2 * m2)
        };
        assert!(kurt(large.x().column(0)) > 10.0 * kurt(small.x().column(0)).max(3.0) / 3.0);
        let ms = median_abs(small.x().column(0));
        let ml = median_abs(large.x().column(0));
        assert!((ms - 1.0).abs() < 0.15 && (ml - 1.0).abs() < 0.02, "{ms} {ml}");
    }

    #[test]
    fn mixing_matrices_are_well_conditioned() {
        let m = random_mixing_matrix(8, &mut rng(8));
        let sv = DMatrix::from_fn(8, 8, |i, j| m[[i, j]]).singular_values();
        let cond = sv.max() / sv.min();
        assert!(cond <= 4.0 + 1e-9, "{cond}");
    }

    #[test]
    fn swiss_roll_is_injective_on_a_grid() {
        let v = Array1::linspace(-3.0, 3.0, 60);
        let w = Array1::linspace(-3.0, 3.0, 60);
        let mut pts = Vec::new();
        for &a in v.iter() {
            for &b in w.iter() {
                let p = swiss_roll(Array1::from(vec![a]).view(), Array1::from(vec![b]).view());
                pts.push((p[[0, 0]], p[[0, 1]]));
            }
        }
        for i in 0..pts.len() {
            for j in 0..i {
                let dist = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                assert!(dist > 1e-6);
            }
        }
    }

    #[test]
    fn swiss_roll_task_dimensions() {
        let specs = sweep_grid("swiss-roll", 16).unwrap();
        let task = BenchmarkTask::from_spec(&specs[0]).unwrap();
        assert_eq!((task.d_x, task.d_y), (2, 2));
        let data = sample_task(&task, 10, &mut rng(9)).unwrap();
        assert_eq!(data.dims(), (2, 2));
    }

    #[test]
    fn sweep_grids() {
        let g = sweep_grid("gaussian-rho", 16).unwrap();
        assert_eq!(g.len(), RHO_GRID.len());
        assert!(g.iter().all(|s| s.d == 8));
        let m = sweep_grid("mog-dim", 16).unwrap();
        assert_eq!(m.len(), 8);
        assert!(sweep_grid("spiral-dim", 16).unwrap().iter().all(|s| s.d >= 2));
        assert!(sweep_grid("images", 16).is_err());
        assert_eq!(sweep_grid("cube-dim", 64).unwrap().last().unwrap().d, 32);
    }

    #[test]
    fn task_csv_rows() {
        let specs = sweep_grid("gaussian-rho", 4).unwrap();
        let tasks: Vec<_> = specs
            .iter()
            .map(|s| (s.clone(), ground_truth_mi(&BenchmarkTask::from_spec(s).unwrap(), &mut rng(0)).unwrap()))
            .collect();
        let mut buf = Vec::new();
        write_task_csv(&mut buf, &tasks, &[1, 2]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * RHO_GRID.len());
        assert!(text.starts_with("family,d,rho,truth,truth_sigma,seed\n"));
    }
}
