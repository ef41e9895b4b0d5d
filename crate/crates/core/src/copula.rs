//! Mixtures of Gaussian vector copulas.
//!
//! Every component is a Gaussian in score space `z = Φ⁻¹(u)`. The copula
//! log-density of a component is `log N(z; μ, Σ) − Σ_d log N(z_d; 0, 1)`.
//!
//! Two component modes exist:
//!
//! * **constrained**: `μ = 0` and the two diagonal blocks of `Σ` are exact
//!   identities, so each block of `u` is uniform on its hypercube. This is the
//!   vector Gaussian copula proper.
//! * **unconstrained**: free `μ` and `Σ`, read as a density relative to the
//!   standard-normal base. Mixtures of these can represent dependence with
//!   several regimes, which zero-mean identity-block components cannot.
//!
//! Fitting is EM in score space with k-means++ initialisation, covariance
//! regularisation and weight pruning. [`select_copula`] picks the component
//! count on a held-out split.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranks::{gauss_cdf, gauss_quantile, RankedPair};

const CHECKPOINT_FORMAT: &str = "vcmi-copula/1";
/// Smallest eigenvalue any component covariance may have.
pub const EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopulaMode {
    Constrained,
    Unconstrained,
}

/// One Gaussian vector copula component.
#[derive(Debug, Clone)]
pub struct VectorGaussianComponent {
    d_x: usize,
    d_y: usize,
    mean: Array1<f64>,
    cov: Array2<f64>,
    constrained: bool,
    /// `(L⁻¹)ᵀ` for `Σ = L Lᵀ`; `‖(z − μ)ᵀ (L⁻¹)ᵀ‖²` is the Mahalanobis term.
    whitener: Array2<f64>,
    log_det: f64,
}

impl PartialEq for VectorGaussianComponent {
    fn eq(&self, other: &Self) -> bool {
        self.d_x == other.d_x
            && self.d_y == other.d_y
            && self.constrained == other.constrained
            && self.mean == other.mean
            && self.cov == other.cov
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    SymmetricEigen::new(to_dmatrix(a)).eigenvalues.min()
}

/// Symmetrises `a` and raises every eigenvalue to at least `floor`.
fn floor_eigenvalues(a: &Array2<f64>, floor: f64) -> Array2<f64> {
    let sym = (a + &a.t()) * 0.5;
    let eig = SymmetricEigen::new(to_dmatrix(&sym));
    if eig.eigenvalues.min() >= floor {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let out = from_dmatrix(&rebuilt);
    (&out + &out.t()) * 0.5
}

impl VectorGaussianComponent {
    pub fn new(
        d_x: usize,
        d_y: usize,
        mean: Array1<f64>,
        cov: Array2<f64>,
        constrained: bool,
    ) -> Result<Self> {
        let d = d_x + d_y;
        if d_x == 0 || d_y == 0 {
            return Err(Error::Config("both blocks need at least one dimension".into()));
        }
        if mean.len() != d || cov.dim() != (d, d) {
            return Err(Error::shape(format!(
                "component of order {d} got mean {} and covariance {:?}",
                mean.len(),
                cov.dim()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Fit("non-finite component parameters".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if cov[[i, j]] != cov[[j, i]] {
                    return Err(Error::Fit("covariance is not symmetric".into()));
                }
            }
        }
        if constrained {
            if mean.iter().any(|&m| m != 0.0) {
                return Err(Error::Fit("constrained component needs zero mean".into()));
            }
            let identity_block = |r: std::ops::Range<usize>| {
                r.clone().all(|i| r.clone().all(|j| cov[[i, j]] == if i == j { 1.0 } else { 0.0 }))
            };
            if !identity_block(0..d_x) || !identity_block(d_x..d) {
                return Err(Error::Fit("constrained component needs identity diagonal blocks".into()));
            }
        }
        if min_eigenvalue(&cov) < EIGEN_FLOOR * (1.0 - 1e-6) {
            return Err(Error::Fit("covariance eigenvalue below the regularisation floor".into()));
        }
        let chol = nalgebra::Cholesky::new(to_dmatrix(&cov))
            .ok_or_else(|| Error::Fit("covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?;
        let whitener = from_dmatrix(&l_inv.transpose());
        Ok(VectorGaussianComponent { d_x, d_y, mean, cov, constrained, whitener, log_det })
    }

    /// Constrained component with the given cross block `Σ_XY` (`d_x × d_y`).
    pub fn constrained(cross: Array2<f64>) -> Result<Self> {
        let (d_x, d_y) = cross.dim();
        let d = d_x + d_y;
        let mut cov = Array2::eye(d);
        cov.slice_mut(s![..d_x, d_x..]).assign(&cross);
        cov.slice_mut(s![d_x.., ..d_x]).assign(&cross.t());
        VectorGaussianComponent::new(d_x, d_y, Array1::zeros(d), cov, true)
    }

    pub fn independence(d_x: usize, d_y: usize) -> Result<Self> {
        VectorGaussianComponent::constrained(Array2::zeros((d_x, d_y)))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_x, self.d_y)
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    /// Copula log-density at a batch of scores `z`.
    pub fn log_density_scores(&self, z: ArrayView2<f64>) -> Array1<f64> {
        let centered = &z - &self.mean;
        let w = centered.dot(&self.whitener);
        let mut out = Array1::zeros(z.nrows());
        for (i, (wr, zr)) in w.rows().into_iter().zip(z.rows()).enumerate() {
            let maha: f64 = wr.iter().map(|v| v * v).sum();
            let base: f64 = zr.iter().map(|v| v * v).sum();
            out[i] = -0.5 * (maha + self.log_det) + 0.5 * base;
        }
        out
    }

    /// `Σ = L Lᵀ`, used for sampling.
    fn cholesky_factor(&self) -> Array2<f64> {
        let chol = nalgebra::Cholesky::new(to_dmatrix(&self.cov)).expect("validated at construction");
        from_dmatrix(&chol.l())
    }
}

fn scores_of_point(u: ArrayView1<f64>) -> Result<Array2<f64>> {
    let z: Result<Vec<f64>> = u.iter().map(|&v| gauss_quantile(v)).collect();
    let z = z?;
    Ok(Array2::from_shape_vec((1, z.len()), z).expect("row vector"))
}

/// `log c_k(u)` for one interior point.
pub fn component_log_density(comp: &VectorGaussianComponent, u: ArrayView1<f64>) -> Result<f64> {
    let d = comp.d_x + comp.d_y;
    if u.len() != d {
        return Err(Error::shape(format!("point has {} coordinates, copula has {d}", u.len())));
    }
    Ok(comp.log_density_scores(scores_of_point(u)?.view())[0])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    /// Mean negative copula log-likelihood on the fitting rows.
    pub train_nll: f64,
    /// Mean negative copula log-likelihood on held-out rows, when known.
    pub val_nll: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Components requested before pruning.
    pub requested_k: usize,
    /// Largest decrease of the training log-likelihood between EM iterations.
    pub max_ll_decrease: f64,
}

/// Weighted mixture of vector Gaussian copula components.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaModel {
    d_x: usize,
    d_y: usize,
    mode: CopulaMode,
    weights: Vec<f64>,
    components: Vec<VectorGaussianComponent>,
    pub meta: FitMetadata,
}

impl CopulaModel {
    pub fn new(
        weights: Vec<f64>,
        components: Vec<VectorGaussianComponent>,
        mode: CopulaMode,
    ) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::Config("need one weight per component and at least one".into()));
        }
        let (d_x, d_y) = components[0].dims();
        if components.iter().any(|c| c.dims() != (d_x, d_y)) {
            return Err(Error::shape("components disagree on block sizes"));
        }
        if mode == CopulaMode::Constrained && components.iter().any(|c| !c.constrained) {
            return Err(Error::Config("constrained mixture with unconstrained component".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights {weights:?} are not on the simplex")));
        }
        Ok(CopulaModel { d_x, d_y, mode, weights, components, meta: FitMetadata::default() })
    }

    pub fn independence(d_x: usize, d_y: usize) -> Result<Self> {
        CopulaModel::new(
            vec![1.0],
            vec![VectorGaussianComponent::independence(d_x, d_y)?],
            CopulaMode::Constrained,
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_x, self.d_y)
    }

    pub fn mode(&self) -> CopulaMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[VectorGaussianComponent] {
        &self.components
    }

    /// Per-component `log p_k + log c_k(z)`, shape `(n, K)`.
    fn weighted_component_logs(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((z.nrows(), self.k()));
        for (k, comp) in self.components.iter().enumerate() {
            let lw = self.weights[k].ln();
            let mut col = out.column_mut(k);
            col.assign(&comp.log_density_scores(z));
            col += lw;
        }
        out
    }

    /// Mixture log-density for a batch of scores.
    pub fn log_density_scores(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        if z.ncols() != self.d_x + self.d_y {
            return Err(Error::shape(format!(
                "scores have {} columns, copula has {}",
                z.ncols(),
                self.d_x + self.d_y
            )));
        }
        let logs = self.weighted_component_logs(z);
        Ok(logs.rows().into_iter().map(log_sum_exp).collect())
    }

    /// Mixture log-density for a batch of points in the open hypercube.
    pub fn log_density_batch(&self, u: ArrayView2<f64>) -> Result<Array1<f64>> {
        let z: Result<Vec<f64>> = u.iter().map(|&v| gauss_quantile(v)).collect();
        let z = Array2::from_shape_vec(u.raw_dim(), z?).expect("same shape");
        self.log_density_scores(z.view())
    }

    pub fn to_checkpoint(&self) -> CopulaCheckpoint {
        CopulaCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            mode: self.mode,
            d_x: self.d_x,
            d_y: self.d_y,
            k: self.k(),
            weights: self.weights.clone(),
            components: self
                .components
                .iter()
                .map(|c| ComponentCheckpoint {
                    constrained: c.constrained,
                    mean: c.mean.to_vec(),
                    cov: c.cov.iter().copied().collect(),
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: CopulaCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", ckpt.format)));
        }
        if ckpt.k != ckpt.components.len() {
            return Err(Error::Checkpoint("component count does not match k".into()));
        }
        let d = ckpt.d_x + ckpt.d_y;
        let components = ckpt
            .components
            .into_iter()
            .map(|c| {
                let cov = Array2::from_shape_vec((d, d), c.cov)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                VectorGaussianComponent::new(ckpt.d_x, ckpt.d_y, Array1::from(c.mean), cov, c.constrained)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = CopulaModel::new(ckpt.weights, components, ckpt.mode)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.meta = ckpt.meta;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        CopulaModel::from_checkpoint(serde_json::from_str(text)?)
    }
}

/// Which block of the joint rank vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    X,
    Y,
}

/// `log N(z; μ, Σ) − Σ_d log φ(z_d)` without a cached factorisation.
fn gaussian_relative_log_density(z: ArrayView2<f64>, mean: ArrayView1<f64>, cov: &Array2<f64>) -> Result<Array1<f64>> {
    let d = mean.len();
    let chol = nalgebra::Cholesky::new(to_dmatrix(cov))
        .ok_or_else(|| Error::Fit("block covariance is not positive definite".into()))?;
    let l = chol.l();
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?;
    let whitener = from_dmatrix(&l_inv.transpose());
    let w = (&z - &mean).dot(&whitener);
    Ok(w.rows()
        .into_iter()
        .zip(z.rows())
        .map(|(wr, zr)| {
            let maha: f64 = wr.iter().map(|v| v * v).sum();
            let base: f64 = zr.iter().map(|v| v * v).sum();
            -0.5 * (maha + log_det) + 0.5 * base
        })
        .collect())
}

impl CopulaModel {
    /// Log-density of one block's marginal under the mixture, at that block's scores.
    ///
    /// Constrained components have uniform block marginals, so this is
    /// identically zero for a constrained mixture.
    pub fn block_log_density_scores(&self, z_block: ArrayView2<f64>, block: Block) -> Result<Array1<f64>> {
        let range = match block {
            Block::X => 0..self.d_x,
            Block::Y => self.d_x..self.d_x + self.d_y,
        };
        if z_block.ncols() != range.len() {
            return Err(Error::shape(format!(
                "block scores have {} columns, block has {}",
                z_block.ncols(),
                range.len()
            )));
        }
        let mut logs = Array2::zeros((z_block.nrows(), self.k()));
        for (k, comp) in self.components.iter().enumerate() {
            let mut col = logs.column_mut(k);
            if comp.constrained {
                col.fill(self.weights[k].ln());
                continue;
            }
            let mean = comp.mean.slice(s![range.clone()]);
            let cov = comp.cov.slice(s![range.clone(), range.clone()]).to_owned();
            col.assign(&gaussian_relative_log_density(z_block, mean, &cov)?);
            col += self.weights[k].ln();
        }
        Ok(logs.rows().into_iter().map(log_sum_exp).collect())
    }

    /// `log ĉ(z) − log ĉ_X(z_X) − log ĉ_Y(z_Y)`: the fitted model's pointwise
    /// mutual information relative to its own block marginals.
    pub fn pointwise_mi_scores(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        let joint = self.log_density_scores(z)?;
        let bx = self.block_log_density_scores(z.slice(s![.., ..self.d_x]), Block::X)?;
        let by = self.block_log_density_scores(z.slice(s![.., self.d_x..]), Block::Y)?;
        Ok(joint - bx - by)
    }
}

/// Serialised copula: mode, block sizes, weights, row-major covariances and
/// fit metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaCheckpoint {
    pub format: String,
    pub mode: CopulaMode,
    pub d_x: usize,
    pub d_y: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub components: Vec<ComponentCheckpoint>,
    pub meta: FitMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheckpoint {
    pub constrained: bool,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log Σ_k p_k c_k(u)`, computed with a max shift.
pub fn mixture_log_density(model: &CopulaModel, u: ArrayView1<f64>) -> Result<f64> {
    let d = model.d_x + model.d_y;
    if u.len() != d {
        return Err(Error::shape(format!("point has {} coordinates, copula has {d}", u.len())));
    }
    Ok(model.log_density_scores(scores_of_point(u)?.view())?[0])
}

/// Draws `m` points from the mixture; rows are `[u_X, u_Y]`.
pub fn sample_copula<R: Rng + ?Sized>(model: &CopulaModel, m: usize, rng: &mut R) -> Array2<f64> {
    let d = model.d_x + model.d_y;
    let factors: Vec<Array2<f64>> = model.components.iter().map(|c| c.cholesky_factor()).collect();
    let mut cumulative = Vec::with_capacity(model.k());
    let mut acc = 0.0;
    for w in &model.weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut out = Array2::zeros((m, d));
    let mut g = Array1::<f64>::zeros(d);
    for mut row in out.rows_mut() {
        let r: f64 = rng.random::<f64>() * acc;
        let k = cumulative.iter().position(|&c| r < c).unwrap_or(model.k() - 1);
        g.mapv_inplace(|_| rng.sample(StandardNormal));
        let eps = factors[k].dot(&g) + &model.components[k].mean;
        for (dst, e) in row.iter_mut().zip(eps.iter()) {
            *dst = gauss_cdf(*e).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        }
    }
    out
}

/// Ladder of candidate component counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KLadder {
    /// Fixed list, tried in order.
    List { ks: Vec<usize> },
    /// 1, 2, 4, ... up to `max`.
    Doubling { max: usize },
}

impl Default for KLadder {
    fn default() -> Self {
        KLadder::List { ks: vec![1, 4, 8, 16, 32] }
    }
}

impl KLadder {
    pub fn values(&self) -> Vec<usize> {
        match self {
            KLadder::List { ks } => ks.clone(),
            KLadder::Doubling { max } => {
                std::iter::successors(Some(1usize), |k| Some(k * 2)).take_while(|k| k <= max).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopulaConfig {
    pub mode: CopulaMode,
    pub ladder: KLadder,
    pub max_iter: usize,
    /// Stop when the mean train log-likelihood improves by less than this.
    pub tol: f64,
    /// k-means++ initialisations per fit.
    pub restarts: usize,
    /// EM iterations given to each restart before the best one continues.
    pub restart_burn_in: usize,
    pub kmeans_iters: usize,
    pub val_fraction: f64,
    /// Ridge added when a component's responsibility mass is below `d + 1`.
    pub small_count_ridge: f64,
    /// Components lighter than this are dropped at convergence.
    pub prune_weight: f64,
    /// Keep fitting ladder entries after the early stop, for the candidate
    /// records only; the selected model is the same either way.
    pub exhaustive: bool,
}

impl Default for CopulaConfig {
    fn default() -> Self {
        CopulaConfig {
            mode: CopulaMode::Unconstrained,
            ladder: KLadder::default(),
            max_iter: 500,
            tol: 1e-5,
            restarts: 5,
            restart_burn_in: 20,
            kmeans_iters: 25,
            val_fraction: 0.2,
            small_count_ridge: 1e-4,
            prune_weight: 1e-4,
            exhaustive: false,
        }
    }
}

/// Result of EM on score data, with the per-iteration likelihood trace.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: CopulaModel,
    /// Mean copula log-likelihood at every E-step.
    pub ll_trace: Vec<f64>,
}

struct EmState {
    weights: Vec<f64>,
    components: Vec<VectorGaussianComponent>,
}

impl EmState {
    fn model(&self, mode: CopulaMode) -> CopulaModel {
        CopulaModel {
            d_x: self.components[0].d_x,
            d_y: self.components[0].d_y,
            mode,
            weights: self.weights.clone(),
            components: self.components.clone(),
            meta: FitMetadata::default(),
        }
    }

    /// Responsibilities and mean copula log-likelihood.
    fn e_step(&self, z: ArrayView2<f64>, mode: CopulaMode) -> (Array2<f64>, f64) {
        let model = self.model(mode);
        let mut logs = model.weighted_component_logs(z);
        let mut total = 0.0;
        for mut row in logs.rows_mut() {
            let lse = log_sum_exp(row.view());
            total += lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        (logs, total / z.nrows() as f64)
    }
}

fn project_constrained(second_moment: &Array2<f64>, d_x: usize) -> Array2<f64> {
    let d = second_moment.nrows();
    let sd: Vec<f64> = (0..d).map(|i| second_moment[[i, i]].max(1e-300).sqrt()).collect();
    let mut cross = Array2::from_shape_fn((d_x, d - d_x), |(i, j)| {
        let a = second_moment[[i, d_x + j]] / (sd[i] * sd[d_x + j]);
        let b = second_moment[[d_x + j, i]] / (sd[i] * sd[d_x + j]);
        0.5 * (a + b)
    });
    // Eigenvalues of [[I, C], [Cᵀ, I]] are 1 ± σ_i(C) (plus ones), so shrinking
    // C keeps the identity blocks exact while enforcing the eigenvalue floor.
    let sigma_max = {
        let c = to_dmatrix(&cross);
        c.singular_values().max()
    };
    let limit = 1.0 - EIGEN_FLOOR * 2.0;
    if sigma_max > limit {
        cross *= limit / sigma_max;
    }
    let mut cov = Array2::eye(d);
    cov.slice_mut(s![..d_x, d_x..]).assign(&cross);
    cov.slice_mut(s![d_x.., ..d_x]).assign(&cross.t());
    cov
}

/// `−log det Σ − tr(Σ⁻¹ S)`: twice the expected log-likelihood per unit
/// mass, up to constants, of a zero-mean Gaussian with covariance `Σ` under
/// second moment `S`.
fn zero_mean_objective(cov: &Array2<f64>, second: &Array2<f64>) -> f64 {
    let Some(chol) = to_dmatrix(cov).cholesky() else {
        return f64::NEG_INFINITY;
    };
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv = chol.inverse();
    let s = to_dmatrix(second);
    -log_det - inv.component_mul(&s).sum()
}

/// Constrained M-step for one component. The projected moment estimate is
/// not the constrained maximiser, so when it scores below the previous
/// cross block the step backtracks toward it; the feasible set is convex.
fn constrained_step(second: &Array2<f64>, d_x: usize, prev: Option<&Array2<f64>>) -> Array2<f64> {
    let candidate = project_constrained(second, d_x);
    let Some(prev) = prev else {
        return candidate;
    };
    let base = zero_mean_objective(prev, second);
    let mut t = 1.0;
    for _ in 0..30 {
        let cov = prev + &((&candidate - prev) * t);
        if zero_mean_objective(&cov, second) >= base {
            return cov;
        }
        t *= 0.5;
    }
    prev.clone()
}

fn m_step(
    z: ArrayView2<f64>,
    resp: &Array2<f64>,
    prev: &EmState,
    mode: CopulaMode,
    config: &CopulaConfig,
    monotone: bool,
) -> Result<EmState> {
    let (n, d) = z.dim();
    let d_x = prev.components[0].d_x;
    let d_y = prev.components[0].d_y;
    let mut weights = Vec::with_capacity(resp.ncols());
    let mut components = Vec::with_capacity(resp.ncols());
    for (k, r) in resp.columns().into_iter().enumerate() {
        let mass: f64 = r.sum();
        if mass < 1e-10 {
            // Dead component: keep its shape, its weight goes to ~0 and is pruned later.
            weights.push(mass / n as f64);
            components.push(prev.components[k].clone());
            continue;
        }
        let sqrt_r = r.mapv(f64::sqrt);
        let comp = match mode {
            CopulaMode::Unconstrained => {
                let mean = r.dot(&z) / mass;
                let mut centered = &z - &mean;
                centered *= &sqrt_r.view().insert_axis(Axis(1));
                let mut cov = centered.t().dot(&centered) / mass;
                if mass < (d + 1) as f64 {
                    cov += &(Array2::<f64>::eye(d) * config.small_count_ridge);
                }
                let cov = floor_eigenvalues(&cov, EIGEN_FLOOR);
                VectorGaussianComponent::new(d_x, d_y, mean, cov, false)?
            }
            CopulaMode::Constrained => {
                let mut scaled = z.to_owned();
                scaled *= &sqrt_r.view().insert_axis(Axis(1));
                let second = scaled.t().dot(&scaled) / mass;
                let cov = constrained_step(&second, d_x, monotone.then(|| prev.components[k].cov()));
                VectorGaussianComponent::new(d_x, d_y, Array1::zeros(d), cov, true)?
            }
        };
        weights.push(mass / n as f64);
        components.push(comp);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(EmState { weights, components })
}

/// k-means++ seeding followed by Lloyd iterations; returns hard labels.
fn kmeans_labels<R: Rng + ?Sized>(z: ArrayView2<f64>, k: usize, iters: usize, rng: &mut R) -> Vec<usize> {
    let n = z.nrows();
    let sq_dist = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(k);
    centers.push(z.row(rng.random_range(0..n)).to_owned());
    let mut nearest: Vec<f64> = z.rows().into_iter().map(|r| sq_dist(r, centers[0].view())).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = z.row(next).to_owned();
        for (i, row) in z.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(row, c.view()));
        }
        centers.push(c);
    }
    let mut labels = vec![0usize; n];
    for it in 0..=iters {
        let mut changed = false;
        for (i, row) in z.rows().into_iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(row, centers[a].view()).total_cmp(&sq_dist(row, centers[b].view()))
                })
                .expect("k >= 1");
            if best != labels[i] || it == 0 {
                changed |= best != labels[i];
                labels[i] = best;
            }
        }
        if it > 0 && !changed {
            break;
        }
        let mut sums = vec![Array1::<f64>::zeros(z.ncols()); k];
        let mut counts = vec![0usize; k];
        for (i, row) in z.rows().into_iter().enumerate() {
            sums[labels[i]] += &row;
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
    }
    labels
}

fn initial_state<R: Rng + ?Sized>(
    z: ArrayView2<f64>,
    d_x: usize,
    k: usize,
    mode: CopulaMode,
    config: &CopulaConfig,
    rng: &mut R,
) -> Result<EmState> {
    let d = z.ncols();
    let labels = if k == 1 { vec![0; z.nrows()] } else { kmeans_labels(z, k, config.kmeans_iters, rng) };
    let mut resp = Array2::zeros((z.nrows(), k));
    for (i, &l) in labels.iter().enumerate() {
        resp[[i, l]] = 1.0;
    }
    let placeholder = EmState {
        weights: vec![1.0 / k as f64; k],
        components: vec![VectorGaussianComponent::independence(d_x, d - d_x)?; k],
    };
    m_step(z, &resp, &placeholder, mode, config, false)
}

fn run_em(
    z: ArrayView2<f64>,
    mut state: EmState,
    mode: CopulaMode,
    config: &CopulaConfig,
    max_iter: usize,
    trace: &mut Vec<f64>,
) -> Result<(EmState, bool)> {
    let mut converged = false;
    for _ in 0..max_iter {
        let (resp, ll) = state.e_step(z, mode);
        if !ll.is_finite() {
            return Err(Error::Fit("log-likelihood became non-finite".into()));
        }
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(p) = prev {
            if ll - p < config.tol {
                converged = true;
                break;
            }
        }
        state = m_step(z, &resp, &state, mode, config, true)?;
    }
    Ok((state, converged))
}

/// EM on Gaussian scores `z` (rows `[z_X, z_Y]`).
pub fn fit_scores<R: Rng + ?Sized>(
    z: ArrayView2<f64>,
    d_x: usize,
    k: usize,
    config: &CopulaConfig,
    rng: &mut R,
) -> Result<EmFit> {
    let (n, d) = z.dim();
    if k == 0 {
        return Err(Error::Config("number of components must be positive".into()));
    }
    if d_x == 0 || d_x >= d {
        return Err(Error::Config(format!("invalid block split {d_x} of {d}")));
    }
    if n < k {
        return Err(Error::Fit(format!("{n} rows cannot support {k} components")));
    }
    let mode = config.mode;

    let restarts = if k == 1 { 1 } else { config.restarts.max(1) };
    let mut best: Option<(EmState, Vec<f64>, bool)> = None;
    for _ in 0..restarts {
        let init = initial_state(z, d_x, k, mode, config, rng)?;
        let mut trace = Vec::new();
        let budget = if restarts == 1 { config.max_iter } else { config.restart_burn_in.min(config.max_iter) };
        let (state, converged) = match run_em(z, init, mode, config, budget, &mut trace) {
            Ok(r) => r,
            Err(e) if restarts > 1 => {
                log::debug!("restart failed: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let ll = *trace.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|(_, t, _)| ll > *t.last().expect("non-empty")) {
            best = Some((state, trace, converged));
        }
    }
    let (mut state, mut trace, mut converged) =
        best.ok_or_else(|| Error::Fit("every initialisation failed".into()))?;
    if !converged && restarts > 1 {
        let remaining = config.max_iter.saturating_sub(trace.len());
        let (s, c) = run_em(z, state, mode, config, remaining, &mut trace)?;
        state = s;
        converged = c;
    }

    // Prune light components, then refresh the final likelihood.
    let keep: Vec<usize> =
        (0..state.weights.len()).filter(|&i| state.weights[i] >= config.prune_weight).collect();
    if keep.is_empty() {
        return Err(Error::Fit("all components were pruned".into()));
    }
    if keep.len() < state.weights.len() {
        let total: f64 = keep.iter().map(|&i| state.weights[i]).sum();
        state = EmState {
            weights: keep.iter().map(|&i| state.weights[i] / total).collect(),
            components: keep.iter().map(|&i| state.components[i].clone()).collect(),
        };
    }
    let (_, final_ll) = state.e_step(z, mode);
    let max_decrease = trace
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(0.0f64, f64::max);
    if max_decrease > 1e-9 {
        log::warn!("EM log-likelihood decreased by {max_decrease:.3e} ({mode:?} mode)");
    }
    let mut model = state.model(mode);
    model.meta = FitMetadata {
        train_nll: -final_ll,
        val_nll: None,
        iterations: trace.len(),
        converged,
        requested_k: k,
        max_ll_decrease: max_decrease,
    };
    Ok(EmFit { model, ll_trace: trace })
}

/// Maximum-likelihood mixture fit to rank data.
pub fn fit_copula_mle<R: Rng + ?Sized>(
    ranks: &RankedPair,
    k: usize,
    config: &CopulaConfig,
    rng: &mut R,
) -> Result<CopulaModel> {
    if k == 0 {
        return Err(Error::Config("number of components must be positive".into()));
    }
    let (d_x, _) = ranks.dims();
    let z = ranks.joined_scores();
    Ok(fit_scores(z.view(), d_x, k, config, rng)?.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub k: usize,
    /// `None` when the candidate was skipped or failed.
    pub train_nll: Option<f64>,
    pub val_nll: Option<f64>,
    /// Copula entropy estimate over all rows for this candidate.
    pub estimate: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub model: CopulaModel,
    pub k: usize,
    pub candidates: Vec<CandidateRecord>,
}

/// Fits the ladder of component counts on a training split and keeps the
/// one with the best validation likelihood.
pub fn select_copula<R: Rng + ?Sized>(
    ranks: &RankedPair,
    config: &CopulaConfig,
    rng: &mut R,
) -> Result<Selection> {
    let n = ranks.len();
    if n < 50 {
        return Err(Error::Selection(format!("need at least 50 rows, got {n}")));
    }
    let (d_x, _) = ranks.dims();
    let z_all = ranks.joined_scores();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
    let z_val = z_all.select(Axis(0), &order[..n_val]);
    let z_train = z_all.select(Axis(0), &order[n_val..]);
    let n_train = z_train.nrows();

    let mut candidates = Vec::new();
    let mut best: Option<(usize, CopulaModel, f64)> = None;
    let mut stopped = false;
    for k in config.ladder.values() {
        if n_train <= 10 * k {
            candidates.push(CandidateRecord {
                k,
                train_nll: None,
                val_nll: None,
                estimate: None,
                note: Some(format!("skipped: {n_train} training rows <= 10·K")),
            });
            continue;
        }
        let fit = match fit_scores(z_train.view(), d_x, k, config, rng) {
            Ok(f) => f,
            Err(e) => {
                candidates.push(CandidateRecord {
                    k,
                    train_nll: None,
                    val_nll: None,
                    estimate: None,
                    note: Some(e.to_string()),
                });
                continue;
            }
        };
        let mut model = fit.model;
        let val_ll = model.log_density_scores(z_val.view())?.mean().expect("non-empty");
        model.meta.val_nll = Some(-val_ll);
        let estimate = model.log_density_scores(z_all.view())?.mean();
        candidates.push(CandidateRecord {
            k,
            train_nll: Some(model.meta.train_nll),
            val_nll: Some(-val_ll),
            estimate,
            note: None,
        });
        if stopped {
            continue;
        }
        if best.as_ref().is_none_or(|(_, _, b)| val_ll > *b) {
            best = Some((k, model, val_ll));
        } else if config.exhaustive {
            stopped = true;
        } else {
            break;
        }
    }
    let (k, model, _) = best.ok_or_else(|| Error::Selection("no candidate could be fitted".into()))?;
    Ok(Selection { model, k, candidates })
}

/// Mean copula log-density over the rank rows: the mutual information estimate.
pub fn copula_entropy_estimate(model: &CopulaModel, ranks: &RankedPair) -> Result<f64> {
    if ranks.dims() != model.dims() {
        return Err(Error::shape(format!(
            "ranks have blocks {:?}, copula has {:?}",
            ranks.dims(),
            model.dims()
        )));
    }
    if ranks.is_empty() {
        return Err(Error::Data("no rank rows".into()));
    }
    let z = ranks.joined_scores();
    Ok(model.log_density_scores(z.view())?.mean().expect("non-empty"))
}
