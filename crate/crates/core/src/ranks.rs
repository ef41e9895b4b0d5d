//! Element-wise empirical ranks, the normal CDF / quantile pair used to move
//! between the unit hypercube and Gaussian scores, and rank-quality
//! diagnostics.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;

/// Complementary error function.
///
/// A positive-term series for `|x| < 2.5` (no cancellation) and a Lentz
/// continued fraction beyond; absolute error is at the level of f64 rounding.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

/// `erf(x) = 2/√π · e^{-x²} · Σ (2x²)ⁿ x / (2n+1)!!`, valid for `x >= 0`.
fn erf_series(x: f64) -> f64 {
    let two_x2 = 2.0 * x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term > 1e-17 * sum {
        n += 1.0;
        term *= two_x2 / (2.0 * n + 1.0);
        sum += term;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp()
}

fn erfc_continued_fraction(x: f64) -> f64 {
    // erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))).
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = x + a / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// Standard normal CDF.
pub fn gauss_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile; `u` must lie strictly inside `(0, 1)`.
///
/// Starts from the `erfc⁻¹` rational approximation and applies Halley
/// refinement against [`gauss_cdf`] on the lower tail (upper-tail inputs are
/// reflected so that `1 - u` stays exact).
pub fn gauss_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs 0 < u < 1, got {u}")));
    }
    if u > 0.5 {
        return Ok(-lower_quantile(1.0 - u));
    }
    Ok(lower_quantile(u))
}

fn lower_quantile(u: f64) -> f64 {
    let mut z = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * u);
    for _ in 0..2 {
        let pdf = std_normal_log_pdf(z).exp();
        if pdf == 0.0 {
            break;
        }
        let r = (gauss_cdf(z) - u) / pdf;
        z -= r / (1.0 + 0.5 * z * r);
    }
    z
}

/// Log density of the standard normal.
#[inline]
pub fn std_normal_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSource {
    FromFlow,
    RawData,
}

/// Ranks in the open unit interval, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMatrix {
    values: Array2<f64>,
    source: RankSource,
}

impl RankMatrix {
    /// Wraps existing values after checking that all of them lie in `(0, 1)`.
    pub fn new(values: Array2<f64>, source: RankSource) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::Domain(format!("rank value {bad} outside (0, 1)")));
        }
        Ok(RankMatrix { values, source })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn source(&self) -> RankSource {
        self.source
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Gaussian scores `Φ⁻¹(u)` of every entry.
    pub fn to_gaussian_scores(&self) -> Array2<f64> {
        // Entries are validated to lie in (0, 1), so the quantile cannot fail.
        self.values.mapv(|u| gauss_quantile(u).expect("rank entries are interior"))
    }

    pub fn select_rows(&self, rows: &[usize]) -> RankMatrix {
        RankMatrix { values: self.values.select(Axis(0), rows), source: self.source }
    }

    /// Writes the ranks as CSV with a header row of `labels`.
    pub fn write_csv<W: Write>(&self, mut out: W, labels: &[String]) -> Result<()> {
        if labels.len() != self.ncols() {
            return Err(Error::shape(format!(
                "{} labels for {} rank columns",
                labels.len(),
                self.ncols()
            )));
        }
        writeln!(out, "{}", labels.join(","))?;
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Rank matrices for the two blocks of a paired dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPair {
    pub x: RankMatrix,
    pub y: RankMatrix,
}

impl RankedPair {
    pub fn new(x: RankMatrix, y: RankMatrix) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::shape(format!(
                "rank blocks have {} and {} rows",
                x.nrows(),
                y.nrows()
            )));
        }
        Ok(RankedPair { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.x.ncols(), self.y.ncols())
    }

    /// Concatenated `[u_X, u_Y]` rows.
    pub fn joined(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.x.values().view(), self.y.values().view()])
            .expect("row counts checked at construction")
    }

    /// Concatenated Gaussian scores `[Φ⁻¹(u_X), Φ⁻¹(u_Y)]`.
    pub fn joined_scores(&self) -> Array2<f64> {
        let x = self.x.to_gaussian_scores();
        let y = self.y.to_gaussian_scores();
        ndarray::concatenate(Axis(1), &[x.view(), y.view()])
            .expect("row counts checked at construction")
    }

    pub fn select_rows(&self, rows: &[usize]) -> RankedPair {
        RankedPair { x: self.x.select_rows(rows), y: self.y.select_rows(rows) }
    }
}

/// Per-column ranks `#{j : v_j <= v_i} / (n + 1)`.
///
/// Tied entries all receive the rank of the largest member of the tie.
pub fn empirical_rank(latents: ArrayView2<f64>, source: RankSource) -> Result<RankMatrix> {
    let (n, d) = latents.dim();
    if n < 2 {
        return Err(Error::Data(format!("ranking needs at least 2 rows, got {n}")));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cannot rank non-finite values".into()));
    }
    let denom = (n + 1) as f64;
    let mut out = Array2::zeros((n, d));
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (col, mut dest) in latents.columns().into_iter().zip(out.columns_mut()) {
        order.clear();
        order.extend(0..n);
        order.sort_unstable_by(|&a, &b| col[a].total_cmp(&col[b]));
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && col[order[end]] == col[order[start]] {
                end += 1;
            }
            let rank = end as f64 / denom;
            for &i in &order[start..end] {
                dest[i] = rank;
            }
            start = end;
        }
    }
    Ok(RankMatrix { values: out, source })
}

/// Ranks of the flow latents `rank(f(x))`.
pub fn compute_vector_ranks(flow: &FlowModel, data: ArrayView2<f64>) -> Result<RankMatrix> {
    let latents = flow.encode(data)?;
    empirical_rank(latents.view(), RankSource::FromFlow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostics {
    /// `max(|Q5%|, |Q95%|)` of the off-diagonal correlations.
    pub t_stat: f64,
    pub q05: f64,
    pub q95: f64,
    /// Upper-triangle entries of the score correlation matrix.
    pub off_diagonal: Vec<f64>,
}

/// Residual cross-dimension dependence of a rank matrix, measured on the
/// correlation matrix of its Gaussian scores.
pub fn rank_diagnostics(ranks: &RankMatrix) -> Result<RankDiagnostics> {
    let (n, d) = ranks.values().dim();
    if n < 3 {
        return Err(Error::Diagnostic(format!("need at least 3 rows, got {n}")));
    }
    let corr = correlation_matrix(ranks.to_gaussian_scores().view())
        .map_err(|e| Error::Diagnostic(e.to_string()))?;
    let mut off: Vec<f64> = Vec::with_capacity(d * (d.saturating_sub(1)) / 2);
    for i in 0..d {
        for j in (i + 1)..d {
            off.push(corr[[i, j]]);
        }
    }
    if off.is_empty() {
        return Ok(RankDiagnostics { t_stat: 0.0, q05: 0.0, q95: 0.0, off_diagonal: off });
    }
    let mut sorted = off.clone();
    sorted.sort_by(f64::total_cmp);
    let q05 = quantile_sorted(&sorted, 0.05);
    let q95 = quantile_sorted(&sorted, 0.95);
    Ok(RankDiagnostics { t_stat: q05.abs().max(q95.abs()), q05, q95, off_diagonal: off })
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Pearson correlation matrix of the columns; zero-variance columns are an error.
pub fn correlation_matrix(data: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = data.nrows() as f64;
    let mean = data.mean_axis(Axis(0)).ok_or_else(|| Error::Data("empty data".into()))?;
    let centered = &data - &mean;
    let cov = centered.t().dot(&centered) / n;
    let sd: Vec<f64> = cov.diag().iter().map(|v| v.sqrt()).collect();
    if let Some(col) = sd.iter().position(|&s| !(s > 1e-12 * (1.0 + mean.iter().fold(0.0f64, |a, m| a.max(m.abs()))))) {
        return Err(Error::Data(format!("column {col} has zero variance")));
    }
    let d = cov.nrows();
    Ok(Array2::from_shape_fn((d, d), |(i, j)| {
        if i == j {
            1.0
        } else {
            cov[[i, j]] / (sd[i] * sd[j])
        }
    }))
}
