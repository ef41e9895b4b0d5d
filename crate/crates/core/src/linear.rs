//! Invertible linear maps placed in front of a marginal flow.
//!
//! `Whiten` decorrelates with the inverse symmetric square root of the
//! covariance. `Ica` follows the whitening with symmetric FastICA
//! (log-cosh contrast), which recovers independent non-Gaussian sources of
//! a linear mixture up to order and sign. Either way the map is stored with
//! its exact inverse.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    None,
    Whiten,
    Ica,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcaConfig {
    pub max_iter: usize,
    /// Stop when every row of the unmixing matrix moves by less than this
    /// in `1 − |cos|`.
    pub tol: f64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig { max_iter: 500, tol: 1e-10 }
    }
}

/// `s = W (x − μ)` with `W` stored alongside `W⁻¹`, both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub mean: Vec<f64>,
    pub unmix: Vec<Vec<f64>>,
    pub mix: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.len();
    Array2::from_shape_fn((d, d), |(i, j)| rows[i][j])
}

/// `(A Aᵀ)^{-1/2} A`, the nearest matrix with orthonormal rows.
fn symmetric_decorrelation(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a * a.transpose());
    let inv_sqrt = &e.eigenvectors
        * DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt()))
        * e.eigenvectors.transpose();
    inv_sqrt * a
}

impl LinearMap {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits the map on rows of `data`; `LinearKind::None` gives `None`.
    pub fn fit(data: ArrayView2<f64>, kind: LinearKind, ica: &IcaConfig) -> Result<Option<LinearMap>> {
        if kind == LinearKind::None {
            return Ok(None);
        }
        let (n, d) = data.dim();
        if n <= d {
            return Err(Error::Data(format!("{n} rows cannot whiten {d} columns")));
        }
        let mean = data.mean_axis(Axis(0)).expect("non-empty");
        let centered = &data - &mean;
        let xm = DMatrix::from_fn(d, n, |i, j| centered[[j, i]]);
        let cov = &xm * xm.transpose() / n as f64;
        let eig = SymmetricEigen::new(cov);
        let max_ev = eig.eigenvalues.max();
        if !(eig.eigenvalues.min() > 1e-12 * max_ev.max(1e-300)) {
            return Err(Error::Data("data covariance is singular; columns are collinear".into()));
        }
        let e = &eig.eigenvectors;
        let whiten = e * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt())) * e.transpose();
        let colour = e * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * e.transpose();
        let (unmix, mix) = match kind {
            LinearKind::Whiten => (whiten, colour),
            LinearKind::Ica => {
                let xw = &whiten * &xm;
                let w = fast_ica(&xw, ica);
                // W is orthogonal, so its inverse is its transpose.
                (&w * &whiten, &colour * w.transpose())
            }
            LinearKind::None => unreachable!(),
        };
        Ok(Some(LinearMap { mean: mean.to_vec(), unmix: to_rows(&unmix), mix: to_rows(&mix) }))
    }

    pub fn forward(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mean = ndarray::Array1::from(self.mean.clone());
        (&data - &mean).dot(&to_array(&self.unmix).t())
    }

    pub fn inverse(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mean = ndarray::Array1::from(self.mean.clone());
        data.dot(&to_array(&self.mix).t()) + &mean
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let d = self.dim();
        let square = |m: &Vec<Vec<f64>>| m.len() == d && m.iter().all(|r| r.len() == d);
        if !square(&self.unmix) || !square(&self.mix) {
            return Err(Error::Checkpoint("linear map has the wrong shape".into()));
        }
        let all = self.mean.iter().chain(self.unmix.iter().flatten()).chain(self.mix.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("linear map has non-finite entries".into()));
        }
        let prod = to_array(&self.unmix).dot(&to_array(&self.mix));
        let err = (&prod - &Array2::<f64>::eye(d)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if err > 1e-6 {
            return Err(Error::Checkpoint(format!("stored inverse is off by {err:.2e}")));
        }
        Ok(())
    }
}

/// Symmetric FastICA on whitened columns `xw` (`d × n`); returns an
/// orthogonal `W` whose rows are the unmixing directions.
fn fast_ica(xw: &DMatrix<f64>, cfg: &IcaConfig) -> DMatrix<f64> {
    let (d, n) = xw.shape();
    let mut w = DMatrix::<f64>::identity(d, d);
    for _ in 0..cfg.max_iter {
        let u = &w * xw;
        let g = u.map(f64::tanh);
        let mean_gp: Vec<f64> = (0..d).map(|i| g.row(i).iter().map(|t| 1.0 - t * t).sum::<f64>() / n as f64).collect();
        let mut next = &g * xw.transpose() / n as f64;
        for i in 0..d {
            for j in 0..d {
                next[(i, j)] -= mean_gp[i] * w[(i, j)];
            }
        }
        let next = symmetric_decorrelation(&next);
        let change = (&next * w.transpose()).diagonal().iter().map(|c| 1.0 - c.abs()).fold(0.0f64, f64::max);
        w = next;
        if change < cfg.tol {
            return w;
        }
    }
    warn!("FastICA did not converge in {} iterations", cfg.max_iter);
    w
}
