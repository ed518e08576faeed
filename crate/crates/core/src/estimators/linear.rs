use serde::{Deserialize, Serialize};

use super::{Diagnostics, FittedEstimator, Method, Predictor};
use crate::error::{dim_err, Error, Result};
use crate::scm::Observed;
use crate::tensor::Tensor;

const RIDGE: f64 = 1e-10;

/// Linear bridge `h(a, w) = φ(a, w)ᵀβ` with
/// `φ = (1, a, w)` or, when quadratic, `(1, a, w, a², w², a⊙w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearBridge {
    pub a_dim: usize,
    pub w_dim: usize,
    pub quadratic: bool,
    pub coef: Vec<f64>,
}

impl LinearBridge {
    pub fn feature_count(a_dim: usize, w_dim: usize, quadratic: bool) -> usize {
        let base = 1 + a_dim + w_dim;
        if quadratic {
            base + a_dim + w_dim + a_dim
        } else {
            base
        }
    }

    pub(crate) fn check(&self, a_dim: usize, w_dim: usize) -> Result<()> {
        if self.a_dim != a_dim || self.w_dim != w_dim {
            return Err(dim_err!(
                "linear bridge dims ({}, {}) differ from ({a_dim}, {w_dim})",
                self.a_dim,
                self.w_dim
            ));
        }
        if self.quadratic && a_dim != w_dim {
            return Err(dim_err!("quadratic features need equal A and W widths"));
        }
        if self.coef.len() != Self::feature_count(a_dim, w_dim, self.quadratic) {
            return Err(dim_err!(
                "linear bridge has {} coefficients",
                self.coef.len()
            ));
        }
        Ok(())
    }

    fn features_into(a: &[f64], w: &[f64], quadratic: bool, out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        out.extend_from_slice(a);
        out.extend_from_slice(w);
        if quadratic {
            out.extend(a.iter().map(|v| v * v));
            out.extend(w.iter().map(|v| v * v));
            out.extend(a.iter().zip(w).map(|(x, y)| x * y));
        }
    }

    /// Design matrix of `φ(a_i, w_i)` rows.
    pub fn design(a: &Tensor, w: &Tensor, quadratic: bool) -> Result<Tensor> {
        if a.rows() != w.rows() {
            return Err(dim_err!("A has {} rows, W has {}", a.rows(), w.rows()));
        }
        if quadratic && a.cols() != w.cols() {
            return Err(dim_err!(
                "quadratic features need equal A and W widths, got {} and {}",
                a.cols(),
                w.cols()
            ));
        }
        let p = Self::feature_count(a.cols(), w.cols(), quadratic);
        let mut data = Vec::with_capacity(a.rows() * p);
        let mut row = Vec::with_capacity(p);
        for i in 0..a.rows() {
            Self::features_into(a.row(i), w.row(i), quadratic, &mut row);
            data.extend_from_slice(&row);
        }
        Tensor::from_vec(a.rows(), p, data)
    }

    pub fn predict(&self, a: &Tensor, w: &Tensor) -> Result<Tensor> {
        Self::design(a, w, self.quadratic)?.matmul(&Tensor::column(self.coef.clone()))
    }

    pub(crate) fn curve(&self, grid: &Tensor, w: &Tensor) -> Result<Tensor> {
        let m = w.rows() as f64;
        let mut row = Vec::new();
        let out = (0..grid.rows())
            .map(|i| {
                let total: f64 = (0..w.rows())
                    .map(|j| {
                        Self::features_into(grid.row(i), w.row(j), self.quadratic, &mut row);
                        row.iter().zip(&self.coef).map(|(x, b)| x * b).sum::<f64>()
                    })
                    .sum();
                total / m
            })
            .collect();
        Ok(Tensor::column(out))
    }
}

/// Solves `min ‖Xβ − Y‖² + ridge·‖β‖²` for every column of `y`.
///
/// Uses Householder QR of the stacked matrix `[X; sqrt(ridge)·I]`, which
/// gives the ridge normal-equation solution without forming `XᵀX`.
pub fn ridge_least_squares(x: &Tensor, y: &Tensor, ridge: f64) -> Result<Tensor> {
    let (n, p) = x.shape();
    if y.rows() != n {
        return Err(dim_err!("design has {n} rows, response has {}", y.rows()));
    }
    if !(ridge > 0.0) {
        return Err(Error::Domain(format!(
            "ridge must be positive, got {ridge}"
        )));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Domain(
            "least squares inputs contain non-finite values".into(),
        ));
    }
    let m = n + p;
    let k = y.cols();
    // Column-major copies keep the Householder updates contiguous.
    let mut a = vec![0.0; m * p];
    for j in 0..p {
        for i in 0..n {
            a[j * m + i] = x[(i, j)];
        }
        a[j * m + n + j] = ridge.sqrt();
    }
    let mut b = vec![0.0; m * k];
    for c in 0..k {
        for i in 0..n {
            b[c * m + i] = y[(i, c)];
        }
    }
    let mut diag = vec![0.0; p];
    for j in 0..p {
        let col = &mut a[j * m + j..(j + 1) * m];
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if col[0] > 0.0 { -norm } else { norm };
        col[0] -= alpha;
        let v = col.to_vec();
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        diag[j] = alpha;
        for c in j + 1..p {
            reflect(&v, &mut a[c * m + j..(c + 1) * m], vnorm2);
        }
        for c in 0..k {
            reflect(&v, &mut b[c * m + j..(c + 1) * m], vnorm2);
        }
    }
    let mut beta = Tensor::zeros(p, k);
    for c in 0..k {
        for j in (0..p).rev() {
            let mut s = b[c * m + j];
            for l in j + 1..p {
                s -= a[l * m + j] * beta[(l, c)];
            }
            beta[(j, c)] = if diag[j] == 0.0 { 0.0 } else { s / diag[j] };
        }
    }
    Ok(beta)
}

// Applies I − 2vvᵀ/‖v‖² to `x`.
#[inline]
fn reflect(v: &[f64], x: &mut [f64], vnorm2: f64) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    let f = 2.0 * dot / vnorm2;
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi -= f * vi;
    }
}

/// Regression of `Y` on `(1, A, W)`, or on the quadratic features when
/// `quadratic` is set.
pub fn fit_ls(data: &Observed<'_>, quadratic: bool) -> Result<FittedEstimator> {
    if data.is_empty() {
        return Err(Error::Domain("least squares on an empty dataset".into()));
    }
    let x = LinearBridge::design(data.a, data.w, quadratic)?;
    let beta = ridge_least_squares(&x, data.y, RIDGE)?;
    let (a_dim, w_dim) = (data.a.cols(), data.w.cols());
    Ok(FittedEstimator {
        method: if quadratic { Method::LsQf } else { Method::Ls },
        a_dim,
        w_dim,
        predictor: Predictor::Linear(LinearBridge {
            a_dim,
            w_dim,
            quadratic,
            coef: beta.into_vec(),
        }),
        diagnostics: Diagnostics::default(),
    })
}

/// Two-stage least squares with `Z` as instrument for `W`.
///
/// Stage 1 regresses each `W` column on `(1, A, Z)`; stage 2 regresses `Y` on
/// `(1, A, Ŵ)`. The bridge is the stage-2 linear function of `(a, w)`.
pub fn fit_2sls(data: &Observed<'_>) -> Result<FittedEstimator> {
    let n = data.len();
    let (a_dim, w_dim) = (data.a.cols(), data.w.cols());
    let p1 = 1 + a_dim + data.z.cols();
    if n <= p1.max(1 + a_dim + w_dim) {
        return Err(Error::Domain(format!(
            "2SLS needs more rows than regressors, got n = {n}"
        )));
    }
    let d1 = Tensor::hstack(&[&Tensor::ones(n, 1), data.a, data.z])?;
    let g = ridge_least_squares(&d1, data.w, RIDGE)?;
    let w_hat = d1.matmul(&g)?;

    let r2 = (0..w_dim)
        .map(|c| {
            let mean = (0..n).map(|i| data.w[(i, c)]).sum::<f64>() / n as f64;
            let sst: f64 = (0..n).map(|i| (data.w[(i, c)] - mean).powi(2)).sum();
            let ssr: f64 = (0..n)
                .map(|i| (data.w[(i, c)] - w_hat[(i, c)]).powi(2))
                .sum();
            if sst > 0.0 {
                (1.0 - ssr / sst).clamp(0.0, 1.0)
            } else {
                1.0
            }
        })
        .collect();

    let d2 = Tensor::hstack(&[&Tensor::ones(n, 1), data.a, &w_hat])?;
    let beta = ridge_least_squares(&d2, data.y, RIDGE)?;
    Ok(FittedEstimator {
        method: Method::TwoSls,
        a_dim,
        w_dim,
        predictor: Predictor::Linear(LinearBridge {
            a_dim,
            w_dim,
            quadratic: false,
            coef: beta.into_vec(),
        }),
        diagnostics: Diagnostics {
            stage1_r2: Some(r2),
            ..Diagnostics::default()
        },
    })
}
