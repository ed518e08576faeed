//! Ticket-demand benchmark: price `A` confounded by latent demand `U`, with
//! fuel cost `Z = (Z1, Z2)` and web page views `W` as proxies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{normal, uniform, Rng, Tensor};

/// Monte Carlo draws per grid point for the ground-truth curve.
pub const DEMAND_TRUTH_MC: usize = 10_000;

/// Proxy-noise variances for `Z1 = Z2` in the noise sweep.
pub const VAR_Z_LEVELS: [f64; 9] = [0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
/// Proxy-noise variances for `W` in the noise sweep.
pub const VAR_W_LEVELS: [f64; 8] = [0.0, 0.01, 0.1, 0.5, 1.0, 16.0, 64.0, 150.0];

/// All `(σ²_Z, σ²_W)` cells of the noise sweep, `Z` level outermost.
pub fn noise_grid() -> Vec<(f64, f64)> {
    VAR_Z_LEVELS
        .iter()
        .flat_map(|&z| VAR_W_LEVELS.iter().map(move |&w| (z, w)))
        .collect()
}

/// `g(u) = 2((u − 5)⁴/600 + exp(−4(u − 5)²) + u/10 − 2)`.
pub fn demand_g(u: f64) -> f64 {
    let d = u - 5.0;
    2.0 * (d.powi(4) / 600.0 + (-4.0 * d * d).exp() + u / 10.0 - 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandConfig {
    pub n: usize,
    pub var_z1: f64,
    pub var_z2: f64,
    pub var_w: f64,
    pub seed: u64,
}

impl DemandConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        DemandConfig {
            n,
            var_z1: 1.0,
            var_z2: 1.0,
            var_w: 1.0,
            seed,
        }
    }

    /// Sets `σ²_Z1 = σ²_Z2 = var_z` and `σ²_W = var_w`.
    pub fn with_noise(mut self, var_z: f64, var_w: f64) -> Self {
        self.var_z1 = var_z;
        self.var_z2 = var_z;
        self.var_w = var_w;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Domain("demand sample size must be >= 1".into()));
        }
        for v in [self.var_z1, self.var_z2, self.var_w] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "noise variance must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Diagnostic hooks for hand-checkable draws.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DemandOverrides {
    /// Replace every draw of `U` with this value.
    pub fixed_u: Option<f64>,
    /// Zero all five structural noise terms.
    pub noiseless: bool,
}

/// Draws a Demand dataset.
///
/// Stream order: `U` (n uniforms on [0, 10)), then `ε1 … ε5`, each a block of
/// n standard normals, scaled by the configured standard deviations
/// (`ε4`, `ε5` have unit variance).
pub fn demand_sample(config: &DemandConfig) -> Result<Dataset> {
    demand_sample_with(config, DemandOverrides::default())
}

pub fn demand_sample_with(config: &DemandConfig, overrides: DemandOverrides) -> Result<Dataset> {
    config.validate()?;
    let n = config.n;
    let mut rng = Rng::new(config.seed);
    let mut u = uniform(&mut rng, 0.0, 10.0, n, 1)?;
    if let Some(fixed) = overrides.fixed_u {
        u = Tensor::full(n, 1, fixed);
    }
    let k = if overrides.noiseless { 0.0 } else { 1.0 };
    let e1 = normal(&mut rng, 0.0, k * config.var_z1.sqrt(), n, 1)?;
    let e2 = normal(&mut rng, 0.0, k * config.var_z2.sqrt(), n, 1)?;
    let e3 = normal(&mut rng, 0.0, k * config.var_w.sqrt(), n, 1)?;
    let e4 = normal(&mut rng, 0.0, k, n, 1)?;
    let e5 = normal(&mut rng, 0.0, k, n, 1)?;

    let mut z = Tensor::zeros(n, 2);
    let mut w = Tensor::zeros(n, 1);
    let mut a = Tensor::zeros(n, 1);
    let mut y = Tensor::zeros(n, 1);
    for i in 0..n {
        let ui = u[(i, 0)];
        let g = demand_g(ui);
        let z1 = 2.0 * (2.0 * PI * ui / 10.0).sin() + e1[(i, 0)];
        let z2 = 2.0 * (2.0 * PI * ui / 10.0).cos() + e2[(i, 0)];
        let wi = 7.0 * g + 45.0 + e3[(i, 0)];
        let ai = 35.0 + (z1 + 3.0) * g + z2 + e4[(i, 0)];
        z[(i, 0)] = z1;
        z[(i, 1)] = z2;
        w[(i, 0)] = wi;
        a[(i, 0)] = ai;
        y[(i, 0)] = outcome(ai, wi, ui, e5[(i, 0)]);
    }
    Dataset::new(a, w, z, y, u)
}

/// The structural equation for sales.
#[inline]
pub(crate) fn outcome(a: f64, w: f64, u: f64, noise: f64) -> f64 {
    a * ((w - a) / 10.0).exp().min(5.0) - 5.0 * demand_g(u) + noise
}

/// Potential-outcome means on a grid with their Monte Carlo standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub grid: Tensor,
    pub values: Tensor,
    /// Standard error per point; `None` for closed-form truths.
    pub std_err: Option<Tensor>,
}

/// Monte Carlo estimate of `E[Y^a]` for each row of `grid` (m × 1).
///
/// For each grid point in order, draws `mc` values of `U`, then `mc` of `ε3`
/// (variance `var_w`), then `mc` of `ε5`, and averages
/// `a·min(exp((W − a)/10), 5) − 5g(U) + ε5`. The standard error is the
/// sample standard deviation over `sqrt(mc)` (NaN when `mc = 1`).
pub fn demand_ground_truth(grid: &Tensor, mc: usize, seed: u64, var_w: f64) -> Result<GroundTruth> {
    demand_ground_truth_with(grid, mc, seed, var_w, DemandOverrides::default())
}

pub fn demand_ground_truth_with(
    grid: &Tensor,
    mc: usize,
    seed: u64,
    var_w: f64,
    overrides: DemandOverrides,
) -> Result<GroundTruth> {
    if mc == 0 {
        return Err(Error::Domain(
            "ground truth needs at least one Monte Carlo draw".into(),
        ));
    }
    if grid.cols() != 1 {
        return Err(Error::Dimension("demand grid must be a column".into()));
    }
    if !(var_w >= 0.0) {
        return Err(Error::Domain(format!("var_w must be >= 0, got {var_w}")));
    }
    let k = if overrides.noiseless { 0.0 } else { 1.0 };
    let mut rng = Rng::new(seed);
    let m = grid.rows();
    let mut values = Vec::with_capacity(m);
    let mut errs = Vec::with_capacity(m);
    for i in 0..m {
        let a = grid[(i, 0)];
        let mut u = uniform(&mut rng, 0.0, 10.0, mc, 1)?;
        if let Some(fixed) = overrides.fixed_u {
            u = Tensor::full(mc, 1, fixed);
        }
        let e3 = normal(&mut rng, 0.0, k * var_w.sqrt(), mc, 1)?;
        let e5 = normal(&mut rng, 0.0, k, mc, 1)?;
        let ys: Vec<f64> = (0..mc)
            .map(|j| {
                let uj = u[(j, 0)];
                let w = 7.0 * demand_g(uj) + 45.0 + e3[(j, 0)];
                outcome(a, w, uj, e5[(j, 0)])
            })
            .collect();
        let mean = ys.iter().sum::<f64>() / mc as f64;
        let se = if mc > 1 {
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (mc - 1) as f64;
            (var / mc as f64).sqrt()
        } else {
            f64::NAN
        };
        values.push(mean);
        errs.push(se);
    }
    Ok(GroundTruth {
        grid: grid.clone(),
        values: Tensor::column(values),
        std_err: Some(Tensor::column(errs)),
    })
}
