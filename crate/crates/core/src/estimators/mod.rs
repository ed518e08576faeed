//! Bridge-function estimators and the shared prediction contract.
//!
//! Every estimator produces `ĥ(a, w)`. Potential-outcome curves are formed by
//! averaging `ĥ(a, ·)` over held-out draws of `W`, for neural and linear
//! methods alike.

mod linear;
mod neural;

pub use linear::{fit_2sls, fit_ls, ridge_least_squares, LinearBridge};
pub use neural::{fit_naive_net, fit_nmmr, training_loss};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::kernels::{KernelConfig, Variant};
use crate::nn::{BridgeModel, ModelDocument};
use crate::scm::{Experiment, Observed};
use crate::tensor::Tensor;

/// Estimator identifiers, in canonical report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "nmmr-u")]
    NmmrU,
    #[serde(rename = "nmmr-v")]
    NmmrV,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "ls-qf")]
    LsQf,
    #[serde(rename = "2sls")]
    TwoSls,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::NmmrU,
        Method::NmmrV,
        Method::Naive,
        Method::Ls,
        Method::LsQf,
        Method::TwoSls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NmmrU => "nmmr-u",
            Method::NmmrV => "nmmr-v",
            Method::Naive => "naive",
            Method::Ls => "ls",
            Method::LsQf => "ls-qf",
            Method::TwoSls => "2sls",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Method::NmmrU | Method::NmmrV | Method::Naive)
    }

    /// Kernel statistic used by the NMMR methods.
    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::NmmrU => Some(Variant::U),
            Method::NmmrV => Some(Variant::V),
            _ => None,
        }
    }

    /// Small per-method constant mixed into seeds so that methods fitted on
    /// the same replicate do not share initial weights.
    pub fn seed_tag(self) -> u64 {
        match self {
            Method::NmmrU => 0x11,
            Method::NmmrV => 0x12,
            Method::Naive => 0x13,
            Method::Ls => 0x14,
            Method::LsQf => 0x15,
            Method::TwoSls => 0x16,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}' (expected one of nmmr-u, nmmr-v, naive, ls, ls-qf, 2sls)"
                ))
            })
    }
}

/// Parses a comma-separated method list such as `ls,nmmr-u`.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>>>()?;
    if methods.is_empty() {
        return Err(Error::Config("method list is empty".into()));
    }
    Ok(methods)
}

/// Optimization settings for the neural estimators. Linear methods ignore
/// everything except `method`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    /// Coefficient of the squared-weight penalty.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub kernel: KernelConfig,
    /// Z-score network inputs with training means and deviations.
    pub standardize: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Tuned settings for `method` on `experiment`.
    ///
    /// Demand values are the published optima. Sprite networks here are
    /// fully connected over flattened pixels, so their depth, width and
    /// learning rate are set for that architecture.
    pub fn defaults(method: Method, experiment: Experiment) -> Self {
        let base = TrainConfig {
            method,
            lr: 3e-3,
            lambda: 3e-6,
            epochs: 3000,
            batch_size: 1000,
            depth: 4,
            width: 80,
            kernel: KernelConfig::default(),
            standardize: false,
            seed: 0,
        };
        match experiment {
            Experiment::Demand => match method {
                Method::NmmrV => TrainConfig { depth: 3, ..base },
                Method::Naive => TrainConfig { depth: 2, ..base },
                _ => base,
            },
            Experiment::Sprite => {
                let sprite = TrainConfig {
                    lr: SPRITE_LR,
                    epochs: 500,
                    batch_size: 256,
                    depth: 3,
                    width: 64,
                    standardize: false,
                    ..base
                };
                match method {
                    Method::NmmrV => TrainConfig {
                        lambda: 3e-7,
                        ..sprite
                    },
                    _ => sprite,
                }
            }
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.method == Method::NmmrU && self.batch_size < 2 {
            return Err(Error::Config(
                "U-statistic training needs batch size >= 2".into(),
            ));
        }
        if self.depth == 0 || self.width == 0 {
            return Err(Error::Config("network depth and width must be >= 1".into()));
        }
        self.kernel.validate()
    }
}

const SPRITE_LR: f64 = 1e-4;

/// Per-column affine map applied to network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Scaler {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and population deviations; constant columns keep scale 1.
    pub fn fit(x: &Tensor) -> Self {
        let n = x.rows() as f64;
        let mean = x.column_means().into_vec();
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (v, (xi, m)) in var.iter_mut().zip(x.row(i).iter().zip(&mean)) {
                *v += (xi - m) * (xi - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| (v / n).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Scaler { mean, scale }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_range(x, 0)
    }

    /// Transforms `x` as the columns `offset..offset + x.cols()` of the input.
    fn apply_range(&self, x: &Tensor, offset: usize) -> Result<Tensor> {
        if offset + x.cols() > self.mean.len() {
            return Err(dim_err!(
                "scaler has {} columns, input block ends at {}",
                self.mean.len(),
                offset + x.cols()
            ));
        }
        let mut out = x.clone();
        let (mean, scale) = (&self.mean[offset..], &self.scale[offset..]);
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / scale[j];
            }
        }
        Ok(out)
    }
}

/// A fitted bridge function.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    Network {
        model: BridgeModel,
        scaler: Scaler,
        a_dim: usize,
    },
    Linear(LinearBridge),
}

/// Training summaries attached to a fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean training loss per epoch, followed by the frozen model's loss on
    /// the last batch of the last epoch.
    pub loss_trace: Vec<f64>,
    pub final_loss: Option<f64>,
    /// Loss without the weight penalty on that same batch.
    pub final_objective: Option<f64>,
    pub skipped_batches: usize,
    /// First-stage R² per outcome-proxy column (2SLS only).
    pub stage1_r2: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedEstimator {
    pub method: Method,
    pub a_dim: usize,
    pub w_dim: usize,
    pub predictor: Predictor,
    pub diagnostics: Diagnostics,
}

/// Fits `method` on `data`. `config.method` is overridden by `method`.
pub fn fit(
    method: Method,
    data: &Observed<'_>,
    experiment: Experiment,
    config: &TrainConfig,
) -> Result<FittedEstimator> {
    let config = TrainConfig { method, ..*config };
    match method {
        Method::NmmrU => fit_nmmr(data, experiment, &config, Variant::U),
        Method::NmmrV => fit_nmmr(data, experiment, &config, Variant::V),
        Method::Naive => fit_naive_net(data, &config),
        Method::Ls => fit_ls(data, false),
        Method::LsQf => fit_ls(data, true),
        Method::TwoSls => fit_2sls(data),
    }
}

impl FittedEstimator {
    /// `ĥ(a_i, w_i)` for each row pair.
    pub fn predict(&self, a: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.check_inputs(a, w)?;
        match &self.predictor {
            Predictor::Network { model, scaler, .. } => {
                model.predict(&scaler.apply(&Tensor::hstack(&[a, w])?)?)
            }
            Predictor::Linear(lin) => lin.predict(a, w),
        }
    }

    fn check_inputs(&self, a: &Tensor, w: &Tensor) -> Result<()> {
        if a.cols() != self.a_dim || w.cols() != self.w_dim || a.rows() != w.rows() {
            return Err(dim_err!(
                "estimator expects ({}, {}) columns with equal rows, got {:?} and {:?}",
                self.a_dim,
                self.w_dim,
                a.shape(),
                w.shape()
            ));
        }
        Ok(())
    }

    /// `Ê[Y^a] = (1/M) Σ_j ĥ(a, w_j)` for every row `a` of `grid`.
    pub fn predict_curve(&self, grid: &Tensor, heldout_w: &Tensor) -> Result<Tensor> {
        if heldout_w.rows() == 0 {
            return Err(Error::Domain(
                "predict_curve needs at least one held-out W row".into(),
            ));
        }
        if grid.cols() != self.a_dim || heldout_w.cols() != self.w_dim {
            return Err(dim_err!(
                "grid {:?} / held-out W {:?} do not match dims ({}, {})",
                grid.shape(),
                heldout_w.shape(),
                self.a_dim,
                self.w_dim
            ));
        }
        let m = heldout_w.rows() as f64;
        match &self.predictor {
            Predictor::Network {
                model,
                scaler,
                a_dim,
            } => {
                // Split the first layer so the W half is multiplied once.
                let w0 = &model.layers()[0].weight;
                let w0a =
                    Tensor::from_vec(*a_dim, w0.cols(), w0.data()[..a_dim * w0.cols()].to_vec())?;
                let w0w = Tensor::from_vec(
                    w0.rows() - a_dim,
                    w0.cols(),
                    w0.data()[a_dim * w0.cols()..].to_vec(),
                )?;
                let a_part = scaler.apply_range(grid, 0)?.matmul(&w0a)?;
                let w_part = scaler.apply_range(heldout_w, *a_dim)?.matmul(&w0w)?;
                let mut out = Vec::with_capacity(grid.rows());
                for i in 0..grid.rows() {
                    let mut h = w_part.clone();
                    let ai = a_part.row(i);
                    for r in 0..h.rows() {
                        for (v, x) in h.row_mut(r).iter_mut().zip(ai) {
                            *v += x;
                        }
                    }
                    out.push(model.predict_from_first_preactivation(h)?.sum() / m);
                }
                Ok(Tensor::column(out))
            }
            Predictor::Linear(lin) => lin.curve(grid, heldout_w),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&EstimatorDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<EstimatorDocument>(s)?.try_into()
    }
}

pub const ESTIMATOR_FORMAT: &str = "proxmmr-estimator";

/// JSON envelope shared by all estimators.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorDocument {
    pub format: String,
    pub method: Method,
    pub a_dim: usize,
    pub w_dim: usize,
    pub predictor: PredictorDocument,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorDocument {
    Network {
        scaler: Scaler,
        model: ModelDocument,
    },
    Linear(LinearBridge),
}

impl From<&FittedEstimator> for EstimatorDocument {
    fn from(e: &FittedEstimator) -> Self {
        let predictor = match &e.predictor {
            Predictor::Network { model, scaler, .. } => PredictorDocument::Network {
                scaler: scaler.clone(),
                model: ModelDocument::from(model),
            },
            Predictor::Linear(lin) => PredictorDocument::Linear(lin.clone()),
        };
        EstimatorDocument {
            format: ESTIMATOR_FORMAT.into(),
            method: e.method,
            a_dim: e.a_dim,
            w_dim: e.w_dim,
            predictor,
            diagnostics: e.diagnostics.clone(),
        }
    }
}

impl TryFrom<EstimatorDocument> for FittedEstimator {
    type Error = Error;

    fn try_from(doc: EstimatorDocument) -> Result<Self> {
        if doc.format != ESTIMATOR_FORMAT {
            return Err(Error::Config(format!(
                "not an estimator document (format '{}')",
                doc.format
            )));
        }
        let predictor = match doc.predictor {
            PredictorDocument::Network { scaler, model } => {
                let model = BridgeModel::try_from(model)?;
                let dim = doc.a_dim + doc.w_dim;
                if model.config().input_dim != dim
                    || scaler.mean.len() != dim
                    || scaler.scale.len() != dim
                {
                    return Err(dim_err!(
                        "network document does not match input dims ({}, {})",
                        doc.a_dim,
                        doc.w_dim
                    ));
                }
                Predictor::Network {
                    model,
                    scaler,
                    a_dim: doc.a_dim,
                }
            }
            PredictorDocument::Linear(lin) => {
                lin.check(doc.a_dim, doc.w_dim)?;
                Predictor::Linear(lin)
            }
        };
        Ok(FittedEstimator {
            method: doc.method,
            a_dim: doc.a_dim,
            w_dim: doc.w_dim,
            predictor,
            diagnostics: doc.diagnostics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{demand_sample, DemandConfig};

    fn linear_est(coef: Vec<f64>) -> FittedEstimator {
        FittedEstimator {
            method: Method::Ls,
            a_dim: 1,
            w_dim: 1,
            predictor: Predictor::Linear(LinearBridge {
                a_dim: 1,
                w_dim: 1,
                quadratic: false,
                coef,
            }),
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert_eq!(
            parse_methods("ls, nmmr-u").unwrap(),
            vec![Method::Ls, Method::NmmrU]
        );
        assert!(parse_methods("ls,kpv").is_err());
        assert!(parse_methods("").is_err());
    }

    #[test]
    fn demand_defaults() {
        let u = TrainConfig::defaults(Method::NmmrU, Experiment::Demand);
        assert_eq!(
            (u.lr, u.lambda, u.epochs, u.batch_size, u.width, u.depth),
            (3e-3, 3e-6, 3000, 1000, 80, 4)
        );
        assert_eq!(
            TrainConfig::defaults(Method::NmmrV, Experiment::Demand).depth,
            3
        );
        assert_eq!(
            TrainConfig::defaults(Method::Naive, Experiment::Demand).depth,
            2
        );
        let v = TrainConfig::defaults(Method::NmmrV, Experiment::Sprite);
        assert_eq!((v.lambda, v.epochs, v.batch_size), (3e-7, 500, 256));
    }

    #[test]
    fn config_validation() {
        let base = TrainConfig::defaults(Method::NmmrU, Experiment::Demand);
        assert!(base.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..base }.validate().is_err());
        assert!(TrainConfig {
            lambda: -1.0,
            ..base
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 1,
            ..base
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 1,
            method: Method::NmmrV,
            ..base
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn curve_of_constant_predictor() {
        let est = linear_est(vec![4.5, 0.0, 0.0]);
        let grid = Tensor::linspace(10.0, 30.0, 10);
        let w = Tensor::column(vec![1.0, 50.0, -3.0]);
        assert!(est
            .predict_curve(&grid, &w)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 4.5));
    }

    #[test]
    fn curve_of_identity_in_a_is_the_grid() {
        let est = linear_est(vec![0.0, 1.0, 0.0]);
        let grid = Tensor::linspace(10.0, 30.0, 10);
        let w = Tensor::column(vec![1.0, 50.0, -3.0]);
        let curve = est.predict_curve(&grid, &w).unwrap();
        for (c, g) in curve.data().iter().zip(grid.data()) {
            assert!((c - g).abs() <= 1e-12 * g);
        }
    }

    #[test]
    fn curve_of_identity_in_w_is_the_w_mean() {
        let est = linear_est(vec![0.0, 0.0, 1.0]);
        let grid = Tensor::linspace(10.0, 30.0, 4);
        let w = Tensor::column(vec![1.0, 50.0, -3.0, 8.0]);
        let mean = w.mean();
        for v in est.predict_curve(&grid, &w).unwrap().data() {
            assert!((v - mean).abs() < 1e-12);
        }
        assert!(est.predict_curve(&grid, &Tensor::zeros(0, 1)).is_err());
    }

    #[test]
    fn network_curve_matches_direct_average() {
        let data = demand_sample(&DemandConfig::new(200, 3)).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 200,
            depth: 3,
            width: 8,
            ..TrainConfig::defaults(Method::NmmrV, Experiment::Demand)
        };
        let est = fit(Method::NmmrV, &data.observed(), Experiment::Demand, &cfg).unwrap();
        let grid = Tensor::linspace(10.0, 30.0, 10);
        let w = data.w().select_rows(&(0..50).collect::<Vec<_>>());
        let curve = est.predict_curve(&grid, &w).unwrap();
        for i in 0..grid.rows() {
            let a = Tensor::full(w.rows(), 1, grid[(i, 0)]);
            let direct = est.predict(&a, &w).unwrap().mean();
            assert!((curve[(i, 0)] - direct).abs() <= 1e-10 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn json_round_trip_preserves_predictions() {
        let data = demand_sample(&DemandConfig::new(100, 4)).unwrap();
        let grid = Tensor::linspace(10.0, 30.0, 10);
        for method in [Method::Naive, Method::LsQf, Method::TwoSls] {
            let cfg = TrainConfig {
                epochs: 3,
                ..TrainConfig::defaults(method, Experiment::Demand)
            };
            let est = fit(method, &data.observed(), Experiment::Demand, &cfg).unwrap();
            let back = FittedEstimator::from_json(&est.to_json().unwrap()).unwrap();
            assert_eq!(back.method, method);
            let p1 = est.predict_curve(&grid, data.w()).unwrap();
            let p2 = back.predict_curve(&grid, data.w()).unwrap();
            assert_eq!(p1, p2);
        }
        assert!(FittedEstimator::from_json("{\"format\":\"other\"}").is_err());
    }
}
