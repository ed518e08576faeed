use std::sync::Arc;

use super::{Diagnostics, FittedEstimator, Method, Predictor, Scaler, TrainConfig};
use crate::autodiff::{LinearOperator, NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels::{
    kernel_features, rbf_matrix, statistic_node, BlockKernel, KernelConfig, KernelMatrix, Variant,
};
use crate::nn::{l2_penalty, BridgeModel, MlpConfig, OptimizerState};
use crate::scm::{Experiment, Observed};
use crate::tensor::{Rng, Tensor};

const SHUFFLE_TAG: u64 = 0x5348_5546;

/// Largest kernel matrix (entries) kept in memory for gathering batch blocks.
const KERNEL_CACHE_ENTRIES: usize = 25_000_000;

enum Objective {
    Mse,
    Moment {
        variant: Variant,
        source: KernelSource,
    },
}

enum KernelSource {
    /// Full-data operator reused when a batch is the whole dataset in order.
    Whole {
        matrix: KernelMatrix,
        op: Arc<dyn LinearOperator>,
    },
    Cached(KernelMatrix),
    Blocked {
        features: Tensor,
        config: KernelConfig,
    },
}

impl KernelSource {
    fn build(
        features: Tensor,
        config: &KernelConfig,
        variant: Variant,
        n: usize,
        batch: usize,
        force_blocked: bool,
    ) -> Result<Self> {
        if !force_blocked && n * n <= KERNEL_CACHE_ENTRIES {
            let matrix = rbf_matrix(&features, config)?;
            if batch >= n {
                let op: Arc<dyn LinearOperator> = Arc::new(matrix.operator(variant));
                return Ok(KernelSource::Whole { matrix, op });
            }
            return Ok(KernelSource::Cached(matrix));
        }
        Ok(KernelSource::Blocked {
            features,
            config: *config,
        })
    }

    fn operator(
        &self,
        idx: &[usize],
        whole: bool,
        variant: Variant,
    ) -> Result<Arc<dyn LinearOperator>> {
        Ok(match self {
            KernelSource::Whole { op, .. } if whole => op.clone(),
            KernelSource::Whole { matrix, .. } | KernelSource::Cached(matrix) => {
                let sub = KernelMatrix::from_tensor(matrix.entries().select_square(idx))?;
                Arc::new(sub.into_operator(variant))
            }
            KernelSource::Blocked { features, config } => {
                let cfg = KernelConfig {
                    block_size: config.block_size.min(idx.len()),
                    ..*config
                };
                Arc::new(BlockKernel::new(
                    Arc::new(features.select_rows(idx)),
                    &cfg,
                    variant,
                )?)
            }
        })
    }
}

/// Scalar training loss of `model` on inputs `x` (already scaled) and
/// outcomes `y`, with its penalty-free part.
fn record_loss(
    tape: &mut Tape,
    model: &BridgeModel,
    x: &Tensor,
    y: &Tensor,
    objective: Option<(Variant, Arc<dyn LinearOperator>)>,
    lambda: f64,
) -> Result<(NodeId, NodeId, crate::nn::ModelNodes)> {
    let nodes = model.register(tape);
    let xn = tape.constant(x.clone());
    let yn = tape.constant(y.clone());
    let pred = model.forward(tape, &nodes, xn)?;
    let r = tape.sub(yn, pred)?;
    let data_term = match objective {
        Some((variant, op)) => statistic_node(tape, r, op, variant)?,
        None => {
            let sq = tape.square(r)?;
            tape.mean(sq)?
        }
    };
    let pen = l2_penalty(tape, &nodes)?;
    let pen = tape.scale(pen, lambda)?;
    let loss = tape.add(data_term, pen)?;
    Ok((loss, data_term, nodes))
}

/// Loss of a fitted network on the given rows, recomputed from scratch with
/// the same kernel and penalty as training. The kernel is materialized.
pub fn training_loss(
    est: &FittedEstimator,
    data: &Observed<'_>,
    experiment: Experiment,
    config: &TrainConfig,
) -> Result<f64> {
    let Predictor::Network { model, scaler, .. } = &est.predictor else {
        return Err(Error::Contract(
            "training loss is defined for network estimators only".into(),
        ));
    };
    let x = scaler.apply(&Tensor::hstack(&[data.a, data.w])?)?;
    let objective = match est.method.variant() {
        Some(variant) => {
            let k = rbf_matrix(
                &kernel_features(data, experiment, config.kernel.alpha)?,
                &config.kernel,
            )?;
            Some((
                variant,
                Arc::new(k.operator(variant)) as Arc<dyn LinearOperator>,
            ))
        }
        None => None,
    };
    let mut tape = Tape::new();
    let (loss, _, _) = record_loss(&mut tape, model, &x, data.y, objective, config.lambda)?;
    tape.value(loss).item()
}

fn train(
    data: &Observed<'_>,
    config: &TrainConfig,
    mut objective: Objective,
) -> Result<FittedEstimator> {
    config.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::Domain(format!("training needs n >= 2, got {n}")));
    }
    let (a_dim, w_dim) = (data.a.cols(), data.w.cols());
    let raw = Tensor::hstack(&[data.a, data.w])?;
    if !raw.is_finite() || !data.y.is_finite() {
        return Err(Error::Domain(
            "training data contain non-finite values".into(),
        ));
    }
    let scaler = if config.standardize {
        Scaler::fit(&raw)
    } else {
        Scaler::identity(raw.cols())
    };
    let x = scaler.apply(&raw)?;
    let mut model = BridgeModel::init(MlpConfig::new(
        a_dim + w_dim,
        config.depth,
        config.width,
        config.seed,
    ))?;
    let mut opt = OptimizerState::adam(config.lr);
    let mut shuffle_rng = Rng::new(config.seed ^ SHUFFLE_TAG);
    let batch = config.batch_size.min(n);
    let whole = batch >= n;

    let mut trace = Vec::with_capacity(config.epochs + 1);
    let mut skipped = 0usize;
    let mut last_idx: Vec<usize> = Vec::new();
    let identity: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        // A whole-data batch statistic does not depend on row order.
        let mut order = if whole {
            identity.clone()
        } else {
            shuffle_rng.permutation(n)
        };
        for chunk in order.chunks_mut(batch) {
            chunk.sort_unstable();
        }
        let mut epoch_sum = 0.0;
        let mut counted = 0usize;
        for (b, idx) in order.chunks(batch).enumerate() {
            let op = match &mut objective {
                Objective::Moment { variant, .. } if *variant == Variant::U && idx.len() < 2 => {
                    log::warn!(
                        "epoch {epoch}: skipping batch {b} of size {} under the U-statistic",
                        idx.len()
                    );
                    skipped += 1;
                    continue;
                }
                Objective::Moment { variant, source } => {
                    Some((*variant, source.operator(idx, whole, *variant)?))
                }
                Objective::Mse => None,
            };
            let (xb, yb) = if whole {
                (x.clone(), data.y.clone())
            } else {
                (x.select_rows(idx), data.y.select_rows(idx))
            };
            let mut tape = Tape::new();
            let (loss, _, nodes) = record_loss(&mut tape, &model, &xb, &yb, op, config.lambda)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {b}; trace so far: {:?}",
                    trace
                )));
            }
            let grads = tape.backward(loss)?;
            opt.step_model(&mut model, &nodes, &grads)?;
            epoch_sum += value;
            counted += 1;
            last_idx.clear();
            last_idx.extend_from_slice(idx);
        }
        if counted > 0 {
            trace.push(epoch_sum / counted as f64);
        }
    }
    if last_idx.is_empty() {
        return Err(Error::Training("no batch was trained".into()));
    }

    let op = match &objective {
        Objective::Moment { variant, source } => {
            Some((*variant, source.operator(&last_idx, whole, *variant)?))
        }
        Objective::Mse => None,
    };
    let (xb, yb) = if whole {
        (x.clone(), data.y.clone())
    } else {
        (x.select_rows(&last_idx), data.y.select_rows(&last_idx))
    };
    let mut tape = Tape::new();
    let (loss, data_term, _) = record_loss(&mut tape, &model, &xb, &yb, op, config.lambda)?;
    let final_loss = tape.value(loss).item()?;
    trace.push(final_loss);

    Ok(FittedEstimator {
        method: config.method,
        a_dim,
        w_dim,
        predictor: Predictor::Network {
            model,
            scaler,
            a_dim,
        },
        diagnostics: Diagnostics {
            loss_trace: trace,
            final_loss: Some(final_loss),
            final_objective: Some(tape.value(data_term).item()?),
            skipped_batches: skipped,
            stage1_r2: None,
        },
    })
}

/// Trains a bridge network by minimizing the kernel moment statistic of
/// `y − h(a, w)` plus `λ Σ‖W_l‖²`, with Adam on shuffled mini-batches.
///
/// With a batch at least as large as the data, the kernel matrix is built
/// once. Otherwise each batch uses the kernel block of its own rows.
pub fn fit_nmmr(
    data: &Observed<'_>,
    experiment: Experiment,
    config: &TrainConfig,
    variant: Variant,
) -> Result<FittedEstimator> {
    fit_nmmr_inner(data, experiment, config, variant, false)
}

pub(crate) fn fit_nmmr_inner(
    data: &Observed<'_>,
    experiment: Experiment,
    config: &TrainConfig,
    variant: Variant,
    force_blocked: bool,
) -> Result<FittedEstimator> {
    let method = match variant {
        Variant::U => Method::NmmrU,
        Variant::V => Method::NmmrV,
    };
    let config = TrainConfig { method, ..*config };
    config.validate()?;
    let n = data.len();
    let features = kernel_features(data, experiment, config.kernel.alpha)?;
    let source = KernelSource::build(
        features,
        &config.kernel,
        variant,
        n,
        config.batch_size,
        force_blocked,
    )?;
    train(data, &config, Objective::Moment { variant, source })
}

/// Same network and optimizer, trained on the observational squared error.
pub fn fit_naive_net(data: &Observed<'_>, config: &TrainConfig) -> Result<FittedEstimator> {
    let config = TrainConfig {
        method: Method::Naive,
        ..*config
    };
    train(data, &config, Objective::Mse)
}
