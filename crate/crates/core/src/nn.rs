//! Multilayer perceptrons for the bridge function, their optimizers, and the
//! JSON model format.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Rng, Tensor};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Architecture of a scalar-output MLP.
///
/// `depth` counts affine layers, so `depth - 1` hidden layers of `width`
/// units sit between the input and the single output unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    #[serde(skip)]
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, depth: usize, width: usize, seed: u64) -> Self {
        MlpConfig {
            input_dim,
            depth,
            width,
            activation: Activation::Relu,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.depth == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "MLP needs input_dim, depth and width >= 1 (got {}, {}, {})",
                self.input_dim, self.depth, self.width
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let fan_in = if l == 0 { self.input_dim } else { self.width };
                let fan_out = if l + 1 == self.depth { 1 } else { self.width };
                (fan_in, fan_out)
            })
            .collect()
    }
}

/// One affine layer: `x · weight + bias` with `weight` of shape `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A trained or in-training bridge network `h(a, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeModel {
    config: MlpConfig,
    layers: Vec<Layer>,
}

/// Tape nodes holding a model's parameters for one forward pass.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl ModelNodes {
    /// Parameter nodes in [`BridgeModel::params_mut`] order.
    pub fn ordered(&self) -> Vec<NodeId> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

impl BridgeModel {
    /// He-uniform weights in `±sqrt(6 / fan_in)` and zero biases, drawn layer
    /// by layer in row-major order from `Rng::new(config.seed)`.
    pub fn init(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform(-bound, bound))
                    .collect();
                Layer {
                    weight: Tensor::from_vec(fan_in, fan_out, data).expect("shape by construction"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(BridgeModel { config, layers })
    }

    /// Builds a model from explicit layers, checking that shapes chain.
    pub fn from_layers(config: MlpConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(dim_err!(
                "config has {} layers, got {}",
                shapes.len(),
                layers.len()
            ));
        }
        for (l, ((fi, fo), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != (*fi, *fo) || layer.bias.shape() != (1, *fo) {
                return Err(dim_err!(
                    "layer {l}: weight {:?} bias {:?}, expected {fi}x{fo}",
                    layer.weight.shape(),
                    layer.bias.shape()
                ));
            }
        }
        Ok(BridgeModel { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    /// Euclidean norm of all parameters, weights and biases.
    pub fn param_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|p| p.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Places the parameters on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ModelNodes {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            weights.push(tape.param(layer.weight.clone()));
            biases.push(tape.param(layer.bias.clone()));
        }
        ModelNodes { weights, biases }
    }

    /// Records the forward pass for the `n × input_dim` node `inputs` and
    /// returns the `n × 1` prediction node.
    pub fn forward(&self, tape: &mut Tape, nodes: &ModelNodes, inputs: NodeId) -> Result<NodeId> {
        let cols = tape.value(inputs).cols();
        if cols != self.config.input_dim {
            return Err(dim_err!(
                "model expects {} input columns, got {}",
                self.config.input_dim,
                cols
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = inputs;
        for (l, (&w, &b)) in nodes.weights.iter().zip(&nodes.biases).enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if l < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Tape-free forward evaluation. Performs the same floating-point
    /// operations in the same order as [`forward`](Self::forward).
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        if inputs.cols() != self.config.input_dim {
            return Err(dim_err!(
                "model expects {} input columns, got {}",
                self.config.input_dim,
                inputs.cols()
            ));
        }
        let first = self.layers[0].weight.clone();
        self.predict_from_first_preactivation(inputs.matmul(&first)?)
    }

    /// Continues a forward pass from `x · W₀` (before the first bias).
    pub(crate) fn predict_from_first_preactivation(&self, mut h: Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                h = h.matmul(&layer.weight)?;
            }
            for i in 0..h.rows() {
                for (o, b) in h.row_mut(i).iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            if l < last {
                h.data_mut().iter_mut().for_each(|v| {
                    if !(*v > 0.0) {
                        *v = 0.0
                    }
                });
            }
        }
        Ok(h)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelDocument>(s)?.try_into()
    }
}

/// Σ of squared weight-matrix entries (biases excluded) as a scalar node.
pub fn l2_penalty(tape: &mut Tape, nodes: &ModelNodes) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &w in &nodes.weights {
        let sq = tape.square(w)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::Contract("model has no layers".into()))
}

/// Serialized form of a [`BridgeModel`]; weights are row-major `rows × cols`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub config: MlpConfig,
    pub layers: Vec<LayerDocument>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDocument {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&BridgeModel> for ModelDocument {
    fn from(m: &BridgeModel) -> Self {
        ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            config: m.config,
            layers: m
                .layers
                .iter()
                .map(|l| LayerDocument {
                    rows: l.weight.rows(),
                    cols: l.weight.cols(),
                    weights: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ModelDocument> for BridgeModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported model schema_version {}",
                doc.schema_version
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let cols = l.cols;
                Ok(Layer {
                    weight: Tensor::from_vec(l.rows, l.cols, l.weights)?,
                    bias: Tensor::from_vec(1, cols, l.bias)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        BridgeModel::from_layers(doc.config, layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First-order optimizer state; moment buffers mirror the parameter shapes.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn adam(lr: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }

    /// Applies one update. Fails without touching `params` if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim_err!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(dim_err!(
                    "param {i} is {:?} but grad is {:?}",
                    p.shape(),
                    g.shape()
                ));
            }
            if !g.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {i} at step {}",
                    self.step + 1
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((x, &d), (mi, vi)) in it {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Updates `model` from the gradients of the nodes returned by
    /// [`BridgeModel::register`].
    pub fn step_model(
        &mut self,
        model: &mut BridgeModel,
        nodes: &ModelNodes,
        grads: &Gradients,
    ) -> Result<()> {
        let order = nodes.ordered();
        let g: Vec<&Tensor> = order
            .iter()
            .map(|&id| {
                grads
                    .get(id)
                    .ok_or_else(|| Error::Graph("parameter node without gradient".into()))
            })
            .collect::<Result<_>>()?;
        let mut params = model.params_mut();
        self.step(&mut params, &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::uniform;

    fn zero_model(depth: usize) -> BridgeModel {
        let mut m = BridgeModel::init(MlpConfig::new(2, depth, 4, 1)).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = MlpConfig::new(3, 3, 8, 77);
        let a = BridgeModel::init(cfg).unwrap();
        let b = BridgeModel::init(cfg).unwrap();
        assert_eq!(a, b);
        for layer in a.layers() {
            assert!(layer.bias.data().iter().all(|&v| v == 0.0));
            let bound = (6.0 / layer.weight.rows() as f64).sqrt();
            assert!(layer.weight.data().iter().all(|v| v.abs() <= bound));
        }
        let shapes: Vec<_> = a.layers().iter().map(|l| l.weight.shape()).collect();
        assert_eq!(shapes, vec![(3, 8), (8, 8), (8, 1)]);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(matches!(
            BridgeModel::init(MlpConfig::new(2, 0, 4, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = zero_model(3);
        let x = Tensor::from_rows(&[[1.0, 2.0], [-3.0, 4.0]]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), Tensor::zeros(2, 1));
    }

    #[test]
    fn depth_one_is_affine() {
        let mut m = BridgeModel::init(MlpConfig::new(2, 1, 5, 3)).unwrap();
        m.layers[0].bias = Tensor::scalar(0.25);
        let w = m.layers[0].weight.clone();
        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 0.5]]).unwrap();
        let y = m.predict(&x).unwrap();
        for i in 0..2 {
            let expect = x[(i, 0)] * w[(0, 0)] + x[(i, 1)] * w[(1, 0)] + 0.25;
            assert!((y[(i, 0)] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_rows_give_duplicate_outputs() {
        let m = BridgeModel::init(MlpConfig::new(2, 3, 8, 5)).unwrap();
        let x = Tensor::from_rows(&[[0.3, 0.1], [2.0, -1.0], [0.3, 0.1]]).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y[(0, 0)], y[(2, 0)]);
    }

    #[test]
    fn tape_forward_matches_reference_bitwise() {
        let m = BridgeModel::init(MlpConfig::new(2, 4, 16, 9)).unwrap();
        let x = uniform(&mut Rng::new(2), -3.0, 3.0, 37, 2).unwrap();
        let mut tape = Tape::new();
        let nodes = m.register(&mut tape);
        let xi = tape.constant(x.clone());
        let out = m.forward(&mut tape, &nodes, xi).unwrap();
        assert_eq!(tape.value(out), &m.predict(&x).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = BridgeModel::init(MlpConfig::new(2, 2, 4, 0)).unwrap();
        let mut tape = Tape::new();
        let nodes = m.register(&mut tape);
        let xi = tape.constant(Tensor::zeros(3, 5));
        assert!(matches!(
            m.forward(&mut tape, &nodes, xi),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn penalty_examples() {
        let m = zero_model(2);
        let mut tape = Tape::new();
        let nodes = m.register(&mut tape);
        let p = l2_penalty(&mut tape, &nodes).unwrap();
        assert_eq!(tape.value(p).item().unwrap(), 0.0);

        let mut m = BridgeModel::init(MlpConfig::new(1, 1, 1, 0)).unwrap();
        m.layers[0].weight = Tensor::scalar(3.0);
        m.layers[0].bias = Tensor::scalar(100.0);
        let mut tape = Tape::new();
        let nodes = m.register(&mut tape);
        let p = l2_penalty(&mut tape, &nodes).unwrap();
        assert_eq!(tape.value(p).item().unwrap(), 9.0);
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(nodes.weights[0]).unwrap().item().unwrap(), 6.0);
        assert_eq!(g.get(nodes.biases[0]).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn first_adam_step_is_lr_sized() {
        let mut theta = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut opt = OptimizerState::adam(0.1);
        opt.step(&mut [&mut theta], &[&g]).unwrap();
        assert!((theta.item().unwrap() + 0.1).abs() < 1e-8);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut theta = Tensor::column(vec![1.0, -2.0]);
        let mut opt = OptimizerState::adam(0.1);
        opt.step(&mut [&mut theta], &[&Tensor::zeros(2, 1)])
            .unwrap();
        assert_eq!(theta.data(), &[1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut theta = Tensor::column(vec![0.5, 0.25]);
        let mut opt = OptimizerState::adam(0.0);
        for _ in 0..5 {
            opt.step(&mut [&mut theta], &[&Tensor::column(vec![3.0, -1.0])])
                .unwrap();
        }
        assert_eq!(theta.data(), &[0.5, 0.25]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut theta = Tensor::scalar(1.0);
        let mut opt = OptimizerState::adam(0.1);
        let err = opt
            .step(&mut [&mut theta], &[&Tensor::scalar(f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert_eq!(theta.item().unwrap(), 1.0);
    }

    #[test]
    fn adam_trajectories_are_reproducible() {
        let run = || {
            let mut theta = Tensor::column(vec![1.0, 2.0]);
            let mut opt = OptimizerState::adam(0.05);
            for k in 0..20 {
                let g = theta
                    .scale(2.0)
                    .add(&Tensor::column(vec![k as f64 * 0.1, -0.3]))
                    .unwrap();
                opt.step(&mut [&mut theta], &[&g]).unwrap();
            }
            theta
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = BridgeModel::init(MlpConfig::new(2, 3, 7, 123)).unwrap();
        let s = m.to_json().unwrap();
        let back = BridgeModel::from_json(&s).unwrap();
        let bits = |m: &BridgeModel| -> Vec<u64> {
            m.params()
                .iter()
                .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&m), bits(&back));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["config"]["activation"], "relu");
        assert_eq!(v["layers"][0]["rows"], 2);
    }

    #[test]
    fn json_shape_mismatch_rejected() {
        let m = BridgeModel::init(MlpConfig::new(2, 2, 3, 1)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["layers"][0]["cols"] = 4.into();
        assert!(BridgeModel::from_json(&v.to_string()).is_err());
    }
}
