//! The capacity ladder: feature-masked linear probes and small ReLU MLPs,
//! each producing a single logit that is squashed to a probability of class 1.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DatasetBundle;
use crate::numerics::{dot, sigmoid, Matrix, NumericsError, RngStream};
use crate::supervision::SoftLabelSet;
use crate::training::{self, EvalPlan, Supervision, TrainConfig, TrainError};

pub const CHECKPOINT_FORMAT: &str = "w2s-checkpoint/v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid ladder: {0}")]
    InvalidLadder(String),
    #[error("input has {got} columns, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("cannot embed {from} into {into}")]
    Embed { from: String, into: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    /// Logistic regression over the leading `feature_count_k` input columns.
    LinearProbe {
        feature_count_k: usize,
    },
    Mlp {
        hidden_widths: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub arch: Arch,
    pub input_dim: usize,
}

impl ModelSpec {
    pub fn linear_probe(feature_count_k: usize, input_dim: usize) -> Result<Self, ModelError> {
        let spec = Self {
            arch: Arch::LinearProbe { feature_count_k },
            input_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(hidden_widths: Vec<usize>, input_dim: usize) -> Result<Self, ModelError> {
        let spec = Self {
            arch: Arch::Mlp { hidden_widths },
            input_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be >= 1".into()));
        }
        match &self.arch {
            Arch::LinearProbe { feature_count_k: k } => {
                if *k == 0 || *k > self.input_dim {
                    return Err(ModelError::InvalidSpec(format!(
                        "linear probe needs 1 <= k <= d, got k = {k}, d = {}",
                        self.input_dim
                    )));
                }
            }
            Arch::Mlp { hidden_widths } => {
                if hidden_widths.is_empty() || hidden_widths.contains(&0) {
                    return Err(ModelError::InvalidSpec(
                        "mlp needs at least one hidden layer, all widths >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Parameter count; the monotone "model size" used throughout.
    pub fn compute_proxy(&self) -> f64 {
        self.param_shapes().iter().map(|(r, c)| r * c).sum::<usize>() as f64
    }

    /// Shapes of the parameter matrices, weights then bias per layer.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        match &self.arch {
            Arch::LinearProbe { feature_count_k } => vec![(*feature_count_k, 1), (1, 1)],
            Arch::Mlp { hidden_widths } => {
                let mut shapes = Vec::with_capacity(2 * hidden_widths.len() + 2);
                let mut fan_in = self.input_dim;
                for &w in hidden_widths {
                    shapes.push((fan_in, w));
                    shapes.push((1, w));
                    fan_in = w;
                }
                shapes.push((fan_in, 1));
                shapes.push((1, 1));
                shapes
            }
        }
    }

    pub fn is_mlp(&self) -> bool {
        matches!(self.arch, Arch::Mlp { .. })
    }

    /// Short human-readable tag such as `lp32` or `mlp64x64`.
    pub fn label(&self) -> String {
        match &self.arch {
            Arch::LinearProbe { feature_count_k } => format!("lp{feature_count_k}"),
            Arch::Mlp { hidden_widths } => format!(
                "mlp{}",
                hidden_widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            ),
        }
    }

    /// Initial parameters: zero probe heads, Gaussian MLP weights scaled by 1/sqrt(fan_in)
    /// with zero biases.
    pub fn init_params(&self, stream: RngStream) -> Vec<Matrix> {
        match &self.arch {
            Arch::LinearProbe { .. } => self
                .param_shapes()
                .into_iter()
                .map(|(r, c)| Matrix::zeros(r, c))
                .collect(),
            Arch::Mlp { .. } => {
                let mut rng = stream.rng();
                self.param_shapes()
                    .into_iter()
                    .enumerate()
                    .map(|(i, (r, c))| {
                        if i % 2 == 0 {
                            Matrix::gaussian(r, c, 1.0 / (r as f64).sqrt(), &mut rng)
                        } else {
                            Matrix::zeros(r, c)
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Ordered family of specs with strictly increasing compute proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityLadder {
    specs: Vec<ModelSpec>,
}

impl CapacityLadder {
    pub fn new(specs: Vec<ModelSpec>) -> Result<Self, ModelError> {
        if specs.len() < 2 {
            return Err(ModelError::InvalidLadder("needs at least two specs".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        for w in specs.windows(2) {
            if w[1].compute_proxy() <= w[0].compute_proxy() {
                return Err(ModelError::InvalidLadder(format!(
                    "compute proxy must strictly increase: {} ({}) then {} ({})",
                    w[0].label(),
                    w[0].compute_proxy(),
                    w[1].label(),
                    w[1].compute_proxy()
                )));
            }
        }
        Ok(Self { specs })
    }

    /// Probes with k in {8, ..., 512} (capped at d) followed by one-hidden-layer MLPs of
    /// widths {4, 16, 64, 256}.
    pub fn default_for(input_dim: usize) -> Result<Self, ModelError> {
        let mut specs = Vec::new();
        for k in [8, 16, 32, 64, 128, 256, 512] {
            if k <= input_dim {
                specs.push(ModelSpec::linear_probe(k, input_dim)?);
            }
        }
        let top = specs.last().map_or(0.0, ModelSpec::compute_proxy);
        for w in [4, 16, 64, 256] {
            let s = ModelSpec::mlp(vec![w], input_dim)?;
            if s.compute_proxy() > top {
                specs.push(s);
            }
        }
        Self::new(specs)
    }

    pub fn specs(&self) -> &[ModelSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&ModelSpec> {
        self.specs.get(i)
    }
}

/// Intermediate values kept by a forward pass for backpropagation.
pub struct ForwardCache {
    input: Matrix,
    /// Post-activation outputs of each hidden layer (MLP only).
    hidden: Vec<Matrix>,
    pub logits: Vec<f64>,
}

/// Forward pass of a bare (unwrapped) network.
pub fn forward(spec: &ModelSpec, params: &[Matrix], x: &Matrix) -> Result<ForwardCache, ModelError> {
    if x.cols() != spec.input_dim {
        return Err(ModelError::InputDim {
            expected: spec.input_dim,
            got: x.cols(),
        });
    }
    match &spec.arch {
        Arch::LinearProbe { feature_count_k: k } => {
            let w = params[0].data();
            let b = params[1].data()[0];
            let logits = (0..x.rows()).map(|r| dot(&x.row(r)[..*k], w) + b).collect();
            Ok(ForwardCache {
                input: x.clone(),
                hidden: Vec::new(),
                logits,
            })
        }
        Arch::Mlp { hidden_widths } => {
            let mut hidden = Vec::with_capacity(hidden_widths.len());
            let mut act = x.clone();
            for layer in 0..hidden_widths.len() {
                let mut next = crate::numerics::matmul(&act, &params[2 * layer])?;
                let bias = params[2 * layer + 1].data();
                for r in 0..next.rows() {
                    for (v, bv) in next.row_mut(r).iter_mut().zip(bias) {
                        *v = (*v + bv).max(0.0);
                    }
                }
                hidden.push(next.clone());
                act = next;
            }
            let out_w = &params[2 * hidden_widths.len()];
            let out_b = params[2 * hidden_widths.len() + 1].data()[0];
            let logits = (0..act.rows()).map(|r| dot(act.row(r), out_w.data()) + out_b).collect();
            Ok(ForwardCache {
                input: x.clone(),
                hidden,
                logits,
            })
        }
    }
}

/// Gradients of `sum_i dlogits[i] * logit_i` with respect to every parameter.
pub fn backward(spec: &ModelSpec, params: &[Matrix], cache: &ForwardCache, dlogits: &[f64]) -> Vec<Matrix> {
    let x = &cache.input;
    match &spec.arch {
        Arch::LinearProbe { feature_count_k: k } => {
            let mut gw = Matrix::zeros(*k, 1);
            let mut gb = 0.0;
            for (r, &g) in dlogits.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (acc, &xv) in gw.data_mut().iter_mut().zip(&x.row(r)[..*k]) {
                    *acc += g * xv;
                }
                gb += g;
            }
            vec![gw, Matrix::from_vec(1, 1, vec![gb]).expect("1x1")]
        }
        Arch::Mlp { hidden_widths } => {
            let layers = hidden_widths.len();
            let mut grads = vec![Matrix::zeros(0, 0); 2 * layers + 2];
            let last = &cache.hidden[layers - 1];
            let out_w = &params[2 * layers];
            let mut gw = Matrix::zeros(out_w.rows(), 1);
            for (r, &g) in dlogits.iter().enumerate() {
                for (acc, &h) in gw.data_mut().iter_mut().zip(last.row(r)) {
                    *acc += g * h;
                }
            }
            grads[2 * layers] = gw;
            grads[2 * layers + 1] = Matrix::from_vec(1, 1, vec![dlogits.iter().sum()]).expect("1x1");
            // delta for the last hidden pre-activation
            let mut delta = Matrix::zeros(last.rows(), last.cols());
            for (r, &g) in dlogits.iter().enumerate().take(last.rows()) {
                for ((d, &h), &w) in delta.row_mut(r).iter_mut().zip(last.row(r)).zip(out_w.data()) {
                    *d = if h > 0.0 { g * w } else { 0.0 };
                }
            }
            for layer in (0..layers).rev() {
                let below = if layer == 0 { x } else { &cache.hidden[layer - 1] };
                grads[2 * layer] = crate::numerics::matmul_tn(below, &delta).expect("shapes from forward");
                let mut gb = Matrix::zeros(1, delta.cols());
                for r in 0..delta.rows() {
                    for (acc, &d) in gb.data_mut().iter_mut().zip(delta.row(r)) {
                        *acc += d;
                    }
                }
                grads[2 * layer + 1] = gb;
                if layer > 0 {
                    let mut next = crate::numerics::matmul_nt(&delta, &params[2 * layer]).expect("shapes from forward");
                    for r in 0..next.rows() {
                        for (d, &h) in next.row_mut(r).iter_mut().zip(below.row(r)) {
                            if h <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    delta = next;
                }
            }
            grads
        }
    }
}

/// A trained classifier. When `base` is present the model is a linear probe over the
/// final hidden activations of that (frozen) MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: Vec<Matrix>,
    pub training_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Box<TrainedModel>>,
}

impl TrainedModel {
    pub fn new(spec: ModelSpec, params: Vec<Matrix>, training_seed: u64) -> Result<Self, ModelError> {
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| *s != p.shape()) {
            return Err(ModelError::InvalidSpec(format!(
                "parameter shapes do not match {}",
                spec.label()
            )));
        }
        Ok(Self {
            spec,
            params,
            training_seed,
            base: None,
        })
    }

    /// Freshly initialized (untrained) model.
    pub fn initialized(spec: ModelSpec, stream: RngStream) -> Self {
        let params = spec.init_params(stream);
        Self {
            spec,
            params,
            training_seed: stream.seed,
            base: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.base {
            Some(b) => b.input_dim(),
            None => self.spec.input_dim,
        }
    }

    /// Compute proxy of the whole predictor (base included).
    pub fn compute_proxy(&self) -> f64 {
        self.spec.compute_proxy() + self.base.as_ref().map_or(0.0, |b| b.compute_proxy())
    }

    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>, ModelError> {
        match &self.base {
            Some(base) => {
                let acts = base.final_activations(x)?;
                Ok(forward(&self.spec, &self.params, &acts)?.logits)
            }
            None => Ok(forward(&self.spec, &self.params, x)?.logits),
        }
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<f64>, ModelError> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Activations of the last hidden layer, prior to the output layer.
    pub fn final_activations(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        if self.base.is_some() || !self.spec.is_mlp() {
            return Err(ModelError::InvalidSpec(format!(
                "{} has no hidden activations",
                self.spec.label()
            )));
        }
        let mut cache = forward(&self.spec, &self.params, x)?;
        Ok(cache.hidden.pop().expect("mlp has a hidden layer"))
    }

    /// Re-expresses a k₂-feature probe as an equivalent probe over k₁ ≥ k₂ features by
    /// zero-padding the weights.
    pub fn embed_into(&self, larger: &ModelSpec) -> Result<TrainedModel, ModelError> {
        let err = || ModelError::Embed {
            from: self.spec.label(),
            into: larger.label(),
        };
        let (Arch::LinearProbe { feature_count_k: small }, Arch::LinearProbe { feature_count_k: big }) =
            (&self.spec.arch, &larger.arch)
        else {
            return Err(err());
        };
        if big < small || self.base.is_some() || larger.input_dim != self.spec.input_dim {
            return Err(err());
        }
        let mut w = Matrix::zeros(*big, 1);
        w.data_mut()[..*small].copy_from_slice(self.params[0].data());
        TrainedModel::new(larger.clone(), vec![w, self.params[1].clone()], self.training_seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.clone(),
        };
        let text = serde_json::to_string(&doc).map_err(|e| ModelError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)?;
        let doc: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Format(format!("unsupported format {}", doc.format)));
        }
        let m = doc.model;
        m.spec.validate()?;
        let rebuilt = TrainedModel::new(m.spec.clone(), m.params.clone(), m.training_seed)?;
        Ok(TrainedModel {
            base: m.base,
            ..rebuilt
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: TrainedModel,
}

/// Labels a frozen-probe run is trained against.
#[derive(Debug, Clone, Copy)]
pub enum ProbeLabels<'a> {
    GroundTruth,
    Weak(&'a SoftLabelSet),
}

/// Trains a linear head on the final hidden activations of a frozen MLP. The base
/// model's parameters are left untouched.
pub fn linear_probe_on_frozen(
    base: &TrainedModel,
    bundle: &DatasetBundle,
    train_idx: &[usize],
    labels: ProbeLabels<'_>,
    config: &TrainConfig,
    plan: &EvalPlan<'_>,
    stream: RngStream,
) -> Result<TrainedModel, TrainError> {
    if bundle.is_empty() || train_idx.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let acts = base.final_activations(bundle.features())?;
    let width = acts.cols();
    let feature_bundle = bundle.with_features(acts)?;
    let spec = ModelSpec::linear_probe(width, width)?;
    let supervision = match labels {
        ProbeLabels::GroundTruth => Supervision::GroundTruth,
        ProbeLabels::Weak(l) => Supervision::Soft(l),
    };
    let outcome = training::train(&spec, &feature_bundle, train_idx, supervision, config, plan, stream)?;
    let mut head = outcome.model;
    head.base = Some(Box::new(base.clone()));
    Ok(head)
}
