//! Minibatch training with evaluation curves and early stopping, and the experiment
//! protocols built on it: weak-to-strong runs, bootstrapping chains, and the comparison of
//! probing against finetuning.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DataError, DatasetBundle, Split, TaskSpec};
use crate::losses::{batch_loss, LossError, LossSpec};
use crate::metrics::{agreement, compute_pgr, harden_all, match_rate, AgreementBreakdown};
use crate::models::{self, ModelError, ModelSpec, ProbeLabels, TrainedModel};
use crate::numerics::{sigmoid, NumericsError, Optimizer, OptimizerSpec, RngStream};
use crate::supervision::{make_weak_labels, LabelSource, SoftLabelSet, SupervisionError, WeakSupervisor};

pub const RUN_SCHEMA: &str = "w2s-run/v1";

pub const STREAM_WEAK: u64 = 1;
pub const STREAM_STUDENT: u64 = 2;
pub const STREAM_CEILING: u64 = 3;
pub const STREAM_PARTITION: u64 = 4;
pub const STREAM_PROBE: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("no label for training example {0}")]
    CoverageGap(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("supervision: {0}")]
    Supervision(Box<SupervisionError>),
}

impl From<SupervisionError> for TrainError {
    fn from(e: SupervisionError) -> Self {
        match e {
            SupervisionError::Train(inner) => inner,
            other => TrainError::Supervision(Box::new(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    #[default]
    None,
    /// Keep the checkpoint with the highest holdout agreement with the weak labels.
    WeakValAgreement,
    /// Keep the checkpoint with the highest ground-truth test accuracy. Analysis only.
    GtCheat,
}

fn default_epochs() -> usize {
    4
}

fn default_eval_every() -> u64 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "LossSpec::naive")]
    pub loss: LossSpec,
    #[serde(default)]
    pub early_stop: EarlyStop,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            optimizer: OptimizerSpec::default(),
            loss: LossSpec::naive(),
            early_stop: EarlyStop::None,
            eval_every: default_eval_every(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn with_loss(mut self, loss: LossSpec) -> Self {
        self.loss = loss;
        self
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        (self.epochs * n_train.div_ceil(self.optimizer.batch_size)) as u64
    }
}

/// Training targets: ground truth of the training rows, or a label set covering them.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    GroundTruth,
    Soft(&'a SoftLabelSet),
}

/// What to measure during training. Ground truth is read only for `test` rows.
#[derive(Debug, Clone, Default)]
pub struct EvalPlan<'a> {
    pub test: Vec<usize>,
    pub val: Vec<usize>,
    pub weak: Option<&'a SoftLabelSet>,
}

impl<'a> EvalPlan<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    /// Test and holdout splits of `bundle`, with agreement against `weak` where given.
    pub fn standard(bundle: &DatasetBundle, weak: Option<&'a SoftLabelSet>) -> Self {
        Self {
            test: bundle.indices(Split::Test),
            val: bundle.indices(Split::HoldoutVal),
            weak,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub train_loss: f64,
    pub test_acc_gt: Option<f64>,
    pub test_agreement_weak: Option<f64>,
    pub val_agreement_weak: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Curves {
    pub points: Vec<CurvePoint>,
}

impl Curves {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Highest test accuracy over the curve.
    pub fn best_test_acc(&self) -> Option<f64> {
        self.points.iter().filter_map(|p| p.test_acc_gt).reduce(f64::max)
    }

    pub fn min_test_acc(&self) -> Option<f64> {
        self.points.iter().filter_map(|p| p.test_acc_gt).reduce(f64::min)
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.points.last().and_then(|p| p.test_acc_gt)
    }

    /// Earliest point with the highest holdout agreement with the weak labels.
    pub fn weak_val_selected(&self) -> Option<&CurvePoint> {
        let mut best: Option<&CurvePoint> = None;
        for p in &self.points {
            if let Some(v) = p.val_agreement_weak {
                if best.and_then(|b| b.val_agreement_weak).is_none_or(|b| v > b) {
                    best = Some(p);
                }
            }
        }
        best
    }

    /// Test accuracy at the weak-agreement checkpoint.
    pub fn early_stopped_test_acc(&self) -> Option<f64> {
        self.weak_val_selected().and_then(|p| p.test_acc_gt)
    }

    /// Long-format rows (step, metric, value).
    pub fn long_rows(&self) -> Vec<(u64, &'static str, f64)> {
        let mut rows = vec![];
        for p in &self.points {
            rows.push((p.step, "train_loss", p.train_loss));
            for (name, v) in [
                ("test_acc_gt", p.test_acc_gt),
                ("test_agreement_weak", p.test_agreement_weak),
                ("val_agreement_weak", p.val_agreement_weak),
            ] {
                if let Some(v) = v {
                    rows.push((p.step, name, v));
                }
            }
        }
        rows
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    /// The model selected by the early-stopping mode (the final model for `None`).
    pub model: TrainedModel,
    pub final_model: TrainedModel,
    pub curves: Curves,
    pub total_steps: u64,
    pub selected_step: u64,
}

fn targets_for(
    bundle: &DatasetBundle,
    train_idx: &[usize],
    supervision: Supervision<'_>,
) -> Result<Vec<f64>, TrainError> {
    match supervision {
        Supervision::GroundTruth => Ok(bundle.labels_at(train_idx).into_iter().map(f64::from).collect()),
        Supervision::Soft(labels) => train_idx
            .iter()
            .map(|&i| labels.prob_of(i).ok_or(TrainError::CoverageGap(i)))
            .collect(),
    }
}

struct Evaluator<'a> {
    test_x: Option<crate::numerics::Matrix>,
    test_gt: Vec<u8>,
    test_weak: Option<Vec<u8>>,
    val_x: Option<crate::numerics::Matrix>,
    val_weak: Option<Vec<u8>>,
    _plan: &'a EvalPlan<'a>,
}

impl<'a> Evaluator<'a> {
    fn new(bundle: &DatasetBundle, plan: &'a EvalPlan<'a>) -> Result<Self, TrainError> {
        let weak_on = |idx: &[usize]| -> Result<Option<Vec<u8>>, TrainError> {
            match plan.weak {
                Some(w) if !idx.is_empty() => idx
                    .iter()
                    .map(|&i| w.hardened_of(i).ok_or(TrainError::CoverageGap(i)))
                    .collect::<Result<Vec<_>, _>>()
                    .map(Some),
                _ => Ok(None),
            }
        };
        let rows = |idx: &[usize]| (!idx.is_empty()).then(|| bundle.features().select_rows(idx));
        Ok(Self {
            test_x: rows(&plan.test),
            test_gt: if plan.test.is_empty() {
                vec![]
            } else {
                bundle.labels_at(&plan.test)
            },
            test_weak: weak_on(&plan.test)?,
            val_x: rows(&plan.val),
            val_weak: weak_on(&plan.val)?,
            _plan: plan,
        })
    }

    fn point(&self, model: &TrainedModel, step: u64, train_loss: f64) -> Result<CurvePoint, TrainError> {
        let mut point = CurvePoint {
            step,
            train_loss,
            test_acc_gt: None,
            test_agreement_weak: None,
            val_agreement_weak: None,
        };
        if let Some(x) = &self.test_x {
            let pred = harden_all(&model.predict_proba(x)?);
            point.test_acc_gt = match_rate(&pred, &self.test_gt);
            if let Some(w) = &self.test_weak {
                point.test_agreement_weak = match_rate(&pred, w);
            }
        }
        if let (Some(x), Some(w)) = (&self.val_x, &self.val_weak) {
            point.val_agreement_weak = match_rate(&harden_all(&model.predict_proba(x)?), w);
        }
        Ok(point)
    }
}

/// Trains `spec` on `train_idx` with minibatches drawn from `stream`. Evaluation points are
/// recorded every `eval_every` steps and at the last step.
pub fn train(
    spec: &ModelSpec,
    bundle: &DatasetBundle,
    train_idx: &[usize],
    supervision: Supervision<'_>,
    config: &TrainConfig,
    plan: &EvalPlan<'_>,
    stream: RngStream,
) -> Result<Outcome, TrainError> {
    config.validate()?;
    spec.validate()?;
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if spec.input_dim != bundle.dim() {
        return Err(ModelError::InputDim {
            expected: spec.input_dim,
            got: bundle.dim(),
        }
        .into());
    }
    match config.early_stop {
        EarlyStop::WeakValAgreement if plan.val.is_empty() || plan.weak.is_none() => {
            return Err(TrainError::InvalidConfig(
                "weak_val_agreement early stopping needs holdout rows and weak labels".into(),
            ))
        }
        EarlyStop::GtCheat if plan.test.is_empty() => {
            return Err(TrainError::InvalidConfig(
                "gt_cheat early stopping needs test rows".into(),
            ))
        }
        _ => {}
    }
    let targets = targets_for(bundle, train_idx, supervision)?;
    let evaluator = Evaluator::new(bundle, plan)?;
    let x_train = bundle.features().select_rows(train_idx);

    let mut model = TrainedModel::initialized(spec.clone(), stream.child(0));
    model.training_seed = stream.seed;
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &model.params)?;
    let mut shuffle_rng = stream.child(1).rng();
    let schedule = config.loss.schedule();
    let total = config.total_steps(train_idx.len());
    let batch = config.optimizer.batch_size;

    let mut curves = Curves::default();
    let mut best: Option<(f64, u64, Vec<crate::numerics::Matrix>)> = None;
    let mut step = 0u64;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch) {
            let xb = x_train.select_rows(chunk);
            let cache = models::forward(spec, &model.params, &xb)?;
            let probs: Vec<f64> = cache.logits.iter().map(|&z| sigmoid(z)).collect();
            let wb: Vec<f64> = chunk.iter().map(|&p| targets[p]).collect();
            let alpha = schedule.alpha(step as f64 / total as f64);
            let loss = batch_loss(&config.loss, &probs, &wb, alpha)?;
            if !loss.value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    value: loss.value,
                });
            }
            let grads = models::backward(spec, &model.params, &cache, &loss.dlogits);
            optimizer.step(&mut model.params, &grads);
            step += 1;
            loss_sum += loss.value;
            loss_count += 1;
            if step.is_multiple_of(config.eval_every) || step == total {
                let point = evaluator.point(&model, step, loss_sum / loss_count as f64)?;
                (loss_sum, loss_count) = (0.0, 0);
                let score = match config.early_stop {
                    EarlyStop::None => None,
                    EarlyStop::WeakValAgreement => point.val_agreement_weak,
                    EarlyStop::GtCheat => point.test_acc_gt,
                };
                if let Some(s) = score {
                    if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                        best = Some((s, step, model.params.clone()));
                    }
                }
                curves.points.push(point);
            }
        }
    }
    let (selected, selected_step) = match best {
        Some((_, at, params)) => (TrainedModel::new(spec.clone(), params, stream.seed)?, at),
        None => (model.clone(), total),
    };
    Ok(Outcome {
        model: selected,
        final_model: model,
        curves,
        total_steps: total,
        selected_step,
    })
}

/// Stream used for the student at `stage` of a run (stage 0 for a direct run).
pub fn student_stream(seed: u64, stage: u64) -> RngStream {
    RngStream::new(seed, STREAM_STUDENT).child(stage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamIds {
    pub weak: Option<(u64, u64)>,
    pub student: (u64, u64),
    pub ceiling: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub run_id: String,
    pub kind: String,
    pub weak: String,
    pub strong: String,
    pub weak_proxy: f64,
    pub strong_proxy: f64,
    pub loss: String,
    pub label_source: String,
    pub seed: u64,
    pub weak_acc: f64,
    pub ceiling_acc: f64,
    pub w2s_acc_final: f64,
    pub w2s_acc_best: f64,
    pub w2s_acc_early_stopped: f64,
    pub pgr_final: Option<f64>,
    pub pgr_best: Option<f64>,
    pub pgr_early_stopped: Option<f64>,
    pub pgr_undefined: bool,
    pub agreement: AgreementBreakdown,
    pub early_stop: EarlyStop,
    /// Set when the returned student was chosen with ground-truth test access.
    pub analysis_only: bool,
    pub curves: Curves,
    pub config: TrainConfig,
    pub task: TaskSpec,
    pub streams: StreamIds,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub tool_version: String,
}

impl RunRecord {
    /// Canonical sort key for merging parallel results.
    pub fn sort_key(&self) -> (String, String, String, String, u64, String) {
        (
            self.kind.clone(),
            self.weak.clone(),
            self.strong.clone(),
            self.loss.clone(),
            self.seed,
            self.run_id.clone(),
        )
    }
}

/// A student trained on weak labels and scored on the test split.
#[derive(Debug, Clone)]
pub struct StudentResult {
    pub outcome: Outcome,
    pub acc_selected: f64,
    pub acc_final: f64,
    pub acc_best: f64,
    pub acc_early_stopped: f64,
    pub agreement: AgreementBreakdown,
}

/// Trains `strong_spec` on `labels` over `train_idx` and measures it against ground truth
/// and the labels on the test split.
pub fn train_student(
    strong_spec: &ModelSpec,
    bundle: &DatasetBundle,
    train_idx: &[usize],
    labels: &SoftLabelSet,
    config: &TrainConfig,
    stream: RngStream,
) -> Result<StudentResult, TrainError> {
    let plan = EvalPlan::standard(bundle, Some(labels));
    let outcome = train(
        strong_spec,
        bundle,
        train_idx,
        Supervision::Soft(labels),
        config,
        &plan,
        stream,
    )?;
    let test = &plan.test;
    let gt = bundle.labels_at(test);
    let pred = harden_all(&outcome.model.predict_proba(&bundle.features().select_rows(test))?);
    let weak: Vec<u8> = test
        .iter()
        .map(|&i| labels.hardened_of(i).ok_or(TrainError::CoverageGap(i)))
        .collect::<Result<_, _>>()?;
    let agreement = agreement(&pred, &weak, &gt).expect("aligned by construction");
    let acc_selected = match_rate(&pred, &gt).ok_or(TrainError::InsufficientData("empty test split".into()))?;
    let acc_final = outcome.curves.final_test_acc().unwrap_or(acc_selected);
    Ok(StudentResult {
        acc_best: outcome.curves.best_test_acc().unwrap_or(acc_final),
        acc_early_stopped: outcome.curves.early_stopped_test_acc().unwrap_or(acc_final),
        acc_selected,
        acc_final,
        agreement,
        outcome,
    })
}

/// Hardened accuracy of `model` on the test split.
pub fn test_accuracy(model: &TrainedModel, bundle: &DatasetBundle) -> Result<f64, TrainError> {
    let test = bundle.indices(Split::Test);
    let pred = harden_all(&model.predict_proba(&bundle.features().select_rows(&test))?);
    match_rate(&pred, &bundle.labels_at(&test)).ok_or(TrainError::InsufficientData("empty test split".into()))
}

/// Ground-truth training of `spec` on w2s_train; returns the model and its test accuracy.
pub fn train_ceiling(
    spec: &ModelSpec,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    stream: RngStream,
) -> Result<(TrainedModel, f64), TrainError> {
    let mut cfg = config.clone();
    cfg.early_stop = EarlyStop::None;
    cfg.loss = LossSpec::naive();
    let outcome = train(
        spec,
        bundle,
        &bundle.indices(Split::W2sTrain),
        Supervision::GroundTruth,
        &cfg,
        &EvalPlan::none(),
        stream,
    )?;
    let acc = test_accuracy(&outcome.model, bundle)?;
    Ok((outcome.model, acc))
}

/// Inputs shared by every record of one weak-to-strong comparison.
pub struct RecordContext<'a> {
    pub kind: &'a str,
    pub weak: &'a str,
    pub weak_proxy: f64,
    pub weak_acc: f64,
    pub ceiling_acc: f64,
    pub streams: StreamIds,
}

pub fn assemble_record(
    ctx: RecordContext<'_>,
    strong_spec: &ModelSpec,
    labels: &SoftLabelSet,
    student: StudentResult,
    config: &TrainConfig,
    bundle: &DatasetBundle,
) -> RunRecord {
    let loss = config.loss.variant.as_str().to_string();
    // Equal specs have no capability gap, whatever the sampling noise in the two accuracies.
    let same_spec = ctx.weak == strong_spec.label();
    let pgr = |acc| {
        if same_spec {
            None
        } else {
            compute_pgr(ctx.weak_acc, acc, ctx.ceiling_acc)
        }
    };
    let run_id = format!(
        "{}:{}->{}:{}:{}:s{}",
        ctx.kind,
        ctx.weak,
        strong_spec.label(),
        loss,
        labels.source(),
        config.seed
    );
    RunRecord {
        schema: RUN_SCHEMA.into(),
        run_id,
        kind: ctx.kind.into(),
        weak: ctx.weak.into(),
        strong: strong_spec.label(),
        weak_proxy: ctx.weak_proxy,
        strong_proxy: strong_spec.compute_proxy(),
        loss,
        label_source: labels.source().to_string(),
        seed: config.seed,
        weak_acc: ctx.weak_acc,
        ceiling_acc: ctx.ceiling_acc,
        w2s_acc_final: student.acc_final,
        w2s_acc_best: student.acc_best,
        w2s_acc_early_stopped: student.acc_early_stopped,
        pgr_final: pgr(student.acc_final),
        pgr_best: pgr(student.acc_best),
        pgr_early_stopped: pgr(student.acc_early_stopped),
        pgr_undefined: pgr(student.acc_final).is_none(),
        agreement: student.agreement,
        early_stop: config.early_stop,
        analysis_only: config.early_stop == EarlyStop::GtCheat,
        curves: student.outcome.curves,
        config: config.clone(),
        task: bundle.spec().clone(),
        streams: ctx.streams,
        config_hash: String::new(),
        tool_version: String::new(),
    }
}

/// Student stage of a run whose weak supervisor and ceiling accuracy are already known.
/// The loss's automatic α_max is resolved from the compute ratio.
pub fn run_w2s_with(
    weak: &WeakSupervisor,
    ceiling_acc: f64,
    strong_spec: &ModelSpec,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<RunRecord, TrainError> {
    let ratio = strong_spec.compute_proxy() / weak.model.compute_proxy();
    let mut cfg = config.clone();
    cfg.loss = config.loss.resolved(ratio);
    let stream = student_stream(cfg.seed, 0);
    let student = train_student(
        strong_spec,
        bundle,
        &bundle.indices(Split::W2sTrain),
        &weak.labels,
        &cfg,
        stream,
    )?;
    let ctx = RecordContext {
        kind: "w2s",
        weak: &weak.model.spec.label(),
        weak_proxy: weak.model.compute_proxy(),
        weak_acc: weak.test_accuracy,
        ceiling_acc,
        streams: StreamIds {
            weak: Some((cfg.seed, STREAM_WEAK)),
            student: (stream.seed, stream.stream_id),
            ceiling: Some((cfg.seed, STREAM_CEILING)),
        },
    };
    Ok(assemble_record(ctx, strong_spec, &weak.labels, student, &cfg, bundle))
}

/// Weak supervisor for `config.seed`, trained with the naive loss.
pub fn weak_supervisor(
    weak_spec: &ModelSpec,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<WeakSupervisor, TrainError> {
    let mut cfg = config.clone();
    cfg.loss = LossSpec::naive();
    Ok(make_weak_labels(
        weak_spec,
        bundle,
        &cfg,
        RngStream::new(config.seed, STREAM_WEAK),
    )?)
}

/// Ceiling accuracy for `config.seed`.
pub fn ceiling_accuracy(spec: &ModelSpec, bundle: &DatasetBundle, config: &TrainConfig) -> Result<f64, TrainError> {
    Ok(train_ceiling(spec, bundle, config, RngStream::new(config.seed, STREAM_CEILING))?.1)
}

/// Weak supervisor, student on its labels, and ground-truth ceiling, on disjoint streams.
pub fn run_w2s(
    weak_spec: &ModelSpec,
    strong_spec: &ModelSpec,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<RunRecord, TrainError> {
    let weak = weak_supervisor(weak_spec, bundle, config)?;
    let ceiling = ceiling_accuracy(strong_spec, bundle, config)?;
    run_w2s_with(&weak, ceiling, strong_spec, bundle, config)
}

/// Splits w2s_train into `parts` disjoint, sorted, near-equal chunks.
pub fn partition_w2s(bundle: &DatasetBundle, parts: usize, seed: u64) -> Result<Vec<Vec<usize>>, TrainError> {
    let mut idx = bundle.indices(Split::W2sTrain);
    if parts == 0 || idx.len() < parts {
        return Err(TrainError::InsufficientData(format!(
            "{} w2s_train examples cannot fill {parts} stages",
            idx.len()
        )));
    }
    if parts > 1 {
        idx.shuffle(&mut RngStream::new(seed, STREAM_PARTITION).rng());
    }
    let base = idx.len() / parts;
    let extra = idx.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        let mut chunk = idx[start..start + len].to_vec();
        chunk.sort_unstable();
        out.push(chunk);
        start += len;
    }
    Ok(out)
}

/// Chains weak-to-strong steps through `specs`. Stage j trains `specs[j]` on labels that the
/// previous stage's model emits on the j-th disjoint part of w2s_train. Intermediate stages use
/// `intermediate_loss`; the last stage uses `config.loss`.
pub fn bootstrap_chain(
    specs: &[ModelSpec],
    bundle: &DatasetBundle,
    config: &TrainConfig,
    intermediate_loss: &LossSpec,
) -> Result<Vec<RunRecord>, TrainError> {
    if specs.len() < 2 {
        return Err(TrainError::InvalidConfig("a chain needs at least two specs".into()));
    }
    if specs.windows(2).any(|w| w[1].compute_proxy() <= w[0].compute_proxy()) {
        return Err(TrainError::InvalidConfig("chain compute proxies must increase".into()));
    }
    let parts = partition_w2s(bundle, specs.len() - 1, config.seed)?;
    let weak = weak_supervisor(&specs[0], bundle, config)?;
    let mut supervisor = weak.model.clone();
    let mut supervisor_acc = weak.test_accuracy;
    let mut labels = weak.labels.clone();
    let eval_rows: Vec<usize> = bundle
        .indices(Split::HoldoutVal)
        .into_iter()
        .chain(bundle.indices(Split::Test))
        .collect();
    let mut records = Vec::with_capacity(parts.len());
    for (stage, part) in parts.iter().enumerate() {
        let strong = &specs[stage + 1];
        if stage > 0 {
            let rows: Vec<usize> = part.iter().chain(&eval_rows).copied().collect();
            let probs = supervisor.predict_proba(&bundle.features().select_rows(&rows))?;
            let source = LabelSource::WeakModel {
                spec: supervisor.spec.label(),
                compute_proxy: supervisor.compute_proxy(),
            };
            labels = SoftLabelSet::new(rows, probs, source)?;
        }
        let mut cfg = config.clone();
        let ratio = strong.compute_proxy() / supervisor.compute_proxy();
        let last = stage + 1 == parts.len();
        cfg.loss = if last {
            config.loss.resolved(ratio)
        } else {
            intermediate_loss.resolved(ratio)
        };
        let stream = student_stream(cfg.seed, stage as u64);
        let student = train_student(strong, bundle, part, &labels, &cfg, stream)?;
        let ceiling_acc = ceiling_accuracy(strong, bundle, config)?;
        let next_model = student.outcome.model.clone();
        let next_acc = student.acc_selected;
        let kind = if parts.len() == 1 { "w2s" } else { "bootstrap" };
        let ctx = RecordContext {
            kind,
            weak: &supervisor.spec.label(),
            weak_proxy: supervisor.compute_proxy(),
            weak_acc: supervisor_acc,
            ceiling_acc,
            streams: StreamIds {
                weak: Some((cfg.seed, STREAM_WEAK)),
                student: (stream.seed, stream.stream_id),
                ceiling: Some((cfg.seed, STREAM_CEILING)),
            },
        };
        let mut record = assemble_record(ctx, strong, &labels, student, &cfg, bundle);
        if parts.len() > 1 {
            record.run_id = format!("{}:stage{stage}", record.run_id);
        }
        records.push(record);
        supervisor = next_model;
        supervisor_acc = next_acc;
    }
    Ok(records)
}

/// Test accuracies of the five ways of using the strong model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyAccuracies {
    pub lp_weak: f64,
    pub lp_gt: f64,
    pub ft_weak: f64,
    pub ft_weak_lp_gt: f64,
    pub ft_gt: f64,
    pub weak: f64,
}

fn probe_accuracy(
    base: &TrainedModel,
    bundle: &DatasetBundle,
    labels: ProbeLabels<'_>,
    config: &TrainConfig,
    stream: RngStream,
) -> Result<f64, TrainError> {
    let train_idx = bundle.indices(Split::W2sTrain);
    let probe = models::linear_probe_on_frozen(base, bundle, &train_idx, labels, config, &EvalPlan::none(), stream)?;
    test_accuracy(&probe, bundle)
}

/// Probing (lp) uses the strong spec at initialization as the frozen representation;
/// finetuning (ft) trains all of it. All probes and students use `config` with the naive loss.
pub fn strategy_compare(
    weak_spec: &ModelSpec,
    strong_spec: &ModelSpec,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<StrategyAccuracies, TrainError> {
    if !strong_spec.is_mlp() {
        return Err(TrainError::InvalidConfig(
            "strategy comparison needs an mlp strong spec".into(),
        ));
    }
    let mut cfg = config.clone();
    cfg.loss = LossSpec::naive();
    cfg.early_stop = EarlyStop::None;
    let weak = weak_supervisor(weak_spec, bundle, &cfg)?;
    let init = TrainedModel::initialized(strong_spec.clone(), student_stream(cfg.seed, 0).child(0));
    let probe_stream = RngStream::new(cfg.seed, STREAM_PROBE);
    let lp_weak = probe_accuracy(
        &init,
        bundle,
        ProbeLabels::Weak(&weak.labels),
        &cfg,
        probe_stream.child(0),
    )?;
    let lp_gt = probe_accuracy(&init, bundle, ProbeLabels::GroundTruth, &cfg, probe_stream.child(1))?;
    let student = train_student(
        strong_spec,
        bundle,
        &bundle.indices(Split::W2sTrain),
        &weak.labels,
        &cfg,
        student_stream(cfg.seed, 0),
    )?;
    let ft_weak_lp_gt = probe_accuracy(
        &student.outcome.model,
        bundle,
        ProbeLabels::GroundTruth,
        &cfg,
        probe_stream.child(2),
    )?;
    let ft_gt = ceiling_accuracy(strong_spec, bundle, &cfg)?;
    Ok(StrategyAccuracies {
        lp_weak,
        lp_gt,
        ft_weak: student.acc_final,
        ft_weak_lp_gt,
        ft_gt,
        weak: weak.test_accuracy,
    })
}

/// Appends records as JSON lines.
pub fn append_jsonl(path: &Path, records: &[RunRecord]) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(std::io::Error::other)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> std::io::Result<Vec<RunRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
