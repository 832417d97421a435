//! Weak labels: trained weak supervisors, synthetic error-structured labelers, label-noise
//! mixtures, and confidence filtering.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DatasetBundle, Split};
use crate::models::{ModelError, ModelSpec, TrainedModel};
use crate::numerics::RngStream;
use crate::training::{self, EvalPlan, Supervision, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("invalid labels: {0}")]
    InvalidLabels(String),
    #[error("policy {0} needs a reference ceiling model")]
    MissingReference(ErrorPolicyKind),
    #[error("bundle has no difficulty scores")]
    MissingDifficulty,
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("class {0} has no examples")]
    EmptyClass(u8),
    #[error("target error rate {0} outside [0, 0.5]")]
    InvalidRate(f64),
    #[error("only {available} correctly classified examples, {needed} flips requested")]
    NotEnoughCorrect { available: usize, needed: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPolicyKind {
    RandomFlip,
    HardestByDifficulty,
    EasiestByDifficulty,
    StrongGtUnconfident,
    StrongGtConfidentlyCorrect,
}

impl ErrorPolicyKind {
    pub const ALL: [ErrorPolicyKind; 5] = [
        ErrorPolicyKind::RandomFlip,
        ErrorPolicyKind::HardestByDifficulty,
        ErrorPolicyKind::EasiestByDifficulty,
        ErrorPolicyKind::StrongGtUnconfident,
        ErrorPolicyKind::StrongGtConfidentlyCorrect,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorPolicyKind::RandomFlip => "random_flip",
            ErrorPolicyKind::HardestByDifficulty => "hardest_by_difficulty",
            ErrorPolicyKind::EasiestByDifficulty => "easiest_by_difficulty",
            ErrorPolicyKind::StrongGtUnconfident => "strong_gt_unconfident",
            ErrorPolicyKind::StrongGtConfidentlyCorrect => "strong_gt_confidently_correct",
        }
    }

    pub fn needs_reference(&self) -> bool {
        matches!(
            self,
            ErrorPolicyKind::StrongGtUnconfident | ErrorPolicyKind::StrongGtConfidentlyCorrect
        )
    }
}

impl fmt::Display for ErrorPolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPolicy {
    pub kind: ErrorPolicyKind,
    pub target_error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSource {
    /// Ground truth viewed as a label set (ceilings and tests).
    Ground,
    WeakModel {
        spec: String,
        compute_proxy: f64,
    },
    Synthetic {
        policy: ErrorPolicyKind,
        target_error_rate: f64,
    },
    /// Hardened labels from `base` with a further fraction flipped at random.
    Mixture {
        base: Box<LabelSource>,
        flip_rate: f64,
    },
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSource::Ground => f.write_str("ground"),
            LabelSource::WeakModel { spec, .. } => write!(f, "weak_model:{spec}"),
            LabelSource::Synthetic {
                policy,
                target_error_rate,
            } => {
                write!(f, "synthetic:{policy}@{target_error_rate}")
            }
            LabelSource::Mixture { base, flip_rate } => write!(f, "mixture:{base}+flip@{flip_rate}"),
        }
    }
}

/// Probability of class 1 for a set of bundle rows, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelSet {
    ids: Vec<usize>,
    probs: Vec<f64>,
    hardened: Vec<u8>,
    source: LabelSource,
    #[serde(skip)]
    lookup: HashMap<usize, usize>,
}

impl SoftLabelSet {
    /// Hardened view is `1[prob > 0.5]`.
    pub fn new(ids: Vec<usize>, probs: Vec<f64>, source: LabelSource) -> Result<Self, SupervisionError> {
        let hardened = probs.iter().map(|&p| u8::from(p > 0.5)).collect();
        Self::with_hardened(ids, probs, hardened, source)
    }

    pub fn with_hardened(
        ids: Vec<usize>,
        probs: Vec<f64>,
        hardened: Vec<u8>,
        source: LabelSource,
    ) -> Result<Self, SupervisionError> {
        if ids.len() != probs.len() || ids.len() != hardened.len() {
            return Err(SupervisionError::InvalidLabels("column lengths disagree".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(SupervisionError::InvalidLabels(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        if hardened.iter().any(|&h| h > 1) {
            return Err(SupervisionError::InvalidLabels("hardened labels must be 0 or 1".into()));
        }
        let mut lookup = HashMap::with_capacity(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            if lookup.insert(id, pos).is_some() {
                return Err(SupervisionError::InvalidLabels(format!("duplicate example {id}")));
            }
        }
        Ok(Self {
            ids,
            probs,
            hardened,
            source,
            lookup,
        })
    }

    fn from_hard(ids: Vec<usize>, hard: Vec<u8>, source: LabelSource) -> Self {
        let probs = hard.iter().map(|&h| f64::from(h)).collect();
        Self::with_hardened(ids, probs, hard, source).expect("hard labels are valid")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn hardened(&self) -> &[u8] {
        &self.hardened
    }

    pub fn source(&self) -> &LabelSource {
        &self.source
    }

    pub fn prob_of(&self, id: usize) -> Option<f64> {
        self.position(id).map(|p| self.probs[p])
    }

    pub fn hardened_of(&self, id: usize) -> Option<u8> {
        self.position(id).map(|p| self.hardened[p])
    }

    fn position(&self, id: usize) -> Option<usize> {
        if self.lookup.len() == self.ids.len() {
            self.lookup.get(&id).copied()
        } else {
            // deserialized copies have no lookup table
            self.ids.iter().position(|&i| i == id)
        }
    }

    /// The same labels with probabilities replaced by their hardened values.
    pub fn to_hard(&self) -> SoftLabelSet {
        Self::from_hard(self.ids.clone(), self.hardened.clone(), self.source.clone())
    }

    /// Restriction to `ids`; every id must be covered.
    pub fn restrict(&self, ids: &[usize]) -> Result<SoftLabelSet, SupervisionError> {
        let mut probs = Vec::with_capacity(ids.len());
        let mut hard = Vec::with_capacity(ids.len());
        for &id in ids {
            let pos = self
                .position(id)
                .ok_or_else(|| SupervisionError::InvalidLabels(format!("example {id} not covered")))?;
            probs.push(self.probs[pos]);
            hard.push(self.hardened[pos]);
        }
        Self::with_hardened(ids.to_vec(), probs, hard, self.source.clone())
    }

    /// Fraction of covered examples in `ids` whose hardened label matches ground truth.
    pub fn accuracy(&self, bundle: &DatasetBundle, ids: &[usize]) -> Option<f64> {
        let covered: Vec<usize> = ids.iter().copied().filter(|&i| self.position(i).is_some()).collect();
        if covered.is_empty() {
            return None;
        }
        let gt = bundle.labels_at(&covered);
        let hits = covered
            .iter()
            .zip(&gt)
            .filter(|(&i, &y)| self.hardened_of(i) == Some(y))
            .count();
        Some(hits as f64 / covered.len() as f64)
    }

    /// CSV with columns example_id, prob, hardened, source.
    pub fn write_csv(&self, path: &Path) -> Result<(), SupervisionError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["example_id", "prob", "hardened", "source"])?;
        let source = self.source.to_string();
        for ((id, p), h) in self.ids.iter().zip(&self.probs).zip(&self.hardened) {
            w.write_record([id.to_string(), p.to_string(), h.to_string(), source.clone()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// A trained weak supervisor and the labels it emitted.
#[derive(Debug, Clone)]
pub struct WeakSupervisor {
    pub model: TrainedModel,
    pub labels: SoftLabelSet,
    pub test_accuracy: f64,
}

/// Trains `weak_spec` on weak_train ground truth and emits probabilities for w2s_train,
/// holdout_val and test. Only weak_train labels are read while producing the labels.
pub fn emit_weak_labels(
    weak_spec: &ModelSpec,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    stream: RngStream,
) -> Result<(TrainedModel, SoftLabelSet), SupervisionError> {
    let train_idx = bundle.indices(Split::WeakTrain);
    if train_idx.is_empty() {
        return Err(SupervisionError::EmptySplit(Split::WeakTrain));
    }
    if bundle.indices(Split::W2sTrain).is_empty() {
        return Err(SupervisionError::EmptySplit(Split::W2sTrain));
    }
    let mut cfg = config.clone();
    cfg.early_stop = training::EarlyStop::None;
    let outcome = training::train(
        weak_spec,
        bundle,
        &train_idx,
        Supervision::GroundTruth,
        &cfg,
        &EvalPlan::none(),
        stream,
    )?;
    let ids: Vec<usize> = (0..bundle.len())
        .filter(|&i| bundle.split_of(i) != Split::WeakTrain)
        .collect();
    let probs = outcome.model.predict_proba(&bundle.features().select_rows(&ids))?;
    let source = LabelSource::WeakModel {
        spec: weak_spec.label(),
        compute_proxy: weak_spec.compute_proxy(),
    };
    let labels = SoftLabelSet::new(ids, probs, source)?;
    Ok((outcome.model, labels))
}

/// `emit_weak_labels` followed by scoring the weak model on the test split.
pub fn make_weak_labels(
    weak_spec: &ModelSpec,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    stream: RngStream,
) -> Result<WeakSupervisor, SupervisionError> {
    let (model, labels) = emit_weak_labels(weak_spec, bundle, config, stream)?;
    let test_accuracy = labels
        .accuracy(bundle, &bundle.indices(Split::Test))
        .ok_or(SupervisionError::EmptySplit(Split::Test))?;
    Ok(WeakSupervisor {
        model,
        labels,
        test_accuracy,
    })
}

/// Example ids ordered by `key` descending, ties by ascending id.
fn rank_desc(ids: &[usize], key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut order = ids.to_vec();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    order
}

/// Which of `ids` to flip under `policy`, exactly ⌊rate × |ids|⌋ of them.
pub fn select_flips(
    bundle: &DatasetBundle,
    ids: &[usize],
    policy: ErrorPolicy,
    reference: Option<&TrainedModel>,
    stream: RngStream,
) -> Result<Vec<usize>, SupervisionError> {
    let rate = policy.target_error_rate;
    if !(0.0..=0.5).contains(&rate) {
        return Err(SupervisionError::InvalidRate(rate));
    }
    let count = (rate * ids.len() as f64 + 1e-9).floor() as usize;
    let reference_probs = || -> Result<HashMap<usize, f64>, SupervisionError> {
        let model = reference.ok_or(SupervisionError::MissingReference(policy.kind))?;
        let probs = model.predict_proba(&bundle.features().select_rows(ids))?;
        Ok(ids.iter().copied().zip(probs).collect())
    };
    let chosen = match policy.kind {
        ErrorPolicyKind::RandomFlip => {
            let mut order = ids.to_vec();
            order.shuffle(&mut stream.rng());
            order.truncate(count);
            order
        }
        ErrorPolicyKind::HardestByDifficulty | ErrorPolicyKind::EasiestByDifficulty => {
            let diff = bundle.difficulty().ok_or(SupervisionError::MissingDifficulty)?;
            let sign = if policy.kind == ErrorPolicyKind::HardestByDifficulty {
                1.0
            } else {
                -1.0
            };
            let mut order = rank_desc(ids, |i| sign * diff[i]);
            order.truncate(count);
            order
        }
        ErrorPolicyKind::StrongGtUnconfident => {
            let probs = reference_probs()?;
            let mut order = rank_desc(ids, |i| -(probs[&i] - 0.5).abs());
            order.truncate(count);
            order
        }
        ErrorPolicyKind::StrongGtConfidentlyCorrect => {
            let probs = reference_probs()?;
            let correct: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|&i| u8::from(probs[&i] > 0.5) == bundle.label(i))
                .collect();
            if correct.len() < count {
                return Err(SupervisionError::NotEnoughCorrect {
                    available: correct.len(),
                    needed: count,
                });
            }
            let mut order = rank_desc(&correct, |i| (probs[&i] - 0.5).abs());
            order.truncate(count);
            order
        }
    };
    let mut chosen = chosen;
    chosen.sort_unstable();
    Ok(chosen)
}

/// Ground truth on `ids` with the policy's flips applied; hard labels.
pub fn make_synthetic_labels(
    bundle: &DatasetBundle,
    ids: &[usize],
    policy: ErrorPolicy,
    reference: Option<&TrainedModel>,
    stream: RngStream,
) -> Result<SoftLabelSet, SupervisionError> {
    let flips = select_flips(bundle, ids, policy, reference, stream)?;
    let flip_set: std::collections::HashSet<usize> = flips.into_iter().collect();
    let hard = bundle
        .labels_at(ids)
        .into_iter()
        .zip(ids)
        .map(|(y, i)| if flip_set.contains(i) { 1 - y } else { y })
        .collect();
    Ok(SoftLabelSet::from_hard(
        ids.to_vec(),
        hard,
        LabelSource::Synthetic {
            policy: policy.kind,
            target_error_rate: policy.target_error_rate,
        },
    ))
}

/// Synthetic labels for each of `splits`, flipping ⌊rate × n_split⌋ examples per split.
pub fn make_synthetic_labels_for_splits(
    bundle: &DatasetBundle,
    splits: &[Split],
    policy: ErrorPolicy,
    reference: Option<&TrainedModel>,
    stream: RngStream,
) -> Result<SoftLabelSet, SupervisionError> {
    let (mut ids, mut hard) = (vec![], vec![]);
    for (n, &split) in splits.iter().enumerate() {
        let idx = bundle.indices(split);
        let part = make_synthetic_labels(bundle, &idx, policy, reference, stream.child(n as u64))?;
        ids.extend_from_slice(part.ids());
        hard.extend_from_slice(part.hardened());
    }
    let source = LabelSource::Synthetic {
        policy: policy.kind,
        target_error_rate: policy.target_error_rate,
    };
    Ok(SoftLabelSet::from_hard(ids, hard, source))
}

/// Hardens `labels` and flips exactly ⌊flip_rate × n⌋ of them at random.
pub fn add_label_noise(
    labels: &SoftLabelSet,
    flip_rate: f64,
    stream: RngStream,
) -> Result<SoftLabelSet, SupervisionError> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(SupervisionError::InvalidRate(flip_rate));
    }
    let count = (flip_rate * labels.len() as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut stream.rng());
    let mut hard = labels.hardened.clone();
    for &pos in &order[..count] {
        hard[pos] = 1 - hard[pos];
    }
    let source = LabelSource::Mixture {
        base: Box::new(labels.source.clone()),
        flip_rate,
    };
    Ok(SoftLabelSet::from_hard(labels.ids.clone(), hard, source))
}

/// Per hardened class, the ⌈keep × n_class⌉ examples with the largest |prob − 0.5|
/// (ties by ascending id). Returns retained ids in ascending order.
pub fn confidence_filter(labels: &SoftLabelSet, keep_fraction: f64) -> Result<Vec<usize>, SupervisionError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(SupervisionError::InvalidLabels(format!(
            "keep fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let mut kept = vec![];
    for class in [0u8, 1] {
        let members: Vec<usize> = (0..labels.len()).filter(|&p| labels.hardened[p] == class).collect();
        if members.is_empty() {
            return Err(SupervisionError::EmptyClass(class));
        }
        let keep = ((keep_fraction * members.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        let mut order = members;
        order.sort_by(|&a, &b| {
            (labels.probs[b] - 0.5)
                .abs()
                .total_cmp(&(labels.probs[a] - 0.5).abs())
                .then(labels.ids[a].cmp(&labels.ids[b]))
        });
        kept.extend(order[..keep].iter().map(|&p| labels.ids[p]));
    }
    kept.sort_unstable();
    Ok(kept)
}
