//! Model-derived example difficulty and training restricted to easy examples.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DatasetBundle, Split};
use crate::metrics::{harden_all, match_rate};
use crate::models::CapacityLadder;
use crate::models::ModelSpec;
use crate::numerics::RngStream;
use crate::training::{self, EarlyStop, EvalPlan, Supervision, TrainConfig, TrainError};

const STREAM_FOLDS: u64 = 6;
const STREAM_SUBSAMPLE: u64 = 7;
const STREAM_FOLD_MODELS: u64 = 8;
const STREAM_CUTOFF: u64 = 9;

#[derive(Debug, Error)]
pub enum E2hError {
    #[error("fold too small: {0}")]
    FoldTooSmall(String),
    #[error("no training examples at or below cutoff {0}")]
    EmptyFiltered(f64),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignConfig {
    pub folds: usize,
    /// Independent fold splits; an example counts as solved by a model only if every repeat
    /// gets it right.
    pub repeats: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { folds: 3, repeats: 3 }
    }
}

/// Per-example difficulty: the smallest ladder proxy C such that every model with proxy ≥ C
/// predicts the example correctly; `None` stands for infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyAssignment {
    pub ids: Vec<usize>,
    pub difficulty: Vec<Option<f64>>,
    pub ladder_proxies: Vec<f64>,
    /// `correct[m][e]`: ladder model `m` got example `ids[e]` right in every repeat.
    pub correct: Vec<Vec<bool>>,
}

impl DifficultyAssignment {
    pub fn difficulty_of(&self, id: usize) -> Option<Option<f64>> {
        self.ids.iter().position(|&i| i == id).map(|p| self.difficulty[p])
    }

    /// Whether the example's difficulty is at or below `cutoff` (`None` = infinity).
    pub fn within(d: Option<f64>, cutoff: Option<f64>) -> bool {
        match (d, cutoff) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(d), Some(c)) => d <= c,
        }
    }

    /// CSV with columns example_id, difficulty_proxy ("inf" when no model suffices), then one
    /// constant column per `stamp` pair.
    pub fn write_csv(&self, path: &Path, stamp: &[(&str, &str)]) -> Result<(), E2hError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["example_id", "difficulty_proxy"];
        header.extend(stamp.iter().map(|(k, _)| *k));
        w.write_record(&header)?;
        for (id, d) in self.ids.iter().zip(&self.difficulty) {
            let mut row = vec![id.to_string(), d.map_or_else(|| "inf".to_string(), |v| v.to_string())];
            row.extend(stamp.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Smallest proxy whose model and all larger ones are correct; `None` when the largest fails.
pub fn difficulty_from_pattern(proxies: &[f64], correct: &[bool]) -> Option<f64> {
    let mut first = None;
    for k in (0..proxies.len()).rev() {
        if !correct[k] {
            break;
        }
        first = Some(proxies[k]);
    }
    first
}

/// Cross-validated difficulty for the w2s_train pool and the test split. Pool examples are
/// predicted by fold models that never saw them; test examples by every fold model.
pub fn assign_difficulty(
    bundle: &DatasetBundle,
    ladder: &CapacityLadder,
    config: &TrainConfig,
    assign: AssignConfig,
) -> Result<DifficultyAssignment, E2hError> {
    if assign.folds < 2 || assign.repeats < 1 {
        return Err(E2hError::Invalid("need at least 2 folds and 1 repeat".into()));
    }
    let pool = bundle.indices(Split::W2sTrain);
    let test = bundle.indices(Split::Test);
    if pool.len() / assign.folds < 2 {
        return Err(E2hError::FoldTooSmall(format!(
            "{} examples across {} folds",
            pool.len(),
            assign.folds
        )));
    }
    let ids: Vec<usize> = pool.iter().chain(&test).copied().collect();
    let pos_of: std::collections::HashMap<usize, usize> = ids.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let gt = bundle.labels_at(&ids);
    let test_x = bundle.features().select_rows(&test);
    let mut cfg = config.clone();
    cfg.early_stop = EarlyStop::None;
    cfg.loss = crate::losses::LossSpec::naive();

    let specs = ladder.specs();
    let mut correct = vec![vec![true; ids.len()]; specs.len()];
    for repeat in 0..assign.repeats {
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut RngStream::new(config.seed, STREAM_FOLDS).child(repeat as u64).rng());
        let fold_of = |p: usize| p * assign.folds / shuffled.len();
        for fold in 0..assign.folds {
            let held: Vec<usize> = (0..shuffled.len())
                .filter(|&p| fold_of(p) == fold)
                .map(|p| shuffled[p])
                .collect();
            let mut train_idx: Vec<usize> = (0..shuffled.len())
                .filter(|&p| fold_of(p) != fold)
                .map(|p| shuffled[p])
                .collect();
            train_idx.sort_unstable();
            let held_x = bundle.features().select_rows(&held);
            for (m, spec) in specs.iter().enumerate() {
                let stream = RngStream::new(config.seed, STREAM_FOLD_MODELS)
                    .child((repeat * assign.folds + fold) as u64)
                    .child(m as u64);
                let model = training::train(
                    spec,
                    bundle,
                    &train_idx,
                    Supervision::GroundTruth,
                    &cfg,
                    &EvalPlan::none(),
                    stream,
                )?
                .model;
                let held_pred = harden_all(&model.predict_proba(&held_x).map_err(TrainError::from)?);
                for (&i, p) in held.iter().zip(held_pred) {
                    let pos = pos_of[&i];
                    correct[m][pos] &= p == gt[pos];
                }
                let test_pred = harden_all(&model.predict_proba(&test_x).map_err(TrainError::from)?);
                for (&i, p) in test.iter().zip(test_pred) {
                    let pos = pos_of[&i];
                    correct[m][pos] &= p == gt[pos];
                }
            }
        }
    }
    let proxies: Vec<f64> = specs.iter().map(ModelSpec::compute_proxy).collect();
    let difficulty = (0..ids.len())
        .map(|e| {
            let pattern: Vec<bool> = correct.iter().map(|c| c[e]).collect();
            difficulty_from_pattern(&proxies, &pattern)
        })
        .collect();
    Ok(DifficultyAssignment {
        ids,
        difficulty,
        ladder_proxies: proxies,
        correct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffResult {
    /// `None` means no cutoff.
    pub cutoff: Option<f64>,
    pub train_size: usize,
    pub full_test_acc: f64,
    pub hard_test_acc: Option<f64>,
    pub hard_test_count: usize,
}

/// The pool in a seed-fixed random order, restricted to difficulty ≤ `cutoff`, truncated to
/// `size`. Larger cutoffs only add candidates, so orderings agree across cutoffs.
pub fn cutoff_subset(
    assignment: &DifficultyAssignment,
    pool: &[usize],
    cutoff: Option<f64>,
    size: usize,
    seed: u64,
) -> Vec<usize> {
    let mut order = pool.to_vec();
    order.shuffle(&mut RngStream::new(seed, STREAM_SUBSAMPLE).rng());
    let mut subset: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            assignment
                .difficulty_of(i)
                .is_some_and(|d| DifficultyAssignment::within(d, cutoff))
        })
        .take(size)
        .collect();
    subset.sort_unstable();
    subset
}

/// Trains `strong_spec` on ground truth over a `size`-example subset of the pool with
/// difficulty ≤ `cutoff`, and scores it on the full test split and its harder part.
pub fn cutoff_run(
    bundle: &DatasetBundle,
    assignment: &DifficultyAssignment,
    cutoff: Option<f64>,
    size: usize,
    strong_spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<CutoffResult, E2hError> {
    let pool = bundle.indices(Split::W2sTrain);
    let subset = cutoff_subset(assignment, &pool, cutoff, size, config.seed);
    if subset.is_empty() {
        return Err(E2hError::EmptyFiltered(cutoff.unwrap_or(f64::INFINITY)));
    }
    let mut cfg = config.clone();
    cfg.early_stop = EarlyStop::None;
    cfg.loss = crate::losses::LossSpec::naive();
    let model = training::train(
        strong_spec,
        bundle,
        &subset,
        Supervision::GroundTruth,
        &cfg,
        &EvalPlan::none(),
        RngStream::new(config.seed, STREAM_CUTOFF),
    )?
    .model;
    let test = bundle.indices(Split::Test);
    let pred = harden_all(
        &model
            .predict_proba(&bundle.features().select_rows(&test))
            .map_err(TrainError::from)?,
    );
    let gt = bundle.labels_at(&test);
    let hard: Vec<usize> = (0..test.len())
        .filter(|&p| {
            assignment
                .difficulty_of(test[p])
                .is_some_and(|d| !DifficultyAssignment::within(d, cutoff))
        })
        .collect();
    let hard_pred: Vec<u8> = hard.iter().map(|&p| pred[p]).collect();
    let hard_gt: Vec<u8> = hard.iter().map(|&p| gt[p]).collect();
    Ok(CutoffResult {
        cutoff,
        train_size: subset.len(),
        full_test_acc: match_rate(&pred, &gt).unwrap_or(0.0),
        hard_test_acc: match_rate(&hard_pred, &hard_gt),
        hard_test_count: hard.len(),
    })
}

/// Runs every cutoff with the training size fixed to the count available at the smallest.
pub fn cutoff_sweep(
    bundle: &DatasetBundle,
    assignment: &DifficultyAssignment,
    cutoffs: &[Option<f64>],
    strong_spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<Vec<CutoffResult>, E2hError> {
    let pool = bundle.indices(Split::W2sTrain);
    let size = cutoffs
        .iter()
        .map(|&c| cutoff_subset(assignment, &pool, c, usize::MAX, config.seed).len())
        .min()
        .ok_or_else(|| E2hError::Invalid("no cutoffs given".into()))?;
    if size == 0 {
        return Err(E2hError::EmptyFiltered(
            cutoffs.iter().flatten().copied().fold(f64::INFINITY, f64::min),
        ));
    }
    cutoffs
        .iter()
        .map(|&c| cutoff_run(bundle, assignment, c, size, strong_spec, config))
        .collect()
}

pub fn write_cutoff_csv(path: &Path, results: &[CutoffResult]) -> Result<(), E2hError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cutoff",
        "train_size",
        "full_test_acc",
        "hard_test_acc",
        "hard_test_count",
    ])?;
    for r in results {
        w.write_record([
            r.cutoff.map_or_else(|| "inf".to_string(), |c| c.to_string()),
            r.train_size.to_string(),
            r.full_test_acc.to_string(),
            r.hard_test_acc.map_or_else(String::new, |a| a.to_string()),
            r.hard_test_count.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
