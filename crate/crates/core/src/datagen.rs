//! Synthetic binary classification tasks, the four-way split protocol, class
//! rebalancing, and the trivial-imitation transform.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, Matrix, NumericsError, RngStream};
use crate::supervision::SoftLabelSet;

pub const BUNDLE_FORMAT: &str = "w2s-bundle/v1";

const STREAM_FEATURES: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SPLITS: u64 = 4;
const STREAM_REBALANCE: u64 = 5;

/// Dominant-class share above which `rebalance` drops examples.
pub const REBALANCE_TRIGGER: f64 = 0.55;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("class {0} has no examples")]
    EmptyClass(u8),
    #[error("missing weak label for example {index} ({split})")]
    MissingLabel { index: usize, split: Split },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    WeakTrain,
    W2sTrain,
    HoldoutVal,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::WeakTrain, Split::W2sTrain, Split::HoldoutVal, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::WeakTrain => "weak_train",
            Split::W2sTrain => "w2s_train",
            Split::HoldoutVal => "holdout_val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| DataError::Format(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Teacher {
    /// Sign of a random linear function.
    LogisticMargin,
    /// Random two-hidden-layer ReLU network of width 64, thresholded at its median.
    RandomMlp,
}

/// How the observed features are produced. Every column is marginally N(0, 1) either way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureModel {
    /// Independent standard normal columns; the teacher reads the features directly.
    #[default]
    Isotropic,
    /// Columns are noisy standardized views of a `rank`-dimensional latent vector, which
    /// is what the teacher reads: x_j = (a_j·z + noise_scale·e_j) / sqrt(|a_j|² + noise_scale²).
    LowRank { rank: usize, noise_scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub weak_train: f64,
    pub w2s_train: f64,
    pub holdout_val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            weak_train: 0.4,
            w2s_train: 0.4,
            holdout_val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub n: usize,
    pub d: usize,
    pub teacher: Teacher,
    pub noise_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub features: FeatureModel,
    #[serde(default)]
    pub split_fractions: SplitFractions,
}

impl TaskSpec {
    pub fn new(n: usize, d: usize, teacher: Teacher, noise_rate: f64, seed: u64) -> Self {
        Self {
            n,
            d,
            teacher,
            noise_rate,
            seed,
            features: FeatureModel::Isotropic,
            split_fractions: SplitFractions::default(),
        }
    }

    pub fn with_features(mut self, features: FeatureModel) -> Self {
        self.features = features;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n == 0 || self.d == 0 {
            return Err(DataError::InvalidSpec(format!(
                "n and d must be positive (n = {}, d = {})",
                self.n, self.d
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(DataError::InvalidSpec(format!(
                "noise_rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        if let FeatureModel::LowRank { rank, noise_scale } = self.features {
            if rank == 0 || !(noise_scale >= 0.0 && noise_scale.is_finite()) {
                return Err(DataError::InvalidSpec(
                    "low_rank features need rank >= 1 and a finite noise_scale >= 0".into(),
                ));
            }
        }
        let f = self.split_fractions;
        let parts = [f.weak_train, f.w2s_train, f.holdout_val, f.test];
        if parts.iter().any(|&p| p.is_nan() || p <= 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSpec(
                "split fractions must be positive and sum to 1".into(),
            ));
        }
        let counts = self.split_counts();
        if counts.iter().any(|&c| c < 2) {
            return Err(DataError::InvalidSpec(format!(
                "n = {} too small: split sizes {counts:?}",
                self.n
            )));
        }
        Ok(())
    }

    /// Example counts per split in `Split::ALL` order.
    pub fn split_counts(&self) -> [usize; 4] {
        let f = self.split_fractions;
        let test = (f.test * self.n as f64).round() as usize;
        let val = (f.holdout_val * self.n as f64).round() as usize;
        let weak = (f.weak_train * self.n as f64).round() as usize;
        let w2s = self.n.saturating_sub(test + val + weak);
        [weak, w2s, val, test]
    }
}

/// Records which ground-truth labels are read while it is attached to a bundle.
#[derive(Debug, Clone, Default)]
pub struct AccessLog(Arc<Mutex<BTreeSet<usize>>>);

impl AccessLog {
    pub fn accessed(&self) -> BTreeSet<usize> {
        self.0.lock().expect("access log poisoned").clone()
    }

    pub fn clear(&self) {
        self.0.lock().expect("access log poisoned").clear();
    }

    fn record(&self, idx: impl IntoIterator<Item = usize>) {
        self.0.lock().expect("access log poisoned").extend(idx);
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    spec: TaskSpec,
    x: Matrix,
    y: Vec<u8>,
    /// Teacher score relative to its decision threshold (positive means class 1 before noise).
    margin: Vec<f64>,
    difficulty: Option<Vec<f64>>,
    splits: Vec<Split>,
    access_log: Option<AccessLog>,
}

impl PartialEq for DatasetBundle {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.x == other.x
            && self.y == other.y
            && self.margin == other.margin
            && self.difficulty == other.difficulty
            && self.splits == other.splits
    }
}

impl DatasetBundle {
    pub fn from_parts(
        spec: TaskSpec,
        x: Matrix,
        y: Vec<u8>,
        margin: Vec<f64>,
        difficulty: Option<Vec<f64>>,
        splits: Vec<Split>,
    ) -> Result<Self, DataError> {
        let n = x.rows();
        if y.len() != n || margin.len() != n || splits.len() != n || difficulty.as_ref().is_some_and(|d| d.len() != n) {
            return Err(DataError::Format("column lengths disagree".into()));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(DataError::Format("labels must be 0 or 1".into()));
        }
        if !x.all_finite() {
            return Err(DataError::Format("non-finite feature value".into()));
        }
        Ok(Self {
            spec,
            x,
            y,
            margin,
            difficulty,
            splits,
            access_log: None,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn margins(&self) -> &[f64] {
        &self.margin
    }

    pub fn difficulty(&self) -> Option<&[f64]> {
        self.difficulty.as_deref()
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Ground-truth label of example `i`.
    pub fn label(&self, i: usize) -> u8 {
        if let Some(log) = &self.access_log {
            log.record([i]);
        }
        self.y[i]
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<u8> {
        if let Some(log) = &self.access_log {
            log.record(idx.iter().copied());
        }
        idx.iter().map(|&i| self.y[i]).collect()
    }

    /// Attaches a fresh access log; every subsequent ground-truth read through this copy
    /// (and its clones) is recorded.
    pub fn tracked(&self) -> (DatasetBundle, AccessLog) {
        let log = AccessLog::default();
        let mut b = self.clone();
        b.access_log = Some(log.clone());
        (b, log)
    }

    /// Same examples, labels and splits over a different feature matrix.
    pub fn with_features(&self, x: Matrix) -> Result<DatasetBundle, DataError> {
        if x.rows() != self.len() {
            return Err(DataError::Format(format!(
                "feature rows {} != bundle size {}",
                x.rows(),
                self.len()
            )));
        }
        let mut b = self.clone();
        b.spec.d = x.cols();
        b.x = x;
        Ok(b)
    }

    /// Writes the rows as CSV and the spec as a JSON sidecar. Each `stamp` pair becomes a
    /// trailing constant column.
    pub fn save(&self, csv_path: &Path, sidecar_path: &Path, stamp: &[(&str, &str)]) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(csv_path)?;
        let mut header = vec![
            "id".to_string(),
            "split".into(),
            "y".into(),
            "difficulty".into(),
            "margin".into(),
        ];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        header.extend(stamp.iter().map(|(k, _)| k.to_string()));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                i.to_string(),
                self.splits[i].to_string(),
                self.y[i].to_string(),
                self.difficulty.as_ref().map_or(String::new(), |d| d[i].to_string()),
                self.margin[i].to_string(),
            ];
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            rec.extend(stamp.iter().map(|(_, v)| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let sidecar = BundleSidecar {
            format: BUNDLE_FORMAT.into(),
            task: self.spec.clone(),
            n: self.len(),
            d: self.dim(),
        };
        fs::write(
            sidecar_path,
            serde_json::to_string_pretty(&sidecar).map_err(|e| DataError::Format(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load(csv_path: &Path, sidecar_path: &Path) -> Result<DatasetBundle, DataError> {
        let sidecar: BundleSidecar =
            serde_json::from_str(&fs::read_to_string(sidecar_path)?).map_err(|e| DataError::Format(e.to_string()))?;
        if sidecar.format != BUNDLE_FORMAT {
            return Err(DataError::Format(format!("unsupported format {}", sidecar.format)));
        }
        let mut r = csv::Reader::from_path(csv_path)?;
        let d = sidecar.d;
        let (mut y, mut margin, mut splits, mut diff, mut data) = (vec![], vec![], vec![], vec![], vec![]);
        let mut has_difficulty = true;
        let parse = |s: &str| -> Result<f64, DataError> {
            s.parse::<f64>()
                .map_err(|e| DataError::Format(format!("bad number {s:?}: {e}")))
        };
        // trailing stamp columns are allowed; the csv reader keeps row widths equal to the header
        if r.headers()?.len() < 5 + d {
            return Err(DataError::Format(format!(
                "header has {} fields, expected at least {}",
                r.headers()?.len(),
                5 + d
            )));
        }
        for rec in r.records() {
            let rec = rec?;
            splits.push(rec[1].parse::<Split>()?);
            y.push(rec[2].parse::<u8>().map_err(|e| DataError::Format(e.to_string()))?);
            if rec[3].is_empty() {
                has_difficulty = false;
            } else {
                diff.push(parse(&rec[3])?);
            }
            margin.push(parse(&rec[4])?);
            for j in 0..d {
                data.push(parse(&rec[5 + j])?);
            }
        }
        let n = y.len();
        if n != sidecar.n {
            return Err(DataError::Format(format!(
                "sidecar says {} rows, csv has {n}",
                sidecar.n
            )));
        }
        let difficulty = if has_difficulty { Some(diff) } else { None };
        DatasetBundle::from_parts(
            sidecar.task,
            Matrix::from_vec(n, d, data)?,
            y,
            margin,
            difficulty,
            splits,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleSidecar {
    format: String,
    task: TaskSpec,
    n: usize,
    d: usize,
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn teacher_scores(teacher: Teacher, inputs: &Matrix, stream: RngStream) -> Vec<f64> {
    let mut rng = stream.rng();
    let dim = inputs.cols();
    match teacher {
        Teacher::LogisticMargin => {
            let beta: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
            let norm = dot(&beta, &beta).sqrt();
            (0..inputs.rows()).map(|r| dot(inputs.row(r), &beta) / norm).collect()
        }
        Teacher::RandomMlp => {
            const WIDTH: usize = 64;
            let w1 = Matrix::gaussian(dim, WIDTH, (2.0 / dim as f64).sqrt(), &mut rng);
            let b1: Vec<f64> = (0..WIDTH).map(|_| 0.5 * standard_normal(&mut rng)).collect();
            let w2 = Matrix::gaussian(WIDTH, WIDTH, (2.0 / WIDTH as f64).sqrt(), &mut rng);
            let b2: Vec<f64> = (0..WIDTH).map(|_| 0.5 * standard_normal(&mut rng)).collect();
            let w3: Vec<f64> = (0..WIDTH).map(|_| standard_normal(&mut rng)).collect();
            let relu_affine = |m: Matrix, b: &[f64]| {
                let mut m = m;
                for r in 0..m.rows() {
                    for (v, bv) in m.row_mut(r).iter_mut().zip(b) {
                        *v = (*v + bv).max(0.0);
                    }
                }
                m
            };
            let h1 = relu_affine(crate::numerics::matmul(inputs, &w1).expect("shapes"), &b1);
            let h2 = relu_affine(crate::numerics::matmul(&h1, &w2).expect("shapes"), &b2);
            let raw: Vec<f64> = (0..h2.rows()).map(|r| dot(h2.row(r), &w3)).collect();
            let med = median(&raw);
            let centered: Vec<f64> = raw.iter().map(|v| v - med).collect();
            let sd = (centered.iter().map(|v| v * v).sum::<f64>() / centered.len() as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            centered.into_iter().map(|v| v / sd).collect()
        }
    }
}

/// `1 − q`, where `q` is the quantile of |margin| among all examples (ties share the
/// lower rank).
pub fn margin_difficulty(margin: &[f64]) -> Vec<f64> {
    let n = margin.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| margin[a].abs().total_cmp(&margin[b].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut rank = 0;
    for pos in 0..n {
        if pos > 0 && margin[order[pos]].abs() != margin[order[pos - 1]].abs() {
            rank = pos;
        }
        out[order[pos]] = 1.0 - rank as f64 / (n - 1) as f64;
    }
    out
}

fn assign_splits(spec: &TaskSpec, y: &[u8]) -> Vec<Split> {
    let n = y.len();
    let [weak, _w2s, val, test] = spec.split_counts();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::new(spec.seed, STREAM_SPLITS).rng());
    let mut splits = vec![Split::W2sTrain; n];
    let mut assigned = vec![false; n];
    // balanced test set: alternate classes in shuffled order
    let per_class = [test / 2 + test % 2, test / 2];
    let mut taken = [0usize; 2];
    for &i in &order {
        let c = y[i] as usize;
        if taken[c] < per_class[c] {
            splits[i] = Split::Test;
            assigned[i] = true;
            taken[c] += 1;
        }
    }
    let shortfall = test - taken[0] - taken[1];
    let mut rest = order.iter().copied().filter(|&i| !assigned[i]);
    for _ in 0..shortfall {
        if let Some(i) = rest.next() {
            splits[i] = Split::Test;
        }
    }
    for (pos, i) in rest.enumerate() {
        splits[i] = if pos < weak {
            Split::WeakTrain
        } else if pos < weak + val {
            Split::HoldoutVal
        } else {
            Split::W2sTrain
        };
    }
    splits
}

/// Draws a task: features, teacher labels with independent flips at `noise_rate`,
/// margin-quantile difficulty, and the split assignment. Deterministic in `spec.seed`.
pub fn generate_task(spec: &TaskSpec) -> Result<DatasetBundle, DataError> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.d);
    let mut feat_rng = RngStream::new(spec.seed, STREAM_FEATURES).rng();
    let (x, teacher_input) = match spec.features {
        FeatureModel::Isotropic => {
            let x = Matrix::gaussian(n, d, 1.0, &mut feat_rng);
            (x.clone(), x)
        }
        FeatureModel::LowRank { rank, noise_scale } => {
            let z = Matrix::gaussian(n, rank, 1.0, &mut feat_rng);
            let loadings = Matrix::gaussian(rank, d, 1.0, &mut feat_rng);
            let mut x = crate::numerics::matmul(&z, &loadings)?;
            let scale: Vec<f64> = (0..d)
                .map(|j| {
                    let ss: f64 = (0..rank).map(|r| loadings.get(r, j).powi(2)).sum();
                    (ss + noise_scale * noise_scale).sqrt()
                })
                .collect();
            for r in 0..n {
                for (v, s) in x.row_mut(r).iter_mut().zip(&scale) {
                    *v = (*v + noise_scale * standard_normal(&mut feat_rng)) / s;
                }
            }
            (x, z)
        }
    };
    let margin = teacher_scores(spec.teacher, &teacher_input, RngStream::new(spec.seed, STREAM_TEACHER));
    let mut noise_rng = RngStream::new(spec.seed, STREAM_NOISE).rng();
    let y: Vec<u8> = margin
        .iter()
        .map(|&m| {
            let clean = u8::from(m > 0.0);
            if noise_rng.gen::<f64>() < spec.noise_rate {
                1 - clean
            } else {
                clean
            }
        })
        .collect();
    let difficulty = margin_difficulty(&margin);
    let splits = assign_splits(spec, &y);
    DatasetBundle::from_parts(spec.clone(), x, y, margin, Some(difficulty), splits)
}

/// Drops random examples of the dominant class until both classes have equal size, but
/// only when the dominant class exceeds 55% of the data.
pub fn rebalance(bundle: &DatasetBundle) -> Result<DatasetBundle, DataError> {
    let ones = bundle.y.iter().filter(|&&v| v == 1).count();
    let zeros = bundle.len() - ones;
    if ones == 0 {
        return Err(DataError::EmptyClass(1));
    }
    if zeros == 0 {
        return Err(DataError::EmptyClass(0));
    }
    let (dominant, keep) = if ones > zeros { (1u8, zeros) } else { (0u8, ones) };
    if (ones.max(zeros) as f64) / (bundle.len() as f64) <= REBALANCE_TRIGGER {
        return Ok(bundle.clone());
    }
    let mut dom: Vec<usize> = (0..bundle.len()).filter(|&i| bundle.y[i] == dominant).collect();
    dom.shuffle(&mut RngStream::new(bundle.spec.seed, STREAM_REBALANCE).rng());
    let dropped: BTreeSet<usize> = dom[keep..].iter().copied().collect();
    let retained: Vec<usize> = (0..bundle.len()).filter(|i| !dropped.contains(i)).collect();
    Ok(DatasetBundle {
        spec: bundle.spec.clone(),
        x: bundle.x.select_rows(&retained),
        y: retained.iter().map(|&i| bundle.y[i]).collect(),
        margin: retained.iter().map(|&i| bundle.margin[i]).collect(),
        difficulty: bundle
            .difficulty
            .as_ref()
            .map(|d| retained.iter().map(|&i| d[i]).collect()),
        splits: retained.iter().map(|&i| bundle.splits[i]).collect(),
        access_log: bundle.access_log.clone(),
    })
}

/// Appends the hardened weak label as an extra input column. Examples of the w2s_train
/// and test splits must be covered; holdout_val rows use the label when available, and
/// any remaining rows get 0.
pub fn trivial_imitation_transform(
    bundle: &DatasetBundle,
    weak_labels: &SoftLabelSet,
) -> Result<DatasetBundle, DataError> {
    let mut col = vec![0.0; bundle.len()];
    for (i, c) in col.iter_mut().enumerate() {
        let split = bundle.splits[i];
        match weak_labels.hardened_of(i) {
            Some(h) => *c = f64::from(h),
            None if matches!(split, Split::W2sTrain | Split::Test) => {
                return Err(DataError::MissingLabel { index: i, split })
            }
            None => {}
        }
    }
    let x = bundle.x.append_col(&col)?;
    bundle.with_features(x)
}
