//! Dense row-major matrices, seeded random streams, first-order optimizers
//! and a central-difference gradient checker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite loss at coordinate {coord} (value {value})")]
    NonFiniteLoss { coord: usize, value: f64 },
    #[error("invalid optimizer spec: {0}")]
    InvalidOptimizer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn from N(0, scale^2).
    pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the leading `k` columns.
    pub fn leading_cols(&self, k: usize) -> Self {
        let k = k.min(self.cols);
        let mut data = Vec::with_capacity(self.rows * k);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[..k]);
        }
        Self {
            rows: self.rows,
            cols: k,
            data,
        }
    }

    pub fn append_col(&self, col: &[f64]) -> Result<Self, NumericsError> {
        if col.len() != self.rows {
            return Err(NumericsError::DimensionMismatch {
                op: "append_col",
                left: self.shape(),
                right: (col.len(), 1),
            });
        }
        let mut data = Vec::with_capacity(self.rows * (self.cols + 1));
        for (r, &v) in col.iter().enumerate() {
            data.extend_from_slice(self.row(r));
            data.push(v);
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols + 1,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Standard matrix product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ × b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.rows != b.rows {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a × bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    if a.cols != b.cols {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums let the compiler vectorize the loop. Element i always lands in lane
    // i % 4, so appending zero terms leaves the result bitwise unchanged.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    for i in 4 * chunks..n {
        acc[i % 4] += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A reproducible random stream identified by `(seed, stream_id)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Derives a child stream; distinct `(stream_id, tag)` pairs give distinct children.
    pub fn child(&self, tag: u64) -> Self {
        let mixed = self.stream_id.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
            ^ tag.wrapping_mul(0xBF58_476D_1CE4_E5B9)
            ^ 0x94D0_49BB_1331_11EB;
        Self {
            seed: self.seed,
            stream_id: mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub batch_size: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::adam(1e-3, 32)
    }
}

impl OptimizerSpec {
    pub fn adam(learning_rate: f64, batch_size: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            batch_size,
        }
    }

    pub fn sgd(learning_rate: f64, batch_size: usize) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate, batch_size)
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NumericsError::InvalidOptimizer(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NumericsError::InvalidOptimizer("batch_size must be >= 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(NumericsError::InvalidOptimizer(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(NumericsError::InvalidOptimizer("adam_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state for one parameter collection.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &[Matrix]) -> Result<Self, NumericsError> {
        spec.validate()?;
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Ok(Self {
            spec,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let lr = self.spec.learning_rate;
        match self.spec.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.spec.adam_beta1, self.spec.adam_beta2, self.spec.adam_eps);
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
                {
                    for i in 0..p.data.len() {
                        let gv = g.data[i];
                        m.data[i] = b1 * m.data[i] + (1.0 - b1) * gv;
                        v.data[i] = b2 * v.data[i] + (1.0 - b2) * gv * gv;
                        let mhat = m.data[i] / c1;
                        let vhat = v.data[i] / c2;
                        p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Maximum relative error between central differences of `loss_fn` and `analytic_grad`:
/// `max_i |fd_i − g_i| / (|g_i| + 1e-8)`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &Matrix,
    analytic_grad: &Matrix,
    h: f64,
) -> Result<f64, NumericsError>
where
    F: FnMut(&Matrix) -> f64,
{
    if params.shape() != analytic_grad.shape() {
        return Err(NumericsError::DimensionMismatch {
            op: "finite_diff_check",
            left: params.shape(),
            right: analytic_grad.shape(),
        });
    }
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params.data[i];
        probe.data[i] = orig + h;
        let up = loss_fn(&probe);
        probe.data[i] = orig - h;
        let down = loss_fn(&probe);
        probe.data[i] = orig;
        for value in [up, down] {
            if !value.is_finite() {
                return Err(NumericsError::NonFiniteLoss { coord: i, value });
            }
        }
        let fd = (up - down) / (2.0 * h);
        let g = analytic_grad.data[i];
        worst = worst.max((fd - g).abs() / (g.abs() + 1e-8));
    }
    Ok(worst)
}
