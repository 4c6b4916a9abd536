//! Dense count tensors and their CP (CANDECOMP/PARAFAC) decompositions.
//!
//! A block of attributes is materialized as a dense tensor whose entry at
//! `(i_1, ..., i_m)` is the number of records taking that value combination.
//! [`cp_als_fit`] compresses the tensor into a rank-R model
//!
//! ```text
//!     X[i_1, ..., i_m] = sum_r w[r] * A_1[i_1, r] * ... * A_m[i_m, r]
//! ```
//!
//! whose factor columns are L1-normalized (each column's signed sum is 1), so
//! the scale of every component lives in `w` and `sum(w)` equals the tensor
//! total. That normalization is what lets an unconstrained axis drop out of a
//! query evaluation: summing a factor column over all positions contributes a
//! factor of exactly 1.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub mod io;

/// Hard ceiling on the number of entries [`CpModel::reconstruct_full`] will
/// materialize without an explicit guard from the caller.
pub const DEFAULT_DENSE_GUARD: u128 = 100_000_000;

/// Column signed sums below this magnitude cannot be L1-normalized.
pub const DEGENERATE_COLUMN_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor shape must be non-empty with no zero-length axis")]
    EmptyShape,
    #[error("tensor data length {got} does not match shape volume {want}")]
    DataLength { got: usize, want: usize },
    #[error("tensor entry at offset {offset} is not finite ({value})")]
    NonFinite { offset: usize, value: f64 },
    #[error("dense volume {volume} exceeds the materialization guard {guard}")]
    TooLarge { volume: u128, guard: u128 },
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        index: Vec<usize>,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of bounds for a model with {axes} axes")]
    AxisOutOfBounds { axis: usize, axes: usize },
    #[error("shapes do not match: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("factor {axis} has {got} columns, expected rank {want}")]
    FactorRank {
        axis: usize,
        got: usize,
        want: usize,
    },
    #[error(
        "column {rank} of factor {axis} has signed sum {sum:e}; \
         too close to zero to L1-normalize"
    )]
    DegenerateColumn { axis: usize, rank: usize, sum: f64 },
    #[error("coefficient vector length {got} does not match axis length {want}")]
    CoefficientLength { got: usize, want: usize },
    #[error("fitted weights sum to {got:e}, cannot calibrate to tensor total {want:e}")]
    TotalCollapse { got: f64, want: f64 },
    #[error("least-squares system is numerically singular even with ridge boost")]
    SingularSolve,
}

// ---------------------------------------------------------------------------
// Dense tensors
// ---------------------------------------------------------------------------

/// Dense row-major tensor of `f64` entries with a cached total.
///
/// Count tensors built from a table are nonnegative by construction;
/// reconstructions of fitted models may carry small negative entries, so
/// nonnegativity is deliberately not enforced here.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    total: f64,
}

impl DenseTensor {
    /// Validates shape/data agreement and entry finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let volume = checked_volume(&shape)?;
        if volume != data.len() as u128 {
            return Err(TensorError::DataLength {
                got: data.len(),
                want: volume as usize,
            });
        }
        for (offset, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(TensorError::NonFinite { offset, value });
            }
        }
        let total = data.iter().sum();
        Ok(DenseTensor { shape, data, total })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let volume = checked_volume(&shape)?;
        if volume > DEFAULT_DENSE_GUARD {
            return Err(TensorError::TooLarge {
                volume,
                guard: DEFAULT_DENSE_GUARD,
            });
        }
        Ok(DenseTensor {
            shape,
            data: vec![0.0; volume as usize],
            total: 0.0,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn axis_count(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sum of all entries (the record count for a count tensor).
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn get(&self, index: &[usize]) -> Result<f64, TensorError> {
        Ok(self.data[self.offset_of(index)?])
    }

    /// Adds `amount` at `index`, keeping the cached total in sync.
    pub fn add(&mut self, index: &[usize], amount: f64) -> Result<(), TensorError> {
        let offset = self.offset_of(index)?;
        self.data[offset] += amount;
        self.total += amount;
        Ok(())
    }

    /// Row-major offset of a multi-index.
    pub fn offset_of(&self, index: &[usize]) -> Result<usize, TensorError> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(&i, &d)| i >= d) {
            return Err(TensorError::IndexOutOfBounds {
                index: index.to_vec(),
                shape: self.shape.clone(),
            });
        }
        let mut offset = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            offset = offset * d + i;
        }
        Ok(offset)
    }

    /// Largest absolute entry difference against `other`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, TensorError> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Frobenius distance against `other`.
    pub fn frobenius_distance(&self, other: &Self) -> Result<f64, TensorError> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Entry-wise rounding to the nearest integer.
    pub fn round(&self) -> DenseTensor {
        let data: Vec<f64> = self.data.iter().map(|v| v.round()).collect();
        let total = data.iter().sum();
        DenseTensor {
            shape: self.shape.clone(),
            data,
            total,
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

fn checked_volume(shape: &[usize]) -> Result<u128, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::EmptyShape);
    }
    Ok(shape.iter().map(|&d| d as u128).product())
}

/// Row-major odometer: advances `index` to the next multi-index, returning
/// `false` after the last one.
fn advance_index(index: &mut [usize], shape: &[usize]) -> bool {
    for axis in (0..shape.len()).rev() {
        index[axis] += 1;
        if index[axis] < shape[axis] {
            return true;
        }
        index[axis] = 0;
    }
    false
}

// ---------------------------------------------------------------------------
// CP models
// ---------------------------------------------------------------------------

/// Rank-R CP decomposition: weights `w` plus one factor matrix per axis.
///
/// Factor `j` has shape `(axis_len_j, R)`; column `r` of every factor together
/// with `w[r]` forms one rank-1 component. Models produced by [`cp_als_fit`]
/// are L1-normalized: every factor column sums to 1 and `sum(w)` equals the
/// fitted tensor's total.
#[derive(Debug, Clone, PartialEq)]
pub struct CpModel {
    weights: DVector<f64>,
    factors: Vec<DMatrix<f64>>,
}

impl CpModel {
    pub fn new(weights: Vec<f64>, factors: Vec<DMatrix<f64>>) -> Result<Self, TensorError> {
        if weights.is_empty() {
            return Err(TensorError::ZeroRank);
        }
        if factors.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        let rank = weights.len();
        for (axis, f) in factors.iter().enumerate() {
            if f.ncols() != rank {
                return Err(TensorError::FactorRank {
                    axis,
                    got: f.ncols(),
                    want: rank,
                });
            }
            if f.nrows() == 0 {
                return Err(TensorError::EmptyShape);
            }
        }
        Ok(CpModel {
            weights: DVector::from_vec(weights),
            factors,
        })
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn axis_count(&self) -> usize {
        self.factors.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn weights(&self) -> &[f64] {
        self.weights.as_slice()
    }

    pub fn factor(&self, axis: usize) -> &DMatrix<f64> {
        &self.factors[axis]
    }

    /// Sum of the weights; equals the source tensor total for fitted models.
    pub fn weight_total(&self) -> f64 {
        self.weights.sum()
    }

    /// Scales every weight by `factor` (used for record-count updates).
    pub fn scale_weights(&mut self, factor: f64) {
        self.weights *= factor;
    }

    /// Evaluates the model at one multi-index:
    /// `sum_r w[r] * prod_j A_j[index[j], r]`.
    pub fn reconstruct_entry(&self, index: &[usize]) -> Result<f64, TensorError> {
        if index.len() != self.factors.len() {
            return Err(TensorError::IndexOutOfBounds {
                index: index.to_vec(),
                shape: self.shape(),
            });
        }
        for (axis, (&i, f)) in index.iter().zip(&self.factors).enumerate() {
            if i >= f.nrows() {
                let _ = axis;
                return Err(TensorError::IndexOutOfBounds {
                    index: index.to_vec(),
                    shape: self.shape(),
                });
            }
        }
        Ok(self.entry_unchecked(index))
    }

    fn entry_unchecked(&self, index: &[usize]) -> f64 {
        let mut sum = 0.0;
        for r in 0..self.rank() {
            let mut term = self.weights[r];
            for (f, &i) in self.factors.iter().zip(index) {
                term *= f[(i, r)];
            }
            sum += term;
        }
        sum
    }

    /// Materializes the full tensor, refusing shapes above [`DEFAULT_DENSE_GUARD`].
    ///
    /// Negative reconstructed values are preserved; clamping is an estimator
    /// policy, not a tensor one.
    pub fn reconstruct_full(&self) -> Result<DenseTensor, TensorError> {
        self.reconstruct_full_guarded(DEFAULT_DENSE_GUARD)
    }

    pub fn reconstruct_full_guarded(&self, guard: u128) -> Result<DenseTensor, TensorError> {
        let shape = self.shape();
        let volume = checked_volume(&shape)?;
        if volume > guard {
            return Err(TensorError::TooLarge { volume, guard });
        }
        let mut data = Vec::with_capacity(volume as usize);
        let mut index = vec![0usize; shape.len()];
        loop {
            data.push(self.entry_unchecked(&index));
            if !advance_index(&mut index, &shape) {
                break;
            }
        }
        let total = data.iter().sum();
        Ok(DenseTensor { shape, data, total })
    }

    /// Per-rank aggregation along one axis: returns the length-R vector
    /// `out[r] = sum_i coefficients[i] * A_axis[i, r]`.
    ///
    /// With an L1-normalized factor and all-ones coefficients this is exactly
    /// the all-ones vector's role in marginalization: every `out[r]` is 1.
    pub fn axis_aggregate(
        &self,
        axis: usize,
        coefficients: &[f64],
    ) -> Result<Vec<f64>, TensorError> {
        let f = self.factors.get(axis).ok_or(TensorError::AxisOutOfBounds {
            axis,
            axes: self.factors.len(),
        })?;
        if coefficients.len() != f.nrows() {
            return Err(TensorError::CoefficientLength {
                got: coefficients.len(),
                want: f.nrows(),
            });
        }
        let coeffs = DVector::from_column_slice(coefficients);
        Ok(f.tr_mul(&coeffs).as_slice().to_vec())
    }

    /// Rescales every factor column to signed sum 1, absorbing the scale into
    /// the weights. The reconstruction is unchanged up to floating-point
    /// association; a column whose signed sum is below
    /// [`DEGENERATE_COLUMN_EPS`] cannot carry its scale and is reported as an
    /// error so the caller can re-randomize and refit (or drop the component).
    pub fn normalize_l1(&self) -> Result<CpModel, TensorError> {
        let mut weights = self.weights.clone();
        let mut factors = self.factors.clone();
        for (axis, f) in factors.iter_mut().enumerate() {
            for r in 0..weights.len() {
                let sum: f64 = f.column(r).sum();
                if sum.abs() < DEGENERATE_COLUMN_EPS {
                    return Err(TensorError::DegenerateColumn { axis, rank: r, sum });
                }
                for i in 0..f.nrows() {
                    f[(i, r)] /= sum;
                }
                weights[r] *= sum;
            }
        }
        Ok(CpModel { weights, factors })
    }
}

// ---------------------------------------------------------------------------
// ALS fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Maximum ALS sweeps per attempt.
    pub max_iters: usize,
    /// Stop once the relative residual improvement of a sweep drops below this.
    pub tol: f64,
    /// Seed for factor initialization; attempt `a` uses a seed derived from
    /// `seed` and `a`, so the whole fit is a pure function of its inputs.
    pub seed: u64,
    /// Additional random restarts kept alongside the first attempt; the model
    /// with the smallest residual wins. Restarts stop early once a model is
    /// rounding-exact (max abs error < 0.5), which is the recovery criterion
    /// for integer count tensors.
    pub retries: usize,
    /// Ridge term added to each least-squares solve.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            retries: 2,
            ridge: 1e-9,
        }
    }
}

impl FitOptions {
    pub fn with_seed(seed: u64) -> Self {
        FitOptions {
            seed,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Frobenius distance between the returned model and the input tensor,
    /// recomputed on the final (normalized, calibrated) model.
    pub frobenius_error: f64,
    /// Largest absolute entry error of the returned model.
    pub max_abs_error: f64,
    /// Sweeps run by the winning attempt.
    pub iterations: usize,
    /// Whether the winning attempt stopped by tolerance rather than by
    /// exhausting `max_iters`.
    pub converged: bool,
    /// Residual before the first sweep followed by the residual after each
    /// sweep, for the winning attempt. Non-increasing.
    pub sweep_residuals: Vec<f64>,
}

/// Fits a rank-`rank` CP model to `tensor` by unconstrained alternating least
/// squares, then L1-normalizes the factors and calibrates the weights so
/// `sum(w)` equals `tensor.total()` exactly (up to one final scalar multiply).
pub fn cp_als_fit(
    tensor: &DenseTensor,
    rank: usize,
    opts: &FitOptions,
) -> Result<(CpModel, FitReport), TensorError> {
    if rank == 0 {
        return Err(TensorError::ZeroRank);
    }
    let attempts = opts.retries + 1;
    let mut best: Option<(CpModel, FitReport)> = None;
    let mut last_degenerate: Option<AlsState> = None;
    let mut last_err: Option<TensorError> = None;

    for attempt in 0..attempts {
        let seed = derive_seed(opts.seed, attempt as u64);
        let state = run_als(tensor, rank, opts, seed)?;
        match finalize_model(tensor, &state) {
            Ok(candidate) => {
                let better = match &best {
                    Some((_, report)) => candidate.1.frobenius_error < report.frobenius_error,
                    None => true,
                };
                if better {
                    best = Some(candidate);
                }
            }
            Err(err @ TensorError::DegenerateColumn { .. }) => {
                last_degenerate = Some(state);
                last_err = Some(err);
            }
            Err(err) => last_err = Some(err),
        }
        if let Some((_, report)) = &best {
            if report.max_abs_error < 0.5 {
                break;
            }
        }
    }

    if let Some(result) = best {
        return Ok(result);
    }
    // Every attempt produced a column that cannot carry its scale: drop those
    // components and keep the rest (the fit loses the dropped ranks).
    if let Some(state) = last_degenerate {
        let reduced = drop_degenerate_components(state)?;
        return finalize_model(tensor, &reduced);
    }
    Err(last_err.unwrap_or(TensorError::SingularSolve))
}

/// Resumes ALS from an existing L1-normalized model instead of a random
/// initialization. Used for retraining after data updates: the caller rescales
/// the weights to the new total first, then lets the sweeps adapt the factors.
/// On an unchanged tensor the initial model is already stationary, so the
/// first sweep meets the improvement tolerance immediately.
pub fn cp_als_refit(
    tensor: &DenseTensor,
    model: &CpModel,
    opts: &FitOptions,
) -> Result<(CpModel, FitReport), TensorError> {
    if model.shape() != tensor.shape() {
        return Err(TensorError::ShapeMismatch {
            left: model.shape(),
            right: tensor.shape().to_vec(),
        });
    }
    // Convert to the internal representation: unit-L2 factor columns with all
    // scale held in lambda.
    let rank = model.rank();
    let mut factors = model.factors.clone();
    let mut lambda = DVector::from_column_slice(model.weights());
    for f in factors.iter_mut() {
        for r in 0..rank {
            let norm = f.column(r).norm();
            if norm > 0.0 {
                for i in 0..f.nrows() {
                    f[(i, r)] /= norm;
                }
                lambda[r] *= norm;
            }
        }
    }
    let state = run_als_from(tensor, factors, lambda, opts)?;
    match finalize_model(tensor, &state) {
        Ok(result) => Ok(result),
        Err(TensorError::DegenerateColumn { .. }) => {
            let reduced = drop_degenerate_components(state)?;
            finalize_model(tensor, &reduced)
        }
        Err(err) => Err(err),
    }
}

fn derive_seed(seed: u64, attempt: u64) -> u64 {
    seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Internal ALS state: unit-L2 factor columns with per-component scale in
/// `lambda`, plus the residual history of the run.
struct AlsState {
    lambda: DVector<f64>,
    factors: Vec<DMatrix<f64>>,
    residuals: Vec<f64>,
    iterations: usize,
    converged: bool,
    ridge: f64,
}

fn run_als(
    tensor: &DenseTensor,
    rank: usize,
    opts: &FitOptions,
    seed: u64,
) -> Result<AlsState, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Zero-mean init: all-positive columns are nearly parallel, which leaves
    // the Hadamard gram close to singular at high rank and stalls the sweeps.
    let mut factors: Vec<DMatrix<f64>> = tensor
        .shape()
        .iter()
        .map(|&d| DMatrix::from_fn(d, rank, |_, _| rng.gen::<f64>() - 0.5))
        .collect();
    let mut lambda = DVector::from_element(rank, 1.0);
    for f in factors.iter_mut() {
        pull_column_norms(f, &mut lambda);
    }
    run_als_from(tensor, factors, lambda, opts)
}

fn run_als_from(
    tensor: &DenseTensor,
    mut factors: Vec<DMatrix<f64>>,
    mut lambda: DVector<f64>,
    opts: &FitOptions,
) -> Result<AlsState, TensorError> {
    let modes = factors.len();
    let mut grams: Vec<DMatrix<f64>> = factors.iter().map(|f| f.tr_mul(f)).collect();
    let mut residuals = vec![residual(tensor, &lambda, &factors)];
    let mut converged = false;
    let mut iterations = 0;

    for _sweep in 0..opts.max_iters {
        for mode in 0..modes {
            let gram = hadamard_excluding(&grams, mode);
            let m = mttkrp(tensor, &factors, mode);
            // Solve B (V + ridge I) = M for the unnormalized mode factor B.
            let solved = ridge_solve(&gram, &m, opts.ridge)?;
            factors[mode] = solved;
            // The solve was taken against the *normalized* other factors, so
            // the new columns absorbed the entire component scale; pull it
            // back out into lambda.
            lambda.fill(1.0);
            pull_column_norms(&mut factors[mode], &mut lambda);
            grams[mode] = factors[mode].tr_mul(&factors[mode]);
        }
        iterations += 1;
        let res = residual(tensor, &lambda, &factors);
        let prev = *residuals.last().unwrap();
        residuals.push(res);
        let improvement = (prev - res) / prev.max(f64::EPSILON);
        if improvement < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(AlsState {
        lambda,
        factors,
        residuals,
        iterations,
        converged,
        ridge: opts.ridge,
    })
}

/// L2-normalizes each column of `f`, multiplying the norms into `lambda`.
/// A dead (all-zero) column is reset to the first basis vector so later
/// normalization stays well-defined; its lambda becomes 0.
fn pull_column_norms(f: &mut DMatrix<f64>, lambda: &mut DVector<f64>) {
    for r in 0..f.ncols() {
        let norm = f.column(r).norm();
        if norm > 0.0 {
            for i in 0..f.nrows() {
                f[(i, r)] /= norm;
            }
            lambda[r] *= norm;
        } else {
            f[(0, r)] = 1.0;
            lambda[r] = 0.0;
        }
    }
}

/// Hadamard product of all gram matrices except `skip`.
fn hadamard_excluding(grams: &[DMatrix<f64>], skip: usize) -> DMatrix<f64> {
    let rank = grams[0].nrows();
    let mut out = DMatrix::from_element(rank, rank, 1.0);
    for (mode, g) in grams.iter().enumerate() {
        if mode != skip {
            out.component_mul_assign(g);
        }
    }
    out
}

/// Matricized-tensor-times-Khatri-Rao-product along `mode`; the workhorse of
/// each ALS solve. Zero entries are skipped, which matters for sparse count
/// tensors.
fn mttkrp(tensor: &DenseTensor, factors: &[DMatrix<f64>], mode: usize) -> DMatrix<f64> {
    let shape = tensor.shape();
    let rank = factors[0].ncols();
    let mut out = DMatrix::zeros(shape[mode], rank);
    let mut index = vec![0usize; shape.len()];
    let mut row = vec![0f64; rank];
    for &value in tensor.data() {
        if value != 0.0 {
            row.fill(value);
            for (other, f) in factors.iter().enumerate() {
                if other != mode {
                    let i = index[other];
                    for (r, slot) in row.iter_mut().enumerate() {
                        *slot *= f[(i, r)];
                    }
                }
            }
            let i = index[mode];
            for (r, &term) in row.iter().enumerate() {
                out[(i, r)] += term;
            }
        }
        if !advance_index(&mut index, shape) {
            break;
        }
    }
    out
}

/// Solves `B (V + ridge I) = M`, escalating the ridge deterministically if the
/// Cholesky factorization fails (V is positive semidefinite by construction,
/// but can be numerically singular when the rank exceeds what the data needs).
fn ridge_solve(
    gram: &DMatrix<f64>,
    m: &DMatrix<f64>,
    ridge: f64,
) -> Result<DMatrix<f64>, TensorError> {
    let rank = gram.nrows();
    for boost in [1.0, 1e3, 1e6, 1e9] {
        let mut system = gram.clone();
        for r in 0..rank {
            system[(r, r)] += ridge * boost;
        }
        if let Some(chol) = system.cholesky() {
            return Ok(chol.solve(&m.transpose()).transpose());
        }
    }
    Err(TensorError::SingularSolve)
}

/// Frobenius residual of the internal (lambda, unit-column factors) model.
fn residual(tensor: &DenseTensor, lambda: &DVector<f64>, factors: &[DMatrix<f64>]) -> f64 {
    let shape = tensor.shape();
    let rank = lambda.len();
    let mut index = vec![0usize; shape.len()];
    let mut sq = 0.0;
    for &value in tensor.data() {
        let mut entry = 0.0;
        for r in 0..rank {
            let mut term = lambda[r];
            for (f, &i) in factors.iter().zip(index.iter()) {
                term *= f[(i, r)];
            }
            entry += term;
        }
        let diff = entry - value;
        sq += diff * diff;
        if !advance_index(&mut index, shape) {
            break;
        }
    }
    sq.sqrt()
}

/// Converts internal ALS state to the public L1-normalized, total-calibrated
/// model, and reports the exact residual of what is returned.
fn finalize_model(
    tensor: &DenseTensor,
    state: &AlsState,
) -> Result<(CpModel, FitReport), TensorError> {
    let raw = CpModel {
        weights: state.lambda.clone(),
        factors: state.factors.clone(),
    };
    let mut model = raw.normalize_l1()?;

    let tensor_total = tensor.total();
    let weight_total = model.weight_total();
    if tensor_total == 0.0 && weight_total.abs() < DEGENERATE_COLUMN_EPS {
        // Zero tensor fitted by a zero model: nothing to calibrate.
    } else {
        if weight_total == 0.0 {
            return Err(TensorError::TotalCollapse {
                got: weight_total,
                want: tensor_total,
            });
        }
        let scale = tensor_total / weight_total;
        if !scale.is_finite() {
            return Err(TensorError::TotalCollapse {
                got: weight_total,
                want: tensor_total,
            });
        }
        model.scale_weights(scale);
    }

    let recon = model.reconstruct_full_guarded(u128::MAX)?;
    let frobenius_error = recon.frobenius_distance(tensor)?;
    let max_abs_error = recon.max_abs_diff(tensor)?;
    Ok((
        model,
        FitReport {
            frobenius_error,
            max_abs_error,
            iterations: state.iterations,
            converged: state.converged,
            sweep_residuals: state.residuals.clone(),
        },
    ))
}

/// Removes components whose factor columns cannot be L1-normalized (signed sum
/// below [`DEGENERATE_COLUMN_EPS`] in any axis). Errors if nothing survives.
fn drop_degenerate_components(state: AlsState) -> Result<AlsState, TensorError> {
    let rank = state.lambda.len();
    let keep: Vec<usize> = (0..rank)
        .filter(|&r| {
            state
                .factors
                .iter()
                .all(|f| f.column(r).sum().abs() >= DEGENERATE_COLUMN_EPS)
        })
        .collect();
    if keep.is_empty() {
        let sum = state.factors[0].column(0).sum();
        return Err(TensorError::DegenerateColumn {
            axis: 0,
            rank: 0,
            sum,
        });
    }
    let lambda = DVector::from_iterator(keep.len(), keep.iter().map(|&r| state.lambda[r]));
    let factors = state
        .factors
        .iter()
        .map(|f| {
            let cols: Vec<_> = keep.iter().map(|&r| f.column(r).into_owned()).collect();
            DMatrix::from_columns(&cols)
        })
        .collect();
    Ok(AlsState {
        lambda,
        factors,
        residuals: state.residuals,
        iterations: state.iterations,
        converged: state.converged,
        ridge: state.ridge,
    })
}
