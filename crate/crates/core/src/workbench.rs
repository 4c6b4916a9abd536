//! Ground truth, workload generation, and benchmarking.
//!
//! The oracle answers queries exactly by scanning the encoded table; range
//! predicates are evaluated on the raw (pre-binning) values with their real
//! open/closed semantics, so it is the reference the estimator is judged
//! against. Workloads are seeded draws against the data itself, which keeps
//! generated equality values and range endpoints realistic, and every entry
//! can carry its true cardinality in a JSON-lines file.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AttributeEncoding, EncodedTable, Schema};
use crate::covering::{Block, JoinPlan};
use crate::estimator::{
    EstimatorIndex, OpCounter, Predicate, PredicateOp, PredicateValue, Query, DEFAULT_ALPHA,
};
use crate::tensor::{CpModel, TensorError};

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("unknown attribute {name:?}")]
    UnknownAttribute { name: String },
    #[error("bad predicate on {attr:?}: {reason}")]
    BadPredicate { attr: String, reason: String },
    #[error("the table has no attribute eligible for predicates")]
    NoUsableAttributes,
    #[error("could not draw a query matching the truth filter after {attempts} attempts")]
    FilterExhausted { attempts: usize },
    #[error("workload line {line}: {reason}")]
    Workload { line: usize, reason: String },
    #[error("entry {index} has no recorded truth and no table was provided to compute it")]
    MissingTruth { index: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

enum RowFilter {
    CodeEq {
        column: usize,
        code: u32,
    },
    /// Interval on raw values; each side may be open (strict) or closed.
    Range {
        column: usize,
        lo: f64,
        lo_strict: bool,
        hi: f64,
        hi_strict: bool,
    },
    /// An equality against a value absent from the dictionary.
    Nothing,
}

impl RowFilter {
    fn matches(&self, table: &EncodedTable, row: usize) -> bool {
        match self {
            RowFilter::CodeEq { column, code } => table.code(row, *column) == *code,
            RowFilter::Range {
                column,
                lo,
                lo_strict,
                hi,
                hi_strict,
            } => {
                let v = table.columns[*column].raw().expect("continuous column")[row];
                let above = if *lo_strict { v > *lo } else { v >= *lo };
                let below = if *hi_strict { v < *hi } else { v <= *hi };
                above && below
            }
            RowFilter::Nothing => false,
        }
    }
}

/// Compiles a query into row filters against the raw table, enforcing the
/// same predicate shapes as the estimator: equality on categorical
/// attributes, one- or two-sided ranges on continuous ones.
fn row_filters(schema: &Schema, query: &Query) -> Result<Vec<RowFilter>, WorkbenchError> {
    let n = schema.attributes.len();
    let mut has_eq = vec![false; n];
    let mut lows: Vec<Option<(f64, bool)>> = vec![None; n];
    let mut highs: Vec<Option<(f64, bool)>> = vec![None; n];
    let mut filters = Vec::new();
    for pred in &query.predicates {
        let attr =
            schema
                .attribute_index(&pred.attr)
                .ok_or_else(|| WorkbenchError::UnknownAttribute {
                    name: pred.attr.clone(),
                })?;
        let bad = |reason: &str| WorkbenchError::BadPredicate {
            attr: pred.attr.clone(),
            reason: reason.to_string(),
        };
        match (&pred.op, &schema.attributes[attr].encoding) {
            (PredicateOp::Eq, AttributeEncoding::Categorical { values }) => {
                if has_eq[attr] || lows[attr].is_some() || highs[attr].is_some() {
                    return Err(bad("attribute constrained more than once"));
                }
                has_eq[attr] = true;
                let key = match &pred.value {
                    PredicateValue::Text(s) => s.clone(),
                    PredicateValue::Number(x) => {
                        if x.fract() == 0.0 && x.abs() < 9.0e15 {
                            format!("{}", *x as i64)
                        } else {
                            format!("{x}")
                        }
                    }
                };
                filters.push(match values.code(&key) {
                    Some(code) => RowFilter::CodeEq { column: attr, code },
                    None => RowFilter::Nothing,
                });
            }
            (PredicateOp::Eq, AttributeEncoding::Continuous { .. }) => {
                return Err(bad("equality is not supported on a continuous attribute"));
            }
            (op, AttributeEncoding::Continuous { .. }) => {
                let x = match &pred.value {
                    PredicateValue::Number(x) if x.is_finite() => *x,
                    _ => return Err(bad("range bound must be a finite number")),
                };
                let (slot, strict) = match op {
                    PredicateOp::Lt => (&mut highs[attr], true),
                    PredicateOp::Le => (&mut highs[attr], false),
                    PredicateOp::Gt => (&mut lows[attr], true),
                    PredicateOp::Ge => (&mut lows[attr], false),
                    PredicateOp::Eq => unreachable!(),
                };
                if has_eq[attr] || slot.is_some() {
                    return Err(bad("two bounds on the same side of a range"));
                }
                *slot = Some((x, strict));
            }
            (_, AttributeEncoding::Categorical { .. }) => {
                return Err(bad("range predicates need a continuous attribute"));
            }
        }
    }
    for attr in 0..n {
        if lows[attr].is_none() && highs[attr].is_none() {
            continue;
        }
        let (lo, lo_strict) = lows[attr].unwrap_or((f64::NEG_INFINITY, false));
        let (hi, hi_strict) = highs[attr].unwrap_or((f64::INFINITY, false));
        filters.push(RowFilter::Range {
            column: attr,
            lo,
            lo_strict,
            hi,
            hi_strict,
        });
    }
    Ok(filters)
}

/// Exact cardinality of a conjunctive query, by full scan.
pub fn oracle_count(
    table: &EncodedTable,
    schema: &Schema,
    query: &Query,
) -> Result<u64, WorkbenchError> {
    let filters = row_filters(schema, query)?;
    let mut count = 0u64;
    for row in 0..table.rows {
        if filters.iter().all(|f| f.matches(table, row)) {
            count += 1;
        }
    }
    Ok(count)
}

// ---------------------------------------------------------------------------
// Workloads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthFilter {
    /// Keep whatever the draw produces.
    Any,
    /// Redraw until the query matches at least one row.
    NonZero,
    /// Redraw until the query matches nothing; values are drawn from the
    /// attribute domains instead of the data so misses are actually likely.
    Zero,
}

#[derive(Debug, Clone)]
pub struct WorkloadOptions {
    pub count: usize,
    pub seed: u64,
    /// Probability of each attribute receiving a predicate (before the
    /// min/max clamp).
    pub inclusion: f64,
    pub min_filters: usize,
    pub max_filters: Option<usize>,
    pub truth: TruthFilter,
}

impl Default for WorkloadOptions {
    fn default() -> Self {
        WorkloadOptions {
            count: 100,
            seed: 0,
            inclusion: 0.4,
            min_filters: 2,
            max_filters: None,
            truth: TruthFilter::NonZero,
        }
    }
}

/// One workload line: a query and, once computed, its true cardinality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadEntry {
    #[serde(flatten)]
    pub query: Query,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<u64>,
}

const REDRAW_CAP: usize = 5_000;

/// Draws a seeded workload against the table. Equality values come from
/// uniformly chosen rows (so populated cells are likely) except under
/// [`TruthFilter::Zero`], where they come from the whole dictionary; range
/// endpoints always come from observed values. Every entry carries its exact
/// cardinality.
pub fn generate_workload(
    table: &EncodedTable,
    schema: &Schema,
    opts: &WorkloadOptions,
) -> Result<Vec<WorkloadEntry>, WorkbenchError> {
    let n = schema.attributes.len();
    if n == 0 || table.rows == 0 {
        return Err(WorkbenchError::NoUsableAttributes);
    }
    let min_filters = opts.min_filters.clamp(1, n);
    let max_filters = opts.max_filters.unwrap_or(n).clamp(min_filters, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(opts.count);
    for _ in 0..opts.count {
        let mut accepted = None;
        for _ in 0..REDRAW_CAP {
            let query = draw_query(table, schema, &mut rng, opts, min_filters, max_filters);
            let truth = oracle_count(table, schema, &query)?;
            let keep = match opts.truth {
                TruthFilter::Any => true,
                TruthFilter::NonZero => truth > 0,
                TruthFilter::Zero => truth == 0,
            };
            if keep {
                accepted = Some(WorkloadEntry {
                    query,
                    truth: Some(truth),
                });
                break;
            }
        }
        out.push(accepted.ok_or(WorkbenchError::FilterExhausted {
            attempts: REDRAW_CAP,
        })?);
    }
    Ok(out)
}

fn draw_query(
    table: &EncodedTable,
    schema: &Schema,
    rng: &mut ChaCha8Rng,
    opts: &WorkloadOptions,
    min_filters: usize,
    max_filters: usize,
) -> Query {
    let n = schema.attributes.len();
    // Bernoulli picks, clamped into [min, max] by sampling without
    // replacement from the leftovers (or dropping picks).
    let mut picked: Vec<usize> = (0..n).filter(|_| rng.gen_bool(opts.inclusion)).collect();
    while picked.len() > max_filters {
        let drop = rng.gen_range(0..picked.len());
        picked.remove(drop);
    }
    if picked.len() < min_filters {
        let mut rest: Vec<usize> = (0..n).filter(|a| !picked.contains(a)).collect();
        rest.shuffle(rng);
        picked.extend(rest.into_iter().take(min_filters - picked.len()));
        picked.sort_unstable();
    }
    let mut predicates = Vec::with_capacity(picked.len());
    for attr in picked {
        match &schema.attributes[attr].encoding {
            AttributeEncoding::Categorical { values } => {
                let value = match opts.truth {
                    TruthFilter::Zero => {
                        let code = rng.gen_range(0..values.len());
                        values.value(code as u32).unwrap().to_string()
                    }
                    _ => {
                        let row = rng.gen_range(0..table.rows);
                        let code = table.code(row, attr);
                        values.value(code).unwrap().to_string()
                    }
                };
                predicates.push(Predicate {
                    attr: schema.attributes[attr].name.clone(),
                    op: PredicateOp::Eq,
                    value: PredicateValue::Text(value),
                });
            }
            AttributeEncoding::Continuous { .. } => {
                let raw = table.columns[attr].raw().expect("continuous column");
                let a = raw[rng.gen_range(0..table.rows)];
                let b = raw[rng.gen_range(0..table.rows)];
                let name = &schema.attributes[attr].name;
                if rng.gen_bool(0.3) {
                    // One-sided.
                    let (op, bound) = if rng.gen_bool(0.5) {
                        (PredicateOp::Lt, a.max(b))
                    } else {
                        (PredicateOp::Gt, a.min(b))
                    };
                    predicates.push(Predicate {
                        attr: name.clone(),
                        op,
                        value: PredicateValue::Number(bound),
                    });
                } else {
                    predicates.push(Predicate {
                        attr: name.clone(),
                        op: PredicateOp::Ge,
                        value: PredicateValue::Number(a.min(b)),
                    });
                    predicates.push(Predicate {
                        attr: name.clone(),
                        op: PredicateOp::Le,
                        value: PredicateValue::Number(a.max(b)),
                    });
                }
            }
        }
    }
    Query { predicates }
}

/// Writes a workload as JSON lines.
pub fn write_workload<W: Write>(
    mut out: W,
    entries: &[WorkloadEntry],
) -> Result<(), WorkbenchError> {
    for entry in entries {
        serde_json::to_writer(&mut out, entry)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines workload; blank lines and `#` comments are skipped.
pub fn read_workload<R: BufRead>(input: R) -> Result<Vec<WorkloadEntry>, WorkbenchError> {
    let mut out = Vec::new();
    for (at, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let entry: WorkloadEntry =
            serde_json::from_str(trimmed).map_err(|e| WorkbenchError::Workload {
                line: at + 1,
                reason: e.to_string(),
            })?;
        out.push(entry);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Multiplicative error of a rounded estimate against a nonzero truth:
/// `max(r/t, t/r)` with the rounded estimate floored at 1. Always >= 1, and
/// exactly 1 when the estimate rounds to the truth.
pub fn q_error(estimate: f64, truth: u64) -> f64 {
    debug_assert!(truth > 0, "q-error needs a nonzero truth");
    let r = estimate.round().max(1.0);
    let t = truth as f64;
    (r / t).max(t / r)
}

/// Fraction of estimates that round to zero; the accuracy measure for
/// queries whose true cardinality is zero.
pub fn zero_accuracy(estimates: &[f64]) -> f64 {
    if estimates.is_empty() {
        return 1.0;
    }
    estimates.iter().filter(|&&e| e < 0.5).count() as f64 / estimates.len() as f64
}

/// Nearest-rank quantile of an ascending-sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QErrorSummary {
    pub median: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_micros: f64,
    pub p50_micros: f64,
    pub p95_micros: f64,
    pub max_micros: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub queries: usize,
    pub nonzero_queries: usize,
    pub zero_queries: usize,
    /// Accuracy over queries with nonzero truth; absent if there are none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_error: Option<QErrorSummary>,
    /// Fraction of zero-truth queries estimated as zero; absent if there are
    /// no zero-truth queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_accuracy: Option<f64>,
    pub total_ops: OpCounter,
    /// Wall-clock timing; omitted under stable mode so reports are
    /// byte-for-byte reproducible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencySummary>,
}

/// Per-query benchmark outcome.
#[derive(Debug, Clone, Serialize)]
pub struct QueryOutcome {
    pub estimate: f64,
    pub truth: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_error: Option<f64>,
    pub blocks_used: usize,
    pub ops: OpCounter,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_micros: Option<f64>,
}

/// Runs every entry through the estimator and summarizes accuracy, operation
/// counts, and (unless `stable`) latency. Entries must carry their truths;
/// see [`resolve_truths`].
pub fn run_benchmark(
    index: &EstimatorIndex,
    entries: &[WorkloadEntry],
    stable: bool,
) -> Result<(BenchmarkReport, Vec<QueryOutcome>), WorkbenchError> {
    let mut outcomes = Vec::with_capacity(entries.len());
    let mut q_errors = Vec::new();
    let mut zero_estimates = Vec::new();
    let mut total_ops = OpCounter::default();
    let mut latencies = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let truth = entry
            .truth
            .ok_or(WorkbenchError::MissingTruth { index: i })?;
        let started = Instant::now();
        let est = index
            .estimate(&entry.query)
            .map_err(|e| WorkbenchError::Workload {
                line: i + 1,
                reason: e.to_string(),
            })?;
        let elapsed = started.elapsed().as_secs_f64() * 1e6;
        total_ops.mults += est.ops.mults;
        total_ops.adds += est.ops.adds;
        total_ops.divs += est.ops.divs;
        let q = if truth > 0 {
            let q = q_error(est.estimate, truth);
            q_errors.push(q);
            Some(q)
        } else {
            zero_estimates.push(est.estimate);
            None
        };
        latencies.push(elapsed);
        outcomes.push(QueryOutcome {
            estimate: est.estimate,
            truth,
            q_error: q,
            blocks_used: est.blocks_used.len(),
            ops: est.ops,
            latency_micros: if stable { None } else { Some(elapsed) },
        });
    }
    q_errors.sort_by(f64::total_cmp);
    let q_summary = if q_errors.is_empty() {
        None
    } else {
        Some(QErrorSummary {
            median: quantile(&q_errors, 0.5),
            p95: quantile(&q_errors, 0.95),
            p99: quantile(&q_errors, 0.99),
            max: *q_errors.last().unwrap(),
        })
    };
    let latency = if stable || latencies.is_empty() {
        None
    } else {
        let mut sorted = latencies.clone();
        sorted.sort_by(f64::total_cmp);
        Some(LatencySummary {
            mean_micros: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_micros: quantile(&sorted, 0.5),
            p95_micros: quantile(&sorted, 0.95),
            max_micros: *sorted.last().unwrap(),
        })
    };
    let report = BenchmarkReport {
        queries: entries.len(),
        nonzero_queries: q_errors.len(),
        zero_queries: zero_estimates.len(),
        q_error: q_summary,
        zero_accuracy: if zero_estimates.is_empty() {
            None
        } else {
            Some(zero_accuracy(&zero_estimates))
        },
        total_ops,
        latency,
    };
    Ok((report, outcomes))
}

/// Fills in missing truths by scanning the table; entries that already carry
/// one are left alone.
pub fn resolve_truths(
    entries: &mut [WorkloadEntry],
    table: &EncodedTable,
    schema: &Schema,
) -> Result<(), WorkbenchError> {
    for entry in entries.iter_mut() {
        if entry.truth.is_none() {
            entry.truth = Some(oracle_count(table, schema, &entry.query)?);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic indexes (latency studies)
// ---------------------------------------------------------------------------

/// Builds an index of the requested dimensions whose factors are random but
/// correctly normalized. Reconstruction quality is meaningless; evaluation
/// cost is exactly that of a trained index with the same shape, which is what
/// latency measurements need.
pub fn synthetic_index(
    domains: &[u64],
    blocks: &[Block],
    rank: usize,
    rows: f64,
    seed: u64,
) -> EstimatorIndex {
    use nalgebra::DMatrix;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attributes = domains
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let values: Vec<String> = (0..d).map(|c| format!("v{c}")).collect();
            crate::catalog::Attribute {
                name: format!("a{i}"),
                encoding: AttributeEncoding::Categorical {
                    values: values.try_into().expect("distinct synthetic values"),
                },
            }
        })
        .collect();
    let schema = Schema { attributes };
    let block_models = blocks
        .iter()
        .map(|block| {
            let factors: Vec<DMatrix<f64>> = block
                .members
                .iter()
                .map(|&m| {
                    let d = domains[m] as usize;
                    let mut f = DMatrix::from_fn(d, rank, |_, _| rng.gen::<f64>() + 0.05);
                    for mut col in f.column_iter_mut() {
                        let sum: f64 = col.iter().sum();
                        col /= sum;
                    }
                    f
                })
                .collect();
            let weights = vec![rows / rank as f64; rank];
            let model = CpModel::new(weights, factors).expect("valid synthetic model");
            crate::estimator::BlockModel::new(block.clone(), model, 0.0)
        })
        .collect();
    EstimatorIndex {
        schema,
        join_plan: JoinPlan::identity(domains.len()),
        domains: domains.to_vec(),
        strength: 1,
        alpha: DEFAULT_ALPHA,
        rows,
        blocks: block_models,
    }
}
