//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use cardest_core::catalog::{
    encode_with_schema, ingest_csv, CatalogError, DeclaredKind, SchemaOptions,
};
use cardest_core::covering::{
    greedy_covering, load_design, plan_joins, verify_covering, CoveringError,
};
use cardest_core::estimator::{EstimatorError, EstimatorIndex, Query};
use cardest_core::tensor::{cp_als_fit, FitOptions, TensorError};
use cardest_core::workbench::{
    generate_workload, read_workload, resolve_truths, run_benchmark, write_workload, TruthFilter,
    WorkbenchError, WorkloadOptions,
};

use crate::config::{
    BenchArgs, EstimateArgs, InspectArgs, TrainArgs, UpdateArgs, VerifyCoverArgs, ZeroMode,
};

/// Errors with process exit codes: 2 config/usage, 3 data or i/o,
/// 4 infeasible covering, 5 numeric.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Infeasible(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg)
            | CliError::Data(msg)
            | CliError::Infeasible(msg)
            | CliError::Numeric(msg) => f.write_str(msg),
        }
    }
}

impl From<CatalogError> for CliError {
    fn from(err: CatalogError) -> Self {
        match err {
            CatalogError::BadBinCount { .. } => CliError::Config(err.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CoveringError> for CliError {
    fn from(err: CoveringError) -> Self {
        match err {
            CoveringError::Infeasible { .. } | CoveringError::Uncovered { .. } => {
                CliError::Infeasible(err.to_string())
            }
            CoveringError::Parse { .. } => CliError::Data(err.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(err: TensorError) -> Self {
        CliError::Numeric(err.to_string())
    }
}

impl From<EstimatorError> for CliError {
    fn from(err: EstimatorError) -> Self {
        match err {
            EstimatorError::UnknownAttribute { .. } | EstimatorError::BadPredicate { .. } => {
                CliError::Config(err.to_string())
            }
            EstimatorError::Tensor(inner) => CliError::Numeric(inner.to_string()),
            EstimatorError::Catalog(inner) => CliError::from(inner),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<WorkbenchError> for CliError {
    fn from(err: WorkbenchError) -> Self {
        CliError::Data(err.to_string())
    }
}

fn io_data(context: &str, err: std::io::Error) -> CliError {
    CliError::Data(format!("{context}: {err}"))
}

fn schema_options(continuous: &[String], categorical: &[String], bins: usize) -> SchemaOptions {
    let mut opts = SchemaOptions {
        bin_count: bins,
        ..SchemaOptions::default()
    };
    for name in continuous {
        opts.kinds.insert(name.clone(), DeclaredKind::Continuous);
    }
    for name in categorical {
        opts.kinds.insert(name.clone(), DeclaredKind::Categorical);
    }
    opts
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let settings = args.resolve()?;
    if settings.rank == 0 {
        return Err(CliError::Config("rank must be at least 1".into()));
    }
    if settings.strength == 0 {
        return Err(CliError::Config("strength must be at least 1".into()));
    }
    let started = Instant::now();

    let file = fs::File::open(&settings.data)
        .map_err(|e| io_data(&format!("open {}", settings.data.display()), e))?;
    let opts = schema_options(&settings.continuous, &settings.categorical, settings.bins);
    let (schema, table) = ingest_csv(file, &opts)?;
    for name in settings.continuous.iter().chain(&settings.categorical) {
        if schema.attribute_index(name).is_none() {
            return Err(CliError::Config(format!(
                "kind override names unknown attribute {name:?}"
            )));
        }
    }
    println!(
        "ingested {} rows, {} attributes from {}",
        table.rows,
        schema.attributes.len(),
        settings.data.display()
    );

    let plan = plan_joins(&table.domains, settings.balance)?;
    let joined = table.apply_join_plan(&plan)?;
    if !plan.is_identity() {
        println!(
            "joined {} attributes into {} axes with domains {:?}",
            table.domains.len(),
            joined.domains.len(),
            joined.domains
        );
    }

    let strength = settings.strength.min(joined.domains.len());
    let design = greedy_covering(&joined.domains, settings.max_block_volume, strength)?;
    println!(
        "covering: v={} k={} t={} with {} blocks (budget {})",
        design.v,
        design.k,
        design.t,
        design.blocks.len(),
        settings.max_block_volume
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let fits: Result<Vec<_>, CliError> = pool.install(|| {
        design
            .blocks
            .par_iter()
            .enumerate()
            .map(|(i, block)| {
                let tensor = joined.build_block_tensor(block).map_err(CliError::from)?;
                let rank = settings.rank.min(tensor.len());
                let fit_opts = FitOptions {
                    max_iters: settings.max_iters,
                    tol: settings.tol,
                    seed: settings
                        .seed
                        .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                    retries: settings.retries,
                    ridge: 1e-9,
                };
                let block_started = Instant::now();
                let (model, report) = cp_als_fit(&tensor, rank, &fit_opts)?;
                Ok((block.clone(), model, report, block_started.elapsed()))
            })
            .collect()
    });
    let fits = fits?;
    let mut models = Vec::with_capacity(fits.len());
    let mut fit_seconds = 0.0;
    for (block, model, report, took) in fits {
        println!(
            "  block {:?}: rank {} in {} sweeps, residual {:.3e}, max cell error {:.3}, {:.2}s",
            block.members,
            model.rank(),
            report.iterations,
            report.frobenius_error,
            report.max_abs_error,
            took.as_secs_f64()
        );
        fit_seconds += took.as_secs_f64();
        models.push((block, model));
    }

    let index = EstimatorIndex::assemble(schema, plan, strength, settings.alpha, &joined, models)?;
    index.save(&settings.out)?;
    let total = started.elapsed().as_secs_f64();
    println!(
        "trained {} blocks in {:.2}s wall ({:.2}s fitting, mean {:.2}s/block); index at {}",
        index.blocks.len(),
        total,
        fit_seconds,
        fit_seconds / index.blocks.len().max(1) as f64,
        settings.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

pub fn estimate(args: EstimateArgs) -> Result<(), CliError> {
    let index = EstimatorIndex::load(&args.index)?;
    let text = match (&args.query, &args.query_file) {
        (Some(inline), _) => inline.clone(),
        (None, Some(path)) if path.as_os_str() != "-" => {
            fs::read_to_string(path).map_err(|e| io_data(&format!("read {}", path.display()), e))?
        }
        _ => {
            let mut buf = String::new();
            std::io::stdin()
                .read_to_string(&mut buf)
                .map_err(|e| io_data("read stdin", e))?;
            buf
        }
    };
    let query = Query::from_json(&text).map_err(|e| CliError::Config(format!("query: {e}")))?;
    let result = index.estimate(&query)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&result)
            .map_err(|e| CliError::Data(format!("serialize result: {e}")))?
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn bench(args: BenchArgs) -> Result<(), CliError> {
    let index = EstimatorIndex::load(&args.index)?;

    // The oracle table, if data was provided.
    let table = match &args.data {
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| io_data(&format!("open {}", path.display()), e))?;
            Some(encode_with_schema(file, &index.schema)?)
        }
        None => None,
    };

    let mut entries = match (&args.workload, args.gen) {
        (Some(path), None) => {
            let file = fs::File::open(path)
                .map_err(|e| io_data(&format!("open {}", path.display()), e))?;
            read_workload(std::io::BufReader::new(file))?
        }
        (None, Some(count)) => {
            let table = table.as_ref().ok_or_else(|| {
                CliError::Config("--gen needs --data to draw values and compute truths".into())
            })?;
            let opts = WorkloadOptions {
                count,
                seed: args.seed,
                inclusion: args.inclusion,
                min_filters: args.min_filters,
                max_filters: args.max_filters,
                truth: match args.zeros {
                    ZeroMode::Drop => TruthFilter::NonZero,
                    ZeroMode::Keep => TruthFilter::Any,
                    ZeroMode::Only => TruthFilter::Zero,
                },
            };
            generate_workload(table, &index.schema, &opts)?
        }
        (None, None) => {
            return Err(CliError::Config(
                "give either --workload FILE or --gen COUNT".into(),
            ));
        }
        (Some(_), Some(_)) => unreachable!("clap forbids the combination"),
    };

    if let Some(table) = &table {
        resolve_truths(&mut entries, table, &index.schema)?;
    }
    if let Some(path) = &args.save_workload {
        let file = fs::File::create(path)
            .map_err(|e| io_data(&format!("create {}", path.display()), e))?;
        write_workload(std::io::BufWriter::new(file), &entries)?;
    }

    let (report, outcomes) = run_benchmark(&index, &entries, args.stable)?;

    if let Some(path) = &args.per_query {
        let mut lines = String::new();
        for outcome in &outcomes {
            lines.push_str(
                &serde_json::to_string(outcome)
                    .map_err(|e| CliError::Data(format!("serialize outcome: {e}")))?,
            );
            lines.push('\n');
        }
        fs::write(path, lines).map_err(|e| io_data(&format!("write {}", path.display()), e))?;
    }

    let rendered = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("serialize report: {e}")))?;
    match &args.out {
        Some(path) => fs::write(path, format!("{rendered}\n"))
            .map_err(|e| io_data(&format!("write {}", path.display()), e))?,
        None => println!("{rendered}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// update
// ---------------------------------------------------------------------------

pub fn update(args: UpdateArgs) -> Result<(), CliError> {
    if args.weights_only == args.retrain {
        return Err(CliError::Config(
            "choose exactly one of --weights-only or --retrain".into(),
        ));
    }
    let mut index = EstimatorIndex::load(&args.index)?;
    if args.weights_only {
        let rows = count_rows_with_matching_header(&args.data, &index)?;
        let before = index.rows;
        index.update_weights(rows as f64);
        println!("rescaled weights: {before} rows -> {rows}");
    } else {
        let file = fs::File::open(&args.data)
            .map_err(|e| io_data(&format!("open {}", args.data.display()), e))?;
        let table = encode_with_schema(file, &index.schema)?;
        let joined = table.apply_join_plan(&index.join_plan)?;
        let opts = FitOptions {
            max_iters: args.max_iters,
            tol: args.tol,
            seed: args.seed,
            retries: 0,
            ridge: 1e-9,
        };
        let started = Instant::now();
        let reports = index.retrain(&joined, &opts)?;
        for (bm, report) in index.blocks.iter().zip(&reports) {
            println!(
                "  block {:?}: {} sweeps, residual {:.3e}",
                bm.block.members, report.iterations, report.frobenius_error
            );
        }
        println!(
            "retrained {} blocks on {} rows in {:.2}s",
            reports.len(),
            joined.rows,
            started.elapsed().as_secs_f64()
        );
    }
    index.save(&args.out)?;
    println!("updated index at {}", args.out.display());
    Ok(())
}

/// Counts data rows of a CSV after checking its header matches the schema.
/// Values are not validated: a cheap weight rescale must not require a full
/// re-encode.
fn count_rows_with_matching_header(path: &Path, index: &EstimatorIndex) -> Result<usize, CliError> {
    let file = fs::File::open(path).map_err(|e| io_data(&format!("open {}", path.display()), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let expected: Vec<&str> = index
        .schema
        .attributes
        .iter()
        .map(|a| a.name.as_str())
        .collect();
    if headers != expected {
        return Err(CliError::Data(format!(
            "{} header {headers:?} does not match the index schema {expected:?}",
            path.display()
        )));
    }
    let mut rows = 0usize;
    for record in reader.records() {
        record.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        rows += 1;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// verify-cover
// ---------------------------------------------------------------------------

pub fn verify_cover(args: VerifyCoverArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.design)
        .map_err(|e| io_data(&format!("read {}", args.design.display()), e))?;
    let design = load_design(&text, false)?;
    if !args.domains.is_empty() && args.domains.len() != design.v {
        return Err(CliError::Config(format!(
            "--domains lists {} attributes but the design covers {}",
            args.domains.len(),
            design.v
        )));
    }

    let uncovered = verify_covering(&design)?;
    let mut problems = Vec::new();
    if !uncovered.is_empty() {
        let shown: Vec<String> = uncovered
            .iter()
            .take(10)
            .map(|s| {
                let one_based: Vec<usize> = s.iter().map(|x| x + 1).collect();
                format!("{one_based:?}")
            })
            .collect();
        problems.push(format!(
            "{} uncovered {}-subsets, first: {}",
            uncovered.len(),
            design.t,
            shown.join(", ")
        ));
    }
    if let Some(budget) = args.max_block_volume {
        if args.domains.is_empty() {
            return Err(CliError::Config(
                "--max-block-volume needs --domains to compute block volumes".into(),
            ));
        }
        for block in &design.blocks {
            let volume = block.domain_size(&args.domains);
            if volume > budget {
                let one_based: Vec<usize> = block.members.iter().map(|x| x + 1).collect();
                problems.push(format!(
                    "block {one_based:?} has volume {volume}, above the budget {budget}"
                ));
            }
        }
    }

    if problems.is_empty() {
        println!(
            "design ok: v={} k={} t={} blocks={}",
            design.v,
            design.k,
            design.t,
            design.blocks.len()
        );
        Ok(())
    } else {
        for p in &problems {
            eprintln!("invalid: {p}");
        }
        Err(CliError::Infeasible(format!(
            "design fails {} check(s)",
            problems.len()
        )))
    }
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct InspectBlock<'a> {
    members: &'a [usize],
    rank: usize,
    importance: f64,
}

#[derive(Serialize)]
struct InspectSummary<'a> {
    rows: f64,
    attributes: usize,
    joined_axes: usize,
    strength: usize,
    alpha: f64,
    join_groups: &'a [Vec<usize>],
    domains: &'a [u64],
    blocks: Vec<InspectBlock<'a>>,
}

pub fn inspect(args: InspectArgs) -> Result<(), CliError> {
    let index = EstimatorIndex::load(&args.index)?;
    let summary = InspectSummary {
        rows: index.rows,
        attributes: index.schema.attributes.len(),
        joined_axes: index.domains.len(),
        strength: index.strength,
        alpha: index.alpha,
        join_groups: &index.join_plan.groups,
        domains: &index.domains,
        blocks: index
            .blocks
            .iter()
            .map(|bm| InspectBlock {
                members: &bm.block.members,
                rank: bm.model().rank(),
                importance: bm.importance,
            })
            .collect(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary)
            .map_err(|e| CliError::Data(format!("serialize summary: {e}")))?
    );
    Ok(())
}
