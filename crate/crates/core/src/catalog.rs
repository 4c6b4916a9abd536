//! Table ingestion: dictionary/bin encoding, attribute joining, and count
//! tensors.
//!
//! A CSV becomes an [`EncodedTable`]: every categorical column is dictionary-
//! encoded in first-appearance order, every continuous column is discretized
//! into bins (equal-frequency by default) while keeping the raw values for
//! exact oracle scans. The [`Schema`] is the sidecar that makes encoding
//! reproducible at estimation time; it serializes to stable JSON with a
//! SHA-256 digest so a model directory can detect being pointed at the wrong
//! table.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::covering::{Block, JoinPlan};
use crate::tensor::{DenseTensor, TensorError};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("table has no data rows")]
    EmptyTable,
    #[error("duplicate attribute name {name:?} in header")]
    DuplicateAttribute { name: String },
    #[error("data row {row}: {reason}")]
    Row { row: u64, reason: String },
    #[error("data row {row}, attribute {attribute:?}: cannot parse {value:?} as a number")]
    BadNumber {
        row: u64,
        attribute: String,
        value: String,
    },
    #[error("attribute {attribute:?}: {reason}")]
    BadColumn { attribute: String, reason: String },
    #[error("attribute {attribute:?} has no value {value:?} in its dictionary")]
    UnknownValue { attribute: String, value: String },
    #[error("bin count must be at least 1 (got {got})")]
    BadBinCount { got: usize },
    #[error("bin boundaries must be finite and strictly increasing: {reason}")]
    BadBoundaries { reason: String },
    #[error("schema mismatch: {reason}")]
    SchemaMismatch { reason: String },
    #[error("join plan is not a partition of the attributes: {reason}")]
    BadJoinPlan { reason: String },
    #[error("joined group {group:?} has domain {volume}, above the u32 code space")]
    DomainOverflow { group: Vec<usize>, volume: u128 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("schema json: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// Dictionary for one categorical attribute, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ValueDictionary {
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl ValueDictionary {
    pub fn new() -> Self {
        ValueDictionary {
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Returns the code for `value`, creating one if unseen.
    pub fn intern(&mut self, value: &str) -> u32 {
        if let Some(&code) = self.index.get(value) {
            return code;
        }
        let code = self.values.len() as u32;
        self.values.push(value.to_string());
        self.index.insert(value.to_string(), code);
        code
    }

    pub fn code(&self, value: &str) -> Option<u32> {
        self.index.get(value).copied()
    }

    pub fn value(&self, code: u32) -> Option<&str> {
        self.values.get(code as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }
}

impl Default for ValueDictionary {
    fn default() -> Self {
        Self::new()
    }
}

impl TryFrom<Vec<String>> for ValueDictionary {
    type Error = String;

    fn try_from(values: Vec<String>) -> Result<Self, Self::Error> {
        let mut dict = ValueDictionary::new();
        for v in &values {
            if dict.index.contains_key(v) {
                return Err(format!("duplicate dictionary value {v:?}"));
            }
            dict.intern(v);
        }
        Ok(dict)
    }
}

impl From<ValueDictionary> for Vec<String> {
    fn from(dict: ValueDictionary) -> Vec<String> {
        dict.values
    }
}

/// Bin layout for one continuous attribute: strictly increasing boundaries
/// `b_0 < ... < b_m` defining bins `[b_i, b_{i+1})`, the last bin closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BinSpec {
    boundaries: Vec<f64>,
}

impl BinSpec {
    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self, CatalogError> {
        if boundaries.len() < 2 {
            return Err(CatalogError::BadBoundaries {
                reason: format!("need at least 2 boundaries, got {}", boundaries.len()),
            });
        }
        for pair in boundaries.windows(2) {
            if !pair[0].is_finite() || !pair[1].is_finite() || pair[0] >= pair[1] {
                return Err(CatalogError::BadBoundaries {
                    reason: format!("{} then {}", pair[0], pair[1]),
                });
            }
        }
        Ok(BinSpec { boundaries })
    }

    /// Quantile-based boundaries: cut points sit midway between the order
    /// statistics adjacent to each i*n/bins position, so bin populations are
    /// as equal as integer counts allow. Duplicate cut values collapse, which
    /// can yield fewer bins than requested.
    pub fn equal_frequency(values: &[f64], bins: usize) -> Result<Self, CatalogError> {
        if bins == 0 {
            return Err(CatalogError::BadBinCount { got: 0 });
        }
        if values.is_empty() {
            return Err(CatalogError::EmptyTable);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let (min, max) = (sorted[0], sorted[n - 1]);
        if min == max {
            return Err(CatalogError::BadBoundaries {
                reason: format!("column is constant at {min}; declare it categorical"),
            });
        }
        let mut boundaries = vec![min];
        for i in 1..bins {
            let cut = ((i * n) as f64 / bins as f64).round() as usize;
            let cut = cut.clamp(1, n - 1);
            let mid = (sorted[cut - 1] + sorted[cut]) / 2.0;
            if mid > *boundaries.last().unwrap() && mid < max {
                boundaries.push(mid);
            }
        }
        boundaries.push(max);
        Self::from_boundaries(boundaries)
    }

    pub fn equal_width(min: f64, max: f64, bins: usize) -> Result<Self, CatalogError> {
        if bins == 0 {
            return Err(CatalogError::BadBinCount { got: 0 });
        }
        if min.partial_cmp(&max) != Some(std::cmp::Ordering::Less) {
            return Err(CatalogError::BadBoundaries {
                reason: format!("min {min} not below max {max}"),
            });
        }
        let step = (max - min) / bins as f64;
        let mut boundaries: Vec<f64> = (0..bins).map(|i| min + step * i as f64).collect();
        boundaries.push(max);
        Self::from_boundaries(boundaries)
    }

    pub fn bin_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn width(&self, bin: usize) -> f64 {
        self.boundaries[bin + 1] - self.boundaries[bin]
    }

    /// Bin index of a value; values outside the boundary range clamp to the
    /// edge bins (ingestion never produces such values, estimation may).
    pub fn locate(&self, value: f64) -> u32 {
        let after = self.boundaries.partition_point(|&b| b <= value);
        (after.saturating_sub(1)).min(self.bin_count() - 1) as u32
    }
}

impl TryFrom<Vec<f64>> for BinSpec {
    type Error = String;

    fn try_from(boundaries: Vec<f64>) -> Result<Self, Self::Error> {
        BinSpec::from_boundaries(boundaries).map_err(|e| e.to_string())
    }
}

impl From<BinSpec> for Vec<f64> {
    fn from(spec: BinSpec) -> Vec<f64> {
        spec.boundaries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeEncoding {
    Categorical { values: ValueDictionary },
    Continuous { boundaries: BinSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    #[serde(flatten)]
    pub encoding: AttributeEncoding,
}

impl Attribute {
    pub fn is_continuous(&self) -> bool {
        matches!(self.encoding, AttributeEncoding::Continuous { .. })
    }

    /// Number of codes this attribute can take.
    pub fn domain(&self) -> u64 {
        match &self.encoding {
            AttributeEncoding::Categorical { values } => values.len() as u64,
            AttributeEncoding::Continuous { boundaries } => boundaries.bin_count() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<Attribute>,
}

impl Schema {
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn domains(&self) -> Vec<u64> {
        self.attributes.iter().map(Attribute::domain).collect()
    }

    /// Stable pretty JSON rendering; the digest is taken over these bytes.
    pub fn to_json(&self) -> Result<String, CatalogError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Hex SHA-256 of the JSON rendering.
    pub fn digest(&self) -> Result<String, CatalogError> {
        let json = self.to_json()?;
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeclaredKind {
    /// Numeric columns with more distinct values than the bin budget become
    /// continuous; everything else is categorical.
    Auto,
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinStrategy {
    EqualFrequency,
    EqualWidth,
}

#[derive(Debug, Clone)]
pub struct SchemaOptions {
    /// Per-attribute kind overrides, by column name.
    pub kinds: BTreeMap<String, DeclaredKind>,
    pub default_kind: DeclaredKind,
    /// Bins per continuous attribute.
    pub bin_count: usize,
    pub bin_strategy: BinStrategy,
}

impl Default for SchemaOptions {
    fn default() -> Self {
        SchemaOptions {
            kinds: BTreeMap::new(),
            default_kind: DeclaredKind::Auto,
            bin_count: 14,
            bin_strategy: BinStrategy::EqualFrequency,
        }
    }
}

/// One encoded column. Continuous columns keep their raw values so the oracle
/// can evaluate range predicates exactly, not on bins.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Categorical { codes: Vec<u32> },
    Continuous { codes: Vec<u32>, raw: Vec<f64> },
}

impl ColumnData {
    pub fn codes(&self) -> &[u32] {
        match self {
            ColumnData::Categorical { codes } => codes,
            ColumnData::Continuous { codes, .. } => codes,
        }
    }

    pub fn raw(&self) -> Option<&[f64]> {
        match self {
            ColumnData::Categorical { .. } => None,
            ColumnData::Continuous { raw, .. } => Some(raw),
        }
    }
}

/// Column-encoded table: one code per row per attribute, with per-attribute
/// domain sizes. Joined tables forget raw values (they only feed training).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTable {
    pub domains: Vec<u64>,
    pub columns: Vec<ColumnData>,
    pub rows: usize,
}

impl EncodedTable {
    pub fn attribute_count(&self) -> usize {
        self.columns.len()
    }

    pub fn code(&self, row: usize, column: usize) -> u32 {
        self.columns[column].codes()[row]
    }

    /// Rewrites the table under a join plan: each group becomes one column
    /// whose code is the mixed-radix combination of the member codes, first
    /// member most significant. Codes `(2, 1)` with domains `(3, 2)` combine
    /// to `2*2 + 1 = 5`.
    pub fn apply_join_plan(&self, plan: &JoinPlan) -> Result<EncodedTable, CatalogError> {
        self.check_plan(plan)?;
        let mut domains = Vec::with_capacity(plan.groups.len());
        let mut columns = Vec::with_capacity(plan.groups.len());
        for group in &plan.groups {
            let volume: u128 = group.iter().map(|&a| self.domains[a] as u128).product();
            if volume > u32::MAX as u128 {
                return Err(CatalogError::DomainOverflow {
                    group: group.clone(),
                    volume,
                });
            }
            let mut codes = Vec::with_capacity(self.rows);
            for row in 0..self.rows {
                let mut code: u64 = 0;
                for &attr in group {
                    code = code * self.domains[attr] + self.code(row, attr) as u64;
                }
                codes.push(code as u32);
            }
            domains.push(volume as u64);
            columns.push(ColumnData::Categorical { codes });
        }
        Ok(EncodedTable {
            domains,
            columns,
            rows: self.rows,
        })
    }

    fn check_plan(&self, plan: &JoinPlan) -> Result<(), CatalogError> {
        let mut seen = vec![false; self.columns.len()];
        for group in &plan.groups {
            if group.is_empty() {
                return Err(CatalogError::BadJoinPlan {
                    reason: "empty group".into(),
                });
            }
            for &attr in group {
                if attr >= self.columns.len() {
                    return Err(CatalogError::BadJoinPlan {
                        reason: format!("attribute {attr} out of range"),
                    });
                }
                if seen[attr] {
                    return Err(CatalogError::BadJoinPlan {
                        reason: format!("attribute {attr} appears twice"),
                    });
                }
                seen[attr] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(CatalogError::BadJoinPlan {
                reason: "some attributes are missing from the plan".into(),
            });
        }
        Ok(())
    }

    /// Splits a joined code back into the member codes (inverse of
    /// [`EncodedTable::apply_join_plan`] for one group).
    pub fn decode_joined(code: u32, member_domains: &[u64]) -> Vec<u32> {
        let mut rest = code as u64;
        let mut out = vec![0u32; member_domains.len()];
        for (slot, &dom) in out.iter_mut().zip(member_domains).rev() {
            *slot = (rest % dom) as u32;
            rest /= dom;
        }
        out
    }

    /// Dense count tensor over the block's attributes, in member order.
    /// The total equals the row count: every record lands in exactly one cell.
    pub fn build_block_tensor(&self, block: &Block) -> Result<DenseTensor, CatalogError> {
        let shape: Vec<usize> = block
            .members
            .iter()
            .map(|&a| self.domains[a] as usize)
            .collect();
        let mut tensor = DenseTensor::zeros(shape)?;
        let mut index = vec![0usize; block.members.len()];
        for row in 0..self.rows {
            for (slot, &attr) in index.iter_mut().zip(&block.members) {
                *slot = self.code(row, attr) as usize;
            }
            tensor.add(&index, 1.0)?;
        }
        Ok(tensor)
    }

    /// Joint and marginal probabilities of a pair of attributes. The joint is
    /// row-major over `(domain_a, domain_b)`; every vector sums to 1.
    pub fn pairwise_marginal(&self, a: usize, b: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (da, db) = (self.domains[a] as usize, self.domains[b] as usize);
        let mut joint = vec![0.0; da * db];
        let mut ma = vec![0.0; da];
        let mut mb = vec![0.0; db];
        let weight = 1.0 / self.rows as f64;
        for row in 0..self.rows {
            let (ca, cb) = (self.code(row, a) as usize, self.code(row, b) as usize);
            joint[ca * db + cb] += weight;
            ma[ca] += weight;
            mb[cb] += weight;
        }
        (joint, ma, mb)
    }
}

/// Reads a CSV (with a header row) into a schema and an encoded table.
///
/// Ingestion is two-pass over an in-memory copy: kinds are resolved first
/// (dictionaries in first-appearance order, bin boundaries from the full
/// column), then every row is encoded.
pub fn ingest_csv<R: Read>(
    input: R,
    opts: &SchemaOptions,
) -> Result<(Schema, EncodedTable), CatalogError> {
    if opts.bin_count == 0 {
        return Err(CatalogError::BadBinCount { got: 0 });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input);

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() {
        return Err(CatalogError::EmptyTable);
    }
    let mut seen = HashSet::new();
    for name in &headers {
        if !seen.insert(name.clone()) {
            return Err(CatalogError::DuplicateAttribute { name: name.clone() });
        }
    }

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for (row_at, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(CatalogError::Row {
                row: row_at as u64 + 1,
                reason: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        for (column, field) in record.iter().enumerate() {
            cells[column].push(field.trim().to_string());
        }
    }
    let rows = cells[0].len();
    if rows == 0 {
        return Err(CatalogError::EmptyTable);
    }

    let mut attributes = Vec::with_capacity(headers.len());
    let mut columns = Vec::with_capacity(headers.len());
    for (name, values) in headers.iter().zip(&cells) {
        let declared = opts.kinds.get(name).copied().unwrap_or(opts.default_kind);
        let continuous = match declared {
            DeclaredKind::Categorical => false,
            DeclaredKind::Continuous => true,
            DeclaredKind::Auto => {
                let parsed = parse_all(values);
                match parsed {
                    Some(_) => {
                        let distinct: HashSet<u64> = values.iter().map(|v| hash_of(v)).collect();
                        distinct.len() > opts.bin_count
                    }
                    None => false,
                }
            }
        };
        if continuous {
            let mut raw = Vec::with_capacity(rows);
            for (row_at, v) in values.iter().enumerate() {
                let num: f64 = v.parse().map_err(|_| CatalogError::BadNumber {
                    row: row_at as u64 + 1,
                    attribute: name.clone(),
                    value: v.clone(),
                })?;
                if !num.is_finite() {
                    return Err(CatalogError::BadNumber {
                        row: row_at as u64 + 1,
                        attribute: name.clone(),
                        value: v.clone(),
                    });
                }
                raw.push(num);
            }
            let spec = match opts.bin_strategy {
                BinStrategy::EqualFrequency => BinSpec::equal_frequency(&raw, opts.bin_count),
                BinStrategy::EqualWidth => {
                    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    BinSpec::equal_width(min, max, opts.bin_count)
                }
            }
            .map_err(|e| match e {
                CatalogError::BadBoundaries { reason } => CatalogError::BadColumn {
                    attribute: name.clone(),
                    reason,
                },
                other => other,
            })?;
            let codes = raw.iter().map(|&v| spec.locate(v)).collect();
            attributes.push(Attribute {
                name: name.clone(),
                encoding: AttributeEncoding::Continuous { boundaries: spec },
            });
            columns.push(ColumnData::Continuous { codes, raw });
        } else {
            let mut dict = ValueDictionary::new();
            let codes = values.iter().map(|v| dict.intern(v)).collect();
            attributes.push(Attribute {
                name: name.clone(),
                encoding: AttributeEncoding::Categorical { values: dict },
            });
            columns.push(ColumnData::Categorical { codes });
        }
    }

    let schema = Schema { attributes };
    let table = EncodedTable {
        domains: schema.domains(),
        columns,
        rows,
    };
    Ok((schema, table))
}

/// Encodes a CSV under an existing schema (for benchmarking against new data
/// or retraining after appends). The header must match the schema exactly;
/// categorical values must already be in the dictionary.
pub fn encode_with_schema<R: Read>(
    input: R,
    schema: &Schema,
) -> Result<EncodedTable, CatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let names: Vec<&str> = schema.attributes.iter().map(|a| a.name.as_str()).collect();
    if headers != names {
        return Err(CatalogError::SchemaMismatch {
            reason: format!("header {headers:?} does not match schema {names:?}"),
        });
    }

    let mut columns: Vec<ColumnData> = schema
        .attributes
        .iter()
        .map(|a| match &a.encoding {
            AttributeEncoding::Categorical { .. } => ColumnData::Categorical { codes: Vec::new() },
            AttributeEncoding::Continuous { .. } => ColumnData::Continuous {
                codes: Vec::new(),
                raw: Vec::new(),
            },
        })
        .collect();

    let mut rows = 0;
    for (row_at, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != schema.attributes.len() {
            return Err(CatalogError::Row {
                row: row_at as u64 + 1,
                reason: format!(
                    "expected {} fields, got {}",
                    schema.attributes.len(),
                    record.len()
                ),
            });
        }
        for (attr, (column, field)) in schema
            .attributes
            .iter()
            .zip(columns.iter_mut().zip(record.iter()))
        {
            let field = field.trim();
            match (&attr.encoding, column) {
                (AttributeEncoding::Categorical { values }, ColumnData::Categorical { codes }) => {
                    let code = values
                        .code(field)
                        .ok_or_else(|| CatalogError::UnknownValue {
                            attribute: attr.name.clone(),
                            value: field.to_string(),
                        })?;
                    codes.push(code);
                }
                (
                    AttributeEncoding::Continuous { boundaries },
                    ColumnData::Continuous { codes, raw },
                ) => {
                    let num: f64 = field.parse().map_err(|_| CatalogError::BadNumber {
                        row: row_at as u64 + 1,
                        attribute: attr.name.clone(),
                        value: field.to_string(),
                    })?;
                    codes.push(boundaries.locate(num));
                    raw.push(num);
                }
                _ => unreachable!("columns built from the same schema"),
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CatalogError::EmptyTable);
    }
    Ok(EncodedTable {
        domains: schema.domains(),
        columns,
        rows,
    })
}

fn parse_all(values: &[String]) -> Option<Vec<f64>> {
    values
        .iter()
        .map(|v| v.parse::<f64>().ok().filter(|n| n.is_finite()))
        .collect()
}

fn hash_of(value: &str) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    value.hash(&mut h);
    h.finish()
}
