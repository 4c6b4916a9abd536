//! Cardinality estimation for conjunctive predicates over a single table.
//!
//! The pipeline, end to end:
//!
//! 1. [`catalog`] ingests a CSV into dictionary-encoded categorical columns and
//!    bin-encoded continuous columns, and can join narrow attributes into
//!    wider super-attributes to balance domain sizes.
//! 2. [`covering`] chooses overlapping attribute blocks so that every t-subset
//!    of attributes is contained in at least one block, under a per-block
//!    domain budget.
//! 3. [`tensor`] materializes each block's joint count tensor and fits a CP
//!    (CANDECOMP/PARAFAC) decomposition to it, which is the only thing kept at
//!    query time.
//! 4. [`estimator`] answers point and range queries: it selects the blocks
//!    that cover the queried attributes, evaluates each block's density on the
//!    query's restriction, and fuses the densities through the attributes the
//!    blocks share.
//! 5. [`workbench`] generates query workloads, computes exact counts with a
//!    scan oracle, and scores estimates (q-error quantiles, zero-query
//!    accuracy, latency).

pub mod catalog;
pub mod covering;
pub mod estimator;
pub mod tensor;
pub mod workbench;
