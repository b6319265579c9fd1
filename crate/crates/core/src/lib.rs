//! Core engine for a schema-aware, fault-tolerant data processing pipeline
//! over JSONL corpora used to train foundation models.
//!
//! The crate is organized around the stages of a processing job:
//!
//! * [`sample`] / [`schema`] — the token-aligned multimodal sample model,
//!   chunk parsing and dataset validation.
//! * [`dataset`] — streaming/materialized JSONL loading, export, subset
//!   splitting and operator-level checkpoints.
//! * [`ops`] — the operator taxonomy (Mapper/Filter/Deduplicator/Selector/
//!   Grouper/Aggregator/FusedOp/ScriptOp), the registry and the unified
//!   run template.
//! * [`catalog`] — concrete rule-based operators (text stats, media header
//!   stats, chunking, selection).
//! * [`dedup`] — exact and MinHash-LSH fuzzy deduplication with a
//!   union-find forest, including the sharded variant.
//! * [`planner`] — runtime probing, fusible-group detection, speed-based
//!   reordering, batch sizing and worker allocation.
//! * [`executor`] — plan execution with a worker pool, batch-level fault
//!   tolerance, retries, checkpointing and counters.
//! * [`analyzer`] — per-operator stats snapshots and distribution-shift
//!   reports.
//! * [`recipe`] — the YAML job description shared by the CLI tools.

pub mod analyzer;
pub mod catalog;
pub mod dataset;
pub mod dedup;
pub mod executor;
pub mod media;
pub mod ops;
pub mod planner;
pub mod recipe;
pub mod sample;
pub mod schema;

pub use sample::Sample;
pub use schema::{Modality, SchemaTokens};

/// Environment variable fixing all randomness (probe sampling, dedup hash
/// seeds, synthetic shuffles). Defaults to [`DEFAULT_SEED`] when unset.
pub const SEED_ENV_VAR: &str = "DJ_SEED";

/// Seed used when `DJ_SEED` is not set.
pub const DEFAULT_SEED: u64 = 42;

/// Resolve the global seed from the environment.
pub fn global_seed() -> u64 {
    std::env::var(SEED_ENV_VAR)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_SEED)
}
