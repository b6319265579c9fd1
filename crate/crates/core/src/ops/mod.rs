//! Operator taxonomy, registry and the unified run template.
//!
//! Atomic operators (Mapper, Filter, Deduplicator, Selector) encapsulate
//! one processing algorithm each; compositional operators (Grouper,
//! Aggregator, FusedOp, ScriptOp) extend them without changing the atomic
//! structure. All operators execute through one `run` dispatch: a Filter
//! always computes its stats before dropping, a FusedOp flows each batch
//! through all children before the next batch is read, a Grouper emits
//! batched samples that an Aggregator reduces to one sample per batch.
//!
//! Operators are immutable after construction and may be invoked from any
//! number of workers on disjoint batches concurrently; per-batch scratch
//! state (worker id, media caches) lives in [`BatchCtx`].

pub mod script;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::media::{MediaDims, MediaError};
use crate::sample::Sample;

pub use script::ScriptOp;

pub type ParamMap = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Formatter,
    Mapper,
    Filter,
    Deduplicator,
    Selector,
    Grouper,
    Aggregator,
    FusedOp,
    ScriptOp,
}

impl OpType {
    /// Batched ops stream through the worker pool; the rest are barriers
    /// that see the whole dataset at once and pin their plan position.
    pub fn is_batched(self) -> bool {
        matches!(self, OpType::Mapper | OpType::Filter | OpType::FusedOp)
    }
}

/// A named processing unit: what the planner and executor know about an
/// operator without running it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpDescriptor {
    pub name: String,
    pub op_type: OpType,
    #[serde(default)]
    pub params: ParamMap,
    /// Fractional cores one worker of this op needs.
    #[serde(default)]
    pub cpu_required: f64,
    /// Bytes one worker of this op needs; 0 means unknown.
    #[serde(default)]
    pub mem_required: u64,
    #[serde(default)]
    pub supports_batch: bool,
    /// Pure stat-threshold filters commute with each other; deduplicators,
    /// selectors, groupers, aggregators and mappers are order-sensitive.
    #[serde(default)]
    pub commutative_filter: bool,
    /// Shared loaded inputs (e.g. "images"): filters with a common tag can
    /// be fused to read the input once per batch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resource_tags: Vec<String>,
    /// Accelerator-tagged ops allocate workers per accelerator slot.
    #[serde(default)]
    pub uses_accelerator: bool,
    /// Stat namespaces this op writes (filters only). Two filter
    /// instances sharing a key but configured differently do not
    /// commute: the surviving value depends on which ran last.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stat_keys: Vec<String>,
    /// Batch size declared in the recipe, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_batch_size: Option<usize>,
    /// Child descriptors; non-empty only for FusedOp.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<OpDescriptor>,
}

impl OpDescriptor {
    pub fn new(name: impl Into<String>, op_type: OpType) -> Self {
        OpDescriptor {
            name: name.into(),
            op_type,
            params: ParamMap::new(),
            cpu_required: 0.0,
            mem_required: 0,
            supports_batch: op_type.is_batched(),
            commutative_filter: false,
            resource_tags: Vec::new(),
            uses_accelerator: false,
            stat_keys: Vec::new(),
            declared_batch_size: None,
            children: Vec::new(),
        }
    }
}

/// A batch of samples with their ordinals in the current stage's input.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<Sample>,
    pub origin_ordinals: Vec<usize>,
}

impl Batch {
    pub fn new(samples: Vec<Sample>, origin_ordinals: Vec<usize>) -> Self {
        assert_eq!(samples.len(), origin_ordinals.len());
        debug_assert!(origin_ordinals.windows(2).all(|w| w[0] < w[1]));
        Batch {
            samples,
            origin_ordinals,
        }
    }

    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

/// Per-batch scratch state handed to operators. A FusedOp shares one
/// context across its children so media loaded by the first filter is not
/// re-read by the second.
#[derive(Debug, Default)]
pub struct BatchCtx {
    pub worker_id: usize,
    /// Threads available for concurrent media reads within the batch.
    pub io_threads: usize,
    pub dims_cache: BTreeMap<String, Result<MediaDims, MediaError>>,
    pub size_cache: BTreeMap<String, Result<u64, MediaError>>,
    /// Free-form per-batch scratch for operators that share derived
    /// state across a fused chain (keyed by whatever the op chooses).
    pub scratch: BTreeMap<String, Value>,
    /// Actual file reads issued (cache misses); insight/testing aid.
    pub media_reads: u64,
}

impl BatchCtx {
    pub fn new(worker_id: usize) -> Self {
        BatchCtx {
            worker_id,
            io_threads: 1,
            ..BatchCtx::default()
        }
    }

    pub fn dims(&mut self, path: &str) -> Result<MediaDims, MediaError> {
        if let Some(cached) = self.dims_cache.get(path) {
            return cached.clone();
        }
        self.media_reads += 1;
        let result = crate::media::image_dimensions(std::path::Path::new(path));
        self.dims_cache.insert(path.to_string(), result.clone());
        result
    }

    pub fn byte_size(&mut self, path: &str) -> Result<u64, MediaError> {
        if let Some(cached) = self.size_cache.get(path) {
            return cached.clone();
        }
        self.media_reads += 1;
        let result = crate::media::file_size(std::path::Path::new(path));
        self.size_cache.insert(path.to_string(), result.clone());
        result
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OpError {
    #[error("unknown op: {0}")]
    UnknownOp(String),
    #[error("invalid params for {op}: {message}")]
    ParamValidation { op: String, message: String },
    #[error("cannot fuse non-batchable op {0}")]
    NonBatchableChild(String),
    #[error("sample {ordinal}: unreadable media {path}: {reason}")]
    UnreadableMedia {
        ordinal: usize,
        path: String,
        reason: String,
    },
    #[error("missing group key {key:?} on {} sample(s)", ordinals.len())]
    MissingGroupKey { key: String, ordinals: Vec<usize> },
    #[error("missing stat {stat:?} on sample {ordinal} (run the producing filter first)")]
    MissingStat { stat: String, ordinal: usize },
    #[error("script exited with status {code}: {stderr}")]
    ScriptNonZeroExit { code: i32, stderr: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io error: {0}")]
    Io(String),
    /// Injected by tests and synthetic workloads.
    #[error("operator failure: {0}")]
    Internal(String),
}

impl OpError {
    pub(crate) fn media(ordinal: usize, err: MediaError) -> Self {
        let MediaError::Unreadable { path, reason } = err;
        OpError::UnreadableMedia {
            ordinal,
            path,
            reason,
        }
    }
}

/// A filter first computes and records per-sample statistics, then drops
/// samples by threshold; the two phases are never reordered.
pub trait FilterOp: Send + Sync {
    fn descriptor(&self) -> &OpDescriptor;
    /// Stat namespaces this filter writes.
    fn stat_keys(&self) -> Vec<String>;
    fn compute_stats(&self, sample: &mut Sample, ctx: &mut BatchCtx) -> Result<(), OpError>;
    fn keep(&self, sample: &Sample) -> Result<bool, OpError>;
    /// Optional batch-level media prefetch (hierarchical parallelism):
    /// reads for the whole batch may be issued concurrently before the
    /// per-sample phase; results land in the context caches keyed by path.
    fn prefetch(&self, _batch: &Batch, _ctx: &mut BatchCtx) -> Result<(), OpError> {
        Ok(())
    }
}

pub trait MapperOp: Send + Sync {
    fn descriptor(&self) -> &OpDescriptor;
    /// Transform one sample into zero or more samples.
    fn map(&self, sample: Sample, ctx: &mut BatchCtx) -> Result<Vec<Sample>, OpError>;
}

pub trait SelectorOp: Send + Sync {
    fn descriptor(&self) -> &OpDescriptor;
    fn select(&self, samples: Vec<Sample>) -> Result<Vec<Sample>, OpError>;
}

pub trait DeduplicatorOp: Send + Sync {
    fn descriptor(&self) -> &OpDescriptor;
    /// Returns the surviving samples and the number removed.
    fn dedup(&self, samples: Vec<Sample>) -> Result<(Vec<Sample>, usize), OpError>;
}

pub trait AggregatorOp: Send + Sync {
    fn descriptor(&self) -> &OpDescriptor;
    /// Reduce one batched sample (as produced by a Grouper) to one sample.
    fn aggregate(&self, batched: &Sample) -> Result<Sample, OpError>;
}

/// Reserved extra field holding the member samples of a batched sample.
pub const BATCH_FIELD: &str = "__dj__batch";
/// Reserved meta key holding a key-value group's key.
pub const GROUP_KEY_META: &str = "__dj__group_key";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrouperKind {
    /// All samples become one batched sample.
    Naive,
    /// One batched sample per distinct value of the given meta key.
    KeyValue { key: String },
}

#[derive(Debug, Clone)]
pub struct Grouper {
    descriptor: OpDescriptor,
    pub kind: GrouperKind,
}

impl Grouper {
    pub fn naive() -> Self {
        Grouper {
            descriptor: OpDescriptor::new("naive_grouper", OpType::Grouper),
            kind: GrouperKind::Naive,
        }
    }

    pub fn key_value(key: impl Into<String>) -> Self {
        let key = key.into();
        let mut descriptor = OpDescriptor::new("key_value_grouper", OpType::Grouper);
        descriptor
            .params
            .insert("group_by_key".to_string(), Value::String(key.clone()));
        Grouper {
            descriptor,
            kind: GrouperKind::KeyValue { key },
        }
    }

    pub fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    /// Group samples into batched samples. Samples missing the group key
    /// are returned separately for the caller's fault policy.
    pub fn group(&self, samples: Vec<Sample>) -> GroupOutput {
        match &self.kind {
            GrouperKind::Naive => GroupOutput {
                grouped: if samples.is_empty() {
                    Vec::new()
                } else {
                    vec![make_batched_sample(samples, None)]
                },
                missing: Vec::new(),
            },
            GrouperKind::KeyValue { key } => {
                // One group per distinct key value, in first-seen order.
                let mut order: Vec<String> = Vec::new();
                let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
                let mut missing = Vec::new();
                for (ordinal, sample) in samples.into_iter().enumerate() {
                    match sample.meta.get(key).map(value_to_group_key) {
                        Some(value) => {
                            if !groups.contains_key(&value) {
                                order.push(value.clone());
                            }
                            groups.entry(value).or_default().push(sample);
                        }
                        None => missing.push((ordinal, sample)),
                    }
                }
                let grouped = order
                    .into_iter()
                    .map(|value| {
                        let members = groups.remove(&value).expect("group recorded");
                        make_batched_sample(members, Some(value))
                    })
                    .collect();
                GroupOutput { grouped, missing }
            }
        }
    }
}

#[derive(Debug)]
pub struct GroupOutput {
    pub grouped: Vec<Sample>,
    /// (ordinal, sample) pairs lacking the group key; routed to fault
    /// tolerance by the executor.
    pub missing: Vec<(usize, Sample)>,
}

fn value_to_group_key(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn make_batched_sample(members: Vec<Sample>, group_key: Option<String>) -> Sample {
    let mut batched = Sample::default();
    if let Some(key) = group_key {
        batched.set_meta(GROUP_KEY_META, key);
    }
    let array: Vec<Value> = members
        .iter()
        .map(|s| serde_json::to_value(s).expect("sample serializes"))
        .collect();
    batched
        .extra
        .insert(BATCH_FIELD.to_string(), Value::Array(array));
    batched
}

/// Member samples of a batched sample, or an error if the input was not
/// produced by a Grouper.
pub fn batched_members(sample: &Sample) -> Result<Vec<Sample>, OpError> {
    let array = sample
        .extra
        .get(BATCH_FIELD)
        .and_then(Value::as_array)
        .ok_or_else(|| {
            OpError::InvalidInput("aggregator input is not a batched sample".to_string())
        })?;
    array
        .iter()
        .map(|v| {
            serde_json::from_value(v.clone())
                .map_err(|e| OpError::SchemaViolation(format!("batched member: {e}")))
        })
        .collect()
}

/// A compositional operator executing several batch-capable children per
/// batch, so each batch flows through all children before the next batch
/// is read and shared inputs are loaded once.
pub struct FusedOp {
    descriptor: OpDescriptor,
    pub children: Vec<OpKind>,
    pub batch_size: usize,
}

/// Build a FusedOp from batch-capable children.
pub fn fuse(children: Vec<OpKind>, batch_size: usize) -> Result<FusedOp, OpError> {
    if children.is_empty() {
        return Err(OpError::InvalidInput(
            "fused op needs at least one child".to_string(),
        ));
    }
    for child in &children {
        if !child.descriptor().supports_batch || !child.descriptor().op_type.is_batched() {
            return Err(OpError::NonBatchableChild(child.descriptor().name.clone()));
        }
    }
    let child_descriptors: Vec<OpDescriptor> =
        children.iter().map(|c| c.descriptor().clone()).collect();
    let name = format!(
        "fused({})",
        child_descriptors
            .iter()
            .map(|d| d.name.as_str())
            .collect::<Vec<_>>()
            .join(",")
    );
    let mut descriptor = OpDescriptor::new(name, OpType::FusedOp);
    descriptor.supports_batch = true;
    descriptor.commutative_filter = child_descriptors.iter().all(|d| d.commutative_filter);
    descriptor.cpu_required = child_descriptors
        .iter()
        .map(|d| d.cpu_required)
        .fold(0.0, f64::max);
    descriptor.mem_required = child_descriptors.iter().map(|d| d.mem_required).max().unwrap_or(0);
    descriptor.uses_accelerator = child_descriptors.iter().any(|d| d.uses_accelerator);
    let mut tags: Vec<String> = child_descriptors
        .iter()
        .flat_map(|d| d.resource_tags.iter().cloned())
        .collect();
    tags.sort();
    tags.dedup();
    descriptor.resource_tags = tags;
    descriptor.declared_batch_size = Some(batch_size);
    descriptor.children = child_descriptors;
    Ok(FusedOp {
        descriptor,
        children,
        batch_size,
    })
}

impl FusedOp {
    pub fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }
}

impl std::fmt::Debug for FusedOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FusedOp({})", self.descriptor.name)
    }
}

/// A constructed operator ready to run.
pub enum OpKind {
    Mapper(Arc<dyn MapperOp>),
    Filter(Arc<dyn FilterOp>),
    Deduplicator(Arc<dyn DeduplicatorOp>),
    Selector(Arc<dyn SelectorOp>),
    Grouper(Grouper),
    Aggregator(Arc<dyn AggregatorOp>),
    Fused(Arc<FusedOp>),
    Script(Arc<ScriptOp>),
}

impl Clone for OpKind {
    fn clone(&self) -> Self {
        match self {
            OpKind::Mapper(op) => OpKind::Mapper(op.clone()),
            OpKind::Filter(op) => OpKind::Filter(op.clone()),
            OpKind::Deduplicator(op) => OpKind::Deduplicator(op.clone()),
            OpKind::Selector(op) => OpKind::Selector(op.clone()),
            OpKind::Grouper(op) => OpKind::Grouper(op.clone()),
            OpKind::Aggregator(op) => OpKind::Aggregator(op.clone()),
            OpKind::Fused(op) => OpKind::Fused(op.clone()),
            OpKind::Script(op) => OpKind::Script(op.clone()),
        }
    }
}

impl std::fmt::Debug for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "OpKind({})", self.descriptor().name)
    }
}

impl OpKind {
    pub fn descriptor(&self) -> &OpDescriptor {
        match self {
            OpKind::Mapper(op) => op.descriptor(),
            OpKind::Filter(op) => op.descriptor(),
            OpKind::Deduplicator(op) => op.descriptor(),
            OpKind::Selector(op) => op.descriptor(),
            OpKind::Grouper(op) => op.descriptor(),
            OpKind::Aggregator(op) => op.descriptor(),
            OpKind::Fused(op) => op.descriptor(),
            OpKind::Script(op) => op.descriptor(),
        }
    }

    pub fn is_batched(&self) -> bool {
        self.descriptor().op_type.is_batched()
    }
}

/// One dropped sample with the stats its filter computed before dropping;
/// kept in the drop log for lineage analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropRecord {
    pub op: String,
    pub ordinal: usize,
    pub stats: BTreeMap<String, Value>,
}

#[derive(Debug, Default)]
pub struct BatchOutput {
    pub samples: Vec<Sample>,
    pub dropped: Vec<DropRecord>,
}

/// Run one batch through a batch-capable op (Mapper, Filter or FusedOp).
pub fn process_batch(op: &OpKind, batch: Batch, ctx: &mut BatchCtx) -> Result<BatchOutput, OpError> {
    match op {
        OpKind::Mapper(mapper) => {
            let mut out = BatchOutput::default();
            for sample in batch.samples {
                out.samples.extend(mapper.map(sample, ctx)?);
            }
            Ok(out)
        }
        OpKind::Filter(filter) => {
            filter.prefetch(&batch, ctx)?;
            let keys = filter.stat_keys();
            let mut out = BatchOutput::default();
            for (sample, ordinal) in batch.samples.into_iter().zip(batch.origin_ordinals) {
                let mut sample = sample;
                filter
                    .compute_stats(&mut sample, ctx)
                    .map_err(|e| attach_ordinal(e, ordinal))?;
                if filter.keep(&sample)? {
                    out.samples.push(sample);
                } else {
                    let stats = keys
                        .iter()
                        .filter_map(|k| sample.stats.get(k).map(|v| (k.clone(), v.clone())))
                        .collect();
                    out.dropped.push(DropRecord {
                        op: filter.descriptor().name.clone(),
                        ordinal,
                        stats,
                    });
                }
            }
            Ok(out)
        }
        OpKind::Fused(fused) => {
            let mut current = batch;
            let mut dropped = Vec::new();
            for child in &fused.children {
                let child_out = process_batch(child, current, ctx)?;
                dropped.extend(child_out.dropped);
                // Children after a mapper see the mapper's outputs; their
                // ordinals restart within the batch.
                let ordinals = (0..child_out.samples.len()).collect();
                current = Batch::new(child_out.samples, ordinals);
            }
            Ok(BatchOutput {
                samples: current.samples,
                dropped,
            })
        }
        other => Err(OpError::InvalidInput(format!(
            "{} is not a batch-capable op",
            other.descriptor().name
        ))),
    }
}

fn attach_ordinal(err: OpError, ordinal: usize) -> OpError {
    match err {
        OpError::UnreadableMedia {
            path,
            reason,
            ..
        } => OpError::UnreadableMedia {
            ordinal,
            path,
            reason,
        },
        other => other,
    }
}

/// The result of running one op over a whole dataset.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub samples: Vec<Sample>,
    pub dropped: Vec<DropRecord>,
    pub dedup_removed: usize,
    /// Samples a Grouper could not place (missing key); the serial path
    /// drops them, the executor routes them through its fault policy.
    pub group_key_faults: Vec<(usize, Sample)>,
}

/// The unified run template: dispatch a dataset through one operator.
///
/// Batch-capable ops stream batches of `batch_size` serially; barrier ops
/// see the whole dataset. The executor parallelizes the batched path but
/// shares the same per-batch semantics via [`process_batch`].
pub fn run(op: &OpKind, samples: Vec<Sample>, batch_size: usize) -> Result<RunOutput, OpError> {
    let batch_size = batch_size.max(1);
    match op {
        OpKind::Mapper(_) | OpKind::Filter(_) | OpKind::Fused(_) => {
            let mut out = RunOutput::default();
            let mut ordinal = 0usize;
            let mut iter = samples.into_iter().peekable();
            while iter.peek().is_some() {
                let chunk: Vec<Sample> = iter.by_ref().take(batch_size).collect();
                let ordinals = (ordinal..ordinal + chunk.len()).collect();
                ordinal += chunk.len();
                let mut ctx = BatchCtx::new(0);
                let batch_out = process_batch(op, Batch::new(chunk, ordinals), &mut ctx)?;
                out.samples.extend(batch_out.samples);
                out.dropped.extend(batch_out.dropped);
            }
            Ok(out)
        }
        OpKind::Deduplicator(dedup) => {
            let (samples, removed) = dedup.dedup(samples)?;
            Ok(RunOutput {
                samples,
                dedup_removed: removed,
                ..RunOutput::default()
            })
        }
        OpKind::Selector(selector) => Ok(RunOutput {
            samples: selector.select(samples)?,
            ..RunOutput::default()
        }),
        OpKind::Grouper(grouper) => {
            let GroupOutput { grouped, missing } = grouper.group(samples);
            Ok(RunOutput {
                samples: grouped,
                group_key_faults: missing,
                ..RunOutput::default()
            })
        }
        OpKind::Aggregator(aggregator) => {
            let mut out = Vec::with_capacity(samples.len());
            for batched in &samples {
                out.push(aggregator.aggregate(batched)?);
            }
            Ok(RunOutput {
                samples: out,
                ..RunOutput::default()
            })
        }
        OpKind::Script(script) => Ok(RunOutput {
            samples: script.run_script(&samples)?,
            ..RunOutput::default()
        }),
    }
}

/// Counts members of each batched sample into `meta.count`.
pub struct CountAggregator {
    descriptor: OpDescriptor,
}

impl CountAggregator {
    pub fn new() -> Self {
        CountAggregator {
            descriptor: OpDescriptor::new("count_aggregator", OpType::Aggregator),
        }
    }
}

impl Default for CountAggregator {
    fn default() -> Self {
        Self::new()
    }
}

impl AggregatorOp for CountAggregator {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn aggregate(&self, batched: &Sample) -> Result<Sample, OpError> {
        let members = batched_members(batched)?;
        let mut out = Sample::default();
        if let Some(key) = batched.meta.get(GROUP_KEY_META) {
            out.set_meta(GROUP_KEY_META, key.clone());
        }
        out.set_meta("count", members.len());
        Ok(out)
    }
}

/// Concatenates member texts (newline-joined) and records `meta.count`.
pub struct ConcatTextAggregator {
    descriptor: OpDescriptor,
}

impl ConcatTextAggregator {
    pub fn new() -> Self {
        ConcatTextAggregator {
            descriptor: OpDescriptor::new("concat_text_aggregator", OpType::Aggregator),
        }
    }
}

impl Default for ConcatTextAggregator {
    fn default() -> Self {
        Self::new()
    }
}

impl AggregatorOp for ConcatTextAggregator {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn aggregate(&self, batched: &Sample) -> Result<Sample, OpError> {
        let members = batched_members(batched)?;
        let mut out = Sample::default();
        if let Some(key) = batched.meta.get(GROUP_KEY_META) {
            out.set_meta(GROUP_KEY_META, key.clone());
        }
        out.text = members
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        out.set_meta("count", members.len());
        Ok(out)
    }
}

pub mod registry;
pub use registry::{OpEntry, ParamSpec, Registry};
