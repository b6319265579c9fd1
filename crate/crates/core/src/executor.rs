//! Plan execution: a coordinator thread owns the plan, checkpointing and
//! counters; a pool of workers processes batches pulled from a bounded
//! queue; results reassemble in batch order so parallelism never reorders
//! samples.
//!
//! Fault tolerance is batch-level: a failing batch is retried with
//! backoff, then skipped, replaced with schema-compatible placeholders,
//! or aborts the run, per policy. Every case is counted exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analyzer::StatsSnapshot;
use crate::dataset::{Dataset, DatasetError, Slot};
use crate::ops::{
    fuse, process_batch, Batch, BatchCtx, DropRecord, OpError, OpKind, OpType, Registry, RunOutput,
};
use crate::planner::{ExecutionPlan, PlannedOp, DEFAULT_BATCH_SIZE};
use crate::sample::Sample;
use crate::schema::make_empty_sample;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;
pub const EXIT_RESUME_MISMATCH: i32 = 4;

/// Threads used for concurrent media reads within one worker's batch.
const BATCH_IO_THREADS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// Drop the affected batch and log its ordinals.
    #[default]
    SkipBatch,
    /// Replace the affected batch with schema-compatible empty samples.
    FillEmpty,
    /// Stop the run; counters and the last checkpoint remain valid.
    Abort,
}

#[derive(Debug, Clone)]
pub struct FaultPolicy {
    pub mode: FaultMode,
    pub max_retries: usize,
    /// Base of the exponential backoff schedule (doubles per retry,
    /// capped at three doublings).
    pub backoff_base: Duration,
}

impl Default for FaultPolicy {
    fn default() -> Self {
        FaultPolicy {
            mode: FaultMode::SkipBatch,
            max_retries: 1,
            backoff_base: Duration::from_millis(100),
        }
    }
}

impl FaultPolicy {
    pub fn backoff_delay(&self, attempt: usize) -> Duration {
        self.backoff_base * (1u32 << attempt.min(3) as u32)
    }
}

/// Exact accounting of one run. The conservation identity is
/// `processed + structural_net == kept + dropped + dedup_removed +
/// skipped_samples`, where `structural_net` sums the sample-count changes
/// of ops that legitimately emit a different number of samples than they
/// consume (chunking mappers, groupers, aggregators, selectors, scripts);
/// it is zero for pure filter/dedup pipelines, reducing to
/// `processed == kept + dropped + dedup_removed + lost to skipped batches`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub processed: usize,
    pub kept: usize,
    pub dropped_by_filter: BTreeMap<String, usize>,
    pub dedup_removed: usize,
    pub skipped_batches: usize,
    pub skipped_samples: usize,
    pub placeholder_samples: usize,
    pub retried_batches: usize,
    pub bad_lines: usize,
    pub structural_net: i64,
    pub wall_time_per_op: BTreeMap<String, f64>,
}

impl RunCounters {
    pub fn dropped_total(&self) -> usize {
        self.dropped_by_filter.values().sum()
    }

    pub fn conservation_holds(&self) -> bool {
        self.processed as i64 + self.structural_net
            == (self.kept + self.dropped_total() + self.dedup_removed + self.skipped_samples)
                as i64
    }
}

/// One fault-tolerance event: which op, which ordinals, what happened.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultRecord {
    pub op: String,
    pub ordinals: Vec<usize>,
    pub error: String,
    pub action: FaultMode,
}

#[derive(Debug)]
pub struct RunResult {
    pub samples: Vec<Sample>,
    pub counters: RunCounters,
    pub drop_log: Vec<DropRecord>,
    pub fault_log: Vec<FaultRecord>,
    pub snapshots: Vec<StatsSnapshot>,
    /// Set when the run stopped at the `interrupt_after` op index.
    pub interrupted_after: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("aborted on {op}: {source}")]
    Aborted {
        op: String,
        source: OpError,
        counters: Box<RunCounters>,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl ExecError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExecError::Aborted { .. } => EXIT_ABORTED,
            ExecError::Validation(_) => EXIT_VALIDATION,
            ExecError::Dataset(DatasetError::RecipeMismatch { .. }) => EXIT_RESUME_MISMATCH,
            ExecError::Dataset(_) => EXIT_VALIDATION,
        }
    }
}

// ---------------------------------------------------------------------
// monitoring

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub path: PathBuf,
    pub interval: Duration,
}

/// Live state sampled by the monitor thread.
#[derive(Debug)]
pub struct MonitorState {
    started: Instant,
    processed_samples: AtomicU64,
    queue_depth: AtomicU64,
    per_op_secs: Mutex<BTreeMap<String, f64>>,
    last_tick: Mutex<(f64, u64)>,
}

impl Default for MonitorState {
    fn default() -> Self {
        MonitorState {
            started: Instant::now(),
            processed_samples: AtomicU64::new(0),
            queue_depth: AtomicU64::new(0),
            per_op_secs: Mutex::new(BTreeMap::new()),
            last_tick: Mutex::new((0.0, 0)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorSample {
    pub elapsed_secs: f64,
    /// Samples per second since the previous tick.
    pub throughput: f64,
    pub queue_depth: u64,
    pub per_op_secs: BTreeMap<String, f64>,
    pub rss_bytes: u64,
}

/// Sample the run state; called by the monitor thread at a fixed interval
/// and once at the end of the run.
pub fn monitor_tick(state: &MonitorState) -> MonitorSample {
    let elapsed = state.started.elapsed().as_secs_f64();
    let processed = state.processed_samples.load(Ordering::Relaxed);
    let mut last = state.last_tick.lock().expect("monitor lock");
    let (last_elapsed, last_processed) = *last;
    let dt = (elapsed - last_elapsed).max(1e-9);
    let throughput = (processed.saturating_sub(last_processed)) as f64 / dt;
    *last = (elapsed, processed);
    MonitorSample {
        elapsed_secs: elapsed,
        throughput,
        queue_depth: state.queue_depth.load(Ordering::Relaxed),
        per_op_secs: state.per_op_secs.lock().expect("monitor lock").clone(),
        rss_bytes: current_rss_bytes(),
    }
}

fn current_rss_bytes() -> u64 {
    std::fs::read_to_string("/proc/self/statm")
        .ok()
        .and_then(|s| {
            s.split_whitespace()
                .nth(1)
                .and_then(|pages| pages.parse::<u64>().ok())
        })
        .map(|pages| pages * 4096)
        .unwrap_or(0)
}

struct MonitorHandle {
    state: Arc<MonitorState>,
    stop: Arc<AtomicBool>,
    writer: Arc<Mutex<std::fs::File>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl MonitorHandle {
    fn start(config: &MonitorConfig) -> Result<Self, ExecError> {
        let file = std::fs::File::create(&config.path).map_err(|e| {
            ExecError::Validation(format!(
                "cannot create monitor log {}: {e}",
                config.path.display()
            ))
        })?;
        let state = Arc::new(MonitorState::default());
        let stop = Arc::new(AtomicBool::new(false));
        let writer = Arc::new(Mutex::new(file));
        let thread = {
            let state = Arc::clone(&state);
            let stop = Arc::clone(&stop);
            let writer = Arc::clone(&writer);
            let interval = config.interval;
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    std::thread::sleep(interval);
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let sample = monitor_tick(&state);
                    write_monitor_line(&writer, &sample);
                }
            })
        };
        Ok(MonitorHandle {
            state,
            stop,
            writer,
            thread: Some(thread),
        })
    }

    fn finish(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
        let sample = monitor_tick(&self.state);
        write_monitor_line(&self.writer, &sample);
    }
}

fn write_monitor_line(writer: &Arc<Mutex<std::fs::File>>, sample: &MonitorSample) {
    use std::io::Write;
    if let Ok(mut file) = writer.lock() {
        let line = serde_json::to_string(sample).expect("monitor sample serializes");
        let _ = writeln!(file, "{line}");
    }
}

// ---------------------------------------------------------------------
// options and input

#[derive(Debug, Default)]
pub struct ExecOptions {
    pub checkpoint_root: Option<PathBuf>,
    pub recipe_digest: String,
    /// Stop (successfully) after this op index completes and checkpoints;
    /// exercised by recovery tests and controlled restarts.
    pub interrupt_after: Option<usize>,
    pub collect_snapshots: bool,
    pub monitor: Option<MonitorConfig>,
}

pub enum PipelineInput<'a> {
    Dataset(&'a Dataset),
    /// Continue from a checkpoint: restored samples and counters, running
    /// ops from `next_op_index` on.
    Resume {
        samples: Vec<Sample>,
        counters: RunCounters,
        next_op_index: usize,
    },
}

/// Restore executor state from the latest checkpoint of this recipe.
pub fn load_resume_state(
    root: &Path,
    recipe_digest: &str,
) -> Result<(Vec<Sample>, RunCounters, usize), ExecError> {
    let last = crate::dataset::latest_checkpoint(root, recipe_digest).ok_or(
        DatasetError::RecipeMismatch {
            expected: recipe_digest.to_string(),
            root: root.display().to_string(),
        },
    )?;
    let (samples, manifest) = crate::dataset::read_checkpoint(root, recipe_digest, last)?;
    let counters: RunCounters = serde_json::from_value(manifest.counters)
        .map_err(|e| ExecError::Validation(format!("checkpoint counters: {e}")))?;
    Ok((samples, counters, last + 1))
}

// ---------------------------------------------------------------------
// the pipeline

/// Execute the plan over the input with the given fault policy. Ops run
/// in plan order; a checkpoint is written after each op; counters are
/// exact. Only abort-mode faults and I/O failures escape as errors.
pub fn run_pipeline(
    plan: &ExecutionPlan,
    registry: &Registry,
    input: PipelineInput<'_>,
    policy: &FaultPolicy,
    options: &ExecOptions,
) -> Result<RunResult, ExecError> {
    let planned: Vec<&PlannedOp> = plan.ops_in_order().collect();
    let ops = build_ops(registry, &planned)?;

    let monitor = match &options.monitor {
        Some(config) => Some(MonitorHandle::start(config)?),
        None => None,
    };
    let monitor_state = monitor.as_ref().map(|m| Arc::clone(&m.state));

    let mut counters = RunCounters::default();
    let mut drop_log: Vec<DropRecord> = Vec::new();
    let mut fault_log: Vec<FaultRecord> = Vec::new();
    let mut snapshots: Vec<StatsSnapshot> = Vec::new();
    let mut interrupted_after = None;

    let (mut data, start_index) = match input {
        PipelineInput::Dataset(dataset) => {
            let ingest_batch = planned
                .first()
                .map(|p| p.batch_size)
                .unwrap_or(DEFAULT_BATCH_SIZE);
            let data = ingest(
                dataset,
                ingest_batch,
                policy,
                &mut counters,
                &mut fault_log,
            )?;
            if options.collect_snapshots {
                snapshots.push(crate::analyzer::collect_snapshot(&data, 0, "load"));
            }
            (data, 0usize)
        }
        PipelineInput::Resume {
            samples,
            counters: restored,
            next_op_index,
        } => {
            counters = restored;
            (samples, next_op_index)
        }
    };

    for (op_index, (planned_op, op)) in planned.iter().zip(&ops).enumerate().skip(start_index) {
        let name = planned_op.descriptor.name.clone();
        let started = Instant::now();
        let in_count = data.len();
        let mut dropped_here = 0usize;
        let mut removed_here = 0usize;
        let mut skipped_here = 0usize;

        let outcome = if op.is_batched() {
            run_batched_op(
                op,
                std::mem::take(&mut data),
                planned_op.batch_size,
                planned_op.worker_count,
                policy,
                &mut counters,
                &mut drop_log,
                &mut fault_log,
                &mut dropped_here,
                &mut skipped_here,
                monitor_state.as_deref(),
            )
        } else {
            run_barrier_op(
                op,
                std::mem::take(&mut data),
                policy,
                &mut counters,
                &mut fault_log,
                &mut removed_here,
                &mut skipped_here,
            )
        };

        let elapsed = started.elapsed().as_secs_f64();
        *counters.wall_time_per_op.entry(name.clone()).or_insert(0.0) += elapsed;
        if let Some(state) = monitor_state.as_deref() {
            *state
                .per_op_secs
                .lock()
                .expect("monitor lock")
                .entry(name.clone())
                .or_insert(0.0) += elapsed;
            state
                .processed_samples
                .fetch_add(in_count as u64, Ordering::Relaxed);
        }

        match outcome {
            Ok(out) => data = out,
            Err(error) => {
                if let Some(handle) = monitor {
                    handle.finish();
                }
                return Err(ExecError::Aborted {
                    op: name,
                    source: error,
                    counters: Box::new(counters),
                });
            }
        }

        // Ops may legitimately change the sample count (chunk mappers,
        // groupers, selectors); fold the change into the conservation
        // identity.
        counters.structural_net +=
            (data.len() + dropped_here + removed_here + skipped_here) as i64 - in_count as i64;

        if let Some(root) = &options.checkpoint_root {
            crate::dataset::write_checkpoint(
                root,
                &options.recipe_digest,
                op_index,
                &data,
                serde_json::to_value(&counters).expect("counters serialize"),
            )?;
        }
        if options.collect_snapshots {
            snapshots.push(crate::analyzer::collect_snapshot(&data, op_index + 1, &name));
        }
        if options.interrupt_after == Some(op_index) {
            interrupted_after = Some(op_index);
            break;
        }
    }

    counters.kept = data.len();
    if let Some(handle) = monitor {
        handle.finish();
    }
    Ok(RunResult {
        samples: data,
        counters,
        drop_log,
        fault_log,
        snapshots,
        interrupted_after,
    })
}

/// Instantiate the planned ops against the registry, rebuilding fused ops
/// from their child descriptors.
pub fn build_ops(registry: &Registry, planned: &[&PlannedOp]) -> Result<Vec<OpKind>, ExecError> {
    let mut ops = Vec::with_capacity(planned.len());
    for planned_op in planned {
        let descriptor = &planned_op.descriptor;
        let op = if descriptor.op_type == OpType::FusedOp {
            let mut children = Vec::with_capacity(descriptor.children.len());
            for child in &descriptor.children {
                children.push(
                    registry
                        .build(&child.name, &child.params)
                        .map_err(|e| ExecError::Validation(e.to_string()))?,
                );
            }
            OpKind::Fused(Arc::new(
                fuse(children, planned_op.batch_size)
                    .map_err(|e| ExecError::Validation(e.to_string()))?,
            ))
        } else {
            registry
                .build(&descriptor.name, &descriptor.params)
                .map_err(|e| ExecError::Validation(e.to_string()))?
        };
        ops.push(op);
    }
    Ok(ops)
}

/// Read the source into memory, applying the fault policy to batches
/// containing malformed lines. Parse failures are deterministic, so they
/// are not retried; the batch-skip granularity matches operator faults.
fn ingest(
    dataset: &Dataset,
    batch_size: usize,
    policy: &FaultPolicy,
    counters: &mut RunCounters,
    fault_log: &mut Vec<FaultRecord>,
) -> Result<Vec<Sample>, ExecError> {
    let batch_size = batch_size.max(1);
    let mut data: Vec<Sample> = Vec::new();
    let mut prototype: Option<Sample> = None;
    let mut slot_batch: Vec<(usize, Slot)> = Vec::with_capacity(batch_size);
    let mut next_ordinal = 0usize;

    let flush = |batch: &mut Vec<(usize, Slot)>,
                     data: &mut Vec<Sample>,
                     prototype: &mut Option<Sample>,
                     counters: &mut RunCounters,
                     fault_log: &mut Vec<FaultRecord>|
     -> Result<(), ExecError> {
        if batch.is_empty() {
            return Ok(());
        }
        let bad: Vec<String> = batch
            .iter()
            .filter_map(|(_, slot)| match slot {
                Slot::Malformed { file, line, message } => {
                    Some(format!("{file}:{line}: {message}"))
                }
                Slot::Ok(_) => None,
            })
            .collect();
        counters.processed += batch.len();
        counters.bad_lines += bad.len();
        if bad.is_empty() {
            for (_, slot) in batch.drain(..) {
                if let Slot::Ok(sample) = slot {
                    if prototype.is_none() {
                        *prototype = Some(sample.clone());
                    }
                    data.push(sample);
                }
            }
            return Ok(());
        }
        let ordinals: Vec<usize> = batch.iter().map(|(ordinal, _)| *ordinal).collect();
        let error = format!("malformed input lines: {}", bad.join("; "));
        match policy.mode {
            FaultMode::SkipBatch => {
                counters.skipped_batches += 1;
                counters.skipped_samples += batch.len();
                fault_log.push(FaultRecord {
                    op: "load".to_string(),
                    ordinals,
                    error,
                    action: FaultMode::SkipBatch,
                });
                batch.clear();
                Ok(())
            }
            FaultMode::FillEmpty => {
                let proto = prototype.clone().or_else(|| {
                    batch.iter().find_map(|(_, slot)| match slot {
                        Slot::Ok(sample) => Some(sample.clone()),
                        Slot::Malformed { .. } => None,
                    })
                });
                let proto = proto.unwrap_or_default();
                for _ in 0..batch.len() {
                    data.push(make_empty_sample(&proto));
                }
                counters.placeholder_samples += batch.len();
                fault_log.push(FaultRecord {
                    op: "load".to_string(),
                    ordinals,
                    error,
                    action: FaultMode::FillEmpty,
                });
                batch.clear();
                Ok(())
            }
            FaultMode::Abort => Err(ExecError::Aborted {
                op: "load".to_string(),
                source: OpError::Io(error),
                counters: Box::new(counters.clone()),
            }),
        }
    };

    for slot in dataset.stream()? {
        slot_batch.push((next_ordinal, slot));
        next_ordinal += 1;
        if slot_batch.len() == batch_size {
            flush(&mut slot_batch, &mut data, &mut prototype, counters, fault_log)?;
        }
    }
    flush(&mut slot_batch, &mut data, &mut prototype, counters, fault_log)?;
    Ok(data)
}

enum BatchOutcome {
    Processed {
        output: crate::ops::BatchOutput,
        retried: bool,
    },
    Failed {
        batch: Batch,
        error: OpError,
        retried: bool,
    },
}

/// Run one batched op over the dataset with a worker pool. Batches are
/// dispatched through a bounded queue and reassembled in batch order, so
/// the output is deterministic regardless of worker scheduling.
#[allow(clippy::too_many_arguments)]
fn run_batched_op(
    op: &OpKind,
    data: Vec<Sample>,
    batch_size: usize,
    worker_count: usize,
    policy: &FaultPolicy,
    counters: &mut RunCounters,
    drop_log: &mut Vec<DropRecord>,
    fault_log: &mut Vec<FaultRecord>,
    dropped_here: &mut usize,
    skipped_here: &mut usize,
    monitor: Option<&MonitorState>,
) -> Result<Vec<Sample>, OpError> {
    let batch_size = batch_size.max(1);
    let mut batches: Vec<Batch> = Vec::new();
    let mut ordinal = 0usize;
    let mut iter = data.into_iter().peekable();
    while iter.peek().is_some() {
        let chunk: Vec<Sample> = iter.by_ref().take(batch_size).collect();
        let ordinals: Vec<usize> = (ordinal..ordinal + chunk.len()).collect();
        ordinal += chunk.len();
        batches.push(Batch::new(chunk, ordinals));
    }
    let batch_count = batches.len();
    if batch_count == 0 {
        return Ok(Vec::new());
    }

    let workers = worker_count.clamp(1, batch_count);
    let mut outcomes: Vec<Option<BatchOutcome>> = Vec::with_capacity(batch_count);
    outcomes.resize_with(batch_count, || None);

    if workers == 1 {
        for (index, batch) in batches.into_iter().enumerate() {
            outcomes[index] = Some(attempt_batch(op, batch, policy, 0));
        }
    } else {
        let (job_tx, job_rx) = mpsc::sync_channel::<(usize, Batch)>(workers * 2);
        let job_rx = Arc::new(Mutex::new(job_rx));
        let (result_tx, result_rx) = mpsc::channel::<(usize, BatchOutcome)>();

        std::thread::scope(|scope| {
            for worker_id in 0..workers {
                let job_rx = Arc::clone(&job_rx);
                let result_tx = result_tx.clone();
                scope.spawn(move || loop {
                    let job = { job_rx.lock().expect("job queue lock").recv() };
                    match job {
                        Ok((index, batch)) => {
                            if let Some(state) = monitor {
                                state.queue_depth.fetch_sub(1, Ordering::Relaxed);
                            }
                            let outcome = attempt_batch(op, batch, policy, worker_id);
                            if result_tx.send((index, outcome)).is_err() {
                                break;
                            }
                        }
                        Err(_) => break,
                    }
                });
            }
            drop(result_tx);
            for (index, batch) in batches.into_iter().enumerate() {
                if let Some(state) = monitor {
                    state.queue_depth.fetch_add(1, Ordering::Relaxed);
                }
                job_tx.send((index, batch)).expect("workers alive");
            }
            drop(job_tx);
            for (index, outcome) in result_rx {
                outcomes[index] = Some(outcome);
            }
        });
    }

    // Deterministic fold in batch order.
    let op_name = op.descriptor().name.clone();
    let mut out: Vec<Sample> = Vec::new();
    for outcome in outcomes.into_iter().flatten() {
        match outcome {
            BatchOutcome::Processed { output, retried } => {
                if retried {
                    counters.retried_batches += 1;
                }
                *dropped_here += output.dropped.len();
                for record in &output.dropped {
                    *counters
                        .dropped_by_filter
                        .entry(record.op.clone())
                        .or_insert(0) += 1;
                }
                drop_log.extend(output.dropped);
                out.extend(output.samples);
            }
            BatchOutcome::Failed {
                batch,
                error,
                retried,
            } => {
                if retried {
                    counters.retried_batches += 1;
                }
                let ordinals = batch.origin_ordinals.clone();
                match policy.mode {
                    FaultMode::SkipBatch => {
                        counters.skipped_batches += 1;
                        counters.skipped_samples += batch.size();
                        *skipped_here += batch.size();
                        fault_log.push(FaultRecord {
                            op: op_name.clone(),
                            ordinals,
                            error: error.to_string(),
                            action: FaultMode::SkipBatch,
                        });
                    }
                    FaultMode::FillEmpty => {
                        let prototype = batch.samples.first().cloned().unwrap_or_default();
                        for _ in 0..batch.size() {
                            out.push(make_empty_sample(&prototype));
                        }
                        counters.placeholder_samples += batch.size();
                        fault_log.push(FaultRecord {
                            op: op_name.clone(),
                            ordinals,
                            error: error.to_string(),
                            action: FaultMode::FillEmpty,
                        });
                    }
                    FaultMode::Abort => return Err(error),
                }
            }
        }
    }
    Ok(out)
}

fn attempt_batch(op: &OpKind, batch: Batch, policy: &FaultPolicy, worker_id: usize) -> BatchOutcome {
    let mut attempt = 0usize;
    loop {
        let mut ctx = BatchCtx::new(worker_id);
        ctx.io_threads = BATCH_IO_THREADS;
        match process_batch(op, batch.clone(), &mut ctx) {
            Ok(output) => {
                return BatchOutcome::Processed {
                    output,
                    retried: attempt > 0,
                }
            }
            Err(error) => {
                if attempt >= policy.max_retries {
                    return BatchOutcome::Failed {
                        batch,
                        error,
                        retried: attempt > 0,
                    };
                }
                std::thread::sleep(policy.backoff_delay(attempt));
                attempt += 1;
            }
        }
    }
}

/// Barrier ops see the whole dataset at once. Script failures abort the
/// run regardless of policy: a broken script invalidates all its output,
/// unlike a corrupt sample.
fn run_barrier_op(
    op: &OpKind,
    data: Vec<Sample>,
    policy: &FaultPolicy,
    counters: &mut RunCounters,
    fault_log: &mut Vec<FaultRecord>,
    removed_here: &mut usize,
    skipped_here: &mut usize,
) -> Result<Vec<Sample>, OpError> {
    let out: RunOutput = crate::ops::run(op, data, DEFAULT_BATCH_SIZE)?;
    counters.dedup_removed += out.dedup_removed;
    *removed_here += out.dedup_removed;
    let mut samples = out.samples;
    if !out.group_key_faults.is_empty() {
        let op_name = op.descriptor().name.clone();
        let ordinals: Vec<usize> = out.group_key_faults.iter().map(|(o, _)| *o).collect();
        let count = out.group_key_faults.len();
        let error = OpError::MissingGroupKey {
            key: "group key".to_string(),
            ordinals: ordinals.clone(),
        };
        match policy.mode {
            FaultMode::SkipBatch => {
                counters.skipped_batches += 1;
                counters.skipped_samples += count;
                *skipped_here += count;
                fault_log.push(FaultRecord {
                    op: op_name,
                    ordinals,
                    error: error.to_string(),
                    action: FaultMode::SkipBatch,
                });
            }
            FaultMode::FillEmpty => {
                // The placeholders form one extra group so the grouped
                // shape is preserved for the aggregator.
                let placeholders: Vec<Sample> = out
                    .group_key_faults
                    .iter()
                    .map(|(_, sample)| make_empty_sample(sample))
                    .collect();
                counters.placeholder_samples += placeholders.len();
                let grouped = crate::ops::Grouper::naive().group(placeholders);
                for mut batched in grouped.grouped {
                    batched.mark_placeholder();
                    samples.push(batched);
                }
                fault_log.push(FaultRecord {
                    op: op_name,
                    ordinals,
                    error: error.to_string(),
                    action: FaultMode::FillEmpty,
                });
            }
            FaultMode::Abort => return Err(error),
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LoadMode;
    use crate::ops::{FilterOp, OpDescriptor, ParamMap};
    use crate::planner::{assumed_probe, plan, PlanOptions, Resources};
    use std::sync::atomic::AtomicUsize;

    fn registry() -> Registry {
        Registry::with_builtin()
    }

    fn test_resources() -> Resources {
        Resources {
            cpu_count: 4,
            mem_bytes: 4 << 30,
            accel_slots: vec![],
        }
    }

    fn make_plan(registry: &Registry, ops: &[(&str, ParamMap)], optimize: bool) -> ExecutionPlan {
        let built: Vec<OpKind> = ops
            .iter()
            .map(|(name, params)| registry.build(name, params).unwrap())
            .collect();
        let descriptors: Vec<&OpDescriptor> = built.iter().map(|o| o.descriptor()).collect();
        let probe = assumed_probe(&descriptors);
        plan(
            &descriptors,
            &probe,
            &test_resources(),
            PlanOptions {
                optimize,
                dataset_size: 100,
                ..PlanOptions::default()
            },
        )
    }

    fn params(pairs: &[(&str, serde_json::Value)]) -> ParamMap {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn write_jsonl(path: &Path, lines: &[String]) {
        std::fs::write(path, lines.join("\n") + "\n").unwrap();
    }

    #[test]
    fn clean_run_checkpoints_every_op_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        let lines: Vec<String> = (0..40)
            .map(|i| format!(r#"{{"text":"sample number {i} with body {}"}}"#, "x".repeat(i)))
            .collect();
        write_jsonl(&src, &lines);
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();

        let registry = registry();
        let plan = make_plan(
            &registry,
            &[
                ("whitespace_normalization_mapper", ParamMap::new()),
                (
                    "text_length_filter",
                    params(&[("min_len", serde_json::json!(30))]),
                ),
                ("character_repetition_filter", ParamMap::new()),
                ("document_deduplicator", ParamMap::new()),
                (
                    "text_length_filter",
                    params(&[("max_len", serde_json::json!(10_000))]),
                ),
            ],
            false,
        );
        let ckpt = dir.path().join("ckpt");
        let options = ExecOptions {
            checkpoint_root: Some(ckpt.clone()),
            recipe_digest: "test-digest".to_string(),
            ..ExecOptions::default()
        };
        let result = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy::default(),
            &options,
        )
        .unwrap();

        assert_eq!(result.counters.processed, 40);
        assert!(result.counters.conservation_holds(), "{:?}", result.counters);
        for op_index in 0..5 {
            assert!(
                crate::dataset::checkpoint_dir(&ckpt, "test-digest", op_index)
                    .join("manifest.json")
                    .exists(),
                "missing checkpoint {op_index}"
            );
        }
        assert_eq!(result.counters.wall_time_per_op.len(), 4); // two length filters share a name
    }

    #[test]
    fn corrupt_sample_skips_exactly_one_batch() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        let mut lines: Vec<String> = (0..20)
            .map(|i| format!(r#"{{"text":"clean sample {i}"}}"#))
            .collect();
        lines[9] = "{corrupt".to_string();
        write_jsonl(&src, &lines);
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();

        let registry = registry();
        let mut plan = make_plan(
            &registry,
            &[(
                "text_length_filter",
                params(&[("min_len", serde_json::json!(0))]),
            )],
            false,
        );
        for group in &mut plan.groups {
            for op in group {
                op.batch_size = 4;
            }
        }
        let result = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy::default(),
            &ExecOptions::default(),
        )
        .unwrap();

        // Batch of 4 containing the corrupt line is skipped wholesale.
        assert_eq!(result.counters.skipped_batches, 1);
        assert_eq!(result.counters.skipped_samples, 4);
        assert_eq!(result.counters.processed, 20);
        assert_eq!(result.samples.len(), 16);
        assert!(result.counters.conservation_holds());

        // Same input under fill_empty: nothing lost, four placeholders.
        let result = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy {
                mode: FaultMode::FillEmpty,
                ..FaultPolicy::default()
            },
            &ExecOptions::default(),
        )
        .unwrap();
        assert_eq!(result.counters.placeholder_samples, 4);
        assert_eq!(result.samples.len(), 20);
        assert!(result.counters.conservation_holds());
        assert_eq!(
            result.samples.iter().filter(|s| s.is_placeholder()).count(),
            4
        );
    }

    #[test]
    fn abort_mode_reports_counters() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &[r#"{"text":"ok"}"#.to_string(), "nope".to_string()],
        );
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();
        let registry = registry();
        let plan = make_plan(&registry, &[("text_length_filter", ParamMap::new())], false);
        let err = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy {
                mode: FaultMode::Abort,
                ..FaultPolicy::default()
            },
            &ExecOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), EXIT_ABORTED);
        let ExecError::Aborted { counters, .. } = err else {
            panic!("expected abort");
        };
        assert_eq!(counters.processed, 2);
    }

    struct Flaky {
        descriptor: OpDescriptor,
        failures_left: AtomicUsize,
    }

    impl FilterOp for Flaky {
        fn descriptor(&self) -> &OpDescriptor {
            &self.descriptor
        }
        fn stat_keys(&self) -> Vec<String> {
            vec!["flaky".to_string()]
        }
        fn compute_stats(&self, sample: &mut Sample, _: &mut BatchCtx) -> Result<(), OpError> {
            let left = self.failures_left.load(Ordering::SeqCst);
            if left > 0 {
                self.failures_left.fetch_sub(1, Ordering::SeqCst);
                return Err(OpError::Internal("transient".to_string()));
            }
            sample.set_stat("flaky", 1);
            Ok(())
        }
        fn keep(&self, _: &Sample) -> Result<bool, OpError> {
            Ok(true)
        }
    }

    fn flaky_registry(failures: usize) -> Registry {
        let mut registry = Registry::with_builtin();
        let failures = Arc::new(AtomicUsize::new(failures));
        registry.register(
            "flaky_filter",
            OpType::Filter,
            "fails transiently for testing",
            vec![],
            move |_| {
                let mut descriptor = OpDescriptor::new("flaky_filter", OpType::Filter);
                descriptor.commutative_filter = true;
                Ok(OpKind::Filter(Arc::new(Flaky {
                    descriptor,
                    failures_left: AtomicUsize::new(failures.load(Ordering::SeqCst)),
                })))
            },
        );
        registry
    }

    #[test]
    fn transient_failure_recovers_on_retry() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &(0..6)
                .map(|i| format!(r#"{{"text":"doc {i}"}}"#))
                .collect::<Vec<_>>(),
        );
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();
        let registry = flaky_registry(2);
        let plan = make_plan(&registry, &[("flaky_filter", ParamMap::new())], false);
        let result = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy {
                max_retries: 3,
                backoff_base: Duration::from_millis(1),
                ..FaultPolicy::default()
            },
            &ExecOptions::default(),
        )
        .unwrap();
        assert_eq!(result.samples.len(), 6);
        assert_eq!(result.counters.retried_batches, 1);
        assert!(result.counters.conservation_holds());
    }

    #[test]
    fn persistent_failure_is_skipped_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &(0..6)
                .map(|i| format!(r#"{{"text":"doc {i}"}}"#))
                .collect::<Vec<_>>(),
        );
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();
        let registry = flaky_registry(usize::MAX / 2);
        let plan = make_plan(&registry, &[("flaky_filter", ParamMap::new())], false);
        let result = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy {
                max_retries: 1,
                backoff_base: Duration::from_millis(1),
                ..FaultPolicy::default()
            },
            &ExecOptions::default(),
        )
        .unwrap();
        assert!(result.samples.is_empty());
        assert_eq!(result.counters.skipped_samples, 6);
        assert_eq!(result.fault_log.len(), 1);
        assert_eq!(result.fault_log[0].ordinals.len(), 6);
        assert!(result.counters.conservation_holds());
    }

    #[test]
    fn determinism_across_worker_counts() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &(0..300)
                .map(|i| format!(r#"{{"text":"document {i} {}"}}"#, "y".repeat(i % 40)))
                .collect::<Vec<_>>(),
        );
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();
        let registry = registry();
        let ops: &[(&str, ParamMap)] = &[
            (
                "text_length_filter",
                params(&[("min_len", serde_json::json!(20))]),
            ),
            ("character_repetition_filter", ParamMap::new()),
        ];
        let mut outputs = Vec::new();
        for workers in [1usize, 4] {
            let mut plan = make_plan(&registry, ops, false);
            for group in &mut plan.groups {
                for op in group {
                    op.worker_count = workers;
                    op.batch_size = 16;
                }
            }
            let result = run_pipeline(
                &plan,
                &registry,
                PipelineInput::Dataset(&dataset),
                &FaultPolicy::default(),
                &ExecOptions::default(),
            )
            .unwrap();
            let lines: Vec<String> = result.samples.iter().map(|s| s.to_json_line()).collect();
            let mut counters = result.counters;
            counters.wall_time_per_op.clear(); // timings differ run to run
            outputs.push((lines, counters));
        }
        assert_eq!(outputs[0].0, outputs[1].0, "worker count changed output");
        assert_eq!(outputs[0].1, outputs[1].1, "worker count changed counters");
    }

    #[test]
    fn streaming_and_materialized_give_identical_results() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &(0..100)
                .map(|i| format!(r#"{{"text":"streamed doc {i}"}}"#))
                .collect::<Vec<_>>(),
        );
        let registry = registry();
        let ops: &[(&str, ParamMap)] = &[(
            "text_length_filter",
            params(&[("min_len", serde_json::json!(14))]),
        )];
        let mut exports = Vec::new();
        for mode in [LoadMode::Streaming, LoadMode::Materialized] {
            let dataset = Dataset::load(&src, mode).unwrap();
            let plan = make_plan(&registry, ops, false);
            let result = run_pipeline(
                &plan,
                &registry,
                PipelineInput::Dataset(&dataset),
                &FaultPolicy::default(),
                &ExecOptions::default(),
            )
            .unwrap();
            exports.push(
                result
                    .samples
                    .iter()
                    .map(|s| s.to_json_line())
                    .collect::<Vec<_>>(),
            );
        }
        assert_eq!(exports[0], exports[1]);
    }

    #[test]
    fn resume_continues_from_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &(0..30)
                .map(|i| format!(r#"{{"text":"resumable doc {i} {}"}}"#, "z".repeat(i)))
                .collect::<Vec<_>>(),
        );
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();
        let registry = registry();
        let ops: &[(&str, ParamMap)] = &[
            ("whitespace_normalization_mapper", ParamMap::new()),
            (
                "text_length_filter",
                params(&[("min_len", serde_json::json!(18))]),
            ),
            ("document_deduplicator", ParamMap::new()),
        ];
        let ckpt = dir.path().join("ckpt");
        let digest = "resume-digest";

        // Uninterrupted reference run.
        let plan = make_plan(&registry, ops, false);
        let full = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy::default(),
            &ExecOptions::default(),
        )
        .unwrap();

        // Interrupt after op 1, resume, compare.
        let interrupted = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy::default(),
            &ExecOptions {
                checkpoint_root: Some(ckpt.clone()),
                recipe_digest: digest.to_string(),
                interrupt_after: Some(1),
                ..ExecOptions::default()
            },
        )
        .unwrap();
        assert_eq!(interrupted.interrupted_after, Some(1));

        let (samples, counters, next) = load_resume_state(&ckpt, digest).unwrap();
        assert_eq!(next, 2);
        let resumed = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Resume {
                samples,
                counters,
                next_op_index: next,
            },
            &FaultPolicy::default(),
            &ExecOptions {
                checkpoint_root: Some(ckpt),
                recipe_digest: digest.to_string(),
                ..ExecOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.samples, full.samples);
        assert_eq!(resumed.counters.kept, full.counters.kept);
    }

    #[test]
    fn resume_with_wrong_digest_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_resume_state(dir.path(), "missing").unwrap_err();
        assert_eq!(err.exit_code(), EXIT_RESUME_MISMATCH);
    }

    #[test]
    fn monitor_log_is_jsonl_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &(0..50)
                .map(|i| format!(r#"{{"text":"monitored {i}"}}"#))
                .collect::<Vec<_>>(),
        );
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();
        let registry = registry();
        let plan = make_plan(&registry, &[("text_length_filter", ParamMap::new())], false);
        let monitor_path = dir.path().join("run.monitor.jsonl");
        let wall_start = Instant::now();
        let result = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy::default(),
            &ExecOptions {
                monitor: Some(MonitorConfig {
                    path: monitor_path.clone(),
                    interval: Duration::from_millis(5),
                }),
                ..ExecOptions::default()
            },
        )
        .unwrap();
        let wall = wall_start.elapsed().as_secs_f64();

        let log = std::fs::read_to_string(&monitor_path).unwrap();
        let samples: Vec<MonitorSample> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(!samples.is_empty());
        let last = samples.last().unwrap();
        let per_op_total: f64 = last.per_op_secs.values().sum();
        assert!(per_op_total <= wall + 0.05);
        let counted: f64 = result.counters.wall_time_per_op.values().sum();
        assert!((per_op_total - counted).abs() < 0.05);
    }

    #[test]
    fn idle_monitor_reports_zero_throughput() {
        let state = MonitorState::default();
        std::thread::sleep(Duration::from_millis(5));
        let first = monitor_tick(&state);
        assert_eq!(first.throughput, 0.0);
        let second = monitor_tick(&state);
        assert_eq!(second.throughput, 0.0);
    }

    #[test]
    fn script_failure_aborts_even_under_skip_policy() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("fail.sh");
        std::fs::write(&script, "#!/bin/sh\nexit 1\n").unwrap();
        let mut perms = std::fs::metadata(&script).unwrap().permissions();
        perms.set_mode(0o755);
        std::fs::set_permissions(&script, perms).unwrap();

        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &(0..8)
                .map(|i| format!(r#"{{"text":"doc {i}"}}"#))
                .collect::<Vec<_>>(),
        );
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();
        let registry = registry();
        let plan = make_plan(
            &registry,
            &[
                ("text_length_filter", ParamMap::new()),
                (
                    "script_op",
                    params(&[("path", serde_json::json!(script.to_string_lossy()))]),
                ),
            ],
            false,
        );
        let ckpt = dir.path().join("ckpt");
        let err = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy::default(), // skip_batch does not soften script failures
            &ExecOptions {
                checkpoint_root: Some(ckpt.clone()),
                recipe_digest: "script-abort".to_string(),
                ..ExecOptions::default()
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), EXIT_ABORTED);
        // The checkpoint of the last completed op survives for recovery.
        assert!(
            crate::dataset::checkpoint_dir(&ckpt, "script-abort", 0)
                .join("manifest.json")
                .exists()
        );
        let ExecError::Aborted { op, counters, .. } = err else {
            panic!("expected abort")
        };
        assert_eq!(op, "script_op");
        assert_eq!(counters.processed, 8);
    }

    #[test]
    fn grouper_missing_keys_follow_policy() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.jsonl");
        write_jsonl(
            &src,
            &[r#"{"text":"a","meta":{"src":"x"}}"#.to_string(),
                r#"{"text":"b"}"#.to_string(),
                r#"{"text":"c","meta":{"src":"x"}}"#.to_string()],
        );
        let dataset = Dataset::load(&src, LoadMode::Materialized).unwrap();
        let registry = registry();
        let plan = make_plan(
            &registry,
            &[(
                "key_value_grouper",
                params(&[("group_by_key", serde_json::json!("src"))]),
            )],
            false,
        );
        let result = run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy::default(),
            &ExecOptions::default(),
        )
        .unwrap();
        assert_eq!(result.samples.len(), 1); // one group of two
        assert_eq!(result.counters.skipped_samples, 1);
        assert!(result.counters.conservation_holds(), "{:?}", result.counters);
    }
}
