//! The adaptive planner: probes operator speed and selectivity on a small
//! random sample, detects and fuses fusible filter groups, reorders
//! commutative runs so faster (and more selective) operators run first,
//! and sizes batches and workers against the machine's resources.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ops::{OpDescriptor, OpKind, OpType};
use crate::sample::Sample;

/// Speed assigned to an op whose probe failed; it sorts last in its group
/// and dominates the cost model, so the plan still comes out.
pub const FAILED_PROBE_SPEED: f64 = 1e-6;

/// Default batch size; efficiency gains plateau past a few hundred, so a
/// thousand is a safe general-purpose choice.
pub const DEFAULT_BATCH_SIZE: usize = 1000;

/// Probes execute each op on at most this many samples.
pub const PROBE_LIMIT: usize = 1000;

/// Fraction of a resource the planner is willing to commit.
pub const UTILIZATION: f64 = 0.9;

/// Exact reordering is enumerated for groups up to this size; larger
/// groups fall back to the fastest-first heuristic.
pub const EXACT_REORDER_LIMIT: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlanError {
    #[error("non-positive speed {0} in fused estimate")]
    NonPositiveSpeed(f64),
    #[error("plan does not cover the recipe: {0}")]
    Coverage(String),
}

// ---------------------------------------------------------------------
// probing

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpProbe {
    pub name: String,
    /// Samples per second over the probe subset; positive for completed
    /// probes.
    pub speed: f64,
    /// Fraction of probe samples surviving (1.0 for non-dropping ops).
    pub keep_rate: f64,
    pub peak_mem: u64,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe_sample_size: usize,
    pub seed: u64,
    /// Mean canonical sample size over the probe subset; the per-sample
    /// memory estimate used for batch clamping.
    pub mean_sample_bytes: u64,
    pub per_op: Vec<OpProbe>,
}

/// Fixed-seed random subset of at most `limit` samples (reservoir over a
/// stream, so the input size need not be known up front).
pub fn probe_subset(
    stream: impl Iterator<Item = Sample>,
    limit: usize,
    seed: u64,
) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<Sample> = Vec::with_capacity(limit);
    for (seen, sample) in stream.enumerate() {
        if reservoir.len() < limit {
            reservoir.push(sample);
        } else {
            let slot = rng.gen_range(0..=seen);
            if slot < limit {
                reservoir[slot] = sample;
            }
        }
    }
    reservoir
}

/// A probe with uniform assumed speeds and keep rates, for paths that
/// skip probing (`--no-optimize` runs and resumed plans): batch sizes and
/// worker counts still get computed, reordering sees no signal.
pub fn assumed_probe(descriptors: &[&OpDescriptor]) -> ProbeReport {
    ProbeReport {
        probe_sample_size: 0,
        seed: crate::global_seed(),
        mean_sample_bytes: 1,
        per_op: descriptors
            .iter()
            .map(|d| OpProbe {
                name: d.name.clone(),
                speed: 1.0,
                keep_rate: 1.0,
                peak_mem: d.mem_required,
                wall_time_secs: 0.0,
                failed: None,
            })
            .collect(),
    }
}

/// Time each op on the same fixed-seed sample of `min(1000, n)` samples.
/// Ops run sequentially so their timings do not contend. A probe failure
/// is recorded and the op is treated as slowest.
pub fn probe_small_batch(samples: &[Sample], ops: &[OpKind], seed: u64) -> ProbeReport {
    let limit = PROBE_LIMIT.min(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(limit);
    indices.sort_unstable();
    let subset: Vec<Sample> = indices.iter().map(|i| samples[*i].clone()).collect();

    let mean_sample_bytes = if subset.is_empty() {
        1
    } else {
        (subset
            .iter()
            .map(|s| s.to_json_line().len() as u64)
            .sum::<u64>()
            / subset.len() as u64)
            .max(1)
    };

    let mut per_op = Vec::with_capacity(ops.len());
    for op in ops {
        let descriptor = op.descriptor();
        let started = Instant::now();
        let outcome = crate::ops::run(op, subset.clone(), DEFAULT_BATCH_SIZE);
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        let probe = match outcome {
            Ok(out) => OpProbe {
                name: descriptor.name.clone(),
                speed: (subset.len().max(1) as f64 / elapsed).max(FAILED_PROBE_SPEED),
                keep_rate: if subset.is_empty() {
                    1.0
                } else {
                    out.samples.len() as f64 / subset.len() as f64
                },
                peak_mem: if descriptor.mem_required > 0 {
                    descriptor.mem_required
                } else {
                    mean_sample_bytes * DEFAULT_BATCH_SIZE as u64
                },
                wall_time_secs: elapsed,
                failed: None,
            },
            Err(err) => OpProbe {
                name: descriptor.name.clone(),
                speed: FAILED_PROBE_SPEED,
                keep_rate: 1.0,
                peak_mem: descriptor.mem_required,
                wall_time_secs: elapsed,
                failed: Some(err.to_string()),
            },
        };
        per_op.push(probe);
    }
    ProbeReport {
        probe_sample_size: limit,
        seed,
        mean_sample_bytes,
        per_op,
    }
}

// ---------------------------------------------------------------------
// fusible-group detection

/// A node of a reorderable group: either one op or a set fused to share a
/// loaded resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupNode {
    Single(usize),
    Fused(Vec<usize>),
}

impl GroupNode {
    pub fn op_indices(&self) -> &[usize] {
        match self {
            GroupNode::Single(i) => std::slice::from_ref(i),
            GroupNode::Fused(indices) => indices,
        }
    }
}

/// One segment of the recipe: commutative filters reorder within their
/// run; everything else is a barrier pinned to its original position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanGroup {
    Reorderable(Vec<GroupNode>),
    Barrier(usize),
}

/// Split the recipe into reorderable runs and barriers, fusing filters
/// within a run that share a loaded resource (e.g. two image filters
/// reading the same files).
///
/// Two instances writing the same stat key with different params are
/// kept in separate runs: the surviving stat value depends on which ran
/// last, so they do not commute with each other.
pub fn detect_fusible_groups(descriptors: &[&OpDescriptor]) -> Vec<PlanGroup> {
    let mut groups = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    for (index, descriptor) in descriptors.iter().enumerate() {
        let reorderable = descriptor.commutative_filter && descriptor.supports_batch;
        if reorderable {
            let conflicts = run.iter().any(|member| {
                let other = descriptors[*member];
                other.params != descriptor.params
                    && other
                        .stat_keys
                        .iter()
                        .any(|key| descriptor.stat_keys.contains(key))
            });
            if conflicts {
                flush_run(&mut groups, &mut run, descriptors);
            }
            run.push(index);
        } else {
            flush_run(&mut groups, &mut run, descriptors);
            groups.push(PlanGroup::Barrier(index));
        }
    }
    flush_run(&mut groups, &mut run, descriptors);
    groups
}

fn flush_run(groups: &mut Vec<PlanGroup>, run: &mut Vec<usize>, descriptors: &[&OpDescriptor]) {
    if run.is_empty() {
        return;
    }
    // Union members sharing any resource tag into fused sets.
    let members = std::mem::take(run);
    let mut assignment: Vec<Option<usize>> = vec![None; members.len()];
    let mut sets: Vec<Vec<usize>> = Vec::new();
    let mut by_tag: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for (slot, op_index) in members.iter().enumerate() {
        for tag in &descriptors[*op_index].resource_tags {
            match by_tag.get(tag.as_str()) {
                Some(set_id) => {
                    let set_id = *set_id;
                    if assignment[slot].is_none() {
                        assignment[slot] = Some(set_id);
                        sets[set_id].push(*op_index);
                    }
                }
                None => {
                    let set_id = match assignment[slot] {
                        Some(existing) => existing,
                        None => {
                            sets.push(vec![*op_index]);
                            assignment[slot] = Some(sets.len() - 1);
                            sets.len() - 1
                        }
                    };
                    by_tag.insert(tag, set_id);
                }
            }
        }
    }
    let mut nodes: Vec<GroupNode> = Vec::new();
    let mut emitted: Vec<bool> = vec![false; sets.len()];
    for (slot, op_index) in members.iter().enumerate() {
        match assignment[slot] {
            Some(set_id) if sets[set_id].len() > 1 => {
                if !emitted[set_id] {
                    emitted[set_id] = true;
                    nodes.push(GroupNode::Fused(sets[set_id].clone()));
                }
            }
            _ => nodes.push(GroupNode::Single(*op_index)),
        }
    }
    groups.push(PlanGroup::Reorderable(nodes));
}

// ---------------------------------------------------------------------
// cost model

/// Harmonic composition of per-op speeds: the fused op processes each
/// sample through every child, so its per-sample cost is the sum of the
/// children's.
pub fn estimate_fused_speed(speeds: &[f64]) -> Result<f64, PlanError> {
    let mut inverse_sum = 0.0;
    for v in speeds {
        if *v <= 0.0 {
            return Err(PlanError::NonPositiveSpeed(*v));
        }
        inverse_sum += 1.0 / v;
    }
    Ok(1.0 / inverse_sum)
}

/// Per-node cost inputs: probed speed and keep rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeCost {
    pub speed: f64,
    pub keep_rate: f64,
}

/// Estimated group time: each node processes the samples surviving the
/// nodes before it.
pub fn estimated_time(order: &[usize], costs: &[NodeCost], initial: f64) -> f64 {
    let mut remaining = initial;
    let mut total = 0.0;
    for index in order {
        let cost = costs[*index];
        total += remaining / cost.speed;
        remaining *= cost.keep_rate;
    }
    total
}

/// Fastest-first ordering, ties broken by original position. This is the
/// pure speed criterion; it ignores selectivity.
pub fn reorder_by_speed(speeds: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..speeds.len()).collect();
    order.sort_by(|a, b| {
        speeds[*b]
            .partial_cmp(&speeds[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    order
}

/// The order minimizing estimated group time. Groups up to
/// [`EXACT_REORDER_LIMIT`] nodes are solved exactly by enumeration (the
/// first permutation in lexicographic order wins ties); larger groups use
/// the fastest-first heuristic, falling back to the original order if the
/// heuristic does not help.
pub fn optimal_order(costs: &[NodeCost], initial: f64) -> Vec<usize> {
    let n = costs.len();
    let identity: Vec<usize> = (0..n).collect();
    if n <= 1 {
        return identity;
    }
    if n <= EXACT_REORDER_LIMIT {
        let mut best = identity.clone();
        let mut best_cost = estimated_time(&identity, costs, initial);
        let mut permutation = identity;
        while next_permutation(&mut permutation) {
            let cost = estimated_time(&permutation, costs, initial);
            if cost < best_cost {
                best_cost = cost;
                best = permutation.clone();
            }
        }
        best
    } else {
        let heuristic = reorder_by_speed(&costs.iter().map(|c| c.speed).collect::<Vec<_>>());
        if estimated_time(&heuristic, costs, initial)
            <= estimated_time(&identity, costs, initial)
        {
            heuristic
        } else {
            identity
        }
    }
}

/// Advance to the next lexicographic permutation; false once exhausted.
fn next_permutation(perm: &mut [usize]) -> bool {
    if perm.len() < 2 {
        return false;
    }
    let mut i = perm.len() - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = perm.len() - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

// ---------------------------------------------------------------------
// resources, batch sizes, workers

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resources {
    pub cpu_count: usize,
    pub mem_bytes: u64,
    /// Accelerator memory per slot, for accelerator-tagged ops.
    #[serde(default)]
    pub accel_slots: Vec<u64>,
}

impl Resources {
    pub fn detect() -> Self {
        Resources {
            cpu_count: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            mem_bytes: detect_total_memory().unwrap_or(8 * 1024 * 1024 * 1024),
            accel_slots: Vec::new(),
        }
    }
}

fn detect_total_memory() -> Option<u64> {
    let meminfo = std::fs::read_to_string("/proc/meminfo").ok()?;
    for line in meminfo.lines() {
        if let Some(rest) = line.strip_prefix("MemTotal:") {
            let kb: u64 = rest
                .trim()
                .trim_end_matches("kB")
                .trim()
                .parse()
                .ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

/// The op's declared batch size, else the default of 1000, clamped so a
/// batch fits in 90% of available memory.
pub fn select_batch_size(
    declared: Option<usize>,
    per_sample_mem: u64,
    available_mem: u64,
) -> usize {
    let requested = declared.unwrap_or(DEFAULT_BATCH_SIZE);
    let cap = ((available_mem as f64 * UTILIZATION) / per_sample_mem.max(1) as f64) as usize;
    requested.min(cap.max(1)).max(1)
}

/// Worker count for one op: memory-bounded (per accelerator slot for
/// accelerator ops, against main memory otherwise), capped by the CPU
/// count, floored at one.
pub fn allocate_workers(
    descriptor: &OpDescriptor,
    mem_required: u64,
    resources: &Resources,
) -> (usize, Option<String>) {
    if mem_required == 0 {
        return (resources.cpu_count.max(1), None);
    }
    let (fit, bound_desc) = if descriptor.uses_accelerator && !resources.accel_slots.is_empty() {
        let per_slot_total: usize = resources
            .accel_slots
            .iter()
            .map(|slot| ((*slot as f64 * UTILIZATION) / mem_required as f64) as usize)
            .sum();
        (per_slot_total, "accelerator slot memory")
    } else {
        (
            ((resources.mem_bytes as f64 * UTILIZATION) / mem_required as f64) as usize,
            "memory",
        )
    };
    let workers = fit.min(resources.cpu_count);
    if workers == 0 {
        (
            1,
            Some(format!(
                "op {} needs {mem_required} bytes, more than fits in {bound_desc}; running 1 worker",
                descriptor.name
            )),
        )
    } else {
        (workers, None)
    }
}

// ---------------------------------------------------------------------
// the plan

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannedOp {
    /// For fused nodes the descriptor's `children` carry the members.
    pub descriptor: OpDescriptor,
    pub batch_size: usize,
    pub worker_count: usize,
    pub estimated_speed: f64,
    pub estimated_keep_rate: f64,
    /// Recipe positions this planned op covers.
    pub recipe_indices: Vec<usize>,
    #[serde(default)]
    pub probe_failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionPlan {
    /// Ordered op groups; concatenating them is the execution order.
    pub groups: Vec<Vec<PlannedOp>>,
    pub seed: u64,
    pub optimized: bool,
    /// Cost-model estimate of the plan, in seconds.
    pub estimated_total_time: f64,
    /// The same model over the unreordered arrangement.
    pub raw_estimated_time: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ExecutionPlan {
    pub fn ops_in_order(&self) -> impl Iterator<Item = &PlannedOp> {
        self.groups.iter().flatten()
    }

    pub fn op_count(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Every recipe position must appear exactly once across the plan.
    pub fn check_covers(&self, recipe_len: usize) -> Result<(), PlanError> {
        let mut seen = vec![false; recipe_len];
        for op in self.ops_in_order() {
            for index in &op.recipe_indices {
                if *index >= recipe_len || seen[*index] {
                    return Err(PlanError::Coverage(format!(
                        "recipe index {index} missing or duplicated"
                    )));
                }
                seen[*index] = true;
            }
        }
        if seen.iter().all(|s| *s) {
            Ok(())
        } else {
            Err(PlanError::Coverage("not all recipe ops planned".to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PlanOptions {
    /// Fuse shared-resource filters and reorder commutative runs.
    pub optimize: bool,
    /// Reorder by probed speed alone, ignoring selectivities.
    pub speed_only: bool,
    pub worker_cap: usize,
    pub dataset_size: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            optimize: true,
            speed_only: false,
            worker_cap: usize::MAX,
            dataset_size: 0,
        }
    }
}

/// Build the execution plan from probe results. With optimization off the
/// plan is the recipe order with batch sizes and worker counts attached.
pub fn plan(
    descriptors: &[&OpDescriptor],
    probe: &ProbeReport,
    resources: &Resources,
    options: PlanOptions,
) -> ExecutionPlan {
    assert_eq!(descriptors.len(), probe.per_op.len());
    let mut warnings = Vec::new();

    let groups = if options.optimize {
        detect_fusible_groups(descriptors)
    } else {
        (0..descriptors.len()).map(PlanGroup::Barrier).collect()
    };

    let mut planned_groups: Vec<Vec<PlannedOp>> = Vec::with_capacity(groups.len());
    let mut ordered_costs: Vec<NodeCost> = Vec::new();
    let mut raw_costs_by_first: Vec<(usize, NodeCost)> = Vec::new();

    for group in &groups {
        match group {
            PlanGroup::Barrier(index) => {
                let planned = planned_op(
                    descriptors[*index],
                    vec![*index],
                    &probe.per_op[*index],
                    probe,
                    resources,
                    options.worker_cap,
                    &mut warnings,
                );
                let cost = NodeCost {
                    speed: planned.estimated_speed,
                    keep_rate: planned.estimated_keep_rate,
                };
                ordered_costs.push(cost);
                raw_costs_by_first.push((*index, cost));
                planned_groups.push(vec![planned]);
            }
            PlanGroup::Reorderable(nodes) => {
                let mut node_plans: Vec<PlannedOp> = nodes
                    .iter()
                    .map(|node| plan_node(node, descriptors, probe, resources, options.worker_cap, &mut warnings))
                    .collect();
                let costs: Vec<NodeCost> = node_plans
                    .iter()
                    .map(|p| NodeCost {
                        speed: p.estimated_speed,
                        keep_rate: p.estimated_keep_rate,
                    })
                    .collect();
                for (node, cost) in node_plans.iter().zip(&costs) {
                    raw_costs_by_first.push((node.recipe_indices[0], *cost));
                }
                let order = if !options.optimize || node_plans.len() <= 1 {
                    (0..node_plans.len()).collect()
                } else if options.speed_only {
                    reorder_by_speed(&costs.iter().map(|c| c.speed).collect::<Vec<_>>())
                } else {
                    // Ops whose probe failed are unknown quantities; they
                    // run after everything that probed, in original order.
                    let (ok, failed): (Vec<usize>, Vec<usize>) = (0..node_plans.len())
                        .partition(|i| !node_plans[*i].probe_failed);
                    let ok_costs: Vec<NodeCost> = ok.iter().map(|i| costs[*i]).collect();
                    let mut order: Vec<usize> =
                        optimal_order(&ok_costs, options.dataset_size.max(1) as f64)
                            .into_iter()
                            .map(|i| ok[i])
                            .collect();
                    order.extend(failed);
                    order
                };
                let mut reordered = Vec::with_capacity(node_plans.len());
                for index in &order {
                    reordered.push(node_plans[*index].clone());
                    ordered_costs.push(costs[*index]);
                }
                node_plans = reordered;
                planned_groups.push(node_plans);
            }
        }
    }

    // Raw estimate: same nodes, original relative order.
    raw_costs_by_first.sort_by_key(|(first, _)| *first);
    let raw_order: Vec<usize> = (0..raw_costs_by_first.len()).collect();
    let raw_costs: Vec<NodeCost> = raw_costs_by_first.into_iter().map(|(_, c)| c).collect();
    let initial = options.dataset_size.max(1) as f64;
    let raw_estimated_time = estimated_time(&raw_order, &raw_costs, initial);
    let plan_order: Vec<usize> = (0..ordered_costs.len()).collect();
    let estimated_total_time = estimated_time(&plan_order, &ordered_costs, initial);

    ExecutionPlan {
        groups: planned_groups,
        seed: probe.seed,
        optimized: options.optimize,
        estimated_total_time,
        raw_estimated_time,
        warnings,
    }
}

fn plan_node(
    node: &GroupNode,
    descriptors: &[&OpDescriptor],
    probe: &ProbeReport,
    resources: &Resources,
    worker_cap: usize,
    warnings: &mut Vec<String>,
) -> PlannedOp {
    match node {
        GroupNode::Single(index) => planned_op(
            descriptors[*index],
            vec![*index],
            &probe.per_op[*index],
            probe,
            resources,
            worker_cap,
            warnings,
        ),
        GroupNode::Fused(indices) => {
            let children: Vec<OpDescriptor> = indices
                .iter()
                .map(|i| descriptors[*i].clone())
                .collect();
            let speeds: Vec<f64> = indices.iter().map(|i| probe.per_op[*i].speed).collect();
            let speed = estimate_fused_speed(&speeds).unwrap_or(FAILED_PROBE_SPEED);
            let keep_rate = indices
                .iter()
                .map(|i| probe.per_op[*i].keep_rate)
                .product();
            let probe_failed = indices.iter().any(|i| probe.per_op[*i].failed.is_some());

            let name = format!(
                "fused({})",
                children
                    .iter()
                    .map(|d| d.name.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            let mut descriptor = OpDescriptor::new(name, OpType::FusedOp);
            descriptor.supports_batch = true;
            descriptor.commutative_filter = true;
            descriptor.mem_required = children.iter().map(|d| d.mem_required).max().unwrap_or(0);
            descriptor.uses_accelerator = children.iter().any(|d| d.uses_accelerator);
            let declared = children.iter().find_map(|d| d.declared_batch_size);
            descriptor.declared_batch_size = declared;
            descriptor.children = children;

            let batch_size =
                select_batch_size(declared, probe.mean_sample_bytes, resources.mem_bytes);
            let mem_required = if descriptor.mem_required > 0 {
                descriptor.mem_required
            } else {
                0
            };
            let (workers, warning) = allocate_workers(&descriptor, mem_required, resources);
            if let Some(w) = warning {
                warnings.push(w);
            }
            PlannedOp {
                descriptor,
                batch_size,
                worker_count: workers.min(worker_cap).max(1),
                estimated_speed: speed,
                estimated_keep_rate: keep_rate,
                recipe_indices: indices.clone(),
                probe_failed,
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn planned_op(
    descriptor: &OpDescriptor,
    recipe_indices: Vec<usize>,
    op_probe: &OpProbe,
    probe: &ProbeReport,
    resources: &Resources,
    worker_cap: usize,
    warnings: &mut Vec<String>,
) -> PlannedOp {
    let batch_size = select_batch_size(
        descriptor.declared_batch_size,
        probe.mean_sample_bytes,
        resources.mem_bytes,
    );
    let (workers, warning) = allocate_workers(descriptor, descriptor.mem_required, resources);
    if let Some(w) = warning {
        warnings.push(w);
    }
    PlannedOp {
        descriptor: descriptor.clone(),
        batch_size,
        worker_count: workers.min(worker_cap).max(1),
        estimated_speed: op_probe.speed,
        estimated_keep_rate: op_probe.keep_rate,
        recipe_indices,
        probe_failed: op_probe.failed.is_some(),
    }
}
