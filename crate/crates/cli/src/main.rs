//! `dj` — command-line tools for the data pipeline engine: recipe
//! processing with probe-based optimization, dataset analysis, subset
//! splitting, deduplication and schema validation.
//!
//! Expected failures print one machine-grepable line
//! (`error[<CODE>]: message`) and exit with the documented code:
//! 0 success, 2 validation failure, 3 aborted on fault, 4 resume
//! mismatch.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use dj_core::analyzer;
use dj_core::dataset::{self, Dataset, LoadMode};
use dj_core::dedup::{self, DedupConfig, KeepPolicy};
use dj_core::executor::{
    self, ExecError, ExecOptions, FaultPolicy, MonitorConfig, PipelineInput, RunResult,
    EXIT_ABORTED, EXIT_RESUME_MISMATCH, EXIT_VALIDATION,
};
use dj_core::ops::Registry;
use dj_core::planner::{self, ExecutionPlan, PlanOptions, Resources};
use dj_core::recipe::Recipe;
use dj_core::schema::{validate_samples, Goal, SchemaTokens};

#[derive(Parser)]
#[command(name = "dj", version, about = "Data processing pipeline engine for foundation-model corpora")]
struct Cli {
    /// Fix all randomness (overrides the DJ_SEED environment variable).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a recipe end to end: validate, probe, plan, execute, export.
    Process(ProcessArgs),
    /// Compute per-op stats snapshots and a distribution-shift report.
    Analyze(AnalyzeArgs),
    /// Probe operator speeds and selectivities on a small random sample.
    Probe(ProbeArgs),
    /// Emit the optimized execution plan as JSON.
    Plan(PlanArgs),
    /// Pre-split a JSONL dataset into size-bounded parts.
    Split(SplitArgs),
    /// Deduplicate a dataset (MinHash-LSH fuzzy matching).
    Dedup(DedupArgs),
    /// List every registered operator.
    ListOps,
    /// Validate a dataset against a processing goal.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct ProcessArgs {
    #[arg(long)]
    config: PathBuf,
    /// Skip fusion and reordering (batching and workers still apply).
    #[arg(long)]
    no_optimize: bool,
    /// Reorder by probed speed alone, ignoring selectivities.
    #[arg(long)]
    speed_only: bool,
    /// Resume from the checkpoints under this directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Use a previously emitted plan instead of probing.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Checkpoint directory (default: `<export_path>.ckpt`).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Load the dataset in streaming mode.
    #[arg(long)]
    streaming: bool,
    /// Skip per-op insight snapshots and the report directory.
    #[arg(long)]
    no_insights: bool,
    /// Dotted-path overrides, e.g. `--set np=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Analyze along a recipe (snapshot after each op) instead of the
    /// default stats-only pass over all catalog filters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report directory (default: `<dataset>.analysis`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shift-score threshold for flagging.
    #[arg(long, default_value_t = analyzer::DEFAULT_SHIFT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    no_optimize: bool,
    #[arg(long)]
    speed_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Maximum part size in bytes.
    #[arg(long, default_value_t = dataset::DEFAULT_SPLIT_TARGET_BYTES)]
    target_bytes: u64,
    /// Minimum number of parts (so every simulated node receives work).
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DedupArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long, default_value_t = 256)]
    num_permutations: usize,
    #[arg(long, default_value_t = 5)]
    shingle_size: usize,
    #[arg(long, value_parser = parse_keep, default_value = "first")]
    keep: KeepPolicy,
    /// Skip the exact Jaccard verification of candidate pairs.
    #[arg(long)]
    fast: bool,
    /// Shard the band buckets (simulated distributed dedup).
    #[arg(long, default_value_t = 1)]
    shards: usize,
    /// Report path (default: `<output>.dedup_report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_goal)]
    goal: Goal,
}

fn parse_keep(raw: &str) -> Result<KeepPolicy, String> {
    match raw {
        "first" => Ok(KeepPolicy::First),
        "longest" => Ok(KeepPolicy::Longest),
        other => Err(format!("unknown keep policy: {other} (first|longest)")),
    }
}

fn parse_goal(raw: &str) -> Result<Goal, String> {
    match raw {
        "pretrain" => Ok(Goal::Pretrain),
        "post_tuning" => Ok(Goal::PostTuning),
        "image_text" => Ok(Goal::ImageText),
        other => Err(format!(
            "unknown goal: {other} (pretrain|post_tuning|image_text)"
        )),
    }
}

struct CliError {
    code: &'static str,
    exit: i32,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: "VALIDATION",
            exit: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<ExecError> for CliError {
    fn from(err: ExecError) -> Self {
        let code = match err.exit_code() {
            EXIT_ABORTED => "ABORTED",
            EXIT_RESUME_MISMATCH => "RESUME_MISMATCH",
            _ => "VALIDATION",
        };
        CliError {
            code,
            exit: err.exit_code(),
            message: err.to_string(),
        }
    }
}

impl From<dj_core::dataset::DatasetError> for CliError {
    fn from(err: dj_core::dataset::DatasetError) -> Self {
        CliError::from(ExecError::Dataset(err))
    }
}

impl From<dj_core::recipe::RecipeError> for CliError {
    fn from(err: dj_core::recipe::RecipeError) -> Self {
        CliError::validation(err.to_string())
    }
}

fn main() {
    // Dying quietly on a closed pipe (e.g. `dj list-ops | head`) beats a
    // broken-pipe panic.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Some(seed) = cli.seed {
        std::env::set_var(dj_core::SEED_ENV_VAR, seed.to_string());
    }
    let outcome = match cli.command {
        Command::Process(args) => cmd_process(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Split(args) => cmd_split(args),
        Command::Dedup(args) => cmd_dedup(args),
        Command::ListOps => cmd_list_ops(),
        Command::Validate(args) => cmd_validate(args),
    };
    if let Err(err) = outcome {
        eprintln!("error[{}]: {}", err.code, err.message);
        std::process::exit(err.exit);
    }
}

fn load_recipe(path: &Path, sets: &[String]) -> Result<Recipe, CliError> {
    let (mut recipe, warnings) = Recipe::from_file(path)?;
    for warning in warnings {
        eprintln!("warning: {warning}");
    }
    for set in sets {
        let (key, value) = set.split_once('=').ok_or_else(|| {
            CliError::validation(format!("--set expects KEY=VALUE, got {set:?}"))
        })?;
        recipe.apply_override(key, value)?;
    }
    Ok(recipe)
}

fn load_dataset(path: &Path, mode: LoadMode) -> Result<Dataset, CliError> {
    Ok(Dataset::load(path, mode)?)
}

/// Probe the recipe's ops over the dataset with the global seed.
fn probe_recipe(
    recipe: &Recipe,
    registry: &Registry,
    dataset: &Dataset,
) -> Result<(planner::ProbeReport, usize), CliError> {
    let ops = recipe.resolve(registry)?;
    let (samples, _) = dataset.collect_samples()?;
    let report = planner::probe_small_batch(&samples, &ops, dj_core::global_seed());
    Ok((report, samples.len()))
}

fn build_plan(
    recipe: &Recipe,
    registry: &Registry,
    probe: &planner::ProbeReport,
    dataset_size: usize,
    optimize: bool,
    speed_only: bool,
) -> Result<ExecutionPlan, CliError> {
    let ops = recipe.resolve(registry)?;
    let descriptors: Vec<&dj_core::ops::OpDescriptor> =
        ops.iter().map(|op| op.descriptor()).collect();
    let plan = planner::plan(
        &descriptors,
        probe,
        &Resources::detect(),
        PlanOptions {
            optimize,
            speed_only,
            worker_cap: recipe.np,
            dataset_size,
        },
    );
    for warning in &plan.warnings {
        eprintln!("warning: {warning}");
    }
    plan.check_covers(recipe.process.len())
        .map_err(|e| CliError::validation(e.to_string()))?;
    Ok(plan)
}

fn cmd_process(args: ProcessArgs) -> Result<(), CliError> {
    let registry = Registry::with_builtin();
    let recipe = load_recipe(&args.config, &args.sets)?;
    recipe.resolve(&registry)?; // validate ops and params before any data

    let export_path = PathBuf::from(&recipe.export_path);
    let ckpt_root = args
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.ckpt", recipe.export_path)));
    let digest = recipe.digest();
    let policy = FaultPolicy {
        mode: recipe.fault_mode,
        max_retries: recipe.max_retries,
        backoff_base: Duration::from_millis(recipe.backoff_ms),
    };
    let plan_path = ckpt_root.join(&digest).join("plan.json");

    let plan: ExecutionPlan;
    let input_samples: PipelineInput<'_>;
    let dataset;
    if let Some(resume_root) = &args.resume {
        let (samples, counters, next) = executor::load_resume_state(resume_root, &digest)?;
        let stored_plan = resume_root.join(&digest).join("plan.json");
        let text = std::fs::read_to_string(&stored_plan).map_err(|e| {
            CliError::validation(format!(
                "resume needs the stored plan {}: {e}",
                stored_plan.display()
            ))
        })?;
        plan = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("stored plan: {e}")))?;
        eprintln!(
            "resuming {digest} at op index {next} ({} samples restored)",
            samples.len()
        );
        input_samples = PipelineInput::Resume {
            samples,
            counters,
            next_op_index: next,
        };
    } else {
        let mode = if args.streaming {
            LoadMode::Streaming
        } else {
            LoadMode::Materialized
        };
        dataset = load_dataset(Path::new(&recipe.dataset_path), mode)?;
        plan = if let Some(plan_file) = &args.plan {
            let text = std::fs::read_to_string(plan_file)
                .map_err(|e| CliError::validation(format!("{}: {e}", plan_file.display())))?;
            let parsed: ExecutionPlan = serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("plan file: {e}")))?;
            parsed
                .check_covers(recipe.process.len())
                .map_err(|e| CliError::validation(e.to_string()))?;
            parsed
        } else if args.no_optimize {
            let ops = recipe.resolve(&registry)?;
            let descriptors: Vec<&dj_core::ops::OpDescriptor> =
                ops.iter().map(|op| op.descriptor()).collect();
            let probe = planner::assumed_probe(&descriptors);
            build_plan(&recipe, &registry, &probe, 0, false, false)?
        } else {
            let (probe, size) = probe_recipe(&recipe, &registry, &dataset)?;
            build_plan(&recipe, &registry, &probe, size, true, args.speed_only)?
        };
        input_samples = PipelineInput::Dataset(&dataset);
    }

    // Persist the plan next to the checkpoints so resume replays the
    // exact op order.
    if let Some(parent) = plan_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::validation(format!("{}: {e}", plan_path.display())))?;
    }
    std::fs::write(
        &plan_path,
        serde_json::to_string_pretty(&plan).expect("plan serializes"),
    )
    .map_err(|e| CliError::validation(format!("{}: {e}", plan_path.display())))?;

    let options = ExecOptions {
        checkpoint_root: Some(ckpt_root),
        recipe_digest: digest,
        interrupt_after: None,
        collect_snapshots: !args.no_insights,
        monitor: Some(MonitorConfig {
            path: PathBuf::from(format!("{}.monitor.jsonl", recipe.export_path)),
            interval: Duration::from_millis(500),
        }),
    };
    let result = executor::run_pipeline(&plan, &registry, input_samples, &policy, &options)?;
    finish_process(&recipe, &export_path, &result, args.no_insights)
}

fn finish_process(
    recipe: &Recipe,
    export_path: &Path,
    result: &RunResult,
    no_insights: bool,
) -> Result<(), CliError> {
    let report = dataset::export(&result.samples, export_path, recipe.drop_placeholders)?;

    let side = |suffix: &str| PathBuf::from(format!("{}{suffix}", export_path.display()));
    write_jsonl_log(&side(".droplog.jsonl"), result.drop_log.iter())?;
    write_jsonl_log(&side(".faults.jsonl"), result.fault_log.iter())?;

    let report_dir = side(".report");
    std::fs::create_dir_all(&report_dir)
        .map_err(|e| CliError::validation(format!("{}: {e}", report_dir.display())))?;
    std::fs::write(
        report_dir.join("counters.json"),
        serde_json::to_string_pretty(&result.counters).expect("counters serialize"),
    )
    .map_err(|e| CliError::validation(e.to_string()))?;
    if !no_insights {
        let rows =
            analyzer::compare_consecutive(&result.snapshots, analyzer::DEFAULT_SHIFT_THRESHOLD);
        analyzer::render_report(&result.snapshots, &rows, &report_dir)
            .map_err(|e| CliError::validation(e.to_string()))?;
    }

    println!(
        "processed {} samples -> kept {} ({} bytes exported to {}); dropped {}, dedup removed {}, skipped {} in {} batches, placeholders {}",
        result.counters.processed,
        report.sample_count,
        report.byte_count,
        export_path.display(),
        result.counters.dropped_total(),
        result.counters.dedup_removed,
        result.counters.skipped_samples,
        result.counters.skipped_batches,
        result.counters.placeholder_samples,
    );
    Ok(())
}

fn write_jsonl_log<T: serde::Serialize>(
    path: &Path,
    rows: impl Iterator<Item = T>,
) -> Result<(), CliError> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    for row in rows {
        let line = serde_json::to_string(&row).expect("log row serializes");
        writeln!(file, "{line}").map_err(|e| CliError::validation(e.to_string()))?;
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let registry = Registry::with_builtin();
    let dataset = load_dataset(&args.dataset, LoadMode::Materialized)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.analysis", args.dataset.display())));

    let snapshots = if let Some(config) = &args.config {
        let recipe = load_recipe(config, &[])?;
        let (probe, size) = probe_recipe(&recipe, &registry, &dataset)?;
        let plan = build_plan(&recipe, &registry, &probe, size, false, false)?;
        let result = executor::run_pipeline(
            &plan,
            &registry,
            PipelineInput::Dataset(&dataset),
            &FaultPolicy::default(),
            &ExecOptions {
                collect_snapshots: true,
                ..ExecOptions::default()
            },
        )?;
        result.snapshots
    } else {
        // Stats-only pass: every default-constructible catalog filter
        // computes its stats; defaults are unbounded so nothing drops.
        let mut names: Vec<String> = Vec::new();
        for entry in registry.entries() {
            if entry.op_type == dj_core::ops::OpType::Filter
                && registry.build(&entry.name, &Default::default()).is_ok()
            {
                names.push(entry.name.clone());
            }
        }
        let (mut samples, _) = dataset.collect_samples()?;
        for name in &names {
            let op = registry
                .build(name, &Default::default())
                .map_err(|e| CliError::validation(e.to_string()))?;
            match dj_core::ops::run(&op, std::mem::take(&mut samples), 1000) {
                Ok(out) => samples = out.samples,
                Err(err) => {
                    eprintln!("warning: {name} failed during analysis: {err}");
                }
            }
        }
        vec![analyzer::collect_snapshot(&samples, 0, "stats_only")]
    };

    let rows = analyzer::compare_consecutive(&snapshots, args.threshold);
    let files = analyzer::render_report(&snapshots, &rows, &out)
        .map_err(|e| CliError::validation(e.to_string()))?;
    println!(
        "analysis of {} complete: {} snapshot(s), {} comparison row(s), {} file(s) under {}",
        args.dataset.display(),
        snapshots.len(),
        rows.len(),
        files.len(),
        out.display()
    );
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<(), CliError> {
    let registry = Registry::with_builtin();
    let recipe = load_recipe(&args.config, &[])?;
    let dataset = load_dataset(&args.dataset, LoadMode::Materialized)?;
    let (report, _) = probe_recipe(&recipe, &registry, &dataset)?;
    emit_json(&report, args.out.as_deref())
}

fn cmd_plan(args: PlanArgs) -> Result<(), CliError> {
    let registry = Registry::with_builtin();
    let recipe = load_recipe(&args.config, &[])?;
    let dataset = load_dataset(&args.dataset, LoadMode::Materialized)?;
    let (probe, size) = probe_recipe(&recipe, &registry, &dataset)?;
    let plan = build_plan(
        &recipe,
        &registry,
        &probe,
        size,
        !args.no_optimize,
        args.speed_only,
    )?;
    emit_json(&plan, args.out.as_deref())
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_split(args: SplitArgs) -> Result<(), CliError> {
    if args.target_bytes == 0 {
        return Err(CliError::validation("--target-bytes must be positive"));
    }
    let manifest =
        dataset::split_subsets(&args.dataset, args.target_bytes, args.parts, &args.out)?;
    for warning in &manifest.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "split {} into {} part(s) under {} (manifest: {})",
        args.dataset.display(),
        manifest.parts.len(),
        args.out.display(),
        args.out.join(dataset::SPLIT_MANIFEST_FILE).display()
    );
    Ok(())
}

fn cmd_dedup(args: DedupArgs) -> Result<(), CliError> {
    let mut config = DedupConfig::new(
        args.threshold,
        args.num_permutations,
        args.shingle_size,
        dj_core::global_seed(),
    )
    .map_err(CliError::validation)?;
    config.verify = !args.fast;

    let (kept, report) = if args.shards > 1 && args.dataset.is_dir() {
        // A directory of parts deduplicates part-wise, shard-merged.
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.dataset)
            .map_err(|e| CliError::validation(e.to_string()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        entries.sort();
        let mut parts = Vec::new();
        for part in entries {
            let (samples, _) = Dataset::load(&part, LoadMode::Materialized)?.collect_samples()?;
            parts.push(samples);
        }
        dedup::sharded_dedup(&parts, &config, args.shards, args.keep)
    } else {
        let source = load_dataset(&args.dataset, LoadMode::Materialized)?;
        let (samples, _) = source.collect_samples()?;
        if args.shards > 1 {
            let shard_size = samples.len().div_ceil(args.shards).max(1);
            let parts: Vec<Vec<_>> = samples.chunks(shard_size).map(|c| c.to_vec()).collect();
            dedup::sharded_dedup(&parts, &config, args.shards, args.keep)
        } else {
            dedup::dedup_pass(&samples, &config, args.keep)
        }
    };

    let export = dataset::export(&kept, &args.output, false)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.dedup_report.json", args.output.display())));
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| CliError::validation(format!("{}: {e}", report_path.display())))?;
    println!(
        "deduplicated {}: kept {}, removed {} in {} cluster(s); report at {}",
        args.dataset.display(),
        export.sample_count,
        report.removed,
        report.clusters.len(),
        report_path.display()
    );
    Ok(())
}

fn cmd_list_ops() -> Result<(), CliError> {
    let registry = Registry::with_builtin();
    for entry in registry.entries() {
        let op_type = serde_json::to_value(entry.op_type)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let params: Vec<String> = entry
            .params
            .iter()
            .map(|p| match &p.default {
                Some(default) => format!("{}:{} (default {default})", p.name, p.kind),
                None => format!("{}:{}", p.name, p.kind),
            })
            .collect();
        println!(
            "{:<36} {:<13} batch={:<5} {}",
            entry.name,
            op_type,
            entry.supports_batch,
            if params.is_empty() {
                "-".to_string()
            } else {
                params.join(", ")
            }
        );
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset, LoadMode::Materialized)?;
    let (samples, bad) = dataset.collect_samples()?;
    let report = validate_samples(&samples, args.goal, &SchemaTokens::default());
    for error in &report.errors {
        println!("sample {}: [{}] {}", error.ordinal, error.rule, error.message);
    }
    println!(
        "validated {} sample(s) against {:?}: ok={} ({} error(s), {} malformed line(s), rules: {})",
        samples.len(),
        args.goal,
        report.ok,
        report.errors.len(),
        bad.len(),
        report.checked_rules.join(",")
    );
    if report.ok && bad.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            code: "VALIDATION",
            exit: EXIT_VALIDATION,
            message: format!(
                "dataset failed {:?} validation with {} error(s)",
                args.goal,
                report.errors.len() + bad.len()
            ),
        })
    }
}
