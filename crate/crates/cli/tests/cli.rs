//! Binary-level tests: exit codes, machine-grepable errors, and the
//! subcommand surface (process / analyze / probe / plan / split / dedup /
//! list-ops / validate).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dj() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dj"));
    cmd.env("DJ_SEED", "42");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

fn write_corpus(path: &Path, n: usize) {
    let mut lines = Vec::new();
    for i in 0..n {
        let body = match i % 5 {
            0 => format!("short {i}"),
            1 => format!("a much longer document body with several words {i}"),
            2 => "duplicate duplicate duplicate body shared by many".to_string(),
            3 => format!("zzzzzzzzzzzz repeated {i}"),
            _ => format!("document number {i} with ordinary content"),
        };
        lines.push(format!(r#"{{"text":"{body}","meta":{{"src":"s{}"}}}}"#, i % 3));
    }
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn write_recipe(path: &Path, dataset: &Path, export: &Path) {
    let recipe = format!(
        r#"project_name: 'cli-test'
dataset_path: '{}'
export_path: '{}'
np: 2
process:
  - whitespace_normalization_mapper:
  - text_length_filter:
      min_len: 10
      max_len: 500
  - character_repetition_filter:
      ngram_len: 3
      max_ratio: 0.95
  - document_deduplicator:
"#,
        dataset.display(),
        export.display()
    );
    std::fs::write(path, recipe).unwrap();
}

fn sorted_lines(path: &Path) -> Vec<String> {
    let mut lines: Vec<String> = std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    lines.sort();
    lines
}

#[test]
fn process_runs_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    let export = dir.path().join("out.jsonl");
    let recipe = dir.path().join("recipe.yaml");
    write_corpus(&dataset, 200);
    write_recipe(&recipe, &dataset, &export);

    let output = run(dj().arg("process").arg("--config").arg(&recipe));
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(export.exists());
    assert!(dir.path().join("out.jsonl.monitor.jsonl").exists());
    assert!(dir.path().join("out.jsonl.report/counters.json").exists());
    assert!(dir.path().join("out.jsonl.report/report.json").exists());
    assert!(dir.path().join("out.jsonl.droplog.jsonl").exists());
    assert!(stdout(&output).contains("processed 200 samples"));
}

#[test]
fn unknown_op_exits_two_with_name() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    write_corpus(&dataset, 5);
    let recipe = dir.path().join("recipe.yaml");
    std::fs::write(
        &recipe,
        format!(
            "dataset_path: '{}'\nexport_path: '{}'\nprocess:\n  - mystery_op:\n",
            dataset.display(),
            dir.path().join("o.jsonl").display()
        ),
    )
    .unwrap();
    let output = run(dj().arg("process").arg("--config").arg(&recipe));
    assert_eq!(output.status.code(), Some(2));
    let err = stderr(&output);
    assert!(err.contains("error[VALIDATION]"), "{err}");
    assert!(err.contains("mystery_op"), "{err}");
    assert!(!err.contains("panicked"), "stack trace leaked: {err}");
}

#[test]
fn no_optimize_matches_optimized_output() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    write_corpus(&dataset, 300);

    let export_a = dir.path().join("opt.jsonl");
    let recipe_a = dir.path().join("recipe_a.yaml");
    write_recipe(&recipe_a, &dataset, &export_a);
    let output = run(dj().arg("process").arg("--config").arg(&recipe_a));
    assert!(output.status.success(), "{}", stderr(&output));

    let export_b = dir.path().join("raw.jsonl");
    let recipe_b = dir.path().join("recipe_b.yaml");
    write_recipe(&recipe_b, &dataset, &export_b);
    let output = run(dj()
        .arg("process")
        .arg("--config")
        .arg(&recipe_b)
        .arg("--no-optimize"));
    assert!(output.status.success(), "{}", stderr(&output));

    assert_eq!(sorted_lines(&export_a), sorted_lines(&export_b));
}

#[test]
fn resume_after_completion_exports_only() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    let export = dir.path().join("out.jsonl");
    let recipe = dir.path().join("recipe.yaml");
    write_corpus(&dataset, 100);
    write_recipe(&recipe, &dataset, &export);

    let output = run(dj().arg("process").arg("--config").arg(&recipe));
    assert!(output.status.success(), "{}", stderr(&output));
    let first = std::fs::read(&export).unwrap();
    std::fs::remove_file(&export).unwrap();

    // Resuming a finished run re-exports the final checkpoint.
    let ckpt = dir.path().join("out.jsonl.ckpt");
    let output = run(dj()
        .arg("process")
        .arg("--config")
        .arg(&recipe)
        .arg("--resume")
        .arg(&ckpt));
    assert!(output.status.success(), "{}", stderr(&output));
    assert_eq!(std::fs::read(&export).unwrap(), first);
}

#[test]
fn resume_with_edited_recipe_is_a_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    let export = dir.path().join("out.jsonl");
    let recipe = dir.path().join("recipe.yaml");
    write_corpus(&dataset, 50);
    write_recipe(&recipe, &dataset, &export);

    let output = run(dj().arg("process").arg("--config").arg(&recipe));
    assert!(output.status.success(), "{}", stderr(&output));

    // Edit the recipe: its digest changes, the checkpoint no longer
    // matches.
    let edited = std::fs::read_to_string(&recipe)
        .unwrap()
        .replace("min_len: 10", "min_len: 11");
    std::fs::write(&recipe, edited).unwrap();
    let ckpt = dir.path().join("out.jsonl.ckpt");
    let output = run(dj()
        .arg("process")
        .arg("--config")
        .arg(&recipe)
        .arg("--resume")
        .arg(&ckpt));
    assert_eq!(output.status.code(), Some(4));
    assert!(stderr(&output).contains("error[RESUME_MISMATCH]"));
}

#[test]
fn set_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    let export = dir.path().join("out.jsonl");
    let recipe = dir.path().join("recipe.yaml");
    write_corpus(&dataset, 50);
    write_recipe(&recipe, &dataset, &export);

    // Raise min_len so far that everything drops.
    let output = run(dj()
        .arg("process")
        .arg("--config")
        .arg(&recipe)
        .arg("--set")
        .arg("process.1.text_length_filter.min_len=400"));
    assert!(output.status.success(), "{}", stderr(&output));
    assert_eq!(std::fs::read_to_string(&export).unwrap(), "");
}

#[test]
fn list_ops_names_the_catalog() {
    let output = run(dj().arg("list-ops"));
    assert!(output.status.success());
    let text = stdout(&output);
    for op in [
        "text_length_filter",
        "image_shape_filter",
        "document_minhash_deduplicator",
        "naive_grouper",
        "count_aggregator",
        "script_op",
    ] {
        assert!(text.contains(op), "list-ops missing {op}");
    }
}

#[test]
fn split_produces_bounded_concatenable_parts() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("big.jsonl");
    let mut lines = Vec::new();
    let mut total = 0usize;
    let mut i = 0usize;
    loop {
        let line = format!(r#"{{"text":"line {i} {}"}}"#, "p".repeat(200));
        if total + line.len() + 1 > (1 << 20) {
            break;
        }
        total += line.len() + 1;
        lines.push(line);
        i += 1;
    }
    std::fs::write(&dataset, lines.join("\n") + "\n").unwrap();

    let out = dir.path().join("parts");
    let output = run(dj()
        .arg("split")
        .arg("--dataset")
        .arg(&dataset)
        .arg("--target-bytes")
        .arg((256 * 1024).to_string())
        .arg("--out")
        .arg(&out));
    assert!(output.status.success(), "{}", stderr(&output));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("split_manifest.json")).unwrap())
            .unwrap();
    let parts = manifest["parts"].as_array().unwrap();
    assert!((4..=5).contains(&parts.len()), "{} parts", parts.len());
    let mut joined = Vec::new();
    for part in parts {
        assert!(part["byte_size"].as_u64().unwrap() <= 256 * 1024);
        joined.extend(std::fs::read(out.join(part["path"].as_str().unwrap())).unwrap());
    }
    assert_eq!(joined, std::fs::read(&dataset).unwrap());
}

#[test]
fn dedup_report_matches_library_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    let mut lines = Vec::new();
    for i in 0..60 {
        lines.push(format!(
            r#"{{"text":"unique document number {i} about subject {}"}}"#,
            i * 13
        ));
    }
    for _ in 0..5 {
        lines.push(
            r#"{"text":"planted duplicate body with enough words to shingle cleanly"}"#
                .to_string(),
        );
    }
    std::fs::write(&dataset, lines.join("\n") + "\n").unwrap();

    let output_path = dir.path().join("deduped.jsonl");
    let output = run(dj()
        .arg("dedup")
        .arg("--dataset")
        .arg(&dataset)
        .arg("--output")
        .arg(&output_path)
        .arg("--shingle-size")
        .arg("2")
        .arg("--num-permutations")
        .arg("128"));
    assert!(output.status.success(), "{}", stderr(&output));

    // Library oracle with the same parameters and seed.
    let samples: Vec<dj_core::sample::Sample> = std::fs::read_to_string(&dataset)
        .unwrap()
        .lines()
        .map(|l| dj_core::sample::Sample::from_json_line(l).unwrap())
        .collect();
    let config = dj_core::dedup::DedupConfig::new(0.7, 128, 2, 42).unwrap();
    let (kept, report) =
        dj_core::dedup::dedup_pass(&samples, &config, dj_core::dedup::KeepPolicy::First);
    assert_eq!(report.removed, 4);

    let report_path = PathBuf::from(format!("{}.dedup_report.json", output_path.display()));
    let cli_report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_path).unwrap()).unwrap();
    assert_eq!(cli_report["removed"].as_u64().unwrap() as usize, report.removed);
    assert_eq!(
        sorted_lines(&output_path),
        {
            let mut lines: Vec<String> = kept.iter().map(|s| s.to_json_line()).collect();
            lines.sort();
            lines
        }
    );
}

#[test]
fn analyze_writes_a_report_directory() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    write_corpus(&dataset, 100);
    let out = dir.path().join("analysis");
    let output = run(dj()
        .arg("analyze")
        .arg("--dataset")
        .arg(&dataset)
        .arg("--out")
        .arg(&out));
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(stdout(&output).contains("1 snapshot(s)"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["snapshots"].as_array().unwrap().len(), 1);
    let histograms = &report["snapshots"][0]["histograms"];
    assert!(histograms.get("text_len").is_some());

    // Missing dataset: exit 2.
    let output = run(dj()
        .arg("analyze")
        .arg("--dataset")
        .arg(dir.path().join("absent.jsonl")));
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn analyze_with_config_snapshots_each_op() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    let recipe = dir.path().join("recipe.yaml");
    write_corpus(&dataset, 100);
    write_recipe(&recipe, &dataset, &dir.path().join("unused.jsonl"));
    let out = dir.path().join("analysis");
    let output = run(dj()
        .arg("analyze")
        .arg("--dataset")
        .arg(&dataset)
        .arg("--config")
        .arg(&recipe)
        .arg("--out")
        .arg(&out));
    assert!(output.status.success(), "{}", stderr(&output));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    // One snapshot after load plus one per op.
    assert_eq!(report["snapshots"].as_array().unwrap().len(), 5);
    assert!(!report["comparisons"].as_array().unwrap().is_empty());
}

#[test]
fn probe_and_plan_emit_json() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("in.jsonl");
    let recipe = dir.path().join("recipe.yaml");
    write_corpus(&dataset, 120);
    write_recipe(&recipe, &dataset, &dir.path().join("unused.jsonl"));

    let output = run(dj()
        .arg("probe")
        .arg("--config")
        .arg(&recipe)
        .arg("--dataset")
        .arg(&dataset));
    assert!(output.status.success(), "{}", stderr(&output));
    let probe: serde_json::Value = serde_json::from_str(&stdout(&output)).unwrap();
    assert_eq!(probe["probe_sample_size"].as_u64(), Some(120));
    assert_eq!(probe["per_op"].as_array().unwrap().len(), 4);

    let plan_path = dir.path().join("plan.json");
    let output = run(dj()
        .arg("plan")
        .arg("--config")
        .arg(&recipe)
        .arg("--dataset")
        .arg(&dataset)
        .arg("--out")
        .arg(&plan_path));
    assert!(output.status.success(), "{}", stderr(&output));
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert!(plan["estimated_total_time"].as_f64().unwrap() <= plan["raw_estimated_time"].as_f64().unwrap() + 1e-9);

    // The emitted plan feeds back into process.
    let export = dir.path().join("via_plan.jsonl");
    let recipe2 = dir.path().join("recipe2.yaml");
    write_recipe(&recipe2, &dataset, &export);
    let output = run(dj()
        .arg("process")
        .arg("--config")
        .arg(&recipe2)
        .arg("--plan")
        .arg(&plan_path));
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(export.exists());
}

#[test]
fn validate_reports_goal_violations() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.jsonl");
    std::fs::write(
        &good,
        concat!(
            r#"{"query":"q1","response":"r1"}"#,
            "\n",
            r#"{"query":"q2","response":"r2"}"#,
            "\n"
        ),
    )
    .unwrap();
    let output = run(dj()
        .arg("validate")
        .arg("--dataset")
        .arg(&good)
        .arg("--goal")
        .arg("post_tuning"));
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(stdout(&output).contains("ok=true"));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        concat!(
            r#"{"query":"q1","response":"r1"}"#,
            "\n",
            r#"{"query":"q2"}"#,
            "\n"
        ),
    )
    .unwrap();
    let output = run(dj()
        .arg("validate")
        .arg("--dataset")
        .arg(&bad)
        .arg("--goal")
        .arg("post_tuning"));
    assert_eq!(output.status.code(), Some(2));
    assert!(stdout(&output).contains("sample 1"));
    assert!(stdout(&output).contains("empty_dialog"));
}
