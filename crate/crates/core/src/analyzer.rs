//! Insight mining: per-operator stats snapshots, histograms, and
//! lineage comparisons that flag significant distribution shifts between
//! consecutive operators.
//!
//! The shift score is the total variation distance between the two
//! normalized histograms computed on shared bin edges (the union of the
//! observed ranges), so identical distributions score 0 and disjoint
//! supports score 1.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sample::Sample;

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_SHIFT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges; bin i covers [edges[i], edges[i+1]) and the last
    /// bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|c| *c as f64 / total as f64)
            .collect()
    }
}

/// Fixed-width histogram of `values` over `[lo, hi]`.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    let bins = bins.max(1);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = span / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for value in values {
        if *value < lo || *value > hi {
            continue;
        }
        let mut bin = ((*value - lo) / width) as usize;
        if bin >= bins {
            bin = bins - 1;
        }
        counts[bin] += 1;
    }
    Histogram { edges, counts }
}

/// Total variation distance between two histograms with shared edges:
/// symmetric, in [0, 1], zero iff the normalized histograms coincide.
pub fn total_variation_distance(a: &Histogram, b: &Histogram) -> f64 {
    debug_assert_eq!(a.edges, b.edges);
    let pa = a.normalized();
    let pb = b.normalized();
    0.5 * pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
}

/// Per-stat observations held by a snapshot. Raw values are retained so a
/// comparison can re-bin both sides on shared edges.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatObservations {
    pub values: Vec<f64>,
    /// Samples lacking this stat, reported separately from the histogram.
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub op_index: usize,
    pub op_name: String,
    pub sample_count: usize,
    pub numeric: BTreeMap<String, StatObservations>,
    /// Categorical counts for string-valued meta tags.
    pub categorical: BTreeMap<String, BTreeMap<String, u64>>,
}

impl StatsSnapshot {
    /// Default-binned histogram over the stat's observed range.
    pub fn histogram(&self, stat: &str, bins: usize) -> Option<Histogram> {
        let observations = self.numeric.get(stat)?;
        if observations.values.is_empty() {
            return Some(Histogram {
                edges: vec![0.0, 1.0],
                counts: vec![0],
            });
        }
        let (lo, hi) = value_range(&observations.values);
        Some(histogram(&observations.values, bins, lo, hi))
    }

    /// Associative, order-independent merge of partial snapshots folded
    /// by different workers.
    pub fn merge(&mut self, other: &StatsSnapshot) {
        self.sample_count += other.sample_count;
        for (key, observations) in &other.numeric {
            let entry = self.numeric.entry(key.clone()).or_default();
            entry.values.extend(observations.values.iter().copied());
            entry.missing += observations.missing;
        }
        for (key, counts) in &other.categorical {
            let entry = self.categorical.entry(key.clone()).or_default();
            for (value, count) in counts {
                *entry.entry(value.clone()).or_insert(0) += count;
            }
        }
    }
}

fn value_range(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// Collect a read-only snapshot of the dataset after op `op_index`:
/// numeric stats (scalars and scalar lists, flattened) and categorical
/// counts of string meta tags.
pub fn collect_snapshot(samples: &[Sample], op_index: usize, op_name: &str) -> StatsSnapshot {
    let mut stat_keys: BTreeSet<&str> = BTreeSet::new();
    for sample in samples {
        for key in sample.stats.keys() {
            stat_keys.insert(key);
        }
    }
    let mut numeric: BTreeMap<String, StatObservations> = stat_keys
        .iter()
        .map(|k| (k.to_string(), StatObservations::default()))
        .collect();
    let mut categorical: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();

    for sample in samples {
        for key in &stat_keys {
            let entry = numeric.get_mut(*key).expect("key preregistered");
            match sample.stats.get(*key) {
                None => entry.missing += 1,
                Some(Value::Array(items)) => {
                    entry
                        .values
                        .extend(items.iter().filter_map(Value::as_f64));
                }
                Some(value) => match value.as_f64() {
                    Some(v) => entry.values.push(v),
                    None => entry.missing += 1,
                },
            }
        }
        for (key, value) in &sample.meta {
            if let Value::String(tag) = value {
                *categorical
                    .entry(key.clone())
                    .or_default()
                    .entry(tag.clone())
                    .or_insert(0) += 1;
            }
        }
    }
    StatsSnapshot {
        op_index,
        op_name: op_name.to_string(),
        sample_count: samples.len(),
        numeric,
        categorical,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

fn summarize(values: &[f64]) -> DistributionSummary {
    if values.is_empty() {
        return DistributionSummary {
            count: 0,
            mean: 0.0,
            p25: 0.0,
            p50: 0.0,
            p75: 0.0,
        };
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let quantile = |q: f64| {
        let rank = (q * (sorted.len() - 1) as f64).round() as usize;
        sorted[rank.min(sorted.len() - 1)]
    };
    DistributionSummary {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p25: quantile(0.25),
        p50: quantile(0.5),
        p75: quantile(0.75),
    }
}

/// One lineage comparison: the distribution of `stat` before and after an
/// operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightRow {
    pub stat: String,
    pub before_op: String,
    pub after_op: String,
    /// Total variation distance on shared bin edges.
    pub shift_score: f64,
    pub flagged: bool,
    pub threshold: f64,
    /// False when the stat is absent from either snapshot.
    pub comparable: bool,
    pub before: DistributionSummary,
    pub after: DistributionSummary,
}

/// Compare one stat between two snapshots. Bin edges are recomputed on
/// the union of both observed ranges so the two histograms share edges.
pub fn compare_snapshots(
    before: &StatsSnapshot,
    after: &StatsSnapshot,
    stat: &str,
    threshold: f64,
) -> InsightRow {
    let empty = StatObservations::default();
    let before_obs = before.numeric.get(stat).unwrap_or(&empty);
    let after_obs = after.numeric.get(stat).unwrap_or(&empty);
    let comparable = !before_obs.values.is_empty() && !after_obs.values.is_empty();
    if !comparable {
        return InsightRow {
            stat: stat.to_string(),
            before_op: before.op_name.clone(),
            after_op: after.op_name.clone(),
            shift_score: 0.0,
            flagged: false,
            threshold,
            comparable,
            before: summarize(&before_obs.values),
            after: summarize(&after_obs.values),
        };
    }
    let (lo_a, hi_a) = value_range(&before_obs.values);
    let (lo_b, hi_b) = value_range(&after_obs.values);
    let (lo, hi) = (lo_a.min(lo_b), hi_a.max(hi_b));
    let hist_before = histogram(&before_obs.values, DEFAULT_BINS, lo, hi);
    let hist_after = histogram(&after_obs.values, DEFAULT_BINS, lo, hi);
    let shift_score = total_variation_distance(&hist_before, &hist_after);
    InsightRow {
        stat: stat.to_string(),
        before_op: before.op_name.clone(),
        after_op: after.op_name.clone(),
        shift_score,
        flagged: shift_score > threshold,
        threshold,
        comparable,
        before: summarize(&before_obs.values),
        after: summarize(&after_obs.values),
    }
}

/// Compare every stat shared by consecutive snapshots.
pub fn compare_consecutive(snapshots: &[StatsSnapshot], threshold: f64) -> Vec<InsightRow> {
    let mut rows = Vec::new();
    for pair in snapshots.windows(2) {
        let stats: BTreeSet<&String> = pair[0]
            .numeric
            .keys()
            .chain(pair[1].numeric.keys())
            .collect();
        for stat in stats {
            rows.push(compare_snapshots(&pair[0], &pair[1], stat, threshold));
        }
    }
    rows
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsightReport {
    pub snapshots: Vec<SnapshotSummary>,
    pub comparisons: Vec<InsightRow>,
}

/// Snapshot as rendered into the report: histograms instead of raw
/// values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub op_index: usize,
    pub op_name: String,
    pub sample_count: usize,
    pub histograms: BTreeMap<String, Histogram>,
    pub missing: BTreeMap<String, usize>,
    pub categorical: BTreeMap<String, BTreeMap<String, u64>>,
}

impl SnapshotSummary {
    fn from_snapshot(snapshot: &StatsSnapshot) -> Self {
        let histograms = snapshot
            .numeric
            .keys()
            .filter_map(|stat| {
                snapshot
                    .histogram(stat, DEFAULT_BINS)
                    .map(|h| (stat.clone(), h))
            })
            .collect();
        let missing = snapshot
            .numeric
            .iter()
            .map(|(stat, obs)| (stat.clone(), obs.missing))
            .collect();
        SnapshotSummary {
            op_index: snapshot.op_index,
            op_name: snapshot.op_name.clone(),
            sample_count: snapshot.sample_count,
            histograms,
            missing,
            categorical: snapshot.categorical.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnalyzerError {
    #[error("target unwritable {path}: {reason}")]
    TargetUnwritable { path: String, reason: String },
}

/// Write the JSON report plus one CSV histogram table per (op, stat),
/// suitable for external plotting. Output is deterministic: re-rendering
/// the same inputs is byte-identical.
pub fn render_report(
    snapshots: &[StatsSnapshot],
    comparisons: &[InsightRow],
    dir: &Path,
) -> Result<Vec<PathBuf>, AnalyzerError> {
    let unwritable = |path: &Path, e: std::io::Error| AnalyzerError::TargetUnwritable {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| unwritable(dir, e))?;
    let mut written = Vec::new();

    let report = InsightReport {
        snapshots: snapshots.iter().map(SnapshotSummary::from_snapshot).collect(),
        comparisons: comparisons.to_vec(),
    };
    let report_path = dir.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| unwritable(&report_path, e))?;
    written.push(report_path);

    for snapshot in snapshots {
        for stat in snapshot.numeric.keys() {
            let Some(hist) = snapshot.histogram(stat, DEFAULT_BINS) else {
                continue;
            };
            let mut csv = String::from("bin_start,bin_end,count\n");
            for (i, count) in hist.counts.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    hist.edges[i],
                    hist.edges[i + 1],
                    count
                ));
            }
            let path = dir.join(format!("hist_op{:03}_{stat}.csv", snapshot.op_index));
            std::fs::write(&path, csv).map_err(|e| unwritable(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with_stat(key: &str, value: f64) -> Sample {
        let mut sample = Sample::default();
        sample.set_stat(key, value);
        sample
    }

    #[test]
    fn uniform_values_spread_evenly_over_bins() {
        // Counting oracle: 100 values uniform over [0, 100) put 5 in each
        // of 20 equal bins.
        let samples: Vec<Sample> = (0..100)
            .map(|i| sample_with_stat("text_len", i as f64))
            .collect();
        let snapshot = collect_snapshot(&samples, 0, "probe");
        let hist = snapshot.histogram("text_len", 20).unwrap();
        assert_eq!(hist.counts.len(), 20);
        assert_eq!(hist.total(), 100);
        for count in &hist.counts {
            assert_eq!(*count, 5);
        }
    }

    #[test]
    fn histogram_counts_match_present_samples() {
        let mut samples: Vec<Sample> = (0..80)
            .map(|i| sample_with_stat("text_len", i as f64))
            .collect();
        samples.extend((0..20).map(|_| Sample::default()));
        let snapshot = collect_snapshot(&samples, 0, "op");
        let observations = &snapshot.numeric["text_len"];
        assert_eq!(observations.missing, 20);
        let hist = snapshot.histogram("text_len", 20).unwrap();
        assert_eq!(hist.total() as usize, snapshot.sample_count - observations.missing);
    }

    #[test]
    fn empty_dataset_is_an_empty_snapshot() {
        let snapshot = collect_snapshot(&[], 3, "op");
        assert_eq!(snapshot.sample_count, 0);
        assert!(snapshot.numeric.is_empty());
        assert!(snapshot.categorical.is_empty());
    }

    #[test]
    fn stat_missing_on_some_samples_is_counted() {
        let mut samples = vec![sample_with_stat("other", 1.0)];
        samples.extend((0..99).map(|_| Sample::default()));
        let snapshot = collect_snapshot(&samples, 0, "op");
        assert_eq!(snapshot.numeric["other"].missing, 99);
        assert_eq!(snapshot.histogram("other", 20).unwrap().total(), 1);
    }

    #[test]
    fn categorical_meta_tags_are_counted() {
        let mut a = Sample::default();
        a.set_meta("src", "web");
        let mut b = Sample::default();
        b.set_meta("src", "web");
        let mut c = Sample::default();
        c.set_meta("src", "books");
        let snapshot = collect_snapshot(&[a, b, c], 0, "op");
        assert_eq!(snapshot.categorical["src"]["web"], 2);
        assert_eq!(snapshot.categorical["src"]["books"], 1);
    }

    #[test]
    fn identical_snapshots_score_zero() {
        let samples: Vec<Sample> = (0..50)
            .map(|i| sample_with_stat("text_len", (i % 10) as f64))
            .collect();
        let before = collect_snapshot(&samples, 0, "a");
        let after = collect_snapshot(&samples, 1, "b");
        let row = compare_snapshots(&before, &after, "text_len", 0.2);
        assert_eq!(row.shift_score, 0.0);
        assert!(!row.flagged);
        assert!(row.comparable);
    }

    #[test]
    fn disjoint_supports_score_one() {
        let before: Vec<Sample> = (0..30).map(|i| sample_with_stat("s", i as f64)).collect();
        let after: Vec<Sample> = (0..30)
            .map(|i| sample_with_stat("s", 1000.0 + i as f64))
            .collect();
        let row = compare_snapshots(
            &collect_snapshot(&before, 0, "a"),
            &collect_snapshot(&after, 1, "b"),
            "s",
            0.2,
        );
        assert!((row.shift_score - 1.0).abs() < 1e-12);
        assert!(row.flagged);
    }

    #[test]
    fn truncating_filter_flags_at_default_threshold() {
        // Uniform lengths; dropping everything above the 70th percentile
        // moves enough mass to flag at 0.2 (the TVD oracle gives 0.3).
        let before: Vec<Sample> = (0..1000)
            .map(|i| sample_with_stat("text_len", (i % 100) as f64))
            .collect();
        let after: Vec<Sample> = before
            .iter()
            .filter(|s| s.stat_f64("text_len").unwrap() <= 70.0)
            .cloned()
            .collect();
        let row = compare_snapshots(
            &collect_snapshot(&before, 0, "before"),
            &collect_snapshot(&after, 1, "length_filter"),
            "text_len",
            DEFAULT_SHIFT_THRESHOLD,
        );
        assert!(row.flagged, "score {}", row.shift_score);
        assert!(row.shift_score > 0.2 && row.shift_score < 0.4);
    }

    #[test]
    fn incomparable_stat_is_reported_not_flagged() {
        let with = collect_snapshot(&[sample_with_stat("s", 1.0)], 0, "a");
        let without = collect_snapshot(&[Sample::default()], 1, "b");
        let row = compare_snapshots(&with, &without, "s", 0.2);
        assert!(!row.comparable);
        assert!(!row.flagged);
    }

    #[test]
    fn tvd_is_symmetric_and_bounded() {
        let a: Vec<Sample> = (0..40).map(|i| sample_with_stat("s", (i % 7) as f64)).collect();
        let b: Vec<Sample> = (0..40).map(|i| sample_with_stat("s", (i % 13) as f64)).collect();
        let sa = collect_snapshot(&a, 0, "a");
        let sb = collect_snapshot(&b, 1, "b");
        let ab = compare_snapshots(&sa, &sb, "s", 0.5).shift_score;
        let ba = compare_snapshots(&sb, &sa, "s", 0.5).shift_score;
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn snapshot_merge_is_order_independent() {
        let part_a = collect_snapshot(
            &(0..30).map(|i| sample_with_stat("s", i as f64)).collect::<Vec<_>>(),
            0,
            "op",
        );
        let part_b = collect_snapshot(
            &(30..50).map(|i| sample_with_stat("s", i as f64)).collect::<Vec<_>>(),
            0,
            "op",
        );
        let mut ab = part_a.clone();
        ab.merge(&part_b);
        let mut ba = part_b.clone();
        ba.merge(&part_a);
        assert_eq!(ab.sample_count, ba.sample_count);
        assert_eq!(
            ab.histogram("s", 20).unwrap().counts,
            ba.histogram("s", 20).unwrap().counts
        );
    }

    #[test]
    fn report_renders_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..60).map(|i| sample_with_stat("s", i as f64)).collect();
        let snapshots = vec![
            collect_snapshot(&samples, 0, "load"),
            collect_snapshot(&samples[..30], 1, "filter"),
        ];
        let rows = compare_consecutive(&snapshots, 0.2);
        assert_eq!(rows.len(), 1);

        let out = dir.path().join("report");
        let first = render_report(&snapshots, &rows, &out).unwrap();
        let bytes_first: Vec<Vec<u8>> = first
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect();
        let second = render_report(&snapshots, &rows, &out).unwrap();
        let bytes_second: Vec<Vec<u8>> = second
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect();
        assert_eq!(first, second);
        assert_eq!(bytes_first, bytes_second);
    }

    #[test]
    fn report_without_stats_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let snapshots = vec![collect_snapshot(&[Sample::from_text("x")], 0, "op")];
        let files = render_report(&snapshots, &[], dir.path()).unwrap();
        assert_eq!(files.len(), 1); // just report.json, no CSVs
    }
}
