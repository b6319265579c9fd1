//! Dataset I/O: streaming and materialized JSONL loading, export,
//! size-targeted subset splitting and operator-level checkpoint
//! snapshots.
//!
//! Loading never aborts on a malformed line: every source line becomes a
//! [`Slot`], either a parsed sample or a recorded bad line for the fault
//! handler. Streaming mode holds at most one batch in memory; both modes
//! yield identical slot sequences for the same source.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sample::Sample;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("source not found: {0}")]
    SourceNotFound(String),
    #[error("empty source (zero readable lines): {0}")]
    EmptySource(String),
    #[error("target unwritable {path}: {reason}")]
    TargetUnwritable { path: String, reason: String },
    #[error("recipe digest {expected} has no checkpoint under {root}")]
    RecipeMismatch { expected: String, root: String },
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    Materialized,
    Streaming,
}

/// One source line: a sample, or a malformed line routed to fault
/// tolerance instead of aborting the load.
#[derive(Debug, Clone)]

pub enum Slot {
    Ok(Sample),
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
}

impl Slot {
    pub fn is_malformed(&self) -> bool {
        matches!(self, Slot::Malformed { .. })
    }
}

/// An ordered sample collection bound to JSONL sources (a single file or
/// a directory of parts consumed in name order).
#[derive(Debug)]
pub struct Dataset {
    mode: LoadMode,
    paths: Vec<PathBuf>,
    materialized: Option<Vec<Slot>>,
}

impl Dataset {
    /// Open a source for processing. Materialized mode reads everything
    /// now; streaming mode re-reads the files on each pass.
    pub fn load(source: &Path, mode: LoadMode) -> Result<Self, DatasetError> {
        let paths = resolve_source(source)?;
        if !has_any_line(&paths)? {
            return Err(DatasetError::EmptySource(source.display().to_string()));
        }
        let materialized = match mode {
            LoadMode::Streaming => None,
            LoadMode::Materialized => Some(SlotStream::open(&paths)?.collect()),
        };
        Ok(Dataset {
            mode,
            paths,
            materialized,
        })
    }

    /// Wrap already-processed samples (pipeline intermediate stages).
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        Dataset {
            mode: LoadMode::Materialized,
            paths: Vec::new(),
            materialized: Some(samples.into_iter().map(Slot::Ok).collect()),
        }
    }

    pub fn mode(&self) -> LoadMode {
        self.mode
    }

    /// Parsed sample count, known without a pass only when materialized.
    pub fn sample_count(&self) -> Option<usize> {
        self.materialized
            .as_ref()
            .map(|slots| slots.iter().filter(|s| !s.is_malformed()).count())
    }

    /// Iterate the source slots in file order.
    pub fn stream(&self) -> Result<Box<dyn Iterator<Item = Slot> + Send + '_>, DatasetError> {
        match &self.materialized {
            Some(slots) => Ok(Box::new(slots.iter().cloned())),
            None => Ok(Box::new(SlotStream::open(&self.paths)?)),
        }
    }

    /// All parsed samples plus the recorded bad lines.
    pub fn collect_samples(&self) -> Result<(Vec<Sample>, Vec<BadLine>), DatasetError> {
        let mut samples = Vec::new();
        let mut bad = Vec::new();
        for slot in self.stream()? {
            match slot {
                Slot::Ok(sample) => samples.push(sample),
                Slot::Malformed {
                    file,
                    line,
                    message,
                } => bad.push(BadLine {
                    file,
                    line,
                    message,
                }),
            }
        }
        Ok((samples, bad))
    }

    /// A structural prototype for schema-compatible placeholder samples:
    /// the first parseable sample.
    pub fn schema_prototype(&self) -> Result<Option<Sample>, DatasetError> {
        for slot in self.stream()? {
            if let Slot::Ok(sample) = slot {
                return Ok(Some(sample));
            }
        }
        Ok(None)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BadLine {
    pub file: String,
    pub line: usize,
    pub message: String,
}

fn resolve_source(source: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    if !source.exists() {
        return Err(DatasetError::SourceNotFound(source.display().to_string()));
    }
    if source.is_file() {
        return Ok(vec![source.to_path_buf()]);
    }
    let mut parts: Vec<PathBuf> = std::fs::read_dir(source)
        .map_err(|e| io_err(source, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    parts.sort();
    if parts.is_empty() {
        return Err(DatasetError::EmptySource(source.display().to_string()));
    }
    Ok(parts)
}

fn has_any_line(paths: &[PathBuf]) -> Result<bool, DatasetError> {
    for path in paths {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| io_err(path, e))?;
            if !line.trim().is_empty() {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Lazy reader over the source files; at most one line is buffered.
struct SlotStream {
    paths: Vec<PathBuf>,
    next_path: usize,
    current: Option<(String, std::io::Lines<BufReader<File>>)>,
    line_no: usize,
}

impl SlotStream {
    fn open(paths: &[PathBuf]) -> Result<Self, DatasetError> {
        Ok(SlotStream {
            paths: paths.to_vec(),
            next_path: 0,
            current: None,
            line_no: 0,
        })
    }
}

impl Iterator for SlotStream {
    type Item = Slot;

    fn next(&mut self) -> Option<Slot> {
        loop {
            if self.current.is_none() {
                let path = self.paths.get(self.next_path)?.clone();
                self.next_path += 1;
                let file = match File::open(&path) {
                    Ok(f) => f,
                    Err(e) => {
                        return Some(Slot::Malformed {
                            file: path.display().to_string(),
                            line: 0,
                            message: e.to_string(),
                        })
                    }
                };
                self.line_no = 0;
                self.current = Some((
                    path.display().to_string(),
                    BufReader::new(file).lines(),
                ));
            }
            let (file, lines) = self.current.as_mut().expect("current file set");
            match lines.next() {
                None => {
                    self.current = None;
                    continue;
                }
                Some(Err(e)) => {
                    let slot = Slot::Malformed {
                        file: file.clone(),
                        line: self.line_no + 1,
                        message: e.to_string(),
                    };
                    self.line_no += 1;
                    return Some(slot);
                }
                Some(Ok(line)) => {
                    self.line_no += 1;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let slot = match Sample::from_json_line(&line) {
                        Ok(sample) => Slot::Ok(sample),
                        Err(e) => Slot::Malformed {
                            file: file.clone(),
                            line: self.line_no,
                            message: e.to_string(),
                        },
                    };
                    return Some(slot);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------
// export

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub sample_count: usize,
    pub byte_count: u64,
    pub placeholders_dropped: usize,
}

/// Write samples as canonical JSONL. With `drop_placeholders`, samples
/// flagged by fault tolerance are omitted and counted.
pub fn export<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    target: &Path,
    drop_placeholders: bool,
) -> Result<ExportReport, DatasetError> {
    if let Some(parent) = target.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| DatasetError::TargetUnwritable {
                path: target.display().to_string(),
                reason: e.to_string(),
            })?;
        }
    }
    let file = File::create(target).map_err(|e| DatasetError::TargetUnwritable {
        path: target.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut writer = BufWriter::new(file);
    let mut report = ExportReport {
        sample_count: 0,
        byte_count: 0,
        placeholders_dropped: 0,
    };
    for sample in samples {
        if drop_placeholders && sample.is_placeholder() {
            report.placeholders_dropped += 1;
            continue;
        }
        let line = sample.to_json_line();
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .map_err(|e| io_err(target, e))?;
        report.sample_count += 1;
        report.byte_count += line.len() as u64 + 1;
    }
    writer.flush().map_err(|e| io_err(target, e))?;
    Ok(report)
}

// ---------------------------------------------------------------------
// subset splitting

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPart {
    pub path: String,
    pub byte_size: u64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub parts: Vec<SplitPart>,
    pub target_bytes: u64,
    /// Content hash of the unsplit source.
    pub origin_digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Default part size target (the block-size bound the splitting exists
/// to respect); desk-scale runs override it via the CLI.
pub const DEFAULT_SPLIT_TARGET_BYTES: u64 = 128 * 1024 * 1024;

pub const SPLIT_MANIFEST_FILE: &str = "split_manifest.json";

/// Pre-split a JSONL source into parts of at most `target_bytes`, never
/// cutting a line. With a part-count hint, at least
/// `max(hint, ceil(total/target))` parts are produced so every simulated
/// node receives work (trailing parts may be empty on tiny sources). The
/// in-order concatenation of the parts is byte-identical to the source.
pub fn split_subsets(
    source: &Path,
    target_bytes: u64,
    part_count_hint: Option<usize>,
    out_dir: &Path,
) -> Result<SplitManifest, DatasetError> {
    assert!(target_bytes > 0, "target_bytes must be positive");
    if !source.is_file() {
        return Err(DatasetError::SourceNotFound(source.display().to_string()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| DatasetError::TargetUnwritable {
        path: out_dir.display().to_string(),
        reason: e.to_string(),
    })?;

    let total_bytes = std::fs::metadata(source).map_err(|e| io_err(source, e))?.len();
    let by_target = total_bytes.div_ceil(target_bytes).max(1) as usize;
    let desired_parts = part_count_hint.unwrap_or(1).max(by_target);
    // Without a hint, pack straight to the target; a hint asks for
    // byte-balanced parts so every node receives comparable work.
    let budget = if part_count_hint.is_some() {
        total_bytes.div_ceil(desired_parts as u64).max(1)
    } else {
        target_bytes
    };

    let mut digest = Sha256::new();
    let mut warnings = Vec::new();
    let mut parts: Vec<SplitPart> = Vec::new();

    let mut reader = BufReader::new(File::open(source).map_err(|e| io_err(source, e))?);
    let mut writer: Option<(BufWriter<File>, SplitPart)> = None;
    let mut line = Vec::new();

    let open_part = |parts: &mut Vec<SplitPart>| -> Result<(BufWriter<File>, SplitPart), DatasetError> {
        let name = format!("part-{:05}.jsonl", parts.len());
        let path = out_dir.join(&name);
        let file = File::create(&path).map_err(|e| DatasetError::TargetUnwritable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok((
            BufWriter::new(file),
            SplitPart {
                path: name,
                byte_size: 0,
                sample_count: 0,
            },
        ))
    };

    loop {
        line.clear();
        let read = reader
            .read_until(b'\n', &mut line)
            .map_err(|e| io_err(source, e))?;
        if read == 0 {
            break;
        }
        digest.update(&line);
        let line_len = line.len() as u64;
        if line_len > target_bytes {
            warnings.push(format!(
                "oversized sample of {line_len} bytes exceeds target {target_bytes}; kept whole in its own part"
            ));
        }

        let should_cut = match &writer {
            Some((_, part)) => {
                part.byte_size > 0
                    && (part.byte_size + line_len > budget || line_len > target_bytes)
            }
            None => false,
        };
        if should_cut {
            let (mut w, part) = writer.take().expect("writer open");
            w.flush().map_err(|e| io_err(out_dir, e))?;
            parts.push(part);
        }
        if writer.is_none() {
            writer = Some(open_part(&mut parts)?);
        }
        let (w, part) = writer.as_mut().expect("writer open");
        w.write_all(&line).map_err(|e| io_err(out_dir, e))?;
        part.byte_size += line_len;
        if !line.iter().all(|b| b.is_ascii_whitespace()) {
            part.sample_count += 1;
        }
        // An oversized line stays alone in its part.
        if line_len > target_bytes {
            let (mut w, part) = writer.take().expect("writer open");
            w.flush().map_err(|e| io_err(out_dir, e))?;
            parts.push(part);
        }
    }
    if let Some((mut w, part)) = writer.take() {
        w.flush().map_err(|e| io_err(out_dir, e))?;
        parts.push(part);
    }
    // Pad with empty parts so every hinted node receives a file.
    while parts.len() < desired_parts {
        let (mut w, part) = open_part(&mut parts)?;
        w.flush().map_err(|e| io_err(out_dir, e))?;
        parts.push(part);
    }

    let manifest = SplitManifest {
        parts,
        target_bytes,
        origin_digest: hex(&digest.finalize()),
        warnings,
    };
    let manifest_path = out_dir.join(SPLIT_MANIFEST_FILE);
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

// ---------------------------------------------------------------------
// checkpoints

/// On-disk record of one completed operator: the dataset snapshot plus
/// counters, under `<root>/<recipe_digest>/<op_index>/`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub recipe_digest: String,
    pub completed_op_index: usize,
    /// Executor counters, stored opaquely so resume restores them.
    pub counters: serde_json::Value,
    pub part_digests: Vec<String>,
    pub sample_count: usize,
}

const CHECKPOINT_PART_LINES: usize = 50_000;

pub fn checkpoint_dir(root: &Path, recipe_digest: &str, op_index: usize) -> PathBuf {
    root.join(recipe_digest).join(op_index.to_string())
}

/// Snapshot the dataset after `op_index` completed. Snapshots are whole
/// JSONL parts, no deltas.
pub fn write_checkpoint(
    root: &Path,
    recipe_digest: &str,
    op_index: usize,
    samples: &[Sample],
    counters: serde_json::Value,
) -> Result<CheckpointManifest, DatasetError> {
    let dir = checkpoint_dir(root, recipe_digest, op_index);
    std::fs::create_dir_all(&dir).map_err(|e| DatasetError::TargetUnwritable {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut part_digests = Vec::new();
    let chunks: Vec<&[Sample]> = if samples.is_empty() {
        vec![&[]]
    } else {
        samples.chunks(CHECKPOINT_PART_LINES).collect()
    };
    for (i, chunk) in chunks.iter().enumerate() {
        let path = dir.join(format!("part-{i:05}.jsonl"));
        let mut bytes = Vec::new();
        for sample in *chunk {
            bytes.extend_from_slice(sample.to_json_line().as_bytes());
            bytes.push(b'\n');
        }
        std::fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        part_digests.push(sha256_hex(&bytes));
    }
    let manifest = CheckpointManifest {
        recipe_digest: recipe_digest.to_string(),
        completed_op_index: op_index,
        counters,
        part_digests,
        sample_count: samples.len(),
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

/// Latest completed op index checkpointed for this recipe, if any.
pub fn latest_checkpoint(root: &Path, recipe_digest: &str) -> Option<usize> {
    let dir = root.join(recipe_digest);
    let mut indices: Vec<usize> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().to_string_lossy().parse().ok())
        .filter(|idx| {
            checkpoint_dir(root, recipe_digest, *idx)
                .join("manifest.json")
                .exists()
        })
        .collect();
    indices.sort_unstable();
    indices.pop()
}

/// Restore the snapshot written after `op_index`. A digest with no
/// checkpoints under `root` is a recipe mismatch: the recipe changed
/// since the checkpoint was written.
pub fn read_checkpoint(
    root: &Path,
    recipe_digest: &str,
    op_index: usize,
) -> Result<(Vec<Sample>, CheckpointManifest), DatasetError> {
    let dir = checkpoint_dir(root, recipe_digest, op_index);
    if !dir.exists() {
        return Err(DatasetError::RecipeMismatch {
            expected: recipe_digest.to_string(),
            root: root.display().to_string(),
        });
    }
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?,
    )
    .map_err(|e| DatasetError::CheckpointCorrupt(e.to_string()))?;
    if manifest.recipe_digest != recipe_digest {
        return Err(DatasetError::RecipeMismatch {
            expected: recipe_digest.to_string(),
            root: root.display().to_string(),
        });
    }
    let mut samples = Vec::with_capacity(manifest.sample_count);
    for (i, expected_digest) in manifest.part_digests.iter().enumerate() {
        let path = dir.join(format!("part-{i:05}.jsonl"));
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        if &sha256_hex(&bytes) != expected_digest {
            return Err(DatasetError::CheckpointCorrupt(format!(
                "digest mismatch in {}",
                path.display()
            )));
        }
        for line in bytes.split(|b| *b == b'\n') {
            if line.is_empty() {
                continue;
            }
            let text = std::str::from_utf8(line)
                .map_err(|e| DatasetError::CheckpointCorrupt(e.to_string()))?;
            samples.push(
                Sample::from_json_line(text)
                    .map_err(|e| DatasetError::CheckpointCorrupt(e.to_string()))?,
            );
        }
    }
    if samples.len() != manifest.sample_count {
        return Err(DatasetError::CheckpointCorrupt(format!(
            "expected {} samples, found {}",
            manifest.sample_count,
            samples.len()
        )));
    }
    Ok((samples, manifest))
}
