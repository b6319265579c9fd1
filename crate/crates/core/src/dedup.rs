//! Document-level deduplication: exact (content digests) and fuzzy
//! (MinHash signatures, LSH banding, union-find clustering), plus a
//! sharded variant that partitions band buckets by hash so the edge
//! extraction work balances across shards while producing exactly the
//! same clusters as the single-pass run.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ops::registry::{base_descriptor, parse_params, ParamSpec, Registry};
use crate::ops::{DeduplicatorOp, OpDescriptor, OpError, OpKind, OpType};
use crate::sample::Sample;

/// Tuning of the fuzzy deduplicator. Users pick the two algorithm
/// parameters (`jaccard_threshold`, `num_permutations`); the band layout
/// is derived so the LSH detection curve crosses near the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupConfig {
    pub jaccard_threshold: f64,
    pub num_permutations: usize,
    /// Word n-gram length for shingling.
    pub shingle_size: usize,
    pub bands: usize,
    pub rows_per_band: usize,
    pub seed: u64,
    /// Verify candidate pairs with the exact shingle Jaccard before
    /// unioning. On by default for oracle-exact semantics; `--fast`
    /// disables it.
    pub verify: bool,
}

impl DedupConfig {
    pub fn new(
        jaccard_threshold: f64,
        num_permutations: usize,
        shingle_size: usize,
        seed: u64,
    ) -> Result<Self, String> {
        if !(jaccard_threshold > 0.0 && jaccard_threshold <= 1.0) {
            return Err(format!(
                "jaccard_threshold must be in (0, 1], got {jaccard_threshold}"
            ));
        }
        if num_permutations == 0 {
            return Err("num_permutations must be >= 1".to_string());
        }
        if shingle_size == 0 {
            return Err("shingle_size must be >= 1".to_string());
        }
        let (bands, rows_per_band) = select_bands(num_permutations, jaccard_threshold);
        Ok(DedupConfig {
            jaccard_threshold,
            num_permutations,
            shingle_size,
            bands,
            rows_per_band,
            seed,
            verify: true,
        })
    }
}

/// Choose (b, r) with b*r == num_permutations minimizing the distance of
/// the band-collision threshold (1/b)^(1/r) from the target Jaccard.
pub fn select_bands(num_permutations: usize, threshold: f64) -> (usize, usize) {
    let mut best = (1usize, num_permutations);
    let mut best_err = f64::MAX;
    for bands in 1..=num_permutations {
        if !num_permutations.is_multiple_of(bands) {
            continue;
        }
        let rows = num_permutations / bands;
        let crossing = (1.0 / bands as f64).powf(1.0 / rows as f64);
        let err = (crossing - threshold).abs();
        if err < best_err {
            best_err = err;
            best = (bands, rows);
        }
    }
    best
}

// ---------------------------------------------------------------------
// hashing

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// 64-bit content hash of a shingle (FNV-1a with an avalanche pass).
fn shingle_hash(shingle: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for byte in shingle.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(h)
}

fn permutation_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15))
}

// ---------------------------------------------------------------------
// shingles and signatures

/// Word k-grams of the lowercased, whitespace-tokenized text, with set
/// semantics. Texts with fewer than k tokens yield a singleton set of the
/// whole token sequence; empty texts yield the empty set.
pub fn shingle(text: &str, k: usize) -> HashSet<String> {
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = lowered.split_whitespace().collect();
    if tokens.is_empty() {
        return HashSet::new();
    }
    if tokens.len() < k {
        return HashSet::from([tokens.join(" ")]);
    }
    tokens.windows(k).map(|w| w.join(" ")).collect()
}

/// Exact Jaccard similarity of two shingle sets; the verification oracle.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub sample_ordinal: usize,
    pub minhash_values: Vec<u64>,
}

impl Signature {
    /// Reserved signature for empty documents; it never enters any LSH
    /// bucket, so empty docs never collide.
    pub fn is_empty_doc(&self) -> bool {
        self.minhash_values.iter().all(|v| *v == u64::MAX)
    }

    /// Fraction of positions agreeing with `other`; estimates Jaccard.
    pub fn agreement(&self, other: &Signature) -> f64 {
        let matching = self
            .minhash_values
            .iter()
            .zip(&other.minhash_values)
            .filter(|(a, b)| a == b)
            .count();
        matching as f64 / self.minhash_values.len().max(1) as f64
    }
}

/// MinHash signature: position i holds the minimum of hash_i over the
/// shingle set, with hash_i derived from the config seed and i.
pub fn compute_signature(
    shingles: &HashSet<String>,
    sample_ordinal: usize,
    config: &DedupConfig,
) -> Signature {
    let mut values = vec![u64::MAX; config.num_permutations];
    if shingles.is_empty() {
        return Signature {
            sample_ordinal,
            minhash_values: values,
        };
    }
    let seeds: Vec<u64> = (0..config.num_permutations)
        .map(|i| permutation_seed(config.seed, i))
        .collect();
    for shingle in shingles {
        let base = shingle_hash(shingle);
        for (value, seed) in values.iter_mut().zip(&seeds) {
            let h = splitmix64(base ^ seed);
            if h < *value {
                *value = h;
            }
        }
    }
    Signature {
        sample_ordinal,
        minhash_values: values,
    }
}

// ---------------------------------------------------------------------
// LSH banding

fn band_hash(slice: &[u64], band_index: usize) -> u64 {
    let mut h = splitmix64(band_index as u64 ^ 0x517cc1b727220a95);
    for value in slice {
        h = splitmix64(h ^ *value);
    }
    h
}

/// Candidate duplicate pairs: two documents are candidates iff some
/// band's row slice hashes equal. Generation groups signatures into hash
/// buckets per band — no pairwise comparison across the corpus.
pub fn band_and_bucket(signatures: &[Signature], config: &DedupConfig) -> Vec<(usize, usize)> {
    assert_eq!(
        config.bands * config.rows_per_band,
        config.num_permutations,
        "band layout must cover the signature"
    );
    let mut buckets: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
    for signature in signatures {
        if signature.is_empty_doc() {
            continue;
        }
        for band in 0..config.bands {
            let start = band * config.rows_per_band;
            let slice = &signature.minhash_values[start..start + config.rows_per_band];
            buckets
                .entry((band, band_hash(slice, band)))
                .or_default()
                .push(signature.sample_ordinal);
        }
    }
    collect_bucket_pairs(buckets.into_values())
}

fn collect_bucket_pairs(buckets: impl Iterator<Item = Vec<usize>>) -> Vec<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    for members in buckets {
        if members.len() < 2 {
            continue;
        }
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let (a, b) = (members[i].min(members[j]), members[i].max(members[j]));
                if a != b {
                    pairs.insert((a, b));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

// ---------------------------------------------------------------------
// union-find

/// Disjoint-set forest over sample ordinals with union by size and path
/// compression; find is idempotent and every node ends within two hops of
/// its root.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        UnionFind {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cursor = x;
        while self.parent[cursor] != root {
            let next = self.parent[cursor];
            self.parent[cursor] = root;
            cursor = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let mut ra = self.find(a);
        let mut rb = self.find(b);
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    /// Equivalence classes with more than one member, each sorted, in
    /// order of their smallest member.
    pub fn clusters(&mut self) -> Vec<Vec<usize>> {
        let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
        for x in 0..self.parent.len() {
            let root = self.find(x);
            by_root.entry(root).or_default().push(x);
        }
        let mut clusters: Vec<Vec<usize>> = by_root
            .into_values()
            .filter(|members| members.len() > 1)
            .collect();
        for cluster in &mut clusters {
            cluster.sort_unstable();
        }
        clusters.sort_by_key(|c| c[0]);
        clusters
    }
}

/// Union the candidate pairs into a forest. With a verifier, a pair is
/// unioned only when it passes the exact check (shingle Jaccard at the
/// configured threshold).
pub fn union_candidates(
    pairs: &[(usize, usize)],
    len: usize,
    verifier: Option<&dyn Fn(usize, usize) -> bool>,
) -> UnionFind {
    let mut forest = UnionFind::new(len);
    for (a, b) in pairs {
        if let Some(check) = verifier {
            if !check(*a, *b) {
                continue;
            }
        }
        forest.union(*a, *b);
    }
    forest
}

// ---------------------------------------------------------------------
// passes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepPolicy {
    /// Lowest ordinal survives: stable, order-preserving.
    #[default]
    First,
    /// Longest text survives; ties break to the lowest ordinal.
    Longest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupReport {
    pub clusters: Vec<Vec<usize>>,
    pub removed: usize,
    pub config: DedupConfig,
}

fn survivors_of(
    samples: &[Sample],
    clusters: &[Vec<usize>],
    keep: KeepPolicy,
) -> (Vec<Sample>, usize) {
    let mut drop_mask = vec![false; samples.len()];
    for cluster in clusters {
        let representative = match keep {
            KeepPolicy::First => cluster[0],
            KeepPolicy::Longest => *cluster
                .iter()
                .max_by_key(|ordinal| (samples[**ordinal].text.chars().count(), std::cmp::Reverse(**ordinal)))
                .expect("clusters are non-empty"),
        };
        for member in cluster {
            if *member != representative {
                drop_mask[*member] = true;
            }
        }
    }
    let removed = drop_mask.iter().filter(|d| **d).count();
    let kept = samples
        .iter()
        .zip(&drop_mask)
        .filter(|(_, dropped)| !**dropped)
        .map(|(s, _)| s.clone())
        .collect();
    (kept, removed)
}

/// Fuzzy-deduplicate a dataset: one representative per near-duplicate
/// cluster survives.
pub fn dedup_pass(
    samples: &[Sample],
    config: &DedupConfig,
    keep: KeepPolicy,
) -> (Vec<Sample>, DedupReport) {
    let shingles: Vec<HashSet<String>> = samples
        .iter()
        .map(|s| shingle(&s.text, config.shingle_size))
        .collect();
    let signatures: Vec<Signature> = shingles
        .iter()
        .enumerate()
        .map(|(ordinal, set)| compute_signature(set, ordinal, config))
        .collect();
    let pairs = band_and_bucket(&signatures, config);
    let verifier = |a: usize, b: usize| jaccard(&shingles[a], &shingles[b]) >= config.jaccard_threshold;
    let mut forest = union_candidates(
        &pairs,
        samples.len(),
        config.verify.then_some(&verifier as &dyn Fn(usize, usize) -> bool),
    );
    let clusters = forest.clusters();
    let (kept, removed) = survivors_of(samples, &clusters, keep);
    (
        kept,
        DedupReport {
            clusters,
            removed,
            config: config.clone(),
        },
    )
}

/// Sharded fuzzy deduplication over pre-split parts. Signatures are
/// computed per part independently; band buckets are partitioned by
/// bucket hash modulo `shard_count` so every shard extracts a balanced
/// slice of the candidate edges; the merged union-find is identical to
/// [`dedup_pass`] over the concatenated parts.
pub fn sharded_dedup(
    parts: &[Vec<Sample>],
    config: &DedupConfig,
    shard_count: usize,
    keep: KeepPolicy,
) -> (Vec<Sample>, DedupReport) {
    let shard_count = shard_count.max(1);
    let all: Vec<Sample> = parts.iter().flatten().cloned().collect();

    // Per-part signature computation with global ordinals.
    let mut offset = 0usize;
    let mut signatures: Vec<Signature> = Vec::with_capacity(all.len());
    let mut shingles: Vec<HashSet<String>> = Vec::with_capacity(all.len());
    for part in parts {
        for (i, sample) in part.iter().enumerate() {
            let set = shingle(&sample.text, config.shingle_size);
            signatures.push(compute_signature(&set, offset + i, config));
            shingles.push(set);
        }
        offset += part.len();
    }

    // Bucket, partitioning by bucket hash.
    let mut shards: Vec<HashMap<(usize, u64), Vec<usize>>> = vec![HashMap::new(); shard_count];
    for signature in &signatures {
        if signature.is_empty_doc() {
            continue;
        }
        for band in 0..config.bands {
            let start = band * config.rows_per_band;
            let slice = &signature.minhash_values[start..start + config.rows_per_band];
            let key = band_hash(slice, band);
            let shard = (key % shard_count as u64) as usize;
            shards[shard]
                .entry((band, key))
                .or_default()
                .push(signature.sample_ordinal);
        }
    }

    // Concurrent per-shard edge extraction (with verification), then a
    // single-threaded deterministic merge.
    let shingles = Arc::new(shingles);
    let threshold = config.jaccard_threshold;
    let verify = config.verify;
    let shard_edges: Vec<Vec<(usize, usize)>> = std::thread::scope(|scope| {
        shards
            .into_iter()
            .map(|buckets| {
                let shingles = Arc::clone(&shingles);
                scope.spawn(move || {
                    let pairs = collect_bucket_pairs(buckets.into_values());
                    if verify {
                        pairs
                            .into_iter()
                            .filter(|(a, b)| jaccard(&shingles[*a], &shingles[*b]) >= threshold)
                            .collect()
                    } else {
                        pairs
                    }
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|handle| handle.join().expect("shard thread"))
            .collect()
    });

    let mut edges: Vec<(usize, usize)> = shard_edges.into_iter().flatten().collect();
    edges.sort_unstable();
    edges.dedup();
    let mut forest = union_candidates(&edges, all.len(), None);
    let clusters = forest.clusters();
    let (kept, removed) = survivors_of(&all, &clusters, keep);
    (
        kept,
        DedupReport {
            clusters,
            removed,
            config: config.clone(),
        },
    )
}

// ---------------------------------------------------------------------
// exact dedup

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactKey {
    /// Digest of the text field.
    TextHash,
    /// Digests of referenced media files; a sample sharing any media file
    /// content with an earlier sample is a duplicate.
    MediaFileHash,
}

/// Drop samples whose key digest was seen earlier; the first occurrence
/// survives.
pub fn exact_dedup(samples: &[Sample], key: ExactKey) -> Result<(Vec<Sample>, usize), OpError> {
    let mut seen: HashSet<[u8; 32]> = HashSet::new();
    let mut kept = Vec::with_capacity(samples.len());
    let mut removed = 0usize;
    for (ordinal, sample) in samples.iter().enumerate() {
        let digests: Vec<[u8; 32]> = match key {
            ExactKey::TextHash => vec![Sha256::digest(sample.text.as_bytes()).into()],
            ExactKey::MediaFileHash => {
                let mut out = Vec::new();
                for modality in crate::schema::Modality::ALL {
                    for path in sample.media_paths(modality) {
                        let bytes = std::fs::read(path).map_err(|e| OpError::UnreadableMedia {
                            ordinal,
                            path: path.clone(),
                            reason: e.to_string(),
                        })?;
                        out.push(Sha256::digest(&bytes).into());
                    }
                }
                out
            }
        };
        let duplicate = !digests.is_empty() && digests.iter().any(|d| seen.contains(d));
        if duplicate {
            removed += 1;
        } else {
            kept.push(sample.clone());
        }
        for digest in digests {
            seen.insert(digest);
        }
    }
    Ok((kept, removed))
}

// ---------------------------------------------------------------------
// registry wiring

struct MinhashDeduplicator {
    descriptor: OpDescriptor,
    config: DedupConfig,
    keep: KeepPolicy,
}

impl DeduplicatorOp for MinhashDeduplicator {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn dedup(&self, samples: Vec<Sample>) -> Result<(Vec<Sample>, usize), OpError> {
        let (kept, report) = dedup_pass(&samples, &self.config, self.keep);
        Ok((kept, report.removed))
    }
}

struct ExactDeduplicator {
    descriptor: OpDescriptor,
    key: ExactKey,
}

impl DeduplicatorOp for ExactDeduplicator {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn dedup(&self, samples: Vec<Sample>) -> Result<(Vec<Sample>, usize), OpError> {
        exact_dedup(&samples, self.key)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MinhashParams {
    #[serde(default = "default_threshold")]
    jaccard_threshold: f64,
    #[serde(default = "default_permutations")]
    num_permutations: usize,
    #[serde(default = "default_shingle")]
    shingle_size: usize,
    seed: Option<u64>,
    #[serde(default)]
    keep: KeepPolicy,
    #[serde(default = "default_verify")]
    verify: bool,
}

fn default_threshold() -> f64 {
    0.7
}

fn default_permutations() -> usize {
    256
}

fn default_shingle() -> usize {
    5
}

fn default_verify() -> bool {
    true
}

pub(crate) fn register_ops(registry: &mut Registry) {
    registry.register(
        "document_minhash_deduplicator",
        OpType::Deduplicator,
        "Fuzzy document-level dedup via MinHash-LSH and union-find",
        vec![
            ParamSpec::new(
                "jaccard_threshold",
                "number",
                Some(serde_json::json!(0.7)),
                "similarity at/above which documents are duplicates",
            ),
            ParamSpec::new(
                "num_permutations",
                "integer",
                Some(serde_json::json!(256)),
                "MinHash signature length",
            ),
            ParamSpec::new(
                "shingle_size",
                "integer",
                Some(serde_json::json!(5)),
                "word n-gram length",
            ),
            ParamSpec::new("seed", "integer", None, "hash seed (defaults to DJ_SEED)"),
            ParamSpec::new("keep", "first|longest", Some(serde_json::json!("first")), "representative"),
            ParamSpec::new("verify", "bool", Some(serde_json::json!(true)), "exact Jaccard check"),
        ],
        |params| {
            let parsed: MinhashParams = parse_params("document_minhash_deduplicator", params)?;
            let mut config = DedupConfig::new(
                parsed.jaccard_threshold,
                parsed.num_permutations,
                parsed.shingle_size,
                parsed.seed.unwrap_or_else(crate::global_seed),
            )
            .map_err(|message| OpError::ParamValidation {
                op: "document_minhash_deduplicator".to_string(),
                message,
            })?;
            config.verify = parsed.verify;
            let descriptor =
                base_descriptor("document_minhash_deduplicator", OpType::Deduplicator, params);
            Ok(OpKind::Deduplicator(Arc::new(MinhashDeduplicator {
                descriptor,
                config,
                keep: parsed.keep,
            })))
        },
    );
    registry.register(
        "document_deduplicator",
        OpType::Deduplicator,
        "Exact document-level dedup by text digest",
        vec![],
        |params| {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct NoParams {}
            let _: NoParams = parse_params("document_deduplicator", params)?;
            let descriptor = base_descriptor("document_deduplicator", OpType::Deduplicator, params);
            Ok(OpKind::Deduplicator(Arc::new(ExactDeduplicator {
                descriptor,
                key: ExactKey::TextHash,
            })))
        },
    );
    registry.register(
        "image_deduplicator",
        OpType::Deduplicator,
        "Document-level dedup by exact matching of media files between documents",
        vec![],
        |params| {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct NoParams {}
            let _: NoParams = parse_params("image_deduplicator", params)?;
            let mut descriptor =
                base_descriptor("image_deduplicator", OpType::Deduplicator, params);
            descriptor.resource_tags = vec!["images".to_string()];
            Ok(OpKind::Deduplicator(Arc::new(ExactDeduplicator {
                descriptor,
                key: ExactKey::MediaFileHash,
            })))
        },
    );
}

// ---------------------------------------------------------------------
// synthetic corpora

/// Planted near-duplicate corpora with known cluster structure, for
/// calibration runs and oracle-backed tests.
pub mod synth {
    use rand::Rng;

    use crate::sample::Sample;

    /// Build `total_docs` documents of `tokens_per_doc` words each, the
    /// first `clusters * cluster_size` of them forming `clusters` groups
    /// of near-duplicates (a fresh suffix of `replaced_suffix` words per
    /// member keeps within-cluster shingle Jaccard high, around 0.85-0.95
    /// for 60-token docs). Non-cluster docs use disjoint vocabulary, so
    /// cross-cluster similarity is ~0. Returns the documents and the
    /// planted cluster memberships (by ordinal).
    pub fn planted_corpus<R: Rng>(
        rng: &mut R,
        total_docs: usize,
        clusters: usize,
        cluster_size: usize,
        tokens_per_doc: usize,
        replaced_suffix: usize,
    ) -> (Vec<Sample>, Vec<Vec<usize>>) {
        assert!(clusters * cluster_size <= total_docs);
        assert!(replaced_suffix < tokens_per_doc);
        let mut fresh = 0u64;
        let mut fresh_word = move || {
            fresh += 1;
            format!("u{fresh}")
        };

        let mut docs: Vec<Vec<String>> = Vec::with_capacity(total_docs);
        let mut planted: Vec<Vec<usize>> = Vec::with_capacity(clusters);
        for _ in 0..clusters {
            let base: Vec<String> = (0..tokens_per_doc)
                .map(|_| format!("c{}", rng.gen_range(0..50_000)))
                .collect();
            let mut members = Vec::with_capacity(cluster_size);
            for _ in 0..cluster_size {
                let mut doc = base.clone();
                let start = tokens_per_doc - replaced_suffix;
                for slot in doc.iter_mut().skip(start) {
                    *slot = fresh_word();
                }
                members.push(docs.len());
                docs.push(doc);
            }
            planted.push(members);
        }
        while docs.len() < total_docs {
            docs.push((0..tokens_per_doc).map(|_| fresh_word()).collect());
        }
        let samples = docs
            .into_iter()
            .map(|words| Sample::from_text(words.join(" ")))
            .collect();
        (samples, planted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn config(threshold: f64, perms: usize, shingle_size: usize) -> DedupConfig {
        DedupConfig::new(threshold, perms, shingle_size, 42).unwrap()
    }

    #[test]
    fn shingle_examples() {
        let set = shingle("a b c", 2);
        assert_eq!(
            set,
            HashSet::from(["a b".to_string(), "b c".to_string()])
        );
        // Fewer than k tokens: singleton of the whole sequence.
        assert_eq!(shingle("one two", 5), HashSet::from(["one two".to_string()]));
        // Identical texts give identical sets; case and spacing collapse.
        assert_eq!(shingle("A  B\tc", 2), shingle("a b c", 2));
        assert!(shingle("", 3).is_empty());
    }

    #[test]
    fn band_selection_tracks_threshold() {
        let (b, r) = select_bands(256, 0.7);
        assert_eq!(b * r, 256);
        // Exhaustive check of the objective for every valid layout.
        let chosen = ((1.0 / b as f64).powf(1.0 / r as f64) - 0.7).abs();
        for bands in 1..=256 {
            if 256 % bands == 0 {
                let rows = 256 / bands;
                let err = ((1.0 / bands as f64).powf(1.0 / rows as f64) - 0.7).abs();
                assert!(chosen <= err + 1e-12);
            }
        }
    }

    #[test]
    fn identical_shingle_sets_have_identical_signatures() {
        let cfg = config(0.7, 128, 2);
        let a = compute_signature(&shingle("the quick brown fox", 2), 0, &cfg);
        let b = compute_signature(&shingle("the quick brown fox", 2), 1, &cfg);
        assert_eq!(a.minhash_values, b.minhash_values);
        assert!((a.agreement(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn signatures_are_seed_deterministic() {
        let cfg = config(0.7, 64, 2);
        let s1 = compute_signature(&shingle("alpha beta gamma delta", 2), 0, &cfg);
        let s2 = compute_signature(&shingle("alpha beta gamma delta", 2), 0, &cfg);
        assert_eq!(s1, s2);
        let other_seed = DedupConfig::new(0.7, 64, 2, 43).unwrap();
        let s3 = compute_signature(&shingle("alpha beta gamma delta", 2), 0, &other_seed);
        assert_ne!(s1.minhash_values, s3.minhash_values);
    }

    /// Monte-Carlo oracle: disjoint sets should almost never agree.
    #[test]
    fn disjoint_sets_rarely_agree() {
        let cfg = config(0.7, 256, 1);
        let mut rng = StdRng::seed_from_u64(7);
        let mut total = 0.0;
        for pair in 0..100 {
            let a: HashSet<String> = (0..30).map(|i| format!("a{pair}_{i}")).collect();
            let b: HashSet<String> = (0..30).map(|i| format!("b{pair}_{i}")).collect();
            let _ = rng.gen::<u64>();
            let sa = compute_signature(&a, 0, &cfg);
            let sb = compute_signature(&b, 1, &cfg);
            total += sa.agreement(&sb);
        }
        assert!(total / 100.0 < 0.05, "mean agreement {} too high", total / 100.0);
    }

    /// Constructed sets with exact Jaccard 0.5, e.g. {x,y,z} vs {y,z,w}
    /// extended: agreement must estimate 0.5 within 0.1 at 256 perms.
    #[test]
    fn half_similar_sets_agree_about_half() {
        let cfg = config(0.7, 256, 1);
        let mut total = 0.0;
        let trials = 50;
        for t in 0..trials {
            // 20 shared, 10 unique each side: J = 20/40 = 0.5.
            let shared: Vec<String> = (0..20).map(|i| format!("s{t}_{i}")).collect();
            let a: HashSet<String> = shared
                .iter()
                .cloned()
                .chain((0..10).map(|i| format!("a{t}_{i}")))
                .collect();
            let b: HashSet<String> = shared
                .iter()
                .cloned()
                .chain((0..10).map(|i| format!("b{t}_{i}")))
                .collect();
            assert!((jaccard(&a, &b) - 0.5).abs() < 1e-12);
            let sa = compute_signature(&a, 0, &cfg);
            let sb = compute_signature(&b, 1, &cfg);
            total += sa.agreement(&sb);
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() < 0.1, "mean agreement {mean}");
    }

    #[test]
    fn identical_signatures_are_candidates_and_distinct_are_not() {
        let cfg = config(0.7, 64, 2);
        let dup = shingle("same exact words in this document", 2);
        let other = shingle("completely different content here entirely", 2);
        let signatures = vec![
            compute_signature(&dup, 0, &cfg),
            compute_signature(&dup, 1, &cfg),
            compute_signature(&other, 2, &cfg),
        ];
        let pairs = band_and_bucket(&signatures, &cfg);
        assert_eq!(pairs, vec![(0, 1)]);
    }

    #[test]
    fn empty_docs_never_collide() {
        let cfg = config(0.7, 64, 2);
        let signatures = vec![
            compute_signature(&HashSet::new(), 0, &cfg),
            compute_signature(&HashSet::new(), 1, &cfg),
        ];
        assert!(signatures[0].is_empty_doc());
        assert!(band_and_bucket(&signatures, &cfg).is_empty());
    }

    #[test]
    fn planted_pairs_all_become_candidates() {
        // 100 docs with 10 planted near-duplicate pairs at J >= 0.8;
        // the brute-force all-pairs oracle defines the expected pairs.
        let mut rng = StdRng::seed_from_u64(42);
        let (samples, _) = synth::planted_corpus(&mut rng, 100, 10, 2, 60, 4);
        let cfg = config(0.7, 256, 3);
        let shingles: Vec<HashSet<String>> = samples
            .iter()
            .map(|s| shingle(&s.text, cfg.shingle_size))
            .collect();

        let mut oracle_pairs = Vec::new();
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let j_sim = jaccard(&shingles[i], &shingles[j]);
                if j_sim >= 0.8 {
                    oracle_pairs.push((i, j));
                }
            }
        }
        assert_eq!(oracle_pairs.len(), 10, "generator should plant 10 pairs");

        let signatures: Vec<Signature> = shingles
            .iter()
            .enumerate()
            .map(|(i, s)| compute_signature(s, i, &cfg))
            .collect();
        let candidates = band_and_bucket(&signatures, &cfg);
        for pair in &oracle_pairs {
            assert!(candidates.contains(pair), "missing candidate {pair:?}");
        }
    }

    #[test]
    fn union_find_component_examples() {
        // Edges (1,2),(2,3),(5,6) over 0..=6: components {1,2,3},{5,6}.
        let mut forest = union_candidates(&[(1, 2), (2, 3), (5, 6)], 7, None);
        assert_eq!(forest.clusters(), vec![vec![1, 2, 3], vec![5, 6]]);
        // Empty edge set: all singletons.
        let mut empty = union_candidates(&[], 5, None);
        assert!(empty.clusters().is_empty());
    }

    #[test]
    fn union_find_matches_bfs_oracle_on_random_edges() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 60usize;
            let edges: Vec<(usize, usize)> = (0..50)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
                .filter(|(a, b)| a != b)
                .map(|(a, b)| (a.min(b), a.max(b)))
                .collect();
            let mut forest = union_candidates(&edges, n, None);

            // BFS oracle over the same graph.
            let mut adjacency = vec![Vec::new(); n];
            for (a, b) in &edges {
                adjacency[*a].push(*b);
                adjacency[*b].push(*a);
            }
            let mut component = vec![usize::MAX; n];
            let mut next = 0usize;
            for start in 0..n {
                if component[start] != usize::MAX {
                    continue;
                }
                let mut queue = vec![start];
                component[start] = next;
                while let Some(node) = queue.pop() {
                    for neighbor in &adjacency[node] {
                        if component[*neighbor] == usize::MAX {
                            component[*neighbor] = next;
                            queue.push(*neighbor);
                        }
                    }
                }
                next += 1;
            }
            for a in 0..n {
                for b in 0..n {
                    assert_eq!(
                        forest.connected(a, b),
                        component[a] == component[b],
                        "({a},{b})"
                    );
                }
            }
        }
    }

    #[test]
    fn find_is_idempotent_and_compressed() {
        let mut forest = UnionFind::new(8);
        for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 4)] {
            forest.union(a, b);
        }
        let root = forest.find(4);
        assert_eq!(forest.find(4), root);
        for x in 0..5 {
            forest.find(x);
            // After compression, each node is at most 1 hop from its root.
            assert_eq!(forest.parent[forest.parent[x]], forest.parent[x]);
        }
    }

    #[test]
    fn dedup_pass_on_identical_docs() {
        let cfg = config(0.7, 128, 2);
        let doc = "repeated document body with several words";
        let samples = vec![
            Sample::from_text(doc),
            Sample::from_text(doc),
            Sample::from_text(doc),
        ];
        let (kept, report) = dedup_pass(&samples, &cfg, KeepPolicy::First);
        assert_eq!(kept.len(), 1);
        assert_eq!(report.clusters, vec![vec![0, 1, 2]]);
        assert_eq!(report.removed, 2);
    }

    #[test]
    fn dedup_pass_on_unique_corpus_is_identity() {
        let cfg = config(0.7, 128, 2);
        let samples: Vec<Sample> = (0..30)
            .map(|i| Sample::from_text(format!("unique document number {i} about topic {}", i * 31)))
            .collect();
        let (kept, report) = dedup_pass(&samples, &cfg, KeepPolicy::First);
        assert_eq!(kept.len(), samples.len());
        assert!(report.clusters.is_empty());
        assert_eq!(report.removed, 0);
    }

    #[test]
    fn keep_longest_selects_longest_representative() {
        let cfg = config(0.5, 128, 2);
        let samples = vec![
            Sample::from_text("shared words one two three"),
            Sample::from_text("shared words one two three four five"),
        ];
        let (kept, _) = dedup_pass(&samples, &cfg, KeepPolicy::Longest);
        assert_eq!(kept.len(), 1);
        assert!(kept[0].text.ends_with("four five"));
    }

    /// Brute-force all-pairs clustering oracle; verify=true must match it.
    #[test]
    fn dedup_pass_matches_all_pairs_oracle() {
        let mut rng = StdRng::seed_from_u64(9);
        let (samples, _) = synth::planted_corpus(&mut rng, 200, 12, 3, 60, 4);
        let cfg = config(0.7, 256, 3);
        let shingles: Vec<HashSet<String>> = samples
            .iter()
            .map(|s| shingle(&s.text, cfg.shingle_size))
            .collect();
        let mut oracle = UnionFind::new(samples.len());
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                if jaccard(&shingles[i], &shingles[j]) >= cfg.jaccard_threshold {
                    oracle.union(i, j);
                }
            }
        }
        let oracle_clusters = oracle.clusters();
        let (_, report) = dedup_pass(&samples, &cfg, KeepPolicy::First);
        assert_eq!(report.clusters, oracle_clusters);
    }

    #[test]
    fn sharded_dedup_equals_single_pass() {
        let mut rng = StdRng::seed_from_u64(21);
        let (samples, _) = synth::planted_corpus(&mut rng, 120, 8, 2, 50, 3);
        let cfg = config(0.7, 128, 3);
        let (single, single_report) = dedup_pass(&samples, &cfg, KeepPolicy::First);

        // Duplicates land in different parts; clusters must still form.
        let parts: Vec<Vec<Sample>> = samples.chunks(37).map(|c| c.to_vec()).collect();
        for shards in [1usize, 2, 4, 8] {
            let (sharded, report) = sharded_dedup(&parts, &cfg, shards, KeepPolicy::First);
            assert_eq!(sharded, single, "shard_count={shards}");
            assert_eq!(report.clusters, single_report.clusters);
        }
    }

    #[test]
    fn exact_dedup_examples() {
        let samples = vec![
            Sample::from_text("same"),
            Sample::from_text("same"),
            Sample::from_text("different"),
        ];
        let (kept, removed) = exact_dedup(&samples, ExactKey::TextHash).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(removed, 1);

        let (kept, removed) = exact_dedup(&[], ExactKey::TextHash).unwrap();
        assert!(kept.is_empty());
        assert_eq!(removed, 0);
    }

    #[test]
    fn exact_media_dedup_drops_second_reference() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.png");
        std::fs::write(&img, crate::media::synth::png_bytes(8, 8)).unwrap();
        let other = dir.path().join("other.png");
        std::fs::write(&other, crate::media::synth::png_bytes(9, 9)).unwrap();

        let mut first = Sample::from_text("<__dj__image>");
        first.images = vec![img.to_string_lossy().to_string()];
        let mut second = Sample::from_text("<__dj__image>");
        second.images = vec![img.to_string_lossy().to_string()];
        let mut third = Sample::from_text("<__dj__image>");
        third.images = vec![other.to_string_lossy().to_string()];

        let (kept, removed) =
            exact_dedup(&[first, second, third], ExactKey::MediaFileHash).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(removed, 1);
    }

    #[test]
    fn report_serializes_with_expected_shape() {
        let cfg = config(0.7, 16, 2);
        let report = DedupReport {
            clusters: vec![vec![0, 4]],
            removed: 1,
            config: cfg,
        };
        let value = serde_json::to_value(&report).unwrap();
        assert_eq!(value["clusters"], serde_json::json!([[0, 4]]));
        assert_eq!(value["removed"], serde_json::json!(1));
        assert!(value["config"].is_object());
    }
}
