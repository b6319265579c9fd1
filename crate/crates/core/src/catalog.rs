//! Rule-based operators: text stats, media-header stats, chunking and
//! selection.
//!
//! Every filter is a pure function of (sample, params): it writes its
//! stats first and drops by threshold second. Media filters read container
//! headers only — no pixel decoding — and issue batch-level reads
//! through the context caches so fused filters share one read per file.

use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;

use crate::ops::registry::{base_descriptor, parse_params, ParamSpec, Registry};
use crate::ops::{
    Batch, BatchCtx, ConcatTextAggregator, CountAggregator, FilterOp, Grouper, MapperOp,
    OpDescriptor, OpError, OpKind, OpType, ParamMap, SelectorOp,
};
use crate::sample::Sample;
use crate::schema::Modality;

pub mod stat_keys {
    pub const TEXT_LEN: &str = "text_len";
    pub const CHAR_REP_RATIO: &str = "char_rep_ratio";
    pub const IMAGE_WIDTHS: &str = "image_widths";
    pub const IMAGE_HEIGHTS: &str = "image_heights";
    pub const IMAGE_SIZES: &str = "image_sizes";
    pub const AUDIO_SIZES: &str = "audio_sizes";
    pub const ASPECT_RATIOS: &str = "aspect_ratios";
}

/// An optional [min, max] window; an absent bound is unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatRange {
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl StatRange {
    pub fn new(min: Option<f64>, max: Option<f64>) -> Result<Self, String> {
        if let (Some(lo), Some(hi)) = (min, max) {
            if lo > hi {
                return Err(format!("min {lo} exceeds max {hi}"));
            }
        }
        Ok(StatRange { min, max })
    }

    pub fn unbounded() -> Self {
        StatRange {
            min: None,
            max: None,
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.min.is_none_or(|lo| value >= lo) && self.max.is_none_or(|hi| value <= hi)
    }
}

/// Multi-media keep semantics: `all` media must pass (default) or `any`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnyOrAll {
    #[default]
    All,
    Any,
}

impl AnyOrAll {
    /// Vacuous truth: a sample without media passes media filters.
    fn passes(self, verdicts: &[bool]) -> bool {
        match self {
            AnyOrAll::All => verdicts.iter().all(|v| *v),
            AnyOrAll::Any => verdicts.is_empty() || verdicts.iter().any(|v| *v),
        }
    }
}

fn range_err(op: &str, message: String) -> OpError {
    OpError::ParamValidation {
        op: op.to_string(),
        message,
    }
}

// ---------------------------------------------------------------------
// text_length_filter

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextLengthConfig {
    min_len: Option<f64>,
    max_len: Option<f64>,
}

pub struct TextLengthFilter {
    descriptor: OpDescriptor,
    range: StatRange,
}

impl TextLengthFilter {
    fn build(params: &ParamMap) -> Result<OpKind, OpError> {
        let name = "text_length_filter";
        let config: TextLengthConfig = parse_params(name, params)?;
        let range = StatRange::new(config.min_len, config.max_len)
            .map_err(|m| range_err(name, m))?;
        let mut descriptor = base_descriptor(name, OpType::Filter, params);
        descriptor.commutative_filter = true;
        descriptor.stat_keys = vec![stat_keys::TEXT_LEN.to_string()];
        Ok(OpKind::Filter(Arc::new(TextLengthFilter {
            descriptor,
            range,
        })))
    }
}

impl FilterOp for TextLengthFilter {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn stat_keys(&self) -> Vec<String> {
        vec![stat_keys::TEXT_LEN.to_string()]
    }

    fn compute_stats(&self, sample: &mut Sample, _ctx: &mut BatchCtx) -> Result<(), OpError> {
        let len = sample.text.chars().count();
        sample.set_stat(stat_keys::TEXT_LEN, len);
        Ok(())
    }

    fn keep(&self, sample: &Sample) -> Result<bool, OpError> {
        Ok(self
            .range
            .contains(sample.stat_f64(stat_keys::TEXT_LEN).unwrap_or(0.0)))
    }
}

// ---------------------------------------------------------------------
// character_repetition_filter

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CharRepetitionConfig {
    #[serde(default = "default_ngram_len")]
    ngram_len: usize,
    #[serde(default = "default_max_ratio")]
    max_ratio: f64,
}

fn default_ngram_len() -> usize {
    3
}

fn default_max_ratio() -> f64 {
    1.0
}

pub struct CharacterRepetitionFilter {
    descriptor: OpDescriptor,
    ngram_len: usize,
    max_ratio: f64,
}

impl CharacterRepetitionFilter {
    fn build(params: &ParamMap) -> Result<OpKind, OpError> {
        let name = "character_repetition_filter";
        let config: CharRepetitionConfig = parse_params(name, params)?;
        if config.ngram_len < 1 {
            return Err(range_err(name, "ngram_len must be >= 1".to_string()));
        }
        let mut descriptor = base_descriptor(name, OpType::Filter, params);
        descriptor.commutative_filter = true;
        descriptor.stat_keys = vec![stat_keys::CHAR_REP_RATIO.to_string()];
        Ok(OpKind::Filter(Arc::new(CharacterRepetitionFilter {
            descriptor,
            ngram_len: config.ngram_len,
            max_ratio: config.max_ratio,
        })))
    }

    /// Ratio of the most frequent character n-gram's coverage:
    /// occurrences × n / max(1, char count), capped at 1.0 since
    /// overlapping occurrences can otherwise push coverage past the
    /// text length.
    fn repetition_ratio(&self, text: &str) -> f64 {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() < self.ngram_len || chars.is_empty() {
            return 0.0;
        }
        let mut counts: std::collections::HashMap<&[char], u32> = std::collections::HashMap::new();
        for window in chars.windows(self.ngram_len) {
            *counts.entry(window).or_insert(0) += 1;
        }
        let top = counts.values().copied().max().unwrap_or(0) as f64;
        let ratio = top * self.ngram_len as f64 / chars.len().max(1) as f64;
        ratio.min(1.0)
    }
}

impl FilterOp for CharacterRepetitionFilter {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn stat_keys(&self) -> Vec<String> {
        vec![stat_keys::CHAR_REP_RATIO.to_string()]
    }

    fn compute_stats(&self, sample: &mut Sample, _ctx: &mut BatchCtx) -> Result<(), OpError> {
        let ratio = self.repetition_ratio(&sample.text);
        sample.set_stat(stat_keys::CHAR_REP_RATIO, ratio);
        Ok(())
    }

    fn keep(&self, sample: &Sample) -> Result<bool, OpError> {
        Ok(sample
            .stat_f64(stat_keys::CHAR_REP_RATIO)
            .unwrap_or(0.0)
            <= self.max_ratio)
    }
}

// ---------------------------------------------------------------------
// media filters

/// Issue the batch's media reads up front, a few paths per thread, and
/// land the results in the context caches. Per-sample stat computation
/// then only hits the cache, so verdicts stay ordered by ordinal.
fn prefetch_media(
    batch: &Batch,
    ctx: &mut BatchCtx,
    modality: Modality,
    want_dims: bool,
) -> Result<(), OpError> {
    let mut paths: Vec<String> = batch
        .samples
        .iter()
        .flat_map(|s| s.media_paths(modality).iter().cloned())
        .collect();
    paths.sort();
    paths.dedup();
    paths.retain(|p| {
        if want_dims {
            !ctx.dims_cache.contains_key(p)
        } else {
            !ctx.size_cache.contains_key(p)
        }
    });
    if paths.is_empty() {
        return Ok(());
    }
    let threads = ctx.io_threads.clamp(1, paths.len());
    let results: Vec<Vec<(String, _)>> = if threads <= 1 {
        vec![paths
            .iter()
            .map(|p| (p.clone(), read_media(p, want_dims)))
            .collect()]
    } else {
        std::thread::scope(|scope| {
            paths
                .chunks(paths.len().div_ceil(threads))
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|p| (p.clone(), read_media(p, want_dims)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().expect("media prefetch thread"))
                .collect()
        })
    };
    for (path, outcome) in results.into_iter().flatten() {
        ctx.media_reads += 1;
        match outcome {
            MediaRead::Dims(r) => {
                ctx.dims_cache.insert(path, r);
            }
            MediaRead::Size(r) => {
                ctx.size_cache.insert(path, r);
            }
        }
    }
    Ok(())
}

enum MediaRead {
    Dims(Result<crate::media::MediaDims, crate::media::MediaError>),
    Size(Result<u64, crate::media::MediaError>),
}

fn read_media(path: &str, want_dims: bool) -> MediaRead {
    let p = std::path::Path::new(path);
    if want_dims {
        MediaRead::Dims(crate::media::image_dimensions(p))
    } else {
        MediaRead::Size(crate::media::file_size(p))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageShapeConfig {
    min_width: Option<f64>,
    max_width: Option<f64>,
    min_height: Option<f64>,
    max_height: Option<f64>,
    #[serde(default)]
    any_or_all: AnyOrAll,
}

pub struct ImageShapeFilter {
    descriptor: OpDescriptor,
    width: StatRange,
    height: StatRange,
    mode: AnyOrAll,
}

impl ImageShapeFilter {
    fn build(params: &ParamMap) -> Result<OpKind, OpError> {
        let name = "image_shape_filter";
        let config: ImageShapeConfig = parse_params(name, params)?;
        let width = StatRange::new(config.min_width, config.max_width)
            .map_err(|m| range_err(name, m))?;
        let height = StatRange::new(config.min_height, config.max_height)
            .map_err(|m| range_err(name, m))?;
        let mut descriptor = base_descriptor(name, OpType::Filter, params);
        descriptor.commutative_filter = true;
        descriptor.resource_tags = vec!["images".to_string()];
        descriptor.stat_keys = vec![
            stat_keys::IMAGE_WIDTHS.to_string(),
            stat_keys::IMAGE_HEIGHTS.to_string(),
        ];
        Ok(OpKind::Filter(Arc::new(ImageShapeFilter {
            descriptor,
            width,
            height,
            mode: config.any_or_all,
        })))
    }
}

impl FilterOp for ImageShapeFilter {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn stat_keys(&self) -> Vec<String> {
        vec![
            stat_keys::IMAGE_WIDTHS.to_string(),
            stat_keys::IMAGE_HEIGHTS.to_string(),
        ]
    }

    fn prefetch(&self, batch: &Batch, ctx: &mut BatchCtx) -> Result<(), OpError> {
        prefetch_media(batch, ctx, Modality::Image, true)
    }

    fn compute_stats(&self, sample: &mut Sample, ctx: &mut BatchCtx) -> Result<(), OpError> {
        let mut widths = Vec::with_capacity(sample.images.len());
        let mut heights = Vec::with_capacity(sample.images.len());
        for path in &sample.images {
            let dims = ctx.dims(path).map_err(|e| OpError::media(0, e))?;
            widths.push(dims.width);
            heights.push(dims.height);
        }
        sample.set_stat(stat_keys::IMAGE_WIDTHS, widths);
        sample.set_stat(stat_keys::IMAGE_HEIGHTS, heights);
        Ok(())
    }

    fn keep(&self, sample: &Sample) -> Result<bool, OpError> {
        let widths = stat_list(sample, stat_keys::IMAGE_WIDTHS);
        let heights = stat_list(sample, stat_keys::IMAGE_HEIGHTS);
        let verdicts: Vec<bool> = widths
            .iter()
            .zip(&heights)
            .map(|(w, h)| self.width.contains(*w) && self.height.contains(*h))
            .collect();
        Ok(self.mode.passes(&verdicts))
    }
}

fn stat_list(sample: &Sample, key: &str) -> Vec<f64> {
    sample
        .stats
        .get(key)
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_f64).collect())
        .unwrap_or_default()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SizeConfig {
    min_size: Option<f64>,
    max_size: Option<f64>,
    #[serde(default)]
    any_or_all: AnyOrAll,
}

pub struct MediaSizeFilter {
    descriptor: OpDescriptor,
    modality: Modality,
    stat_key: &'static str,
    range: StatRange,
    mode: AnyOrAll,
}

impl MediaSizeFilter {
    fn build_for(
        name: &'static str,
        modality: Modality,
        stat_key: &'static str,
        tag: &str,
        params: &ParamMap,
    ) -> Result<OpKind, OpError> {
        let config: SizeConfig = parse_params(name, params)?;
        let range = StatRange::new(config.min_size, config.max_size)
            .map_err(|m| range_err(name, m))?;
        let mut descriptor = base_descriptor(name, OpType::Filter, params);
        descriptor.commutative_filter = true;
        descriptor.resource_tags = vec![tag.to_string()];
        descriptor.stat_keys = vec![stat_key.to_string()];
        Ok(OpKind::Filter(Arc::new(MediaSizeFilter {
            descriptor,
            modality,
            stat_key,
            range,
            mode: config.any_or_all,
        })))
    }
}

impl FilterOp for MediaSizeFilter {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn stat_keys(&self) -> Vec<String> {
        vec![self.stat_key.to_string()]
    }

    fn prefetch(&self, batch: &Batch, ctx: &mut BatchCtx) -> Result<(), OpError> {
        prefetch_media(batch, ctx, self.modality, false)
    }

    fn compute_stats(&self, sample: &mut Sample, ctx: &mut BatchCtx) -> Result<(), OpError> {
        let paths = sample.media_paths(self.modality).to_vec();
        let mut sizes = Vec::with_capacity(paths.len());
        for path in &paths {
            sizes.push(ctx.byte_size(path).map_err(|e| OpError::media(0, e))?);
        }
        sample.set_stat(self.stat_key, sizes);
        Ok(())
    }

    fn keep(&self, sample: &Sample) -> Result<bool, OpError> {
        let sizes = stat_list(sample, self.stat_key);
        let verdicts: Vec<bool> = sizes.iter().map(|s| self.range.contains(*s)).collect();
        Ok(self.mode.passes(&verdicts))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AspectRatioConfig {
    min_ratio: Option<f64>,
    max_ratio: Option<f64>,
    #[serde(default)]
    any_or_all: AnyOrAll,
}

pub struct ImageAspectRatioFilter {
    descriptor: OpDescriptor,
    range: StatRange,
    mode: AnyOrAll,
}

impl ImageAspectRatioFilter {
    fn build(params: &ParamMap) -> Result<OpKind, OpError> {
        let name = "image_aspect_ratio_filter";
        let config: AspectRatioConfig = parse_params(name, params)?;
        let range = StatRange::new(config.min_ratio, config.max_ratio)
            .map_err(|m| range_err(name, m))?;
        let mut descriptor = base_descriptor(name, OpType::Filter, params);
        descriptor.commutative_filter = true;
        descriptor.resource_tags = vec!["images".to_string()];
        descriptor.stat_keys = vec![stat_keys::ASPECT_RATIOS.to_string()];
        Ok(OpKind::Filter(Arc::new(ImageAspectRatioFilter {
            descriptor,
            range,
            mode: config.any_or_all,
        })))
    }
}

impl FilterOp for ImageAspectRatioFilter {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn stat_keys(&self) -> Vec<String> {
        vec![stat_keys::ASPECT_RATIOS.to_string()]
    }

    fn prefetch(&self, batch: &Batch, ctx: &mut BatchCtx) -> Result<(), OpError> {
        prefetch_media(batch, ctx, Modality::Image, true)
    }

    fn compute_stats(&self, sample: &mut Sample, ctx: &mut BatchCtx) -> Result<(), OpError> {
        let mut ratios = Vec::with_capacity(sample.images.len());
        for path in &sample.images {
            let dims = ctx.dims(path).map_err(|e| OpError::media(0, e))?;
            ratios.push(dims.aspect_ratio());
        }
        sample.set_stat(stat_keys::ASPECT_RATIOS, ratios);
        Ok(())
    }

    fn keep(&self, sample: &Sample) -> Result<bool, OpError> {
        let ratios = stat_list(sample, stat_keys::ASPECT_RATIOS);
        let verdicts: Vec<bool> = ratios.iter().map(|r| self.range.contains(*r)).collect();
        Ok(self.mode.passes(&verdicts))
    }
}

// ---------------------------------------------------------------------
// mappers

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextChunkConfig {
    max_chars: usize,
    #[serde(default)]
    overlap_chars: usize,
}

pub struct TextChunkMapper {
    descriptor: OpDescriptor,
    max_chars: usize,
    overlap_chars: usize,
}

impl TextChunkMapper {
    fn build(params: &ParamMap) -> Result<OpKind, OpError> {
        let name = "text_chunk_mapper";
        let config: TextChunkConfig = parse_params(name, params)?;
        if config.max_chars <= config.overlap_chars {
            return Err(range_err(
                name,
                format!(
                    "max_chars ({}) must exceed overlap_chars ({})",
                    config.max_chars, config.overlap_chars
                ),
            ));
        }
        let descriptor = base_descriptor(name, OpType::Mapper, params);
        Ok(OpKind::Mapper(Arc::new(TextChunkMapper {
            descriptor,
            max_chars: config.max_chars,
            overlap_chars: config.overlap_chars,
        })))
    }
}

impl MapperOp for TextChunkMapper {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn map(&self, sample: Sample, _ctx: &mut BatchCtx) -> Result<Vec<Sample>, OpError> {
        let chars: Vec<char> = sample.text.chars().collect();
        if chars.len() <= self.max_chars {
            return Ok(vec![sample]);
        }
        let step = self.max_chars - self.overlap_chars;
        let mut out = Vec::new();
        let mut start = 0usize;
        // Chunk k starts at k*step; the last chunk may be short.
        while start < chars.len() {
            let end = (start + self.max_chars).min(chars.len());
            let mut chunk = sample.clone();
            chunk.text = chars[start..end].iter().collect();
            out.push(chunk);
            start += step;
        }
        Ok(out)
    }
}

pub struct WhitespaceNormalizationMapper {
    descriptor: OpDescriptor,
}

impl WhitespaceNormalizationMapper {
    fn build(params: &ParamMap) -> Result<OpKind, OpError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct NoParams {}
        let _: NoParams = parse_params("whitespace_normalization_mapper", params)?;
        let descriptor =
            base_descriptor("whitespace_normalization_mapper", OpType::Mapper, params);
        Ok(OpKind::Mapper(Arc::new(WhitespaceNormalizationMapper {
            descriptor,
        })))
    }
}

impl MapperOp for WhitespaceNormalizationMapper {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn map(&self, mut sample: Sample, _ctx: &mut BatchCtx) -> Result<Vec<Sample>, OpError> {
        sample.text = sample
            .text
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        Ok(vec![sample])
    }
}

// ---------------------------------------------------------------------
// range_selector

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RangeSelectorConfig {
    stat_key: String,
    top_k: Option<usize>,
    /// Fraction in (0, 1]: keep the top ceil(n * top_ratio) samples.
    top_ratio: Option<f64>,
}

pub struct RangeSelector {
    descriptor: OpDescriptor,
    stat_key: String,
    top_k: Option<usize>,
    top_ratio: Option<f64>,
}

impl RangeSelector {
    fn build(params: &ParamMap) -> Result<OpKind, OpError> {
        let name = "range_selector";
        let config: RangeSelectorConfig = parse_params(name, params)?;
        match (config.top_k, config.top_ratio) {
            (None, None) => {
                return Err(range_err(name, "one of top_k / top_ratio required".to_string()))
            }
            (Some(_), Some(_)) => {
                return Err(range_err(name, "top_k and top_ratio are exclusive".to_string()))
            }
            (_, Some(r)) if !(0.0..=1.0).contains(&r) || r == 0.0 => {
                return Err(range_err(name, "top_ratio must be in (0, 1]".to_string()))
            }
            _ => {}
        }
        let descriptor = base_descriptor(name, OpType::Selector, params);
        Ok(OpKind::Selector(Arc::new(RangeSelector {
            descriptor,
            stat_key: config.stat_key,
            top_k: config.top_k,
            top_ratio: config.top_ratio,
        })))
    }
}

impl SelectorOp for RangeSelector {
    fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    fn select(&self, samples: Vec<Sample>) -> Result<Vec<Sample>, OpError> {
        let mut keyed = Vec::with_capacity(samples.len());
        for (ordinal, sample) in samples.iter().enumerate() {
            let value = sample.stat_f64(&self.stat_key).ok_or(OpError::MissingStat {
                stat: self.stat_key.clone(),
                ordinal,
            })?;
            keyed.push((ordinal, value));
        }
        let k = match (self.top_k, self.top_ratio) {
            (Some(k), _) => k,
            (None, Some(r)) => ((samples.len() as f64) * r).ceil() as usize,
            (None, None) => unreachable!("validated at build"),
        };
        if k >= samples.len() {
            return Ok(samples);
        }
        // Largest stat first; ties broken by original ordinal, ascending.
        keyed.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut chosen: Vec<usize> = keyed.into_iter().take(k).map(|(i, _)| i).collect();
        chosen.sort_unstable();
        let mut chosen_iter = chosen.into_iter().peekable();
        Ok(samples
            .into_iter()
            .enumerate()
            .filter(|(i, _)| {
                if chosen_iter.peek() == Some(i) {
                    chosen_iter.next();
                    true
                } else {
                    false
                }
            })
            .map(|(_, s)| s)
            .collect())
    }
}

// ---------------------------------------------------------------------
// grouper / aggregator factories

fn build_naive_grouper(params: &ParamMap) -> Result<OpKind, OpError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct NoParams {}
    let _: NoParams = parse_params("naive_grouper", params)?;
    Ok(OpKind::Grouper(Grouper::naive()))
}

fn build_key_value_grouper(params: &ParamMap) -> Result<OpKind, OpError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct KvParams {
        group_by_key: String,
    }
    let config: KvParams = parse_params("key_value_grouper", params)?;
    Ok(OpKind::Grouper(Grouper::key_value(config.group_by_key)))
}

// ---------------------------------------------------------------------
// public factories used by other modules' tests

pub fn image_shape_filter_from(params: &ParamMap) -> Result<OpKind, OpError> {
    ImageShapeFilter::build(params)
}

pub fn image_aspect_ratio_filter_from(params: &ParamMap) -> Result<OpKind, OpError> {
    ImageAspectRatioFilter::build(params)
}

pub fn text_length_filter_from(params: &ParamMap) -> Result<OpKind, OpError> {
    TextLengthFilter::build(params)
}

/// Register the whole rule-based catalog.
pub fn register_all(registry: &mut Registry) {
    registry.register(
        "text_length_filter",
        OpType::Filter,
        "Keep samples whose text length (characters) is within the range",
        vec![
            ParamSpec::new("min_len", "number", None, "minimum character count"),
            ParamSpec::new("max_len", "number", None, "maximum character count"),
        ],
        TextLengthFilter::build,
    );
    registry.register(
        "character_repetition_filter",
        OpType::Filter,
        "Keep samples whose most frequent character n-gram covers at most max_ratio of the text",
        vec![
            ParamSpec::new("ngram_len", "integer", Some(Value::from(3)), "n-gram length"),
            ParamSpec::new("max_ratio", "number", Some(Value::from(1.0)), "coverage cap"),
        ],
        CharacterRepetitionFilter::build,
    );
    registry.register(
        "image_shape_filter",
        OpType::Filter,
        "Keep samples whose image widths and heights are within the ranges",
        vec![
            ParamSpec::new("min_width", "number", None, "minimum width"),
            ParamSpec::new("max_width", "number", None, "maximum width"),
            ParamSpec::new("min_height", "number", None, "minimum height"),
            ParamSpec::new("max_height", "number", None, "maximum height"),
            ParamSpec::new("any_or_all", "any|all", Some(Value::from("all")), "keep mode"),
        ],
        ImageShapeFilter::build,
    );
    registry.register(
        "image_size_filter",
        OpType::Filter,
        "Keep samples whose image file sizes in bytes are within the range",
        vec![
            ParamSpec::new("min_size", "number", None, "minimum bytes"),
            ParamSpec::new("max_size", "number", None, "maximum bytes"),
            ParamSpec::new("any_or_all", "any|all", Some(Value::from("all")), "keep mode"),
        ],
        |params| {
            MediaSizeFilter::build_for(
                "image_size_filter",
                Modality::Image,
                stat_keys::IMAGE_SIZES,
                "images",
                params,
            )
        },
    );
    registry.register(
        "audio_size_filter",
        OpType::Filter,
        "Keep samples whose audio file sizes in bytes are within the range",
        vec![
            ParamSpec::new("min_size", "number", None, "minimum bytes"),
            ParamSpec::new("max_size", "number", None, "maximum bytes"),
            ParamSpec::new("any_or_all", "any|all", Some(Value::from("all")), "keep mode"),
        ],
        |params| {
            MediaSizeFilter::build_for(
                "audio_size_filter",
                Modality::Audio,
                stat_keys::AUDIO_SIZES,
                "audios",
                params,
            )
        },
    );
    registry.register(
        "image_aspect_ratio_filter",
        OpType::Filter,
        "Keep samples whose image aspect ratios (w/h) are within the range",
        vec![
            ParamSpec::new("min_ratio", "number", None, "minimum ratio"),
            ParamSpec::new("max_ratio", "number", None, "maximum ratio"),
            ParamSpec::new("any_or_all", "any|all", Some(Value::from("all")), "keep mode"),
        ],
        ImageAspectRatioFilter::build,
    );
    registry.register(
        "text_chunk_mapper",
        OpType::Mapper,
        "Split text into chunks of max_chars with overlap_chars of overlap",
        vec![
            ParamSpec::new("max_chars", "integer", None, "chunk size in characters"),
            ParamSpec::new("overlap_chars", "integer", Some(Value::from(0)), "overlap"),
        ],
        TextChunkMapper::build,
    );
    registry.register(
        "whitespace_normalization_mapper",
        OpType::Mapper,
        "Collapse whitespace runs to single spaces and trim the ends",
        vec![],
        WhitespaceNormalizationMapper::build,
    );
    registry.register(
        "range_selector",
        OpType::Selector,
        "Retain the top-k samples by a stat, preserving original order",
        vec![
            ParamSpec::new("stat_key", "string", None, "stat to rank by"),
            ParamSpec::new("top_k", "integer", None, "how many to keep"),
            ParamSpec::new("top_ratio", "number", None, "fraction to keep, (0,1]"),
        ],
        RangeSelector::build,
    );
    registry.register(
        "naive_grouper",
        OpType::Grouper,
        "Group all samples to one batched sample",
        vec![],
        build_naive_grouper,
    );
    registry.register(
        "key_value_grouper",
        OpType::Grouper,
        "Group samples to batched samples by the values of a meta key",
        vec![ParamSpec::new("group_by_key", "string", None, "meta key to group by")],
        build_key_value_grouper,
    );
    registry.register(
        "count_aggregator",
        OpType::Aggregator,
        "Reduce each batched sample to one sample with meta.count",
        vec![],
        |params| {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct NoParams {}
            let _: NoParams = parse_params("count_aggregator", params)?;
            Ok(OpKind::Aggregator(Arc::new(CountAggregator::new())))
        },
    );
    registry.register(
        "concat_text_aggregator",
        OpType::Aggregator,
        "Reduce each batched sample to one sample with concatenated text",
        vec![],
        |params| {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct NoParams {}
            let _: NoParams = parse_params("concat_text_aggregator", params)?;
            Ok(OpKind::Aggregator(Arc::new(ConcatTextAggregator::new())))
        },
    );
}
