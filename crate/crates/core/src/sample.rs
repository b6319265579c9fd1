//! The sample record: one line of a JSONL dataset.
//!
//! A sample carries pretraining text with embedded media tokens, optional
//! post-tuning dialog fields, ordered media path lists, and two maps:
//! `meta` (source metadata and tags) and `stats` (values written by
//! Filters). Unknown top-level fields survive the pipeline verbatim in
//! `extra`; dropping them would corrupt user data.
//!
//! Serialization is canonical: known fields in a fixed order, empty fields
//! omitted, map keys sorted. `parse(serialize(s)) == s` for every sample,
//! and `serialize(parse(line)) == line` byte-for-byte for any line this
//! crate exported.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Meta key marking a fault-tolerance placeholder produced by
/// [`crate::schema::make_empty_sample`]. Export can drop or keep flagged
/// samples by flag.
pub const PLACEHOLDER_META_KEY: &str = "__dj__placeholder";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Pretraining content, possibly with embedded media/eoc tokens. May
    /// be empty.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub text: String,

    // Post-tuning dialog fields.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub query: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub response: String,
    /// Earlier dialog turns as complete (query, response) pairs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<(String, String)>,

    // Media path lists, ordered as their tokens appear in `text`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub videos: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audios: Vec<String>,

    /// Source metadata and tags; scalar values.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
    /// Per-sample statistics written by Filters; scalar or scalar-list
    /// values, one namespace (key) per stat.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stats: BTreeMap<String, Value>,

    /// Unknown top-level fields, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Sample {
    pub fn from_text(text: impl Into<String>) -> Self {
        Sample {
            text: text.into(),
            ..Sample::default()
        }
    }

    /// Parse one JSONL line.
    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    /// Canonical one-line serialization (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }

    /// Record a stat under `key`. Stat keys are namespaced per operator;
    /// two distinct operators never share a key (see
    /// `Registry::assert_distinct_stat_keys`), so overwrites only ever
    /// refresh a stat the same operator wrote.
    pub fn set_stat(&mut self, key: &str, value: impl Into<Value>) {
        self.stats.insert(key.to_string(), value.into());
    }

    pub fn stat(&self, key: &str) -> Option<&Value> {
        self.stats.get(key)
    }

    /// Numeric view of a scalar stat.
    pub fn stat_f64(&self, key: &str) -> Option<f64> {
        self.stats.get(key).and_then(Value::as_f64)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn is_placeholder(&self) -> bool {
        self.meta
            .get(PLACEHOLDER_META_KEY)
            .and_then(Value::as_bool)
            .unwrap_or(false)
    }

    pub fn mark_placeholder(&mut self) {
        self.meta
            .insert(PLACEHOLDER_META_KEY.to_string(), Value::Bool(true));
    }

    /// Media paths for one modality, in document order.
    pub fn media_paths(&self, modality: crate::schema::Modality) -> &[String] {
        match modality {
            crate::schema::Modality::Image => &self.images,
            crate::schema::Modality::Video => &self.videos,
            crate::schema::Modality::Audio => &self.audios,
        }
    }
}
