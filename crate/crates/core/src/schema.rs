//! Token-aligned multimodal schema: special-token conventions, chunk
//! parsing, goal-oriented dataset validation and schema-compatible empty
//! samples.
//!
//! Media other than text is denoted by ordered special tokens inside
//! `text`; the k-th image token overall refers to `images[k]`, and the
//! text optionally splits into chunks on an end-of-chunk token, each chunk
//! being one semantic unit that aligns the media it mentions.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sample::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Video, Modality::Audio];
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Video => write!(f, "video"),
            Modality::Audio => write!(f, "audio"),
        }
    }
}

/// The special tokens embedded in `text`. Customizable, but the defaults
/// are part of the on-disk format and should not change lightly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaTokens {
    pub image_token: String,
    pub video_token: String,
    pub audio_token: String,
    pub eoc_token: String,
}

impl Default for SchemaTokens {
    fn default() -> Self {
        SchemaTokens {
            image_token: "<__dj__image>".to_string(),
            video_token: "<__dj__video>".to_string(),
            audio_token: "<__dj__audio>".to_string(),
            eoc_token: "<|__dj__eoc|>".to_string(),
        }
    }
}

impl SchemaTokens {
    pub fn media_token(&self, modality: Modality) -> &str {
        match modality {
            Modality::Image => &self.image_token,
            Modality::Video => &self.video_token,
            Modality::Audio => &self.audio_token,
        }
    }

    /// Tokens must be non-empty, mutually distinct, and none may be a
    /// substring of another (otherwise token counting is ambiguous).
    pub fn validate(&self) -> Result<(), SchemaError> {
        let all = [
            &self.image_token,
            &self.video_token,
            &self.audio_token,
            &self.eoc_token,
        ];
        for token in all {
            if token.is_empty() {
                return Err(SchemaError::InvalidTokens("empty token".to_string()));
            }
        }
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                if i != j && a.contains(b.as_str()) {
                    return Err(SchemaError::InvalidTokens(format!(
                        "token {b:?} is a substring of {a:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One semantic unit of a sample's text: a byte span plus the media the
/// span references, in document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub text_span: Range<usize>,
    /// (modality, index into the sample's media list for that modality)
    pub media_refs: Vec<(Modality, usize)>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("token mismatch for {modality}: {tokens} tokens vs {paths} paths")]
    TokenMismatch {
        modality: Modality,
        tokens: usize,
        paths: usize,
    },
    #[error("invalid schema tokens: {0}")]
    InvalidTokens(String),
}

/// Split a sample's text into chunks on the end-of-chunk token and assign
/// each embedded media token its positional media path.
///
/// A trailing eoc token is optional; a document without any eoc token is a
/// single chunk. The k-th image token overall maps to `images[k]`, and the
/// same holds per modality.
pub fn parse_chunks(sample: &Sample, tokens: &SchemaTokens) -> Result<Vec<Chunk>, SchemaError> {
    tokens.validate()?;
    check_token_counts(sample, tokens)?;

    let text = sample.text.as_str();
    let eoc = tokens.eoc_token.as_str();

    let mut spans: Vec<Range<usize>> = Vec::new();
    let mut cursor = 0usize;
    for (pos, _) in text.match_indices(eoc) {
        spans.push(cursor..pos);
        cursor = pos + eoc.len();
    }
    if cursor < text.len() || spans.is_empty() {
        spans.push(cursor..text.len());
    }

    // Global media occurrences, in document order per modality.
    let mut occurrences: Vec<(usize, Modality, usize)> = Vec::new();
    for modality in Modality::ALL {
        for (k, (pos, _)) in text
            .match_indices(tokens.media_token(modality))
            .enumerate()
        {
            occurrences.push((pos, modality, k));
        }
    }
    occurrences.sort_unstable();

    let mut chunks: Vec<Chunk> = spans
        .into_iter()
        .map(|text_span| Chunk {
            text_span,
            media_refs: Vec::new(),
        })
        .collect();
    for (pos, modality, k) in occurrences {
        let chunk = chunks
            .iter_mut()
            .find(|c| c.text_span.contains(&pos))
            .expect("media token position lies in some chunk span");
        chunk.media_refs.push((modality, k));
    }
    Ok(chunks)
}

fn check_token_counts(sample: &Sample, tokens: &SchemaTokens) -> Result<(), SchemaError> {
    for modality in Modality::ALL {
        let token_count = sample
            .text
            .match_indices(tokens.media_token(modality))
            .count();
        let path_count = sample.media_paths(modality).len();
        if token_count != path_count {
            return Err(SchemaError::TokenMismatch {
                modality,
                tokens: token_count,
                paths: path_count,
            });
        }
    }
    Ok(())
}

/// The processing goal a dataset is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Pretrain,
    PostTuning,
    ImageText,
}

pub mod rules {
    pub const TOKEN_MISMATCH: &str = "token_mismatch";
    pub const EMPTY_DIALOG: &str = "empty_dialog";
    pub const MISSING_IMAGE: &str = "missing_image";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub ordinal: usize,
    pub rule: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<ValidationError>,
    pub checked_rules: Vec<String>,
}

impl ValidationReport {
    fn new(errors: Vec<ValidationError>, checked_rules: Vec<String>) -> Self {
        ValidationReport {
            ok: errors.is_empty(),
            errors,
            checked_rules,
        }
    }
}

/// Check every sample against the rules of `goal`. Failures become report
/// entries, never errors. Placeholder samples are exempt from emptiness
/// rules so fault-filled datasets still validate.
pub fn validate_samples<'a, I>(samples: I, goal: Goal, tokens: &SchemaTokens) -> ValidationReport
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut errors = Vec::new();
    let checked_rules = match goal {
        Goal::Pretrain => vec![rules::TOKEN_MISMATCH.to_string()],
        Goal::PostTuning => vec![rules::EMPTY_DIALOG.to_string()],
        Goal::ImageText => vec![
            rules::TOKEN_MISMATCH.to_string(),
            rules::MISSING_IMAGE.to_string(),
        ],
    };

    for (ordinal, sample) in samples.into_iter().enumerate() {
        match goal {
            Goal::Pretrain => {
                if let Err(err) = check_token_counts(sample, tokens) {
                    errors.push(ValidationError {
                        ordinal,
                        rule: rules::TOKEN_MISMATCH.to_string(),
                        message: err.to_string(),
                    });
                }
            }
            Goal::PostTuning => {
                if sample.is_placeholder() {
                    continue;
                }
                if sample.query.is_empty() || sample.response.is_empty() {
                    errors.push(ValidationError {
                        ordinal,
                        rule: rules::EMPTY_DIALOG.to_string(),
                        message: "post-tuning sample must have non-empty query and response"
                            .to_string(),
                    });
                }
            }
            Goal::ImageText => {
                if let Err(err) = check_token_counts(sample, tokens) {
                    errors.push(ValidationError {
                        ordinal,
                        rule: rules::TOKEN_MISMATCH.to_string(),
                        message: err.to_string(),
                    });
                }
                for path in &sample.images {
                    if !std::path::Path::new(path).exists() {
                        errors.push(ValidationError {
                            ordinal,
                            rule: rules::MISSING_IMAGE.to_string(),
                            message: format!("image path does not exist: {path}"),
                        });
                    }
                }
            }
        }
    }
    ValidationReport::new(errors, checked_rules)
}

/// Build a placeholder sample with the prototype's field set and value
/// kinds but empty values, flagged via [`crate::sample::PLACEHOLDER_META_KEY`].
/// Deterministic: two calls on the same prototype are identical.
pub fn make_empty_sample(prototype: &Sample) -> Sample {
    let mut empty = Sample {
        extra: prototype
            .extra
            .iter()
            .map(|(k, v)| (k.clone(), empty_of_kind(v)))
            .collect(),
        ..Sample::default()
    };
    empty.mark_placeholder();
    empty
}

fn empty_of_kind(value: &Value) -> Value {
    match value {
        Value::Null => Value::Null,
        Value::Bool(_) => Value::Bool(false),
        Value::Number(_) => Value::from(0),
        Value::String(_) => Value::String(String::new()),
        Value::Array(_) => Value::Array(Vec::new()),
        Value::Object(_) => Value::Object(serde_json::Map::new()),
    }
}

/// Rebuild `text` from chunk spans; used to check the partition property.
pub fn reassemble_chunks(text: &str, chunks: &[Chunk], tokens: &SchemaTokens) -> String {
    let mut out = String::new();
    for chunk in chunks {
        out.push_str(&text[chunk.text_span.clone()]);
        if chunk.text_span.end != text.len() {
            out.push_str(&tokens.eoc_token);
        }
    }
    out
}
