//! YAML data recipes: one file declaring the dataset, the export target,
//! runtime settings and the ordered operator list of a processing job.
//!
//! Unknown top-level keys warn instead of failing so recipes written for
//! newer engine versions still run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::executor::FaultMode;
use crate::ops::{OpError, ParamMap, Registry};

#[derive(Debug, thiserror::Error)]
pub enum RecipeError {
    #[error("cannot read recipe {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("recipe parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Op(#[from] OpError),
    #[error("invalid recipe: {0}")]
    Invalid(String),
}

/// One step of the `process:` list: an op name mapped to its params.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeOp {
    pub name: String,
    #[serde(default)]
    pub params: ParamMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    #[serde(default)]
    pub project_name: String,
    pub dataset_path: String,
    pub export_path: String,
    /// Global worker cap.
    #[serde(default = "default_np")]
    pub np: usize,
    #[serde(default)]
    pub fault_mode: FaultMode,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_true")]
    pub drop_placeholders: bool,
    pub process: Vec<RecipeOp>,
}

fn default_np() -> usize {
    4
}

fn default_retries() -> usize {
    1
}

fn default_backoff_ms() -> u64 {
    100
}

fn default_true() -> bool {
    true
}

/// Keys the engine understands at the top level of a recipe.
const KNOWN_KEYS: [&str; 9] = [
    "project_name",
    "dataset_path",
    "export_path",
    "np",
    "fault_mode",
    "max_retries",
    "backoff_ms",
    "drop_placeholders",
    "process",
];

impl Recipe {
    pub fn from_yaml(text: &str) -> Result<(Recipe, Vec<String>), RecipeError> {
        let raw: serde_yaml::Value =
            serde_yaml::from_str(text).map_err(|e| RecipeError::Parse(e.to_string()))?;
        let mapping = raw
            .as_mapping()
            .ok_or_else(|| RecipeError::Parse("recipe must be a YAML mapping".to_string()))?;

        // Unknown top-level keys warn, not fail.
        let mut warnings = Vec::new();
        let mut known = serde_yaml::Mapping::new();
        for (key, value) in mapping {
            let key_str = key.as_str().unwrap_or_default().to_string();
            if KNOWN_KEYS.contains(&key_str.as_str()) {
                known.insert(key.clone(), value.clone());
            } else {
                warnings.push(format!("ignoring unknown recipe key: {key_str}"));
            }
        }

        let process = known
            .remove(serde_yaml::Value::from("process"))
            .ok_or_else(|| RecipeError::Invalid("recipe has no process list".to_string()))?;
        let mut recipe: Recipe = serde_yaml::from_value(serde_yaml::Value::Mapping({
            let mut m = known;
            m.insert(
                serde_yaml::Value::from("process"),
                serde_yaml::Value::Sequence(Vec::new()),
            );
            m
        }))
        .map_err(|e| RecipeError::Parse(e.to_string()))?;
        recipe.process = parse_process_list(&process)?;

        if recipe.np == 0 {
            return Err(RecipeError::Invalid("np must be >= 1".to_string()));
        }
        Ok((recipe, warnings))
    }

    pub fn from_file(path: &Path) -> Result<(Recipe, Vec<String>), RecipeError> {
        let text = std::fs::read_to_string(path).map_err(|e| RecipeError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Recipe::from_yaml(&text)
    }

    /// Canonical YAML rendering; `parse(serialize(r)) == r`.
    pub fn to_yaml(&self) -> String {
        let mut doc = serde_yaml::Mapping::new();
        let mut put = |key: &str, value: serde_yaml::Value| {
            doc.insert(serde_yaml::Value::from(key), value);
        };
        put("project_name", self.project_name.clone().into());
        put("dataset_path", self.dataset_path.clone().into());
        put("export_path", self.export_path.clone().into());
        put("np", (self.np as u64).into());
        put(
            "fault_mode",
            serde_yaml::to_value(self.fault_mode).expect("fault mode serializes"),
        );
        put("max_retries", (self.max_retries as u64).into());
        put("backoff_ms", self.backoff_ms.into());
        put("drop_placeholders", self.drop_placeholders.into());
        let process: Vec<serde_yaml::Value> = self
            .process
            .iter()
            .map(|op| {
                let mut entry = serde_yaml::Mapping::new();
                let params = json_map_to_yaml(&op.params);
                entry.insert(serde_yaml::Value::from(op.name.clone()), params);
                serde_yaml::Value::Mapping(entry)
            })
            .collect();
        put("process", serde_yaml::Value::Sequence(process));
        serde_yaml::to_string(&serde_yaml::Value::Mapping(doc)).expect("recipe serializes")
    }

    /// Digest binding checkpoints to the exact recipe that wrote them.
    /// Derived from the canonical serialization of the process list and
    /// the settings that affect outputs (not paths).
    pub fn digest(&self) -> String {
        let essence = serde_json::json!({
            "process": self.process,
            "fault_mode": self.fault_mode,
            "drop_placeholders": self.drop_placeholders,
        });
        crate::dataset::sha256_hex(essence.to_string().as_bytes())
    }

    /// Resolve every op (name and params) against the registry; this is
    /// the pre-flight validation that runs before any data is read.
    pub fn resolve(&self, registry: &Registry) -> Result<Vec<crate::ops::OpKind>, RecipeError> {
        if self.process.is_empty() {
            return Err(RecipeError::Invalid("process list is empty".to_string()));
        }
        let mut ops = Vec::with_capacity(self.process.len());
        for op in &self.process {
            ops.push(registry.build(&op.name, &op.params)?);
        }
        Ok(ops)
    }

    /// Apply a dotted-path override (`--set key=value`), e.g.
    /// `np=8` or `process.0.text_length_filter.min_len=10`.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), RecipeError> {
        let parsed = parse_scalar(value);
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["np"] => {
                self.np = parsed
                    .as_u64()
                    .ok_or_else(|| RecipeError::Invalid(format!("np must be a number: {value}")))?
                    as usize
            }
            ["project_name"] => self.project_name = value.to_string(),
            ["dataset_path"] => self.dataset_path = value.to_string(),
            ["export_path"] => self.export_path = value.to_string(),
            ["fault_mode"] => {
                self.fault_mode = serde_yaml::from_str(value)
                    .map_err(|_| RecipeError::Invalid(format!("unknown fault_mode: {value}")))?
            }
            ["max_retries"] => {
                self.max_retries = parsed.as_u64().ok_or_else(|| {
                    RecipeError::Invalid(format!("max_retries must be a number: {value}"))
                })? as usize
            }
            ["backoff_ms"] => {
                self.backoff_ms = parsed.as_u64().ok_or_else(|| {
                    RecipeError::Invalid(format!("backoff_ms must be a number: {value}"))
                })?
            }
            ["drop_placeholders"] => {
                self.drop_placeholders = parsed.as_bool().ok_or_else(|| {
                    RecipeError::Invalid(format!("drop_placeholders must be a bool: {value}"))
                })?
            }
            ["process", index, op_name, param] => {
                let i: usize = index
                    .parse()
                    .map_err(|_| RecipeError::Invalid(format!("bad process index: {index}")))?;
                let op = self.process.get_mut(i).ok_or_else(|| {
                    RecipeError::Invalid(format!("process index out of range: {i}"))
                })?;
                if op.name != *op_name {
                    return Err(RecipeError::Invalid(format!(
                        "process.{i} is {}, not {op_name}",
                        op.name
                    )));
                }
                op.params.insert(param.to_string(), parsed);
            }
            _ => {
                return Err(RecipeError::Invalid(format!(
                    "unsupported override path: {key}"
                )))
            }
        }
        Ok(())
    }
}

fn parse_process_list(value: &serde_yaml::Value) -> Result<Vec<RecipeOp>, RecipeError> {
    let sequence = value
        .as_sequence()
        .ok_or_else(|| RecipeError::Invalid("process must be a list".to_string()))?;
    let mut ops = Vec::with_capacity(sequence.len());
    for entry in sequence {
        // Either `- op_name` or `- op_name: {params}`.
        if let Some(name) = entry.as_str() {
            ops.push(RecipeOp {
                name: name.to_string(),
                params: ParamMap::new(),
            });
            continue;
        }
        let mapping = entry.as_mapping().ok_or_else(|| {
            RecipeError::Invalid("process entries must be `op_name: {params}`".to_string())
        })?;
        if mapping.len() != 1 {
            return Err(RecipeError::Invalid(
                "each process entry must name exactly one op".to_string(),
            ));
        }
        let (name, params) = mapping.iter().next().expect("len checked");
        let name = name
            .as_str()
            .ok_or_else(|| RecipeError::Invalid("op name must be a string".to_string()))?
            .to_string();
        let params = match params {
            serde_yaml::Value::Null => ParamMap::new(),
            other => yaml_to_param_map(other)?,
        };
        ops.push(RecipeOp { name, params });
    }
    Ok(ops)
}

fn yaml_to_param_map(value: &serde_yaml::Value) -> Result<ParamMap, RecipeError> {
    let json: Value = serde_json::to_value(value)
        .map_err(|e| RecipeError::Parse(format!("params: {e}")))?;
    match json {
        Value::Object(map) => Ok(map.into_iter().collect()),
        _ => Err(RecipeError::Invalid(
            "op params must be a mapping".to_string(),
        )),
    }
}

fn json_map_to_yaml(params: &BTreeMap<String, Value>) -> serde_yaml::Value {
    if params.is_empty() {
        return serde_yaml::Value::Null;
    }
    let object = Value::Object(params.clone().into_iter().collect());
    serde_yaml::to_value(object).expect("params serialize")
}

/// Interpret an override value: number, bool, or string.
fn parse_scalar(raw: &str) -> Value {
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::from(f);
    }
    Value::String(raw.to_string())
}
