//! The operator registry: name → factory, enumerable for CLI discovery.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;

use super::{OpError, OpKind, OpType, ParamMap};

/// Parameter keys every operator accepts in addition to its own.
pub const COMMON_PARAM_KEYS: [&str; 4] =
    ["cpu_required", "mem_required", "batch_size", "accelerator"];

/// One declared parameter, for `list-ops` output and docs.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub kind: String,
    pub default: Option<Value>,
    pub doc: String,
}

impl ParamSpec {
    pub fn new(name: &str, kind: &str, default: Option<Value>, doc: &str) -> Self {
        ParamSpec {
            name: name.to_string(),
            kind: kind.to_string(),
            default,
            doc: doc.to_string(),
        }
    }
}

type Builder = Arc<dyn Fn(&ParamMap) -> Result<OpKind, OpError> + Send + Sync>;

pub struct OpEntry {
    pub name: String,
    pub op_type: OpType,
    pub supports_batch: bool,
    pub summary: String,
    pub params: Vec<ParamSpec>,
    builder: Builder,
}

/// Registry of constructible operators. Instances are independent: tests
/// extend their own registry without affecting others.
pub struct Registry {
    entries: BTreeMap<String, OpEntry>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry {
            entries: BTreeMap::new(),
        }
    }

    /// All built-in operators: the rule-based catalog, deduplicators,
    /// groupers, aggregators and the script op.
    pub fn with_builtin() -> Self {
        let mut registry = Registry::empty();
        crate::catalog::register_all(&mut registry);
        crate::dedup::register_ops(&mut registry);
        super::script::register(&mut registry);
        registry
    }

    pub fn register(
        &mut self,
        name: &str,
        op_type: OpType,
        summary: &str,
        params: Vec<ParamSpec>,
        builder: impl Fn(&ParamMap) -> Result<OpKind, OpError> + Send + Sync + 'static,
    ) {
        let entry = OpEntry {
            name: name.to_string(),
            op_type,
            supports_batch: op_type.is_batched(),
            summary: summary.to_string(),
            params,
            builder: Arc::new(builder),
        };
        assert!(
            self.entries.insert(entry.name.clone(), entry).is_none(),
            "op name registered twice: {name}"
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = &OpEntry> {
        self.entries.values()
    }

    /// Build an operator, validating its params before any data is
    /// touched.
    pub fn build(&self, name: &str, params: &ParamMap) -> Result<OpKind, OpError> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| OpError::UnknownOp(name.to_string()))?;
        (entry.builder)(params)
    }

    /// Stat namespaces of all default-constructible filters, keyed by
    /// stat name. Panics if two filters share a namespace: a shared key
    /// would let one operator silently overwrite another's stats.
    pub fn filter_stat_keys(&self) -> BTreeMap<String, String> {
        let mut owners: BTreeMap<String, String> = BTreeMap::new();
        for entry in self.entries.values() {
            if entry.op_type != OpType::Filter {
                continue;
            }
            let Ok(OpKind::Filter(filter)) = (entry.builder)(&ParamMap::new()) else {
                continue;
            };
            for key in filter.stat_keys() {
                if let Some(previous) = owners.insert(key.clone(), entry.name.clone()) {
                    panic!(
                        "stat key {key:?} claimed by both {previous} and {}",
                        entry.name
                    );
                }
            }
        }
        owners
    }
}

/// Strip the common keys and deserialize the rest into the op's typed
/// config. Unknown or ill-typed params are rejected here, before data.
pub fn parse_params<C: serde::de::DeserializeOwned>(
    op: &str,
    params: &ParamMap,
) -> Result<C, OpError> {
    let mut object = serde_json::Map::new();
    for (key, value) in params {
        if COMMON_PARAM_KEYS.contains(&key.as_str()) {
            continue;
        }
        object.insert(key.clone(), value.clone());
    }
    serde_json::from_value(Value::Object(object)).map_err(|e| OpError::ParamValidation {
        op: op.to_string(),
        message: e.to_string(),
    })
}

/// Descriptor seeded with the op's full params plus the common overrides
/// (`cpu_required`, `mem_required`, `batch_size`, `accelerator`).
pub fn base_descriptor(name: &str, op_type: OpType, params: &ParamMap) -> super::OpDescriptor {
    let mut descriptor = super::OpDescriptor::new(name, op_type);
    descriptor.params = params.clone();
    if let Some(v) = params.get("cpu_required").and_then(Value::as_f64) {
        descriptor.cpu_required = v;
    }
    if let Some(v) = params.get("mem_required").and_then(Value::as_u64) {
        descriptor.mem_required = v;
    }
    if let Some(v) = params.get("batch_size").and_then(Value::as_u64) {
        descriptor.declared_batch_size = Some(v as usize);
    }
    if let Some(v) = params.get("accelerator").and_then(Value::as_bool) {
        descriptor.uses_accelerator = v;
    }
    descriptor
}
