//! ScriptOp: custom logic in an external executable, wired in over a
//! JSONL stdin/stdout pipe.
//!
//! A failing script invalidates all of its output, unlike a corrupt
//! sample, so script errors abort the run instead of entering the
//! batch-level fault path.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use serde::Deserialize;

use super::registry::{base_descriptor, parse_params, ParamSpec, Registry};
use super::{OpDescriptor, OpError, OpKind, OpType, ParamMap};
use crate::sample::Sample;

pub struct ScriptOp {
    descriptor: OpDescriptor,
    program: String,
    args: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptConfig {
    path: String,
    #[serde(default)]
    args: Vec<String>,
}

impl ScriptOp {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        let program = program.into();
        let mut descriptor = OpDescriptor::new("script_op", OpType::ScriptOp);
        descriptor
            .params
            .insert("path".to_string(), serde_json::Value::String(program.clone()));
        ScriptOp {
            descriptor,
            program,
            args,
        }
    }

    pub fn from_params(params: &ParamMap) -> Result<OpKind, OpError> {
        let config: ScriptConfig = parse_params("script_op", params)?;
        let descriptor = base_descriptor("script_op", OpType::ScriptOp, params);
        Ok(OpKind::Script(std::sync::Arc::new(ScriptOp {
            descriptor,
            program: config.path,
            args: config.args,
        })))
    }

    pub fn descriptor(&self) -> &OpDescriptor {
        &self.descriptor
    }

    /// Stream the dataset through the child process and re-validate its
    /// output against the schema.
    pub fn run_script(&self, samples: &[Sample]) -> Result<Vec<Sample>, OpError> {
        if !std::path::Path::new(&self.program).exists() {
            return Err(OpError::Io(format!(
                "script not found: {}",
                self.program
            )));
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| OpError::Io(format!("spawn {}: {e}", self.program)))?;

        let mut stdin = child.stdin.take().expect("stdin piped");
        let input: String = samples
            .iter()
            .map(|s| {
                let mut line = s.to_json_line();
                line.push('\n');
                line
            })
            .collect();
        // Writer runs on its own thread so a script that interleaves
        // reading and writing cannot deadlock the pipe.
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(input.as_bytes());
        });

        let stdout = child.stdout.take().expect("stdout piped");
        let mut out = Vec::new();
        let mut parse_error: Option<OpError> = None;
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| OpError::Io(format!("script stdout: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            match Sample::from_json_line(&line) {
                Ok(sample) => out.push(sample),
                Err(e) => {
                    parse_error = Some(OpError::SchemaViolation(format!(
                        "script output line is not a valid sample: {e}"
                    )));
                    break;
                }
            }
        }
        let output = child
            .wait_with_output()
            .map_err(|e| OpError::Io(format!("wait {}: {e}", self.program)))?;
        let _ = writer.join();

        if !output.status.success() {
            return Err(OpError::ScriptNonZeroExit {
                code: output.status.code().unwrap_or(-1),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        if let Some(err) = parse_error {
            return Err(err);
        }
        Ok(out)
    }
}

pub(crate) fn register(registry: &mut Registry) {
    registry.register(
        "script_op",
        OpType::ScriptOp,
        "Pipe the dataset as JSONL through an external executable",
        vec![
            ParamSpec::new("path", "string", None, "executable to run"),
            ParamSpec::new("args", "list of strings", Some(serde_json::json!([])), "arguments"),
        ],
        ScriptOp::from_params,
    );
}
