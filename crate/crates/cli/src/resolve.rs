use std::path::{Path, PathBuf};

use distran_core::{validate_config, Error, Hyperparameters};
use serde_json::{Map, Value};

/// Failure of a command, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::ConfigMismatch { .. } => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub const OUT_ROOT_ENV: &str = "DISTRAN_OUT_ROOT";

pub fn output_dir(out: Option<&Path>, verb: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("distran-out"), PathBuf::from);
            root.join(verb)
        }
    }
}

/// Parses `key=value`; values that read as JSON (numbers, booleans) keep
/// that type, anything else is a string.
pub fn parse_pair(s: &str) -> CliResult<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| validation(format!("expected KEY=VALUE, got `{s}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Hyperparameters after applying, in increasing precedence, the defaults,
/// the config file and `--set` overrides. Also returns the keys that were
/// set explicitly.
pub fn hyperparameters(config: Option<&Path>, overrides: &[String]) -> CliResult<(Hyperparameters, Vec<String>)> {
    let mut merged: Map<String, Value> = match serde_json::to_value(Hyperparameters::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("hyperparameters serialize to an object"),
    };
    let mut explicit = Vec::new();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| validation(format!("config {}: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(validation(format!("config {} must be a JSON object", path.display())));
        };
        for (k, v) in file {
            if !merged.contains_key(&k) {
                return Err(validation(format!("config {}: unknown key `{k}`", path.display())));
            }
            explicit.push(k.clone());
            merged.insert(k, v);
        }
    }
    for o in overrides {
        let (k, v) = parse_pair(o)?;
        if !merged.contains_key(&k) {
            return Err(validation(format!("--set: unknown key `{k}`")));
        }
        explicit.push(k.clone());
        merged.insert(k, v);
    }
    let hp: Hyperparameters =
        serde_json::from_value(Value::Object(merged)).map_err(|e| validation(format!("hyperparameters: {e}")))?;
    validate_config(&hp).map_err(|v| CliError::from(Error::Config(v)))?;
    Ok((hp, explicit))
}

/// Writes `resolved_config.json` into `out`, creating the directory.
pub fn write_resolved(out: &Path, verb: &str, resolved: Value) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let doc = serde_json::json!({ "verb": verb, "resolved": resolved });
    let path = out.join("resolved_config.json");
    let text = serde_json::to_string_pretty(&doc).expect("json value serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}
