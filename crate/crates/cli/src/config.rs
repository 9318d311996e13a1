//! `RunConfig`: the JSON document every subcommand reads.
//!
//! A user document is deep-merged over the defaults, so it only needs the
//! keys it changes. `--set a.b.c=value` overrides are applied to the user
//! document before merging; `value` is parsed as JSON and falls back to a
//! plain string.

use std::fmt;
use std::path::{Path, PathBuf};

use acal_core::data::DataConfig;
use acal_core::objectives::{VariantName, VariantSpec};
use acal_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<VariantName>,
    pub seeds: Vec<u64>,
    /// Record wall times as 0 so reports are byte-stable across runs.
    pub zero_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub trainer: TrainConfig,
    pub data: DataConfig,
    pub ablation: AblationSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Defaults with the weights of `variant`.
    pub fn defaults_for(variant: VariantName) -> Self {
        let base = acal_core::eval::AblationConfig::default();
        RunConfig {
            trainer: TrainConfig {
                variant: VariantSpec::new(variant),
                ..TrainConfig::default()
            },
            data: base.data,
            ablation: AblationSection {
                variants: base.variants,
                seeds: base.seeds,
                zero_wall_time: false,
            },
            output: OutputSection { dir: "runs".into() },
        }
    }

    /// Pretty JSON with a trailing newline. Parsing it yields an equal
    /// config, and printing that again yields the same bytes.
    pub fn canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn ablation_config(&self) -> acal_core::eval::AblationConfig {
        acal_core::eval::AblationConfig {
            variants: self.ablation.variants.clone(),
            seeds: self.ablation.seeds.clone(),
            train: self.trainer.clone(),
            data: self.data.clone(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::defaults_for(VariantName::Acal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Syntax(String),
    UnknownKey(String),
    Type { path: String, detail: String },
    Override(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax(m) => write!(f, "malformed config: {m}"),
            ConfigError::UnknownKey(k) => write!(f, "unknown key '{k}'"),
            ConfigError::Type { path, detail } => write!(f, "invalid value at '{path}': {detail}"),
            ConfigError::Override(m) => write!(f, "bad override: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Parses `KEY=VALUE` and writes it into `doc`, creating objects on the way.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(format!("'{spec}' is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(format!("empty path segment in '{key}'")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut at = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !at.is_object() {
            return Err(ConfigError::Override(format!("'{key}' descends into a non-object")));
        }
        at = at
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    match at.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(ConfigError::Override(format!("'{key}' descends into a non-object"))),
    }
}

/// Recursive merge of `user` over `base`. An object whose keys select an
/// enum variant (a single-key externally tagged object, or a `kind` tag that
/// differs) replaces the default wholesale instead of merging into it.
fn merge(base: &Value, user: &Value) -> Value {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            let externally_tagged = b.len() == 1 && u.len() == 1 && !b.contains_key(u.keys().next().unwrap());
            let retagged = matches!((b.get("kind"), u.get("kind")), (Some(x), Some(y)) if x != y);
            if externally_tagged || retagged {
                return user.clone();
            }
            let mut out = b.clone();
            for (k, uv) in u {
                let merged = match b.get(k) {
                    Some(bv) => merge(bv, uv),
                    None => uv.clone(),
                };
                out.insert(k.clone(), merged);
            }
            Value::Object(out)
        }
        _ => user.clone(),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() || path == "." {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Turns a deserialization error into an unknown-key or typed-path error.
fn classify(err: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = err.path().to_string();
    let detail = err.inner().to_string();
    if let Some(rest) = detail.strip_prefix("unknown field `") {
        if let Some(name) = rest.split('`').next() {
            // The tracked path may already end in the offending key.
            let key = if path.ends_with(name) { path.clone() } else { join(&path, name) };
            return ConfigError::UnknownKey(key);
        }
    }
    ConfigError::Type { path, detail }
}

/// Builds a config from an optional JSON document and overrides.
pub fn parse_config(text: Option<&str>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut user = match text {
        Some(t) if !t.trim().is_empty() => {
            serde_json::from_str::<Value>(t).map_err(|e| ConfigError::Syntax(e.to_string()))?
        }
        _ => Value::Object(Map::new()),
    };
    if !user.is_object() {
        return Err(ConfigError::Syntax("the top level must be an object".into()));
    }
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    // Weight defaults depend on the variant, so read its name first.
    let name = match user.pointer("/trainer/variant/name") {
        Some(v) => {
            serde_json::from_value::<VariantName>(v.clone()).map_err(|e| ConfigError::Type {
                path: "trainer.variant.name".into(),
                detail: e.to_string(),
            })?
        }
        None => VariantName::Acal,
    };
    let base = serde_json::to_value(RunConfig::defaults_for(name)).expect("defaults serialize");
    let merged = merge(&base, &user);
    serde_path_to_error::deserialize(merged).map_err(classify)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, anyhow::Error> {
    let text = match path {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?,
        ),
        None => None,
    };
    Ok(parse_config(text.as_deref(), overrides)?)
}
