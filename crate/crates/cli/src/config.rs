//! Run configuration: a strict TOML file plus dotted `--set` overrides.
//!
//! Every knob lives in one of the core config structs; this module only adds
//! the envelope (schema version, root seed) and the override plumbing. All
//! parsing is strict — an unknown key anywhere is an error naming the key,
//! never a silent ignore.

use crate::error::{CliError, Result};
use remoh_core::data::DataConfig;
use remoh_core::model::ModelConfig;
use remoh_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_seed() -> u64 {
    7
}
fn default_data() -> DataConfig {
    DataConfig::desk_default(&["sks1", "sks2"], ModelConfig::default().d_model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Root seed; dataset generation uses it directly, model init derives a
    /// substream from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_data")]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            model: ModelConfig::default(),
            data: default_data(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full validation before any work starts: the component validators plus
    /// the couplings between sections.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.d_model != self.model.d_model {
            return Err(CliError::Config(format!(
                "data.d_model ({}) must match model.d_model ({})",
                self.data.d_model, self.model.d_model
            )));
        }
        if self.data.frames != self.model.frames {
            return Err(CliError::Config(format!(
                "data.frames ({}) must match model.frames ({})",
                self.data.frames, self.model.frames
            )));
        }
        if self.data.concepts.len() > self.model.max_concepts {
            return Err(CliError::Config(format!(
                "{} concepts exceed the model's {} name slots",
                self.data.concepts.len(),
                self.model.max_concepts
            )));
        }
        Ok(())
    }

    pub fn snapshot_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("cannot serialize resolved config: {e}")))
    }
}

/// Parse the value side of a `--set key=value` pair. TOML literal syntax
/// wins (numbers, booleans, arrays, quoted strings); anything that does not
/// parse as a literal is taken as a bare string, so `--set train.losses=spr-only`
/// works without quoting gymnastics.
fn parse_override_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("probe table has the key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Insert `value` at a dotted path, creating intermediate tables.
fn insert_dotted(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut segments = path.split('.').collect::<Vec<_>>();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Usage(format!(
            "override path {path:?} has an empty segment"
        )));
    }
    let leaf = segments.pop().expect("split yields at least one segment");
    let mut cursor = table;
    for seg in segments {
        let entry = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| {
            CliError::Usage(format!(
                "override path {path:?}: {seg:?} is a value, not a section"
            ))
        })?;
    }
    cursor.insert(leaf.to_string(), value);
    Ok(())
}

/// Load a config file (or defaults when `path` is `None`), apply `--set`
/// overrides last, then validate the result.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed_flag: Option<u64>,
) -> Result<RunConfig> {
    let raw = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read config {p:?}: {e}")))?,
        None => String::new(),
    };
    let mut table: toml::Table = raw
        .parse()
        .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;

    for pair in overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects key=value, got {pair:?}"))
        })?;
        insert_dotted(&mut table, key.trim(), parse_override_value(value.trim()))?;
    }
    if let Some(seed) = seed_flag {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }

    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("config error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
