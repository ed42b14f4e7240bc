//! Configuration file with `section.key` overrides.
//!
//! Keys are checked against the schema of [`Config`] before deserializing, so
//! an unknown key is reported with its full dotted name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::estimator::SolverConfig;
use crate::fisher::HorizonCostConfig;
use crate::harness::{ExperimentConfig, ScenarioConfig, Setup};
use crate::planner::PlannerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path} is not valid TOML: {message}")]
    Parse { path: String, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` must have the form section.key=value")]
    BadOverride(String),
    #[error("invalid value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Execution settings that do not change results.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Parallel realizations; 0 uses every core.
    pub workers: usize,
    /// Output directory when neither the flag nor the environment sets one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub planner: PlannerConfig,
    pub cost: HorizonCostConfig,
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
    pub runtime: RuntimeConfig,
}

impl Config {
    pub fn setup(&self) -> Setup {
        Setup {
            scenario: self.scenario,
            planner: self.planner,
            cost: self.cost,
            solver: self.solver,
            experiment: self.experiment.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.setup().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Reads `path` (or the defaults when `None`) and applies `overrides` in
    /// order; later overrides win.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?;
                text.parse::<Table>()
                    .map_err(|e| ConfigError::Parse { path: p.display().to_string(), message: e.to_string() })?
            }
            None => Table::new(),
        };
        check_keys(&table, &schema(), "")?;
        let mut merged = match Value::try_from(Config::default()).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        merge(&mut merged, table);
        let mut table = merged;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_key(&mut table, &key, value)?;
        }
        from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Every key the configuration accepts, with optional entries filled in.
fn schema() -> Table {
    let mut full = Config::default();
    full.solver.gamma_bounds = Some([0.0, 1.0]);
    full.runtime.out_dir = Some(String::new());
    match Value::try_from(&full).expect("config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    }
}

/// Overlays `top` onto `base`, descending into tables present in both.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn check_keys(table: &Table, schema: &Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in table {
        let path = join(prefix, k);
        match (schema.get(k), v) {
            (None, _) => return Err(ConfigError::UnknownKey(path)),
            (Some(Value::Table(s)), Value::Table(t)) => check_keys(t, s, &path)?,
            (Some(Value::Table(_)), _) => {
                return Err(ConfigError::BadValue { key: path, message: "expected a table".into() })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Checks that `key` names an entry of the schema.
pub fn check_key(key: &str) -> Result<(), ConfigError> {
    let schema = schema();
    let mut level = &schema;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        match level.get(*part) {
            Some(Value::Table(t)) if i + 1 < parts.len() => level = t,
            // Whole sections cannot be replaced; nested tables such as
            // `scenario.agent_start` can.
            Some(v) if i + 1 == parts.len() && (i > 0 || !v.is_table()) => return Ok(()),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
    }
    Err(ConfigError::UnknownKey(key.to_string()))
}

/// Splits `key=value`, reading the value as TOML and falling back to a bare
/// string.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(s.to_string()));
    }
    Ok((key.to_string(), parse_value(raw.trim())))
}

pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(table: &mut Table, key: &str, value: Value) -> Result<(), ConfigError> {
    check_key(key)?;
    let parts: Vec<&str> = key.split('.').collect();
    let mut level = table;
    for part in &parts[..parts.len() - 1] {
        let entry = level.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        level = match entry {
            Value::Table(t) => t,
            _ => return Err(ConfigError::BadValue { key: key.to_string(), message: "expected a table".into() }),
        };
    }
    level.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn from_table(table: Table) -> Result<Config, ConfigError> {
    let mut cfg = Config::default();
    for (name, value) in table {
        match name.as_str() {
            "scenario" => cfg.scenario = section(&name, value)?,
            "planner" => cfg.planner = section(&name, value)?,
            "cost" => cfg.cost = section(&name, value)?,
            "solver" => cfg.solver = section(&name, value)?,
            "experiment" => cfg.experiment = section(&name, value)?,
            "runtime" => cfg.runtime = section(&name, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    }
    Ok(cfg)
}

/// Deserializes one section; on failure, retries each key on top of the
/// defaults to name the offending key.
fn section<T>(name: &str, value: Value) -> Result<T, ConfigError>
where
    T: Default + Serialize + serde::de::DeserializeOwned,
{
    let err = match value.clone().try_into::<T>() {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    if let (Value::Table(user), Ok(Value::Table(defaults))) = (&value, Value::try_from(T::default())) {
        for (k, v) in user {
            let mut one = defaults.clone();
            one.insert(k.clone(), v.clone());
            if let Err(e) = Value::Table(one).try_into::<T>() {
                return Err(ConfigError::BadValue { key: format!("{name}.{k}"), message: e.message().to_string() });
            }
        }
    }
    Err(ConfigError::BadValue { key: name.to_string(), message: err.message().to_string() })
}
