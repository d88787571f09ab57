//! Flat key-value config files for model and hardware parameters.
//!
//! Keys are exactly the field names of [`ModelConfig`] and
//! [`HardwareConfig`]. Unknown keys are rejected so typos fail loudly.
//! The bundled defaults describe Llama-3.1-8B on an A100 80GB SXM.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::cost_model::{CostModelError, HardwareConfig, ModelConfig};

const DEFAULTS_TOML: &str = include_str!("../config/llama31-8b-a100.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` expects a number, got `{value}`")]
    BadValue { key: String, value: String },
    #[error(transparent)]
    Invalid(#[from] CostModelError),
}

fn parse_flat(text: &str) -> Result<BTreeMap<String, f64>, ConfigError> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (key, value) in table {
        let num = match value {
            toml::Value::Integer(i) => i as f64,
            toml::Value::Float(f) => f,
            other => {
                return Err(ConfigError::BadValue {
                    key,
                    value: other.to_string(),
                })
            }
        };
        out.insert(key, num);
    }
    Ok(out)
}

fn configs_from_map(map: &BTreeMap<String, f64>) -> Result<(ModelConfig, HardwareConfig), ConfigError> {
    let mut mc = default_model_config();
    let mut hc = default_hardware_config();
    for (key, value) in map {
        apply_key(key, *value, &mut mc, &mut hc)?;
    }
    mc.validate()?;
    hc.validate()?;
    Ok((mc, hc))
}

/// Set a single config key on the pair; used both by file loading and by
/// per-key CLI overrides.
pub fn apply_key(
    key: &str,
    value: f64,
    mc: &mut ModelConfig,
    hc: &mut HardwareConfig,
) -> Result<(), ConfigError> {
    let as_count = |v: f64| v.round() as u64;
    match key {
        "param_count" => mc.param_count = as_count(value),
        "hidden_dim" => mc.hidden_dim = as_count(value),
        "kv_dim_per_layer" => mc.kv_dim_per_layer = as_count(value),
        "num_layers" => mc.num_layers = as_count(value),
        "peak_compute" => hc.peak_compute = value,
        "peak_bandwidth" => hc.peak_bandwidth = value,
        "kv_memory_capacity" => hc.kv_memory_capacity = value,
        other => return Err(ConfigError::UnknownKey(other.to_string())),
    }
    Ok(())
}

fn bundled() -> &'static (ModelConfig, HardwareConfig) {
    static CACHE: OnceLock<(ModelConfig, HardwareConfig)> = OnceLock::new();
    CACHE.get_or_init(|| {
        let map = parse_flat(DEFAULTS_TOML).expect("bundled defaults must parse");
        let mut mc = ModelConfig {
            param_count: 0,
            hidden_dim: 0,
            kv_dim_per_layer: 0,
            num_layers: 0,
        };
        let mut hc = HardwareConfig {
            peak_compute: 0.0,
            peak_bandwidth: 0.0,
            kv_memory_capacity: 0.0,
        };
        for (key, value) in &map {
            apply_key(key, *value, &mut mc, &mut hc).expect("bundled defaults use known keys");
        }
        mc.validate().expect("bundled model config valid");
        hc.validate().expect("bundled hardware config valid");
        (mc, hc)
    })
}

/// Bundled Llama-3.1-8B architecture constants.
pub fn default_model_config() -> ModelConfig {
    bundled().0.clone()
}

/// Bundled A100 80GB SXM rates with a 60 GB KV budget.
pub fn default_hardware_config() -> HardwareConfig {
    bundled().1.clone()
}

/// Load model/hardware configs from a flat key-value file. Missing keys
/// fall back to the bundled defaults.
pub fn load_configs(path: &Path) -> Result<(ModelConfig, HardwareConfig), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let map = parse_flat(&text)?;
    configs_from_map(&map)
}

/// Render the fully-resolved config pair back to flat TOML, for the
/// config echo written next to every run's outputs.
pub fn render_configs(mc: &ModelConfig, hc: &HardwareConfig) -> String {
    format!(
        "param_count = {}\nhidden_dim = {}\nkv_dim_per_layer = {}\nnum_layers = {}\npeak_compute = {}\npeak_bandwidth = {}\nkv_memory_capacity = {}\n",
        mc.param_count,
        mc.hidden_dim,
        mc.kv_dim_per_layer,
        mc.num_layers,
        hc.peak_compute,
        hc.peak_bandwidth,
        hc.kv_memory_capacity
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_defaults() {
        let mc = default_model_config();
        assert_eq!(mc.param_count, 8_030_000_000);
        assert_eq!(mc.hidden_dim, 4096);
        assert_eq!(mc.kv_dim_per_layer, 1024);
        assert_eq!(mc.num_layers, 32);
        assert_eq!(mc.kv_bytes_per_token(), 131_072);
        let hc = default_hardware_config();
        assert_eq!(hc.peak_compute, 312e3);
        assert_eq!(hc.peak_bandwidth, 2039.0);
        assert_eq!(hc.kv_memory_capacity, 60.0);
        assert_eq!(hc.kv_capacity_bytes(), 60_000_000_000);
    }

    #[test]
    fn file_overrides_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hw.toml");
        std::fs::write(&path, "peak_compute = 1000.0\nnum_layers = 16\n").unwrap();
        let (mc, hc) = load_configs(&path).unwrap();
        assert_eq!(hc.peak_compute, 1000.0);
        assert_eq!(mc.num_layers, 16);
        assert_eq!(mc.hidden_dim, 4096);

        std::fs::write(&path, "peak_compue = 1.0\n").unwrap();
        assert!(matches!(
            load_configs(&path),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn render_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.toml");
        let mc = default_model_config();
        let hc = default_hardware_config();
        std::fs::write(&path, render_configs(&mc, &hc)).unwrap();
        let (mc2, hc2) = load_configs(&path).unwrap();
        assert_eq!(mc, mc2);
        assert_eq!(hc, hc2);
    }
}
