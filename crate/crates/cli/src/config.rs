//! Layered settings: defaults, run-directory file, `--config`, flags.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use koopnav::harness::PipelineConfig;
use serde_json::Value;

use crate::commands::Failure;

pub const CONFIG_FILE: &str = "config.json";

/// Recursive object merge; non-object values in `over` replace `base`.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: invalid JSON: {e}", path.display())))
}

/// Defaults, overlaid by `<run_dir>/config.json` if present, then by `extra`.
pub fn load(run_dir: &Path, extra: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let mut value = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    let stored = run_dir.join(CONFIG_FILE);
    if stored.is_file() {
        merge(&mut value, read_json(&stored)?);
    }
    if let Some(path) = extra {
        if !path.is_file() {
            return Err(Failure::missing(
                path,
                "pass an existing JSON settings file to --config",
            ));
        }
        merge(&mut value, read_json(path)?);
    }
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("invalid settings: {e}")))
}

pub fn save(run_dir: &Path, cfg: &PipelineConfig) -> Result<(), Failure> {
    let path = run_dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&path, json + "\n")
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

/// True when `id` was given on the command line rather than defaulted.
pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}
