//! Report emission: CSV tables, `summary.json` and `timings.json`.
//!
//! The summary holds everything that must be reproducible (config echo,
//! verdicts, file manifest) and nothing that is not; wall-clock timings go to
//! a separate file. Floats are written as strings with 17 significant digits.

use std::io;
use std::path::{Path, PathBuf};

use serde::Serializer;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use filterlab_core::export::fmt_float;

use crate::acceptance::{budget, Outcome};
use crate::config::{write_config, ExperimentConfig};

/// A CSV file produced by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

impl Table {
    pub fn new(name: impl Into<String>, csv: String) -> Self {
        Self { name: name.into(), csv }
    }
}

pub fn float17<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&fmt_float(*v))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Replaces every non-integer number by its 17-digit string.
fn fix_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => Value::String(fmt_float(n.as_f64().expect("f64"))),
        Value::Array(a) => Value::Array(a.into_iter().map(fix_floats).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, fix_floats(v))).collect()),
        other => other,
    }
}

/// The part of the config that can change numbers: worker count and output
/// directory are left out.
fn numerical_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    c.workers = None;
    c.out = String::new();
    c
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    hex_digest(write_config(&numerical_config(config)).as_bytes())
}

/// `summary.json` text for a run.
pub fn summary(config: &ExperimentConfig, command: &str, outcomes: &[Outcome]) -> String {
    let echo = serde_json::to_value(numerical_config(config)).expect("config serialises");
    let verdicts: Vec<Value> = outcomes
        .iter()
        .map(|o| serde_json::to_value(&o.verdict).expect("verdict serialises"))
        .collect();
    let files: Vec<Value> = outcomes
        .iter()
        .flat_map(|o| &o.tables)
        .map(|t| {
            json!({
                "name": t.name,
                "bytes": t.csv.len(),
                "sha256": hex_digest(t.csv.as_bytes()),
            })
        })
        .collect();
    let doc = json!({
        "software": format!("filterlab {}", env!("CARGO_PKG_VERSION")),
        "command": command,
        "config_hash": config_hash(config),
        "config": fix_floats(echo),
        "all_passed": outcomes.iter().all(|o| o.verdict.passed),
        "verdicts": verdicts,
        "files": files,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("summary serialises");
    text.push('\n');
    text
}

pub fn timings(outcomes: &[Outcome]) -> String {
    let rows: Vec<Value> = outcomes
        .iter()
        .map(|o| {
            let secs = o.elapsed.as_secs_f64();
            let mut row = json!({
                "id": o.verdict.id,
                "name": o.verdict.name,
                "seconds": secs,
            });
            if (1..=10).contains(&o.verdict.id) && budget(o.verdict.id).is_finite() {
                row["budget_seconds"] = json!(budget(o.verdict.id));
                row["within_budget"] = json!(secs <= budget(o.verdict.id));
            }
            row
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&json!({ "timings": rows })).expect("timings serialise");
    text.push('\n');
    text
}

/// Writes tables, `summary.json` and `timings.json` into `dir`, one file at a
/// time, and returns the paths written.
pub fn write_report(dir: &Path, config: &ExperimentConfig, command: &str, outcomes: &[Outcome]) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for t in outcomes.iter().flat_map(|o| &o.tables) {
        let p = dir.join(&t.name);
        std::fs::write(&p, &t.csv)?;
        written.push(p);
    }
    let p = dir.join("summary.json");
    std::fs::write(&p, summary(config, command, outcomes))?;
    written.push(p);
    let p = dir.join("timings.json");
    std::fs::write(&p, timings(outcomes))?;
    written.push(p);
    Ok(written)
}
