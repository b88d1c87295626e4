//! JSONL and CSV report writers.
//!
//! Every JSONL report opens with a `config` record echoing the command and
//! the effective configuration. Deterministic reports hold no wall-clock
//! values; timings go to their own `timings.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    /// A report file whose first line echoes the configuration.
    pub fn with_config(path: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        let mut w = Self::create(path)?;
        w.record("config", &json!({ "command": command, "config": cfg.to_json() }))?;
        Ok(w)
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    /// Writes `body`'s fields behind a `"record": kind` tag.
    pub fn record<T: Serialize>(&mut self, kind: &str, body: &T) -> Result<()> {
        let mut v = serde_json::to_value(body)?;
        let tagged = match v {
            Value::Object(ref mut m) => {
                let mut out = serde_json::Map::new();
                out.insert("record".into(), Value::String(kind.into()));
                out.append(m);
                Value::Object(out)
            }
            other => json!({ "record": kind, "value": other }),
        };
        self.write(&tagged)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().with_context(|| format!("writing {}", self.path.display()))
    }
}

/// Writes serializable rows with a header derived from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Reads every line of a JSONL file.
pub fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}
