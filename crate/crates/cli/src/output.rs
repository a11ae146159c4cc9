//! Record emission. Every record carries the command, the config hash and
//! the seed; JSON lines also carry wall-clock timestamps, CSV rows do not.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Jsonl,
    Csv,
}

pub struct Emitter {
    out: Box<dyn Write>,
    format: Format,
    command: String,
    config_hash: String,
    seed: u64,
    started_at: String,
    rows: Vec<Map<String, Value>>,
}

pub fn now() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_default()
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

impl Emitter {
    pub fn new(path: Option<&Path>, format: Format, command: &str, config_hash: &str, seed: u64) -> Result<Self, CliError> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_err)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        Ok(Emitter {
            out,
            format,
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            started_at: now(),
            rows: Vec::new(),
        })
    }

    /// Emits one record of kind `kind` whose payload serializes to an object.
    pub fn emit<T: Serialize>(&mut self, kind: &str, payload: &T) -> Result<(), CliError> {
        let mut rec = Map::new();
        rec.insert("command".into(), Value::from(self.command.as_str()));
        rec.insert("record".into(), Value::from(kind));
        rec.insert("config_hash".into(), Value::from(self.config_hash.as_str()));
        rec.insert("seed".into(), Value::from(self.seed));
        match serde_json::to_value(payload).map_err(io_err)? {
            Value::Object(m) => rec.extend(m),
            other => {
                rec.insert("value".into(), other);
            }
        }
        match self.format {
            Format::Jsonl => {
                rec.insert("started_at".into(), Value::from(self.started_at.as_str()));
                rec.insert("emitted_at".into(), Value::from(now()));
                serde_json::to_writer(&mut self.out, &rec).map_err(io_err)?;
                self.out.write_all(b"\n").map_err(io_err)?;
            }
            Format::Csv => {
                let mut flat = Map::new();
                flatten("", Value::Object(rec), &mut flat);
                self.rows.push(flat);
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        if self.format == Format::Csv {
            write_csv(&mut self.out, &self.rows)?;
        }
        self.out.flush().map_err(io_err)
    }
}

/// Nested objects become dotted keys; arrays stay as JSON text.
fn flatten(prefix: &str, v: Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other);
        }
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Header is the union of keys in first-seen order.
pub fn write_csv<W: Write>(out: W, rows: &[Map<String, Value>]) -> Result<(), CliError> {
    let mut header: Vec<String> = Vec::new();
    for r in rows {
        for k in r.keys() {
            if !header.contains(k) {
                header.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header).map_err(io_err)?;
    for r in rows {
        w.write_record(header.iter().map(|k| r.get(k).map(cell).unwrap_or_default()))
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Writes serializable rows to a CSV file.
pub fn csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let maps: Vec<Map<String, Value>> = rows
        .iter()
        .map(|r| {
            let mut flat = Map::new();
            flatten("", serde_json::to_value(r).unwrap_or(Value::Null), &mut flat);
            flat
        })
        .collect();
    let f = File::create(path).map_err(io_err)?;
    write_csv(BufWriter::new(f), &maps)
}

pub fn json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let f = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(io_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}
