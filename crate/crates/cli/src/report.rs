//! CSV and manifest writers. Every file starts with the producing command
//! line and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Clone, Debug)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(argv: &[String], seed: u64) -> Self {
        Provenance {
            command: argv.join(" "),
            seed,
        }
    }
}

pub struct Csv {
    preamble: String,
    rows: csv::Writer<Vec<u8>>,
}

impl Csv {
    pub fn new(prov: &Provenance, notes: &[(&str, String)], header: &[&str]) -> Self {
        let mut preamble = String::new();
        let _ = writeln!(preamble, "# cmd: {}", prov.command);
        let _ = writeln!(preamble, "# seed: {}", prov.seed);
        for (k, v) in notes {
            let _ = writeln!(preamble, "# {k}: {v}");
        }
        let mut rows = csv::Writer::from_writer(Vec::new());
        rows.write_record(header).expect("in-memory csv write");
        Csv { preamble, rows }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.rows.write_record(cells).expect("in-memory csv write");
    }

    pub fn write(self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let body = self.rows.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        let mut bytes = self.preamble.into_bytes();
        bytes.extend(body);
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

/// `<file>.manifest.json` next to `path`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn write_manifest(path: &Path, prov: &Provenance, body: impl Serialize) -> Result<()> {
    let mut v = json!({ "command": prov.command, "seed": prov.seed });
    if let (Value::Object(m), Value::Object(extra)) = (&mut v, serde_json::to_value(body)?) {
        m.extend(extra);
    }
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn f(x: f64) -> String {
    format!("{x}")
}

/// Reads a CSV written by [`Csv`], skipping comment lines.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
