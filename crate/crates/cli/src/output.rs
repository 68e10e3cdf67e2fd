//! Output files. Every table starts with two comment lines,
//!
//! ```text
//! # config: {...compact run config...}
//! # model_digest: <sha-256 hex, or "none">
//! ```
//!
//! and every JSON document carries `config` and `model_digest` keys, so any
//! output can be traced back to the run that produced it. Comment lines are
//! skipped by the cohort loader, so generated cohorts read back unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use dosegp_core::config::RunConfig;
use serde_json::Value;

use crate::CliError;

pub const NO_MODEL: &str = "none";

/// Config snapshot and digest stamped on every output.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config: Value,
    pub model_digest: String,
}

impl Provenance {
    pub fn new(config: &RunConfig, model_digest: &str) -> Self {
        Provenance {
            config: serde_json::to_value(config).expect("config encodes"),
            model_digest: model_digest.to_string(),
        }
    }

    fn header(&self) -> String {
        format!("# config: {}\n# model_digest: {}\n", self.config, self.model_digest)
    }
}

pub struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    /// Write a CSV table under the provenance header.
    pub fn table(&mut self, name: &str, prov: &Provenance, columns: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(columns).map_err(CliError::csv)?;
        for r in rows {
            w.write_record(r).map_err(CliError::csv)?;
        }
        let body = w.into_inner().map_err(|e| CliError::new("io", e.to_string()))?;
        let mut bytes = prov.header().into_bytes();
        bytes.extend(body);
        self.write(name, &bytes)
    }

    /// Write a CSV body as-is under the provenance header.
    pub fn raw_table(&mut self, name: &str, prov: &Provenance, body: &str) -> Result<(), CliError> {
        self.write(name, format!("{}{body}", prov.header()).as_bytes())
    }

    /// Write a JSON object with `config` and `model_digest` merged in.
    pub fn json(&mut self, name: &str, prov: &Provenance, mut doc: Value) -> Result<(), CliError> {
        let obj = doc.as_object_mut().expect("output documents are objects");
        obj.insert("config".into(), prov.config.clone());
        obj.insert("model_digest".into(), Value::String(prov.model_digest.clone()));
        self.pretty(name, &doc)
    }

    /// Write a self-describing JSON document unchanged.
    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.write(name, bytes)
    }

    fn pretty(&mut self, name: &str, doc: &Value) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(doc).expect("json values encode");
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    x.to_string()
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}
