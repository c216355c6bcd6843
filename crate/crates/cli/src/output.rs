//! Artifact writing with provenance.
//!
//! CSV tables start with `#` comment lines naming the toolkit version, the
//! command, the seed and the SHA-256 digest of every input file. JSON
//! documents carry the same data in a top-level `provenance` object.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::pipeline::invalid;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    /// Input name to `sha256:<hex>`; the bundled Hofstede table is listed
    /// as `bundled`.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, seed: u64) -> Provenance {
        Provenance {
            tool: "labelaudit",
            version: labelaudit::VERSION,
            command: command.to_string(),
            seed,
            inputs: BTreeMap::new(),
        }
    }

    /// Records the digest of an input file; an unreadable input is a
    /// validation error.
    pub fn add_file(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| invalid(format!("cannot read {name} file {}: {e}", path.display())))?;
        self.inputs.insert(name.to_string(), format!("sha256:{}", hex::encode(Sha256::digest(&bytes))));
        Ok(())
    }

    pub fn add_note(&mut self, name: &str, value: &str) {
        self.inputs.insert(name.to_string(), value.to_string());
    }

    fn header(&self) -> String {
        let mut s = format!("# {} {}\n# command: {}\n# seed: {}\n", self.tool, self.version, self.command, self.seed);
        for (k, v) in &self.inputs {
            s.push_str(&format!("# input {k}: {v}\n"));
        }
        s
    }
}

pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<OutDir> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes a CSV table after the provenance header.
    pub fn csv<F>(&self, name: &str, prov: &Provenance, body: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> csv::Result<()>,
    {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        w.write_all(prov.header().as_bytes())?;
        body(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
        Ok(())
    }

    /// Writes `{"provenance": ..., <body fields>}` as pretty JSON.
    pub fn json(&self, name: &str, prov: &Provenance, body: &Value) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, to_json_bytes(prov, body)?).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn to_json_bytes(prov: &Provenance, body: &Value) -> Result<Vec<u8>> {
    let mut doc = serde_json::Map::new();
    doc.insert("provenance".into(), serde_json::to_value(prov)?);
    match body {
        Value::Object(m) => doc.extend(m.clone()),
        other => {
            doc.insert("result".into(), other.clone());
        }
    }
    let mut bytes = serde_json::to_vec_pretty(&Value::Object(doc))?;
    bytes.push(b'\n');
    Ok(bytes)
}
