use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Table,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Table => "txt",
        }
    }
}

/// What produced an output: attached to every report and written beside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config_text: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hex::encode(Sha256::digest(config_text.as_bytes())),
            seed,
        }
    }

    /// One comment line for text and CSV outputs.
    pub fn comment(&self) -> String {
        format!(
            "# cascade-lab {} {} config_sha256={} seed={}",
            self.version, self.command, self.config_hash, self.seed
        )
    }
}

pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// CSV with the provenance comment as its first line.
    pub fn write_csv(&self, name: &str, prov: &Provenance, body: &str) -> Result<PathBuf> {
        self.write(name, format!("{}\n{body}", prov.comment()))
    }

    /// Path of a file inside the directory, for outputs streamed elsewhere.
    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// A command's result in all three renderings.
pub struct Report {
    pub table: String,
    pub csv: String,
    pub json: serde_json::Value,
}

impl Report {
    pub fn render(&self, format: Format, prov: &Provenance) -> Result<String> {
        Ok(match format {
            Format::Table => format!("{}\n{}", prov.comment(), self.table),
            Format::Csv => format!("{}\n{}", prov.comment(), self.csv),
            Format::Json => {
                let doc = serde_json::json!({ "provenance": prov, "result": self.json });
                let mut s = serde_json::to_string_pretty(&doc)?;
                s.push('\n');
                s
            }
        })
    }
}

/// Joins CSV rows, quoting cells that need it.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let cell = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|c| cell(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}
