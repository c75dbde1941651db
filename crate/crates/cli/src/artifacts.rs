//! Artifact directory with a manifest naming every file written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config_sha256: String,
    pub complete: bool,
    pub files: Vec<FileEntry>,
}

pub struct ArtifactDir {
    root: PathBuf,
    subcommand: String,
    seed: u64,
    config_sha256: String,
    files: BTreeMap<String, FileEntry>,
}

impl ArtifactDir {
    /// Creates `root` and records the resolved config as `config.toml`.
    pub fn create(root: &Path, subcommand: &str, seed: u64, canonical_config: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        let mut dir = ArtifactDir {
            root: root.to_path_buf(),
            subcommand: subcommand.to_string(),
            seed,
            config_sha256: sha256_hex(canonical_config.as_bytes()),
            files: BTreeMap::new(),
        };
        dir.write("config.toml", canonical_config.as_bytes())?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.insert(
            name.to_string(),
            FileEntry { name: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() },
        );
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// `#`-prefixed comment lines, a header row, then `rows`.
    pub fn write_csv(&mut self, name: &str, comments: &[String], header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let bytes = csv_bytes(comments, header, rows)?;
        self.write(name, &bytes)
    }

    pub fn write_matrix_csv(&mut self, name: &str, comments: &[String], m: &DMatrix<f64>) -> Result<PathBuf, CliError> {
        let header: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = m.row_iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect()).collect();
        self.write_csv(name, comments, &header, &rows)
    }

    /// Writes the manifest and returns it.
    pub fn finish(mut self, complete: bool) -> Result<Manifest, CliError> {
        let manifest = Manifest {
            tool: "ntklab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: ntk_lab::VERSION.into(),
            subcommand: self.subcommand.clone(),
            seed: self.seed,
            config_sha256: self.config_sha256.clone(),
            complete,
            files: std::mem::take(&mut self.files).into_values().collect(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        let path = self.root.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }
}

pub fn csv_bytes(comments: &[String], header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    for c in comments {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(buf);
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// Reads a CSV with a header row, skipping `#` comment lines.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn parse_f64(path: &Path, row: usize, field: &str) -> Result<f64, CliError> {
    field
        .trim()
        .parse()
        .map_err(|_| CliError::Io(format!("{}: data row {}: `{field}` is not a number", path.display(), row + 1)))
}

/// Reads a numeric matrix written by `write_matrix_csv`.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let (header, rows) = read_csv(path)?;
    let mut data = Vec::with_capacity(rows.len() * header.len());
    for (i, r) in rows.iter().enumerate() {
        for f in r {
            data.push(parse_f64(path, i, f)?);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), header.len(), &data))
}
