//! Deterministic output tables and the run manifest.
//!
//! Every table is comma-delimited with a fixed header, fixed row order, and
//! fixed float precision, preceded by a comment line carrying the hash of
//! the configuration that produced it. Missing values print as `NA`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Decimal places used for estimates and derived statistics.
pub const ESTIMATE_DECIMALS: usize = 6;

#[derive(Debug, Clone)]
pub enum Cell {
    Str(String),
    Int(i64),
    /// Fixed-precision float; NaN prints as NA.
    F(f64),
    /// Fixed-precision float with explicit decimals.
    Fp(f64, usize),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Str(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::F(v) => Cell::Fp(*v, ESTIMATE_DECIMALS).render(),
            Cell::Fp(v, d) => {
                if v.is_nan() {
                    "NA".to_string()
                } else {
                    format!("{v:.prec$}", prec = d)
                }
            }
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

/// Write one table: config-hash comment, header, then rows.
pub fn write_table(
    path: &Path,
    config_hash: &str,
    header: &[&str],
    rows: &[Vec<Cell>],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# config_hash={config_hash}")?;
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let line: Vec<String> = row.iter().map(Cell::render).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Hex SHA-256 of the canonical config text.
pub fn config_hash(config_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run manifest: configuration echo, artifact inventory, seeds, timings.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub config: toml::Value,
    /// Flag overrides applied on top of the file, as "key=value" strings.
    pub overrides: Vec<String>,
    pub seed: u64,
    pub artifacts: Vec<ArtifactRecord>,
    /// Wall-clock milliseconds per completed step (informational; excluded
    /// from byte-reproducibility comparisons).
    pub timings_ms: Vec<(String, u128)>,
}

#[derive(Debug, Serialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub rows: usize,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("run_manifest.json");
        let mut f = std::fs::File::create(&path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(self).expect("serializable manifest"))?;
        Ok(path)
    }
}

/// Structured summary of one regression fit (the metadata record that
/// accompanies the delimited results).
pub fn fit_summary(fit: &crate::fe::RegressionFit, tolerance: f64) -> serde_json::Value {
    serde_json::json!({
        "terms": fit.terms,
        "coefficients": fit.coefficients,
        "n_obs": fit.n_obs,
        "k_effective": fit.k_effective,
        "n_clusters": fit.n_clusters,
        "baseline_mean": if fit.baseline_mean.is_nan() { None } else { Some(fit.baseline_mean) },
        "demean_tolerance": tolerance,
        "demean_iterations": fit.demean_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            vec![Cell::from("a"), Cell::F(1.5), Cell::Int(3)],
            vec![Cell::from("b"), Cell::F(f64::NAN), Cell::Int(-1)],
        ];
        let p1 = dir.path().join("t1.csv");
        let p2 = dir.path().join("t2.csv");
        write_table(&p1, "deadbeef", &["k", "v", "n"], &rows).unwrap();
        write_table(&p2, "deadbeef", &["k", "v", "n"], &rows).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b1, std::fs::read(&p2).unwrap());
        let text = String::from_utf8(b1).unwrap();
        assert!(text.starts_with("# config_hash=deadbeef\nk,v,n\n"));
        assert!(text.contains("b,NA,-1"));
        assert!(text.contains("a,1.500000,3"));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("x"), config_hash("x"));
        assert_ne!(config_hash("x"), config_hash("y"));
        assert_eq!(config_hash("").len(), 64);
    }
}
