//! CSV files with a schema comment line, and run manifests.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::Value;
use sha2::{Digest, Sha256};

const INTEGER_COLUMNS: &[&str] = &["n", "window", "S1", "S2", "s", "start"];

/// Column schema line for a CSV header.
pub fn schema_line(header: &str) -> String {
    let columns: Vec<String> = header
        .split(',')
        .map(|c| {
            let ty = if INTEGER_COLUMNS.contains(&c) { "u64" } else { "f64" };
            format!("{c}:{ty}")
        })
        .collect();
    format!("# schema: {}", columns.join(","))
}

/// Writes `body` (header line first) to `path`, preceded by its schema line.
pub fn write_csv<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> io::Result<()>,
{
    let mut buf = Vec::new();
    body(&mut buf)?;
    let text = String::from_utf8(buf).expect("CSV writers emit UTF-8");
    let header = text.lines().next().unwrap_or_default();
    let mut file = io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(file, "{}", schema_line(header))?;
    file.write_all(text.as_bytes())?;
    file.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `--out`, then `TSINC_OUT`, then the config's `output`, then `./out`.
pub fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("TSINC_OUT") {
        return PathBuf::from(p);
    }
    config.map_or_else(|| PathBuf::from("out"), Path::to_path_buf)
}

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_marks_index_columns() {
        assert_eq!(schema_line("n,t_fast,X0,S1"), "# schema: n:u64,t_fast:f64,X0:f64,S1:u64");
    }

    #[test]
    fn hash_is_content_addressed() {
        let a = config_hash(b"{\"a\": 1}");
        assert_eq!(a, config_hash(b"{\"a\": 1}"));
        assert_ne!(a, config_hash(b"{\"a\": 2}"));
        assert_eq!(config_hash(b"").len(), 64);
    }
}
