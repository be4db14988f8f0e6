//! Dataset manifests: one `clean<TAB>noisy<TAB>snr_db[<TAB>embeddings]` row
//! per line, paths relative to the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub clean: String,
    pub noisy: String,
    pub snr_db: f64,
    pub embeddings: Option<String>,
}

impl fmt::Display for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.clean, self.noisy, self.snr_db)?;
        if let Some(e) = &self.embeddings {
            write!(f, "\t{e}")?;
        }
        Ok(())
    }
}

/// Parse manifest text. Blank lines are ignored.
pub fn parse(text: &str) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(format!("manifest line {}: expected 3 or 4 tab-separated fields, got {}", i + 1, cols.len()));
        }
        if cols.iter().any(|c| c.is_empty()) {
            return Err(format!("manifest line {}: empty field", i + 1));
        }
        let snr_db: f64 =
            cols[2].parse().map_err(|_| format!("manifest line {}: bad SNR {:?}", i + 1, cols[2]))?;
        out.push(Entry {
            clean: cols[0].to_string(),
            noisy: cols[1].to_string(),
            snr_db,
            embeddings: cols.get(3).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

pub fn render(entries: &[Entry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

/// Directory that relative manifest paths resolve against.
pub fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}
