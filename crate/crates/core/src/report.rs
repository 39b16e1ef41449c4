//! CSV output shared by every command: a header row, data rows, and a
//! trailing `# config-hash=<sha256>` line tying the file to its settings.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::sha256_hex;

pub fn config_hash(config_text: &str) -> String {
    sha256_hex(config_text.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Csv {
    header: String,
    rows: Vec<String>,
}

impl Csv {
    pub fn new(header: &str) -> Csv {
        Csv { header: header.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: String) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = String>) {
        self.rows.extend(rows);
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn render(&self, hash: &str) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 2));
        out.push_str(&self.header);
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        out.push_str("# config-hash=");
        out.push_str(hash);
        out.push('\n');
        out
    }

    pub fn write(&self, path: &Path, hash: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.render(hash)).map_err(|e| Error::io(path, e))
    }
}

/// Formats a float for CSV output; `NaN` renders as `NA`.
pub fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.6}")
    }
}
