//! Minimal deterministic CSV writing: UTF-8, comma-separated, header row,
//! '.' decimal separator, floats printed with 17 significant digits so a
//! round-trip parse reproduces the exact f64.

use std::io::Write;
use std::path::Path;

use icdm_core::{Error, Result};

/// Format a float with 17 significant digits (round-trips through parse).
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        return "nan".to_string();
    }
    format!("{v:.16e}")
}

/// Write a header and preformatted rows. Fails with the path named when the
/// directory is missing or not writable.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Range(format!("cannot create {}: {e}", path.display())))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::Range(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
