//! Output helpers shared by the dataset export and the study writers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Formats `x` with `digits` significant digits in plain decimal notation.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new digit (9.9999996 -> 10.00000).
    let rounded: f64 = s.parse().unwrap_or(x);
    let new_magnitude = rounded.abs().log10().floor() as i64;
    if rounded != 0.0 && new_magnitude > magnitude && decimals > 0 {
        format!("{x:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}
