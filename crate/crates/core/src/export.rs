//! Plain CSV output shared by paths, ensembles, grids and reports.

use std::fmt::Write;

/// Round-trippable float formatting (17 significant digits).
pub fn fmt_float(v: f64) -> String {
    if v == 0.0 {
        // Avoid "-0" vs "0" differences in diffs.
        return "0.0000000000000000e0".to_string();
    }
    format!("{v:.16e}")
}

/// Joins a header and rows of floats into CSV text.
pub fn csv_table(header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", fmt_float(*v));
        }
        out.push('\n');
    }
    out
}
