//! Output helpers shared by the writers: CSV floats and JSON files.

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

/// 17 significant digits, enough to round-trip any binary64 value.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    format!("{v:.16e}")
}

/// Writes `value` as pretty JSON terminated by a newline.
pub fn write_json<T: Serialize, P: AsRef<Path>>(path: P, value: &T) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    fs::write(path, s)
}

/// Joins a CSV row.
pub fn csv_row(cells: &[f64]) -> String {
    cells.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 123456789.123, -2.5] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.0), "0");
    }
}
