//! Whitespace-delimited point files: one point per line, `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{RegError, Result};
use crate::pointset::PointSet;

pub fn parse_pointset(text: &str) -> Result<PointSet> {
    let mut data = Vec::new();
    let mut dim = None;
    let mut count = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let lineno = i + 1;
        match dim {
            None => dim = Some(fields.len()),
            Some(d) if d != fields.len() => {
                return Err(RegError::Parse { line: lineno, message: format!("expected {d} columns, found {}", fields.len()) });
            }
            _ => {}
        }
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| RegError::Parse { line: lineno, message: format!("'{f}' is not a number") })?;
            if !v.is_finite() {
                return Err(RegError::Parse { line: lineno, message: format!("'{f}' is not finite") });
            }
            data.push(v);
        }
        count += 1;
    }
    match dim {
        None => Err(RegError::NoPoints),
        Some(d) => PointSet::from_row_slice(count, d, &data),
    }
}

/// Shortest representation that parses back to the same value.
fn fmt_value(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn format_pointset(p: &PointSet) -> String {
    let mut out = String::new();
    for row in p.matrix().row_iter() {
        let line: Vec<String> = row.iter().map(|v| fmt_value(*v)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn load_pointset(path: impl AsRef<Path>) -> Result<PointSet> {
    parse_pointset(&std::fs::read_to_string(path)?)
}

pub fn save_pointset(p: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_pointset(p))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_simple_file() {
        let p = parse_pointset("0 0\n1 2\n").unwrap();
        assert_eq!(p.rows(), vec![vec![0.0, 0.0], vec![1.0, 2.0]]);
    }

    #[test]
    fn comments_and_blank_lines() {
        let p = parse_pointset("# header\n\n1.5 2 # trailing\n  3 4\n").unwrap();
        assert_eq!(p.count(), 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_pointset("1 2\n3\n") {
            Err(RegError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_pointset("1 2\n3 x\n") {
            Err(RegError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_pointset("").unwrap_err().to_string(), "no points");
        assert_eq!(parse_pointset("# only\n").unwrap_err().to_string(), "no points");
    }

    #[test]
    fn extreme_values_round_trip() {
        let vals = [1e-300, -2.5e300, 0.1 + 0.2, -0.0, 123456789.123456789, f64::MIN_POSITIVE];
        let p = PointSet::from_row_slice(vals.len(), 1, &vals).unwrap();
        let q = parse_pointset(&format_pointset(&p)).unwrap();
        for (a, b) in p.matrix().iter().zip(q.matrix().iter()) {
            assert_eq!(a.to_bits() & !(1 << 63), b.to_bits() & !(1 << 63));
        }
    }
}
