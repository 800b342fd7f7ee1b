//! Plain-text shape files: one point per line, `x y z label`, `#` starts a
//! comment line. Coordinates are written with 12 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CategorySchema, DataError, PointCloud};

/// Parses shape-file text. When a schema is given, every label must be one
/// of its part ids.
pub fn parse_shape(
    text: &str,
    category: &str,
    schema: Option<&CategorySchema>,
) -> Result<PointCloud, DataError> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut xyz = [0.0; 3];
        for (k, tok) in fields[..3].iter().enumerate() {
            let v: f64 = tok.parse().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("non-numeric coordinate {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("non-finite coordinate {tok:?}"),
                });
            }
            xyz[k] = v;
        }
        let label: usize = fields[3].parse().map_err(|_| DataError::Parse {
            line: line_no,
            message: format!("label {:?} is not a non-negative integer", fields[3]),
        })?;
        if let Some(schema) = schema {
            if !schema.parts.contains(&label) {
                return Err(DataError::LabelOutsideSchema {
                    line: line_no,
                    label,
                    category: schema.name.clone(),
                });
            }
        }
        points.push(xyz);
        labels.push(label);
    }
    PointCloud::new(points, labels, category)
}

pub fn load_shape(
    path: &Path,
    category: &str,
    schema: Option<&CategorySchema>,
) -> Result<PointCloud, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_shape(&text, category, schema).map_err(|e| e.in_file(path))
}

/// Decimal text with 12 significant digits, written in the shortest form
/// that reads back to the same rounded value.
pub fn fmt_sig12(x: f64) -> String {
    let rounded: f64 = format!("{x:.11e}")
        .parse()
        .expect("float formatting round-trips");
    format!("{rounded}")
}

pub fn format_shape(pc: &PointCloud) -> String {
    let mut out = String::with_capacity(pc.len() * 48);
    for (p, l) in pc.points.iter().zip(&pc.labels) {
        let _ = writeln!(
            out,
            "{} {} {} {}",
            fmt_sig12(p[0]),
            fmt_sig12(p[1]),
            fmt_sig12(p[2]),
            l
        );
    }
    out
}

pub fn save_shape(path: &Path, pc: &PointCloud) -> Result<(), DataError> {
    fs::write(path, format_shape(pc)).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_line_file() {
        let pc = parse_shape("0 0 0 0\n1 0 0 0\n0 1 0 1\n", "c", None).unwrap();
        assert_eq!(pc.len(), 3);
        assert_eq!(pc.labels, vec![0, 0, 1]);
        assert_eq!(pc.points[2], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn comments_and_blank_lines() {
        let pc = parse_shape("# header\n\n0.5 -1 2e-3 4\n", "c", None).unwrap();
        assert_eq!(pc.points, vec![[0.5, -1.0, 0.002]]);
    }

    #[test]
    fn bad_token_names_its_line() {
        let err = parse_shape("0 0 0 0\n1 abc 0 0\n", "c", None).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(
            parse_shape("# nothing\n", "c", None),
            Err(DataError::EmptyCloud)
        ));
    }

    #[test]
    fn label_outside_schema() {
        let schema = CategorySchema::new("c", vec![0, 1], vec![]).unwrap();
        let err = parse_shape("0 0 0 0\n0 0 1 7\n", "c", Some(&schema)).unwrap_err();
        assert!(matches!(
            err,
            DataError::LabelOutsideSchema {
                line: 2,
                label: 7,
                ..
            }
        ));
    }

    #[test]
    fn round_trip_keeps_twelve_digits() {
        let pts = vec![
            [0.123456789012345, -7.000000000001, 1e-7],
            [12345.6789012345, 0.0, -0.5],
        ];
        let pc = PointCloud::new(pts.clone(), vec![3, 4], "c").unwrap();
        let back = parse_shape(&format_shape(&pc), "c", None).unwrap();
        assert_eq!(back.labels, pc.labels);
        for (a, b) in pts.iter().flatten().zip(back.points.iter().flatten()) {
            let tol = a.abs() * 1e-11 + 1e-300;
            assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
        // The encoding itself is stable.
        assert_eq!(format_shape(&back), format_shape(&pc));
    }
}
