//! DOTA-style annotation text: one object per line,
//! `x1 y1 x2 y2 x3 y3 x4 y4 class difficulty`.

use std::fmt::Write as _;
use std::path::Path;

use crate::geometry::OrientedBox;

use super::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct DotaRecord {
    pub obb: OrientedBox,
    pub class_name: String,
    pub difficulty: u32,
}

impl DotaRecord {
    pub fn new(obb: OrientedBox, class_name: impl Into<String>, difficulty: u32) -> Self {
        Self {
            obb,
            class_name: class_name.into(),
            difficulty,
        }
    }
}

pub fn format_dota(records: &[DotaRecord]) -> String {
    let mut out = String::new();
    for r in records {
        for [x, y] in r.obb.to_corners() {
            let _ = write!(out, "{x:.6} {y:.6} ");
        }
        let _ = writeln!(out, "{} {}", r.class_name, r.difficulty);
    }
    out
}

pub fn parse_dota(text: &str) -> Result<Vec<DotaRecord>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        // Header lines of the original DOTA release.
        if line.is_empty() || line.starts_with("imagesource:") || line.starts_with("gsd:") {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let lineno = i + 1;
        if toks.len() != 10 {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("expected 10 fields, found {}", toks.len()),
            });
        }
        let mut pts = [[0.0f64; 2]; 4];
        for (k, tok) in toks[..8].iter().enumerate() {
            let v: f64 = tok.parse().map_err(|_| DataError::Parse {
                line: lineno,
                msg: format!("non-numeric coordinate {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line: lineno,
                    msg: format!("non-finite coordinate {tok:?}"),
                });
            }
            pts[k / 2][k % 2] = v;
        }
        let difficulty = toks[9].parse().map_err(|_| DataError::Parse {
            line: lineno,
            msg: format!("bad difficulty {:?}", toks[9]),
        })?;
        out.push(DotaRecord {
            obb: OrientedBox::from_corners(&pts),
            class_name: toks[8].to_string(),
            difficulty,
        });
    }
    Ok(out)
}

pub fn write_dota(path: &Path, records: &[DotaRecord]) -> Result<(), DataError> {
    std::fs::write(path, format_dota(records)).map_err(|e| DataError::io(path, e))
}

pub fn read_dota(path: &Path) -> Result<Vec<DotaRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_dota(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_axis_aligned_line() {
        let r = parse_dota("1.0 0.5 -1.0 0.5 -1.0 -0.5 1.0 -0.5 ship 0\n").unwrap();
        assert_eq!(r.len(), 1);
        let b = r[0].obb;
        assert!(b.cx.abs() < 1e-12 && b.cy.abs() < 1e-12);
        assert!((b.w - 2.0).abs() < 1e-12 && (b.h - 1.0).abs() < 1e-12);
        assert!(b.theta.abs() < 1e-12);
        assert_eq!(r[0].class_name, "ship");
        assert_eq!(r[0].difficulty, 0);
    }

    #[test]
    fn nine_tokens_is_error_with_line() {
        let text = "1 0 -1 0 -1 -1 1 -1 ship 0\n1 0 -1 0 -1 -1 1 -1 ship\n";
        match parse_dota(text) {
            Err(DataError::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains('9'), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_is_error() {
        let e = parse_dota("1 0 -1 zero -1 -1 1 -1 ship 0").unwrap_err();
        assert!(matches!(e, DataError::Parse { line: 1, .. }));
        assert!(e.to_string().contains("zero"));
    }

    #[test]
    fn skips_headers_and_blank_lines() {
        let text = "imagesource:GoogleEarth\ngsd:0.14\n\n0 0 2 0 2 1 0 1 plane 1\n";
        let r = parse_dota(text).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].difficulty, 1);
    }
}
