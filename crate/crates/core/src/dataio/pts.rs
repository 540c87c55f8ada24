//! The `.pts` landmark annotation format:
//!
//! ```text
//! version: 1
//! n_points: 68
//! {
//! x1 y1
//! ...
//! }
//! ```
//!
//! Parsing tolerates CRLF line endings and extra whitespace; writing is
//! canonical, so write -> parse -> write is byte-identical.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PtsAnnotation {
    pub version: u32,
    pub points: Vec<(f64, f64)>,
}

impl PtsAnnotation {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }
}

pub fn parse_pts(text: &str) -> Result<PtsAnnotation> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty());

    let version_line = lines.next().ok_or_else(|| Error::Parse("empty .pts file".into()))?;
    let version = parse_header_field(version_line, "version:")?;

    let count_line = lines
        .next()
        .ok_or_else(|| Error::Parse("missing n_points header".into()))?;
    let n_points: usize = parse_header_field(count_line, "n_points:")?;

    match lines.next() {
        Some("{") => {}
        other => {
            return Err(Error::Parse(format!(
                "expected '{{' after the header, got {other:?}"
            )))
        }
    }

    let mut points = Vec::with_capacity(n_points);
    let mut closed = false;
    for line in lines.by_ref() {
        if line == "}" {
            closed = true;
            break;
        }
        let mut it = line.split_whitespace();
        let x = parse_number(it.next(), line)?;
        let y = parse_number(it.next(), line)?;
        if it.next().is_some() {
            return Err(Error::Parse(format!("too many values on point line {line:?}")));
        }
        points.push((x, y));
    }
    if !closed {
        return Err(Error::Parse("missing closing '}'".into()));
    }
    if lines.next().is_some() {
        return Err(Error::Parse("trailing content after '}'".into()));
    }
    if points.len() != n_points {
        return Err(Error::Parse(format!(
            "n_points says {n_points} but found {} points",
            points.len()
        )));
    }
    Ok(PtsAnnotation { version, points })
}

fn parse_header_field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| Error::Parse(format!("expected {key:?} header, got {line:?}")))?;
    rest.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad value in header {line:?}")))
}

fn parse_number(tok: Option<&str>, line: &str) -> Result<f64> {
    let tok = tok.ok_or_else(|| Error::Parse(format!("missing coordinate on line {line:?}")))?;
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Parse(format!("non-numeric token {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

pub fn write_pts(annotation: &PtsAnnotation) -> String {
    let mut out = String::new();
    out.push_str(&format!("version: {}\n", annotation.version));
    out.push_str(&format!("n_points: {}\n", annotation.n_points()));
    out.push_str("{\n");
    for &(x, y) in &annotation.points {
        out.push_str(&format!("{x} {y}\n"));
    }
    out.push_str("}\n");
    out
}
