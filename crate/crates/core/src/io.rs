//! Plain-text matrices and protocol files.
//!
//! Matrix files hold one row per line, entries separated by whitespace or
//! commas; `#` starts a comment. Protocol files hold `key = value`
//! scalars followed by `[name] rows cols` matrix sections. Reals are
//! written with 17 significant digits so a write/read cycle is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::synthesis::{FullOrderProtocol, ReducedOrderProtocol};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{context} line {line}: {msg}")]
    Parse {
        context: String,
        line: usize,
        msg: String,
    },
    #[error("{context}: missing {what}")]
    Missing { context: String, what: String },
}

fn parse_err(context: &str, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        context: context.to_string(),
        line,
        msg: msg.into(),
    }
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

fn parse_row(text: &str, context: &str, line: usize) -> Result<Vec<f64>, IoError> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(context, line, format!("bad number '{t}'")))
        })
        .collect()
}

fn rows_to_matrix(rows: Vec<Vec<f64>>, context: &str) -> Result<DMatrix<f64>, IoError> {
    let Some(first) = rows.first() else {
        return Err(IoError::Missing {
            context: context.to_string(),
            what: "matrix rows".into(),
        });
    };
    let cols = first.len();
    if let Some(k) = rows.iter().position(|r| r.len() != cols) {
        return Err(parse_err(
            context,
            k + 1,
            format!("row has {} entries, expected {cols}", rows[k].len()),
        ));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

pub fn parse_matrix(text: &str, context: &str) -> Result<DMatrix<f64>, IoError> {
    let mut rows = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        rows.push(parse_row(line, context, k + 1)?);
    }
    rows_to_matrix(rows, context)
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, IoError> {
    parse_matrix(&read_text(path)?, &path.display().to_string())
}

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format_real(*v)).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), IoError> {
    write_text(path, &format_matrix(m))
}

#[derive(Debug, Clone)]
pub enum Protocol {
    Full(FullOrderProtocol),
    Reduced(ReducedOrderProtocol),
}

impl Protocol {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Protocol::Full(_) => "full",
            Protocol::Reduced(_) => "reduced",
        }
    }

    pub fn tau(&self) -> f64 {
        match self {
            Protocol::Full(p) => p.tau,
            Protocol::Reduced(p) => p.tau,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Protocol::Full(p) => p.gamma,
            Protocol::Reduced(p) => p.gamma,
        }
    }
}

struct Sections {
    context: String,
    scalars: Vec<(String, String)>,
    matrices: Vec<(String, DMatrix<f64>)>,
}

impl Sections {
    fn parse(text: &str, context: &str) -> Result<Self, IoError> {
        let mut scalars = Vec::new();
        let mut matrices = Vec::new();
        // (name, rows, cols, collected rows, header line)
        let mut open: Option<(String, usize, usize, Vec<Vec<f64>>, usize)> = None;
        let close = |open: &mut Option<(String, usize, usize, Vec<Vec<f64>>, usize)>,
                     matrices: &mut Vec<(String, DMatrix<f64>)>|
         -> Result<(), IoError> {
            if let Some((name, r, c, rows, line)) = open.take() {
                if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                    return Err(parse_err(
                        context,
                        line,
                        format!("section [{name}] is not {r} x {c}"),
                    ));
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                matrices.push((name, DMatrix::from_row_slice(r, c, &flat)));
            }
            Ok(())
        };
        for (k, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                close(&mut open, &mut matrices)?;
                let (name, dims) = rest
                    .split_once(']')
                    .ok_or_else(|| parse_err(context, k + 1, "unterminated section header"))?;
                let dims: Vec<usize> = dims
                    .split_whitespace()
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err(context, k + 1, "bad section dimensions"))?;
                let [r, c] = dims[..] else {
                    return Err(parse_err(context, k + 1, "section needs 'rows cols'"));
                };
                open = Some((name.trim().to_string(), r, c, Vec::new(), k + 1));
            } else if let Some((_, _, _, rows, _)) = open.as_mut() {
                rows.push(parse_row(line, context, k + 1)?);
            } else {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| parse_err(context, k + 1, "expected 'key = value'"))?;
                scalars.push((key.trim().to_string(), value.trim().to_string()));
            }
        }
        close(&mut open, &mut matrices)?;
        Ok(Self {
            context: context.to_string(),
            scalars,
            matrices,
        })
    }

    fn missing(&self, what: String) -> IoError {
        IoError::Missing {
            context: self.context.clone(),
            what,
        }
    }

    fn text(&self, key: &str) -> Result<&str, IoError> {
        self.scalars
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| self.missing(format!("key '{key}'")))
    }

    fn real(&self, key: &str) -> Result<f64, IoError> {
        let v = self.text(key)?;
        v.parse::<f64>()
            .map_err(|_| parse_err(&self.context, 0, format!("'{key}' is not a number: {v}")))
    }

    fn matrix(&self, name: &str) -> Result<DMatrix<f64>, IoError> {
        self.matrices
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| self.missing(format!("section [{name}]")))
    }
}

fn push_scalar(s: &mut String, key: &str, v: f64) {
    let _ = writeln!(s, "{key} = {}", format_real(v));
}

fn push_section(s: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(s, "\n[{name}] {} {}", m.nrows(), m.ncols());
    s.push_str(&format_matrix(m));
}

pub fn format_protocol(p: &Protocol) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kind = {}", p.kind_name());
    match p {
        Protocol::Full(f) => {
            for (k, v) in [
                ("tau", f.tau),
                ("rho", f.rho),
                ("gamma", f.gamma),
                ("r1", f.r1),
                ("r2", f.r2),
            ] {
                push_scalar(&mut s, k, v);
            }
            for (k, m) in [
                ("K", &f.k_gain),
                ("L", &f.l_gain),
                ("P1", &f.p1),
                ("P2", &f.p2),
                ("Y", &f.y),
            ] {
                push_section(&mut s, k, m);
            }
        }
        Protocol::Reduced(r) => {
            for (k, v) in [
                ("tau", r.tau),
                ("rho", r.rho),
                ("gamma", r.gamma),
                ("r1", r.r1),
                ("r2", r.r2),
            ] {
                push_scalar(&mut s, k, v);
            }
            for (k, m) in [
                ("K", &r.k_gain),
                ("F_bar", &r.f_bar),
                ("G", &r.g_gain),
                ("T", &r.t_map),
                ("Q1", &r.q1_map),
                ("Q2", &r.q2_map),
                ("P1", &r.p1),
                ("P2", &r.p2),
            ] {
                push_section(&mut s, k, m);
            }
        }
    }
    s
}

pub fn parse_protocol(text: &str, context: &str) -> Result<Protocol, IoError> {
    let sec = Sections::parse(text, context)?;
    match sec.text("kind")? {
        "full" => Ok(Protocol::Full(FullOrderProtocol {
            k_gain: sec.matrix("K")?,
            l_gain: sec.matrix("L")?,
            tau: sec.real("tau")?,
            rho: sec.real("rho")?,
            gamma: sec.real("gamma")?,
            p1: sec.matrix("P1")?,
            p2: sec.matrix("P2")?,
            r1: sec.real("r1")?,
            r2: sec.real("r2")?,
            y: sec.matrix("Y")?,
        })),
        "reduced" => Ok(Protocol::Reduced(ReducedOrderProtocol {
            f_bar: sec.matrix("F_bar")?,
            g_gain: sec.matrix("G")?,
            t_map: sec.matrix("T")?,
            q1_map: sec.matrix("Q1")?,
            q2_map: sec.matrix("Q2")?,
            k_gain: sec.matrix("K")?,
            tau: sec.real("tau")?,
            rho: sec.real("rho")?,
            gamma: sec.real("gamma")?,
            p1: sec.matrix("P1")?,
            p2: sec.matrix("P2")?,
            r1: sec.real("r1")?,
            r2: sec.real("r2")?,
        })),
        other => Err(parse_err(
            context,
            0,
            format!("unknown protocol kind '{other}'"),
        )),
    }
}

pub fn read_protocol(path: &Path) -> Result<Protocol, IoError> {
    parse_protocol(&read_text(path)?, &path.display().to_string())
}

pub fn write_protocol(path: &Path, p: &Protocol) -> Result<(), IoError> {
    write_text(path, &format_protocol(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_text_accepts_commas_and_comments() {
        let m = parse_matrix("# header\n1, 2 3\n\n4 5,6 # tail\n", "t").unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert!(parse_matrix("1 2\n3\n", "t").is_err());
        assert!(parse_matrix("1 x\n", "t").is_err());
        assert!(parse_matrix("# nothing\n", "t").is_err());
    }

    #[test]
    fn formatted_reals_round_trip_exactly() {
        for v in [std::f64::consts::PI, -1e-300, 6.02214076e23, 0.1 + 0.2] {
            assert_eq!(format_real(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn bad_section_shape_is_rejected() {
        let text = "kind = full\n[K] 2 2\n1 2\n";
        assert!(matches!(
            parse_protocol(text, "p"),
            Err(IoError::Parse { .. })
        ));
    }
}
