// Text form for fixtures: one row per line, comma separated, every entry
// written with 17 significant digits so it parses back to the same bits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use super::Matrix;
use crate::error::{Error, Result};

/// Formats a value with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl Matrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows() * self.cols() * 24);
        for i in 0..self.rows() {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Matrix> {
        let mut rows = 0;
        let mut cols = None;
        let mut data = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let before = data.len();
            for field in line.split(',') {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad number {field:?}", lineno + 1)))?;
                data.push(v);
            }
            let width = data.len() - before;
            match cols {
                None => cols = Some(width),
                Some(c) if c != width => {
                    return Err(Error::Parse(format!(
                        "line {}: {width} fields, expected {c}",
                        lineno + 1
                    )));
                }
                _ => {}
            }
            rows += 1;
        }
        Matrix::new(rows, cols.unwrap_or(0), data)
    }
}
