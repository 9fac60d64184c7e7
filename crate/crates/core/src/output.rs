//! CSV/JSON artifact helpers. Floats are written with 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Long-format CSV builder with a fixed header.
#[derive(Debug, Clone)]
pub struct Csv {
    columns: usize,
    body: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            columns: header.len(),
            body: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        debug_assert_eq!(cells.len(), self.columns);
        let mut line = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            match c {
                Cell::F(v) => line.push_str(&fmt(*v)),
                Cell::I(v) => write!(line, "{v}").unwrap(),
                Cell::S(s) => line.push_str(s),
            }
        }
        self.body.push_str(&line);
        self.body.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.body
    }
}

pub enum Cell {
    F(f64),
    I(i64),
    S(String),
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, &s)
}
