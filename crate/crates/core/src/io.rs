//! Numeric CSV plumbing shared by the stream formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("header mismatch: expected '{expected}', found '{found}'")]
    Header { expected: String, found: String },
    #[error("row {row}, column {column} ({name}): cannot parse '{text}' as a number")]
    Number {
        row: usize,
        column: usize,
        name: String,
        text: String,
    },
    #[error("row {row}: expected {expected} columns, found {found}")]
    Columns {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: {message}")]
    Invalid { row: usize, message: String },
}

pub fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A parsed numeric row with its 1-based line number in the source.
#[derive(Debug, Clone)]
pub struct Row {
    pub line: usize,
    pub values: Vec<f64>,
}

/// Parses a CSV whose header must equal `header` and whose cells are all
/// numeric. `#` lines and blank lines are skipped.
pub fn parse_numeric(text: &str, header: &[&str]) -> Result<Vec<Row>, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let found: Vec<&str> = lines
        .next()
        .map(|(_, l)| l.split(',').map(str::trim).collect())
        .unwrap_or_default();
    if found != header {
        return Err(DataError::Header {
            expected: header.join(","),
            found: found.join(","),
        });
    }
    let mut rows = Vec::new();
    for (line, text) in lines {
        let cells: Vec<&str> = text.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(DataError::Columns {
                row: line,
                expected: header.len(),
                found: cells.len(),
            });
        }
        let values = cells
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                cell.parse::<f64>().map_err(|_| DataError::Number {
                    row: line,
                    column: i + 1,
                    name: header[i].to_string(),
                    text: cell.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(Row { line, values });
    }
    Ok(rows)
}

/// Writes rows with shortest round-trip float formatting.
pub fn format_numeric<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row.as_ref() {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}
