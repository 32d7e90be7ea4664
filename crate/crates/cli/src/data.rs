//! CSV tables: comma-separated, header row required, `.` decimal point.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{io_error, CliError, CliResult};

/// A numeric table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| io_error(path, e))?;
        let columns: Vec<String> =
            reader.headers().map_err(|e| io_error(path, e))?.iter().map(str::to_string).collect();
        if columns.is_empty() || columns.iter().all(String::is_empty) {
            return Err(CliError::Data(format!("{}: missing header row", path.display())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = columns.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(CliError::Data(format!("{}: duplicate column name '{dup}'", path.display())));
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            // data rows are numbered from 1, the header being row 0
            let row = i + 1;
            let record = record.map_err(|e| io_error(path, e))?;
            let mut values = Vec::with_capacity(columns.len());
            for (cell, name) in record.iter().zip(&columns) {
                let v: f64 = cell.parse().map_err(|_| {
                    CliError::Data(format!("{}: row {row}, column '{name}': '{cell}' is not a number", path.display()))
                })?;
                if !v.is_finite() {
                    return Err(CliError::Data(format!(
                        "{}: row {row}, column '{name}': value is not finite",
                        path.display()
                    )));
                }
                values.push(v);
            }
            rows.push(values);
        }
        Ok(Dataset { columns, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Splits off the named response column, if any.
    pub fn without_column(mut self, name: Option<&str>) -> CliResult<Self> {
        let Some(name) = name else { return Ok(self) };
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Data(format!("response column '{name}' not found")))?;
        self.columns.remove(idx);
        for r in &mut self.rows {
            r.remove(idx);
        }
        Ok(self)
    }

    /// Reorders the table to `names`, failing on any missing column.
    pub fn select(&self, names: &[String], path: &Path) -> CliResult<Vec<Vec<f64>>> {
        let idx = names
            .iter()
            .map(|n| {
                self.columns.iter().position(|c| c == n).ok_or_else(|| {
                    CliError::Data(format!("{}: column '{n}' required by the model is missing", path.display()))
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(self.rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect())
    }
}

/// Writes a header and rows; floats use the shortest round-trip form.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_error(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}
