//! Delimited-text ingestion and output tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, Support};

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn reader(path: &Path, delimiter: u8) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))
}

/// Read a headed delimited file. Only `response` and `columns` are kept;
/// every field must parse as a number and the response must be 0 or 1.
/// Errors name the offending line (header = line 1).
pub fn read_dataset(path: &Path, response: &str, columns: &[String], delimiter: u8) -> Result<Dataset> {
    let mut rdr = reader(path, delimiter)?;
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))
    };
    let y_idx = find(response)?;
    let idx: Vec<(String, usize)> = columns
        .iter()
        .filter(|c| c.as_str() != response)
        .map(|c| find(c).map(|i| (c.clone(), i)))
        .collect::<Result<_>>()?;
    let mut y = Vec::new();
    let mut cols: BTreeMap<String, Vec<f64>> = idx.iter().map(|(c, _)| (c.clone(), Vec::new())).collect();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Data(format!("{}: line {line}: {e}", path.display())))?;
        let field = |i: usize, name: &str| -> Result<f64> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("{}: line {line}: column '{name}' has unparseable value '{raw}'", path.display())))
        };
        let v = field(y_idx, response)?;
        if v != 0.0 && v != 1.0 {
            return Err(Error::Validation(format!(
                "{}: line {line}: response '{response}' is {v}, expected 0 or 1",
                path.display()
            )));
        }
        y.push(v);
        for (name, i) in &idx {
            let v = field(*i, name)?;
            cols.get_mut(name).expect("column registered").push(v);
        }
    }
    Dataset::new(y, cols)
}

/// Two-column (x, y) file with a header row.
pub fn read_point_cloud(path: &Path, delimiter: u8) -> Result<Vec<[f64; 2]>> {
    let mut rdr = reader(path, delimiter)?;
    let mut pts = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Data(format!("{}: line {line}: {e}", path.display())))?;
        if record.len() < 2 {
            return Err(Error::Data(format!("{}: line {line}: expected two columns", path.display())));
        }
        let parse = |i: usize| {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("{}: line {line}: unparseable value '{}'", path.display(), &record[i])))
        };
        pts.push([parse(0)?, parse(1)?]);
    }
    if pts.is_empty() {
        return Err(Error::Data(format!("{}: no points", path.display())));
    }
    Ok(pts)
}

/// Load every point-cloud support given by path. Relative paths resolve
/// against `base`.
pub fn resolve_point_clouds(spec: &mut ModelSpec, base: &Path, delimiter: u8) -> Result<()> {
    for e in &mut spec.effects {
        if let Support::PointCloud { path: Some(p), points } = &mut e.support {
            if points.is_empty() {
                let full = base.join(p.as_str());
                *points = read_point_cloud(&full, delimiter)?;
            }
        }
    }
    Ok(())
}

/// Headed delimited table writer.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Dimension(format!(
                "row has {} fields, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(&self.header).map_err(|e| io_err(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Shortest round-tripping representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    f.write_all(b"\n").map_err(|e| io_err(path, e))
}
