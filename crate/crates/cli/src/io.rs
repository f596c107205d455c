use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::CliError;

/// Response and design read from a CSV whose header is `y,x1,...,xp`.
pub struct Data {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

fn parse_cell(s: &str, line: u64, col: usize, path: &Path) -> Result<f64, CliError> {
    let v: f64 = s.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "{}: line {line}, column {}: cannot parse {s:?} as a number",
            path.display(),
            col + 1
        ))
    })?;
    if !v.is_finite() {
        return Err(CliError::Usage(format!(
            "{}: line {line}, column {}: value is not finite",
            path.display(),
            col + 1
        )));
    }
    Ok(v)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map(|p| p.line());
    match line {
        Some(l) => CliError::Usage(format!("{}: line {l}: {e}", path.display())),
        None => CliError::Usage(format!("{}: {e}", path.display())),
    }
}

pub fn read_data(path: &Path) -> Result<Data, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.get(0).map(str::trim) != Some("y") {
        return Err(CliError::Usage(format!(
            "{}: line 1: first column must be named \"y\"",
            path.display()
        )));
    }
    let p = headers.len() - 1;
    if p == 0 {
        return Err(CliError::Usage(format!(
            "{}: line 1: no design columns after \"y\"",
            path.display()
        )));
    }
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (c, field) in rec.iter().enumerate() {
            let v = parse_cell(field, line, c, path)?;
            if c == 0 {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    if n == 0 {
        return Err(CliError::Usage(format!("{}: no data rows", path.display())));
    }
    Ok(Data {
        x: DMatrix::from_row_slice(n, p, &xs),
        y: DVector::from_vec(ys),
    })
}

/// Square numeric matrix, with or without a header row.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        // a non-numeric first row is a header
        if k == 0 && rec.iter().any(|f| f.trim().parse::<f64>().is_err()) {
            continue;
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| parse_cell(f, line, c, path))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    let p = rows.len();
    if p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(CliError::Usage(format!("{}: expected a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, body + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let body = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| {
        CliError::Usage(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}
