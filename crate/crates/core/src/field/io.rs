//! FGRID binary format and CSV import.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FGRD"          4 bytes
//! version         u32 (= 1)
//! n_time          u32
//! n_rows          u32
//! n_cols          u32
//! dt              f64
//! origin_lat      f64
//! origin_lon      f64
//! cell_deg        f64
//! mask            n_rows*n_cols bytes, 0 or 1
//! payload         n_time*n_rows*n_cols f32, time-major then row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GridMeta, GridSeries};
use crate::error::{Error, Result};

pub const FGRID_MAGIC: &[u8; 4] = b"FGRD";
pub const FGRID_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 4 * 8;

/// Encodes a series as FGRID bytes. Masked cells are written as 0.
pub fn write_grid_series(series: &GridSeries) -> Vec<u8> {
    let n_cells = series.n_cells();
    let mut out = Vec::with_capacity(HEADER_LEN + n_cells + 4 * series.values().len());
    out.extend_from_slice(FGRID_MAGIC);
    out.extend_from_slice(&FGRID_VERSION.to_le_bytes());
    for d in [series.n_time(), series.n_rows(), series.n_cols()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for m in [series.meta.dt, series.meta.origin_lat, series.meta.origin_lon, series.meta.cell_deg] {
        out.extend_from_slice(&m.to_le_bytes());
    }
    out.extend(series.mask().iter().map(|&m| m as u8));
    for (i, &v) in series.values().iter().enumerate() {
        let v = if series.mask()[i % n_cells] { v as f32 } else { 0.0 };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn f64_at(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

/// Decodes FGRID bytes.
pub fn read_grid_series(bytes: &[u8]) -> Result<GridSeries> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptHeader(format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[0..4] != FGRID_MAGIC {
        return Err(Error::CorruptHeader("bad magic, expected \"FGRD\"".into()));
    }
    let version = u32_at(bytes, 4);
    if version != FGRID_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FGRID_VERSION,
        });
    }
    let n_time = u32_at(bytes, 8) as usize;
    let n_rows = u32_at(bytes, 12) as usize;
    let n_cols = u32_at(bytes, 16) as usize;
    if n_time == 0 || n_rows == 0 || n_cols == 0 {
        return Err(Error::CorruptHeader(format!("zero dimension {n_time}x{n_rows}x{n_cols}")));
    }
    let meta = GridMeta {
        dt: f64_at(bytes, 20),
        origin_lat: f64_at(bytes, 28),
        origin_lon: f64_at(bytes, 36),
        cell_deg: f64_at(bytes, 44),
    };
    let n_cells = n_rows
        .checked_mul(n_cols)
        .ok_or_else(|| Error::CorruptHeader("grid size overflows".into()))?;
    let expected = n_time
        .checked_mul(n_cells)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN + n_cells))
        .ok_or_else(|| Error::CorruptHeader("declared size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "header declares {n_time}x{n_rows}x{n_cols} ({expected} bytes), file has {} bytes",
            bytes.len()
        )));
    }
    let mut mask = Vec::with_capacity(n_cells);
    for &b in &bytes[HEADER_LEN..HEADER_LEN + n_cells] {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            other => return Err(Error::CorruptHeader(format!("mask byte {other} is not 0 or 1"))),
        }
    }
    let payload = &bytes[HEADER_LEN + n_cells..];
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    GridSeries::new(n_time, n_rows, n_cols, values, mask, meta)
}

pub fn save_grid_series(series: &GridSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&write_grid_series(series)).map_err(|e| Error::io(path, e))
}

pub fn load_grid_series(path: impl AsRef<Path>) -> Result<GridSeries> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_grid_series(&bytes)
}

/// Imports a `t,row,col,value` CSV. Dimensions are one past the largest
/// index seen; cells that never appear are masked, and every listed cell must
/// have a value at every time step.
pub fn load_grid_series_csv(path: impl AsRef<Path>) -> Result<GridSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["t", "row", "col", "value"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::CorruptHeader(format!(
            "CSV header must be `t,row,col,value`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let (mut n_time, mut n_rows, mut n_cols) = (0, 0, 0);
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::DimensionMismatch(format!("CSV line {} has too few fields", line + 2)))
        };
        let parse_idx = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::InvalidArgument(format!("CSV line {}: bad index `{s}`", line + 2)))
        };
        let t = parse_idx(field(0)?)?;
        let r = parse_idx(field(1)?)?;
        let c = parse_idx(field(2)?)?;
        let v: f64 = field(3)?
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("CSV line {}: bad value", line + 2)))?;
        n_time = n_time.max(t + 1);
        n_rows = n_rows.max(r + 1);
        n_cols = n_cols.max(c + 1);
        if entries.insert((t, r, c), v).is_some() {
            return Err(Error::InvalidArgument(format!("CSV line {}: duplicate entry ({t},{r},{c})", line + 2)));
        }
    }
    if entries.is_empty() {
        return Err(Error::NoValidCells);
    }
    let n_cells = n_rows * n_cols;
    let mut mask = vec![false; n_cells];
    for &(_, r, c) in entries.keys() {
        mask[r * n_cols + c] = true;
    }
    let mut values = vec![0.0; n_time * n_cells];
    for t in 0..n_time {
        for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (r, c) = (cell / n_cols, cell % n_cols);
            let v = entries.get(&(t, r, c)).ok_or_else(|| {
                Error::DimensionMismatch(format!("CSV is missing a value for t={t}, row={r}, col={c}"))
            })?;
            values[t * n_cells + cell] = *v;
        }
    }
    GridSeries::new(n_time, n_rows, n_cols, values, mask, GridMeta::default())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("CSV parse error in {}: {other:?}", path.display())),
    }
}
