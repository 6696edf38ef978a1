//! CSV ingestion and the aligned-dataset audit export.

use super::{AlignedDataset, NamedSeries, PriceRow, PriceSeries};
use crate::error::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Maps the standard OHLCV fields onto the CSV's actual header names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriceColumnMap {
    pub date: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: String,
}

impl Default for PriceColumnMap {
    fn default() -> Self {
        PriceColumnMap {
            date: "date".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: "volume".into(),
        }
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Usage(format!("cannot open {}: {e}", path.display())))
}

fn header_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("{}: missing column {name}", path.display())))
}

fn parse_date(s: &str, path: &Path, row: usize) -> Result<NaiveDate> {
    s.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        row,
        msg: format!("bad ISO-8601 date {s:?}"),
    })
}

fn parse_f64(s: &str, what: &str, path: &Path, row: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        row,
        msg: format!("bad {what} value {s:?}"),
    })
}

/// Loads a daily OHLCV series. Rows are sorted by date after load and
/// duplicate dates are rejected.
pub fn load_price_csv(path: &Path, map: &PriceColumnMap) -> Result<PriceSeries> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let idx = [
        header_index(&headers, &map.date, path)?,
        header_index(&headers, &map.open, path)?,
        header_index(&headers, &map.high, path)?,
        header_index(&headers, &map.low, path)?,
        header_index(&headers, &map.close, path)?,
        header_index(&headers, &map.volume, path)?,
    ];
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2; // 1-based, after the header line
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row,
            msg: e.to_string(),
        })?;
        let field = |i: usize| record.get(idx[i]).unwrap_or("");
        rows.push(PriceRow {
            date: parse_date(field(0), path, row)?,
            open: parse_f64(field(1), "open", path, row)?,
            high: parse_f64(field(2), "high", path, row)?,
            low: parse_f64(field(3), "low", path, row)?,
            close: parse_f64(field(4), "close", path, row)?,
            volume: parse_f64(field(5), "volume", path, row)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} contains no data rows",
            path.display()
        )));
    }
    let symbol = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    PriceSeries::new(symbol, rows)
}

/// Loads a wide CSV of exogenous series: a `date` column plus one column
/// per series. Empty cells mean the series has no observation that day.
pub fn load_named_series_csv(path: &Path) -> Result<Vec<NamedSeries>> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let date_idx = header_index(&headers, "date", path)?;
    let value_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != date_idx)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if value_cols.is_empty() {
        return Err(Error::Schema(format!(
            "{}: no series columns besides date",
            path.display()
        )));
    }
    let mut points: Vec<Vec<(NaiveDate, f64)>> = vec![Vec::new(); value_cols.len()];
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row,
            msg: e.to_string(),
        })?;
        let d = parse_date(record.get(date_idx).unwrap_or(""), path, row)?;
        for (k, (i, name)) in value_cols.iter().enumerate() {
            let cell = record.get(*i).unwrap_or("");
            if !cell.is_empty() {
                points[k].push((d, parse_f64(cell, name, path, row)?));
            }
        }
    }
    value_cols
        .into_iter()
        .zip(points)
        .map(|((_, name), p)| NamedSeries::new(name, p))
        .collect()
}

/// Loads a one-column trading calendar (header `date`).
pub fn load_calendar_csv(path: &Path) -> Result<Vec<NaiveDate>> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let date_idx = header_index(&headers, "date", path)?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row,
            msg: e.to_string(),
        })?;
        out.push(parse_date(record.get(date_idx).unwrap_or(""), path, row)?);
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} contains no dates",
            path.display()
        )));
    }
    Ok(out)
}

/// Serializes an OHLCV series in the default column layout, one row per
/// day in date order.
pub fn price_series_to_csv(series: &PriceSeries) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "open", "high", "low", "close", "volume"])
        .map_err(|e| Error::Schema(e.to_string()))?;
    for r in series.rows() {
        w.write_record([
            r.date.to_string(),
            r.open.to_string(),
            r.high.to_string(),
            r.low.to_string(),
            r.close.to_string(),
            r.volume.to_string(),
        ])
        .map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}

/// Serializes exogenous series in the wide layout `load_named_series_csv`
/// reads: a date column over the union of observation dates, one column
/// per series, empty cells where a series has no value.
pub fn named_series_to_csv(series: &[NamedSeries]) -> Result<Vec<u8>> {
    if series.is_empty() {
        return Err(Error::Usage("no series to write".into()));
    }
    let mut by_date: std::collections::BTreeMap<NaiveDate, Vec<Option<f64>>> =
        std::collections::BTreeMap::new();
    for (k, s) in series.iter().enumerate() {
        for (d, v) in &s.points {
            by_date.entry(*d).or_insert_with(|| vec![None; series.len()])[k] = Some(*v);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string()];
    header.extend(series.iter().map(|s| s.name.clone()));
    w.write_record(&header)
        .map_err(|e| Error::Schema(e.to_string()))?;
    for (d, cells) in &by_date {
        let mut rec = vec![d.to_string()];
        rec.extend(cells.iter().map(|c| match c {
            Some(v) => v.to_string(),
            None => String::new(),
        }));
        w.write_record(&rec).map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}

/// Serializes a feature matrix as CSV: a date column, then every feature
/// column in matrix order.
pub fn feature_matrix_to_csv(m: &super::FeatureMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string()];
    header.extend(m.columns().iter().cloned());
    w.write_record(&header)
        .map_err(|e| Error::Schema(e.to_string()))?;
    for (i, d) in m.dates().iter().enumerate() {
        let mut rec = vec![d.to_string()];
        for v in m.values().row(i) {
            rec.push(v.to_string());
        }
        w.write_record(&rec).map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}

/// Serializes the dataset as one CSV: date, every feature column, target.
/// The final row's target cell is empty because the next close is unknown.
pub fn dataset_to_csv(ds: &AlignedDataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string()];
    header.extend(ds.features.columns().iter().cloned());
    header.push("target".into());
    w.write_record(&header)
        .map_err(|e| Error::Schema(e.to_string()))?;
    for (i, d) in ds.features.dates().iter().enumerate() {
        let mut rec = vec![d.to_string()];
        for v in ds.features.values().row(i) {
            rec.push(v.to_string());
        }
        rec.push(match ds.target[i] {
            Some(t) => t.to_string(),
            None => String::new(),
        });
        w.write_record(&rec).map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}
