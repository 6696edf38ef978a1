//! Price series ingestion, indicator features, calendar alignment, scaling
//! and rolling-window sequence construction.

pub mod indicators;
pub mod io;
pub mod scaler;
pub mod windows;

pub use scaler::{apply_minmax, fit_minmax, invert_minmax, scale_dataset, ColumnScale, ScalerParams};
pub use windows::{
    make_sequences, make_windows, RollingWindowPlan, SequenceRole, SupervisedPair, WindowSpec,
};

use crate::error::{Error, Result};
use chrono::{Datelike, NaiveDate};
use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

/// One row of a daily OHLCV series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

/// A daily price series sorted by date with no duplicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceSeries {
    pub symbol: String,
    rows: Vec<PriceRow>,
}

impl PriceSeries {
    /// Sorts rows by date and validates the series: duplicate dates are
    /// rejected, closes must be positive and volumes non-negative.
    pub fn new(symbol: impl Into<String>, mut rows: Vec<PriceRow>) -> Result<Self> {
        rows.sort_by_key(|r| r.date);
        for pair in rows.windows(2) {
            if pair[0].date == pair[1].date {
                return Err(Error::DuplicateDate(pair[0].date));
            }
        }
        for r in &rows {
            if !r.close.is_finite() || r.close <= 0.0 {
                return Err(Error::Schema(format!(
                    "close must be positive and finite on {}",
                    r.date
                )));
            }
            if !r.volume.is_finite() || r.volume < 0.0 {
                return Err(Error::Schema(format!(
                    "volume must be non-negative on {}",
                    r.date
                )));
            }
        }
        Ok(PriceSeries {
            symbol: symbol.into(),
            rows,
        })
    }

    pub fn rows(&self) -> &[PriceRow] {
        &self.rows
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.rows.iter().map(|r| r.date).collect()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.close).collect()
    }
}

/// A named scalar series on its own (possibly irregular) calendar, used
/// for exogenous inputs that trade on different days than the target.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedSeries {
    pub name: String,
    pub points: Vec<(NaiveDate, f64)>,
}

impl NamedSeries {
    pub fn new(name: impl Into<String>, mut points: Vec<(NaiveDate, f64)>) -> Result<Self> {
        points.sort_by_key(|(d, _)| *d);
        for pair in points.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::DuplicateDate(pair[0].0));
            }
        }
        Ok(NamedSeries {
            name: name.into(),
            points,
        })
    }
}

/// Inclusive date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(Error::Usage(format!("empty date range {start}..{end}")));
        }
        Ok(DateRange { start, end })
    }

    /// Jan 1 of `first` through Dec 31 of `last`.
    pub fn years(first: i32, last: i32) -> Result<Self> {
        let start = NaiveDate::from_ymd_opt(first, 1, 1)
            .ok_or_else(|| Error::Usage(format!("bad year {first}")))?;
        let end = NaiveDate::from_ymd_opt(last, 12, 31)
            .ok_or_else(|| Error::Usage(format!("bad year {last}")))?;
        DateRange::new(start, end)
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

/// Dense matrix of named feature columns over a strictly increasing list
/// of dates. Row i holds every feature observed on `dates[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    dates: Vec<NaiveDate>,
    columns: Vec<String>,
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(dates: Vec<NaiveDate>, columns: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != dates.len() || values.ncols() != columns.len() {
            return Err(Error::Dimension(format!(
                "matrix {}x{} does not match {} dates x {} columns",
                values.nrows(),
                values.ncols(),
                dates.len(),
                columns.len()
            )));
        }
        for pair in dates.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Schema(format!(
                    "dates must be strictly increasing ({} then {})",
                    pair[0], pair[1]
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.clone()) {
                return Err(Error::Schema(format!("duplicate column name {c}")));
            }
        }
        Ok(FeatureMatrix {
            dates,
            columns,
            values,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        let idx = self
            .column_index(name)
            .ok_or_else(|| Error::Schema(format!("unknown column {name}")))?;
        Ok(self.values.column(idx))
    }

    /// Joins two matrices on the intersection of their dates. Column names
    /// must not collide.
    pub fn inner_join(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        for c in &other.columns {
            if self.columns.contains(c) {
                return Err(Error::Schema(format!("column {c} present on both sides")));
            }
        }
        let mut dates = Vec::new();
        let mut left_rows = Vec::new();
        let mut right_rows = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.dates.len() && j < other.dates.len() {
            match self.dates[i].cmp(&other.dates[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dates.push(self.dates[i]);
                    left_rows.push(i);
                    right_rows.push(j);
                    i += 1;
                    j += 1;
                }
            }
        }
        if dates.is_empty() {
            return Err(Error::Alignment("joined matrices share no dates".into()));
        }
        let mut columns = self.columns.clone();
        columns.extend(other.columns.iter().cloned());
        let left = self.values.select(Axis(0), &left_rows);
        let right = other.values.select(Axis(0), &right_rows);
        let mut values = Array2::zeros((dates.len(), columns.len()));
        values
            .slice_mut(ndarray::s![.., ..self.columns.len()])
            .assign(&left);
        values
            .slice_mut(ndarray::s![.., self.columns.len()..])
            .assign(&right);
        FeatureMatrix::new(dates, columns, values)
    }

    /// Drops every leading row that still contains a NaN; returns the
    /// trimmed matrix and how many rows went.
    pub fn trim_leading_undefined(&self) -> (FeatureMatrix, usize) {
        let first_full = (0..self.n_rows())
            .find(|&i| self.values.row(i).iter().all(|v| !v.is_nan()))
            .unwrap_or(self.n_rows());
        let trimmed = FeatureMatrix {
            dates: self.dates[first_full..].to_vec(),
            columns: self.columns.clone(),
            values: self.values.slice(ndarray::s![first_full.., ..]).to_owned(),
        };
        (trimmed, first_full)
    }

    pub fn has_nan(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Contiguous row index range (inclusive) whose dates fall in `range`,
    /// or None when no row does.
    pub fn rows_in(&self, range: &DateRange) -> Option<(usize, usize)> {
        let a = self.dates.partition_point(|d| *d < range.start);
        let b = self.dates.partition_point(|d| *d <= range.end);
        if a >= b {
            None
        } else {
            Some((a, b - 1))
        }
    }

    /// First and last calendar year present.
    pub fn year_span(&self) -> Option<(i32, i32)> {
        Some((self.dates.first()?.year(), self.dates.last()?.year()))
    }
}

/// Forward-fills each series onto `calendar` (value at day d = last
/// observation dated <= d) and trims leading rows where any series has no
/// observation yet. A series whose first observation lies beyond the
/// calendar's end has zero overlap and is rejected.
pub fn align_calendar(series: &[NamedSeries], calendar: &[NaiveDate]) -> Result<FeatureMatrix> {
    if series.is_empty() {
        return Err(Error::Usage("align_calendar: no series given".into()));
    }
    if calendar.is_empty() {
        return Err(Error::Alignment("empty calendar".into()));
    }
    for pair in calendar.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::Schema(format!(
                "calendar must be strictly increasing ({} then {})",
                pair[0], pair[1]
            )));
        }
    }
    let n = calendar.len();
    let mut values = Array2::from_elem((n, series.len()), f64::NAN);
    let mut joint_start = 0usize;
    for (col, s) in series.iter().enumerate() {
        if s.points.is_empty() || s.points[0].0 > *calendar.last().unwrap() {
            return Err(Error::Alignment(format!(
                "series {} has no overlap with the calendar",
                s.name
            )));
        }
        let mut p = 0usize;
        let mut last: Option<f64> = None;
        let mut first_defined: Option<usize> = None;
        for (i, d) in calendar.iter().enumerate() {
            while p < s.points.len() && s.points[p].0 <= *d {
                last = Some(s.points[p].1);
                p += 1;
            }
            if let Some(v) = last {
                values[(i, col)] = v;
                if first_defined.is_none() {
                    first_defined = Some(i);
                }
            }
        }
        match first_defined {
            Some(i) => joint_start = joint_start.max(i),
            None => {
                return Err(Error::Alignment(format!(
                    "series {} has no overlap with the calendar",
                    s.name
                )))
            }
        }
    }
    FeatureMatrix::new(
        calendar[joint_start..].to_vec(),
        series.iter().map(|s| s.name.clone()).collect(),
        values.slice(ndarray::s![joint_start.., ..]).to_owned(),
    )
}

/// Indicator windows used when building the technical feature block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorConfig {
    pub sma: Vec<usize>,
    pub ema: Vec<usize>,
    pub rsi: usize,
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub macd_signal: usize,
    pub bollinger_window: usize,
    pub bollinger_k: f64,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            sma: vec![20, 50],
            ema: vec![20, 50],
            rsi: 14,
            macd_fast: 12,
            macd_slow: 26,
            macd_signal: 9,
            bollinger_window: 20,
            bollinger_k: 2.0,
        }
    }
}

impl IndicatorConfig {
    pub fn warmup(&self) -> usize {
        indicators::warmup_rows(&self.sma, self.rsi, self.bollinger_window)
    }
}

/// Builds the technical feature block on the target's own calendar: raw
/// close and volume, the configured indicators, and any exogenous series
/// forward-filled alongside. The joint indicator warm-up prefix is
/// trimmed, so the result carries no undefined values.
pub fn build_feature_matrix(
    prices: &PriceSeries,
    exogenous: &[NamedSeries],
    cfg: &IndicatorConfig,
) -> Result<FeatureMatrix> {
    let close = prices.closes();
    let calendar = prices.dates();
    let mut columns: Vec<String> = vec!["close".into(), "volume".into()];
    let mut cols: Vec<Vec<f64>> = vec![
        close.clone(),
        prices.rows.iter().map(|r| r.volume).collect(),
    ];
    for &n in &cfg.sma {
        columns.push(format!("sma_{n}"));
        cols.push(indicators::sma(&close, n)?);
    }
    for &n in &cfg.ema {
        columns.push(format!("ema_{n}"));
        cols.push(indicators::ema(&close, n)?);
    }
    columns.push(format!("rsi_{}", cfg.rsi));
    cols.push(indicators::rsi(&close, cfg.rsi)?);
    let m = indicators::macd(&close, cfg.macd_fast, cfg.macd_slow, cfg.macd_signal)?;
    columns.extend(["macd".into(), "macd_signal".into(), "macd_hist".into()]);
    cols.push(m.macd);
    cols.push(m.signal);
    cols.push(m.histogram);
    let b = indicators::bollinger(&close, cfg.bollinger_window, cfg.bollinger_k)?;
    columns.extend(["bb_mid".into(), "bb_upper".into(), "bb_lower".into()]);
    cols.push(b.middle);
    cols.push(b.upper);
    cols.push(b.lower);

    let n = calendar.len();
    let mut values = Array2::zeros((n, cols.len()));
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            values[(i, j)] = *v;
        }
    }
    let mut matrix = FeatureMatrix::new(calendar, columns, values)?;
    if !exogenous.is_empty() {
        let exo = align_calendar(exogenous, matrix.dates())?;
        matrix = matrix.inner_join(&exo)?;
    }
    let (trimmed, _) = matrix.trim_leading_undefined();
    if trimmed.n_rows() == 0 {
        return Err(Error::InsufficientData(
            "no rows remain after indicator warm-up".into(),
        ));
    }
    if trimmed.has_nan() {
        return Err(Error::Schema(
            "undefined values remain after warm-up trim".into(),
        ));
    }
    Ok(trimmed)
}

/// A feature matrix paired with the supervised target: the next trading
/// day's raw close. The final date has no target and never enters a
/// supervised pair.
#[derive(Debug, Clone)]
pub struct AlignedDataset {
    pub features: FeatureMatrix,
    pub target: Vec<Option<f64>>,
    pub close_column: String,
}

impl AlignedDataset {
    pub fn assemble(features: FeatureMatrix, close_column: &str) -> Result<Self> {
        let close = features.column(close_column)?.to_owned();
        let n = features.n_rows();
        if n < 2 {
            return Err(Error::InsufficientData(
                "need at least two rows to form a target".into(),
            ));
        }
        let mut target: Vec<Option<f64>> = (1..n).map(|i| Some(close[i])).collect();
        target.push(None);
        Ok(AlignedDataset {
            features,
            target,
            close_column: close_column.to_string(),
        })
    }
}

/// `AlignedDataset` after min-max scaling; the target is scaled with the
/// close column's parameters so predictions can be inverted to price units.
#[derive(Debug, Clone)]
pub struct ScaledDataset {
    pub features: FeatureMatrix,
    pub target: Vec<Option<f64>>,
    pub close_column: String,
    pub scaler: ScalerParams,
}

#[cfg(test)]
pub(crate) fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}
