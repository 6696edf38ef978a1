//! Min-max scaling fitted on training rows only.

use super::{AlignedDataset, DateRange, FeatureMatrix, ScaledDataset};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-column min-max parameters. A constant column (max == min) is
/// flagged and maps every value to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub constant: bool,
}

impl ColumnScale {
    pub fn transform(&self, x: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        if self.constant {
            self.min
        } else {
            y * (self.max - self.min) + self.min
        }
    }
}

/// Min-max parameters for a set of columns plus an identifier of the
/// window they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub fitted_on: String,
    pub columns: Vec<ColumnScale>,
}

impl ScalerParams {
    pub fn get(&self, name: &str) -> Result<&ColumnScale> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Schema(format!("no scaler parameters for column {name}")))
    }
}

/// Fits per-column min/max over the rows of `m` inside `range`.
pub fn fit_minmax(m: &FeatureMatrix, range: &DateRange, fitted_on: &str) -> Result<ScalerParams> {
    let (a, b) = m.rows_in(range).ok_or_else(|| {
        Error::InsufficientData(format!(
            "no rows between {} and {} to fit the scaler",
            range.start, range.end
        ))
    })?;
    let mut columns = Vec::with_capacity(m.n_cols());
    for (j, name) in m.columns().iter().enumerate() {
        let col = m.values().column(j);
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for i in a..=b {
            let v = col[i];
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite value in column {name} while fitting scaler"
                )));
            }
            min = min.min(v);
            max = max.max(v);
        }
        columns.push(ColumnScale {
            name: name.clone(),
            min,
            max,
            constant: min == max,
        });
    }
    Ok(ScalerParams {
        fitted_on: fitted_on.to_string(),
        columns,
    })
}

/// Applies the fitted parameters to every column of `m`. Values outside
/// the fitted range map outside [0, 1] and are deliberately not clipped.
pub fn apply_minmax(m: &FeatureMatrix, params: &ScalerParams) -> Result<FeatureMatrix> {
    let mut values = m.values().clone();
    for (j, name) in m.columns().iter().enumerate() {
        let scale = params.get(name)?;
        for v in values.column_mut(j) {
            *v = scale.transform(*v);
        }
    }
    FeatureMatrix::new(m.dates().to_vec(), m.columns().to_vec(), values)
}

/// Maps scaled values for `column` back to raw units.
pub fn invert_minmax(values: &[f64], params: &ScalerParams, column: &str) -> Result<Vec<f64>> {
    let scale = params.get(column)?;
    Ok(values.iter().map(|v| scale.invert(*v)).collect())
}

/// Scales a dataset's features and target with parameters fitted
/// elsewhere (on training rows). The target shares the close column's
/// parameters so a prediction inverts back to price units.
pub fn scale_dataset(ds: &AlignedDataset, params: &ScalerParams) -> Result<ScaledDataset> {
    let features = apply_minmax(&ds.features, params)?;
    let close_scale = params.get(&ds.close_column)?;
    let target = ds
        .target
        .iter()
        .map(|t| t.map(|v| close_scale.transform(v)))
        .collect();
    Ok(ScaledDataset {
        features,
        target,
        close_column: ds.close_column.clone(),
        scaler: params.clone(),
    })
}
