//! Rolling year windows and supervised sequence construction.

use super::{DateRange, ScaledDataset};
use crate::error::{Error, Result};
use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// One walk-forward window: three training years followed by one test year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub train_start: i32,
    pub train_end: i32,
    pub test_year: i32,
}

impl WindowSpec {
    pub fn id(&self) -> String {
        format!("{}-{}->{}", self.train_start, self.train_end, self.test_year)
    }

    pub fn train_range(&self) -> DateRange {
        DateRange::years(self.train_start, self.train_end).expect("valid years")
    }

    pub fn test_range(&self) -> DateRange {
        DateRange::years(self.test_year, self.test_year).expect("valid year")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingWindowPlan {
    pub windows: Vec<WindowSpec>,
}

/// Builds the walk-forward plan over `first..=last`: window y trains on
/// years y..y+2 and tests on y+3, advancing one year at a time.
pub fn make_windows(first: i32, last: i32) -> Result<RollingWindowPlan> {
    if last < first + 3 {
        return Err(Error::InsufficientData(format!(
            "year span {first}..{last} is shorter than the 3+1 window"
        )));
    }
    let windows = (first..=last - 3)
        .map(|y| WindowSpec {
            train_start: y,
            train_end: y + 2,
            test_year: y + 3,
        })
        .collect();
    Ok(RollingWindowPlan { windows })
}

/// Whether sequences are drawn from a window's training or test span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceRole {
    Train,
    Test,
}

/// One supervised example: `steps` consecutive scaled feature rows and the
/// scaled next-day close after the last of them.
#[derive(Debug, Clone)]
pub struct SupervisedPair {
    pub input: Array2<f64>,
    pub target: f64,
    pub input_end: NaiveDate,
    pub target_date: NaiveDate,
    /// True for test pairs whose lookback reaches rows before the test
    /// span (allowed for context, never for training pairs).
    pub crosses_boundary: bool,
}

/// Builds supervised pairs for one window.
///
/// A pair ending at row t covers feature rows [t-steps+1, t] and predicts
/// the close at row t+1. The dataset's final row never appears in a pair,
/// neither as input nor as target date. Training pairs keep both input and
/// target inside the training years; test pairs keep target dates inside
/// the test year but may look back across the boundary (flagged).
pub fn make_sequences(
    ds: &ScaledDataset,
    window: &WindowSpec,
    role: SequenceRole,
    steps: usize,
) -> Result<Vec<SupervisedPair>> {
    if steps == 0 {
        return Err(Error::Usage("steps must be >= 1".into()));
    }
    let dates = ds.features.dates();
    let n = dates.len();
    if n < 2 {
        return Err(Error::InsufficientData("dataset has fewer than 2 rows".into()));
    }
    let last_target_row = n - 2; // the final row is excluded from pairs entirely

    let (range, label) = match role {
        SequenceRole::Train => (window.train_range(), "training"),
        SequenceRole::Test => (window.test_range(), "test"),
    };
    let (lo, hi) = ds.features.rows_in(&range).ok_or_else(|| {
        Error::InsufficientData(format!(
            "window {} has no {label} rows",
            window.id()
        ))
    })?;

    let (t_min, t_max) = match role {
        SequenceRole::Train => {
            if hi - lo + 1 < steps + 1 {
                return Err(Error::InsufficientData(format!(
                    "window {} {label} span has {} rows; need at least steps + 1 = {}",
                    window.id(),
                    hi - lo + 1,
                    steps + 1
                )));
            }
            (lo + steps - 1, hi.min(last_target_row + 1) - 1)
        }
        SequenceRole::Test => {
            // target dates strictly inside the test span
            let first_end = lo.max(1) - 1; // t such that t+1 == lo
            (first_end.max(steps - 1), hi.min(last_target_row + 1) - 1)
        }
    };

    let mut pairs = Vec::new();
    let mut t = t_min;
    while t <= t_max {
        let start = t + 1 - steps;
        let in_bounds = match role {
            SequenceRole::Train => start >= lo,
            SequenceRole::Test => true,
        };
        if in_bounds && t + 1 <= last_target_row {
            let target = ds.target[t].ok_or_else(|| {
                Error::InsufficientData(format!("missing target at {}", dates[t]))
            })?;
            pairs.push(SupervisedPair {
                input: ds
                    .features
                    .values()
                    .slice(ndarray::s![start..=t, ..])
                    .to_owned(),
                target,
                input_end: dates[t],
                target_date: dates[t + 1],
                crosses_boundary: match role {
                    SequenceRole::Train => false,
                    SequenceRole::Test => start < lo,
                },
            });
        }
        t += 1;
    }
    Ok(pairs)
}
