//! Technical indicators over daily close series.
//!
//! Every function returns one value per input row. Entries inside an
//! indicator's warm-up prefix are NaN; the dataset builder trims the joint
//! warm-up once all columns are assembled, so downstream matrices never
//! carry NaN.

use crate::error::{Error, Result};

fn check_window(n: usize, len: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage(format!("{what}: window must be >= 1")));
    }
    if n > len {
        return Err(Error::InsufficientData(format!(
            "{what}: window {n} exceeds series length {len}"
        )));
    }
    Ok(())
}

/// Simple moving average; the first `n - 1` entries are NaN.
pub fn sma(close: &[f64], n: usize) -> Result<Vec<f64>> {
    check_window(n, close.len(), "sma")?;
    let mut out = vec![f64::NAN; close.len()];
    let mut sum = 0.0;
    for (i, &c) in close.iter().enumerate() {
        sum += c;
        if i + 1 > n {
            sum -= close[i - n];
        }
        if i + 1 >= n {
            out[i] = sum / n as f64;
        }
    }
    Ok(out)
}

/// Exponential moving average with alpha = 2 / (n + 1), seeded from the
/// first close, so every entry is defined. `n` is a smoothing horizon,
/// not a lookback requirement, so it may exceed the series length.
pub fn ema(close: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Usage("ema: window must be >= 1".into()));
    }
    if close.is_empty() {
        return Err(Error::InsufficientData("ema: empty series".into()));
    }
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(close.len());
    let mut prev = close[0];
    out.push(prev);
    for &c in &close[1..] {
        prev = alpha * c + (1.0 - alpha) * prev;
        out.push(prev);
    }
    Ok(out)
}

/// Relative strength index with Wilder smoothing of average gain/loss.
///
/// The first `n` entries are NaN (the seed averages need `n` price
/// changes). A window with no movement in either direction reads 50.
pub fn rsi(close: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Usage("rsi: window must be >= 1".into()));
    }
    if close.len() < n + 1 {
        return Err(Error::InsufficientData(format!(
            "rsi: need at least {} closes for window {n}, got {}",
            n + 1,
            close.len()
        )));
    }
    let mut out = vec![f64::NAN; close.len()];
    let mut avg_gain = 0.0;
    let mut avg_loss = 0.0;
    for t in 1..=n {
        let d = close[t] - close[t - 1];
        avg_gain += d.max(0.0);
        avg_loss += (-d).max(0.0);
    }
    avg_gain /= n as f64;
    avg_loss /= n as f64;
    out[n] = rs_to_rsi(avg_gain, avg_loss);
    for t in n + 1..close.len() {
        let d = close[t] - close[t - 1];
        avg_gain = (avg_gain * (n as f64 - 1.0) + d.max(0.0)) / n as f64;
        avg_loss = (avg_loss * (n as f64 - 1.0) + (-d).max(0.0)) / n as f64;
        out[t] = rs_to_rsi(avg_gain, avg_loss);
    }
    Ok(out)
}

fn rs_to_rsi(avg_gain: f64, avg_loss: f64) -> f64 {
    if avg_gain == 0.0 && avg_loss == 0.0 {
        50.0
    } else if avg_loss == 0.0 {
        100.0
    } else {
        100.0 - 100.0 / (1.0 + avg_gain / avg_loss)
    }
}

pub struct Macd {
    pub macd: Vec<f64>,
    pub signal: Vec<f64>,
    pub histogram: Vec<f64>,
}

/// MACD line (fast EMA minus slow EMA), its signal EMA, and the histogram.
/// All three are defined from the first row because the EMAs are seeded
/// from the first sample.
pub fn macd(close: &[f64], fast: usize, slow: usize, signal: usize) -> Result<Macd> {
    if fast >= slow {
        return Err(Error::Usage(format!(
            "macd: fast window {fast} must be shorter than slow window {slow}"
        )));
    }
    let fast_ema = ema(close, fast)?;
    let slow_ema = ema(close, slow)?;
    let line: Vec<f64> = fast_ema
        .iter()
        .zip(&slow_ema)
        .map(|(f, s)| f - s)
        .collect();
    let signal_line = ema(&line, signal)?;
    let histogram = line
        .iter()
        .zip(&signal_line)
        .map(|(m, s)| m - s)
        .collect();
    Ok(Macd {
        macd: line,
        signal: signal_line,
        histogram,
    })
}

pub struct Bollinger {
    pub middle: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

/// Bollinger bands: middle = SMA(n), upper/lower = middle +- k population
/// standard deviations over the same window. First `n - 1` entries NaN.
pub fn bollinger(close: &[f64], n: usize, k: f64) -> Result<Bollinger> {
    check_window(n, close.len(), "bollinger")?;
    let middle = sma(close, n)?;
    let mut upper = vec![f64::NAN; close.len()];
    let mut lower = vec![f64::NAN; close.len()];
    for i in n - 1..close.len() {
        let window = &close[i + 1 - n..=i];
        let mean = middle[i];
        let var = window.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        upper[i] = mean + k * sd;
        lower[i] = mean - k * sd;
    }
    Ok(Bollinger {
        middle,
        upper,
        lower,
    })
}

/// Rows an indicator set leaves undefined at the head of the series.
pub fn warmup_rows(sma_windows: &[usize], rsi_window: usize, bollinger_window: usize) -> usize {
    let sma_max = sma_windows.iter().copied().max().unwrap_or(1);
    (sma_max - 1).max(rsi_window).max(bollinger_window - 1)
}
