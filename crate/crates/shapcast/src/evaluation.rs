//! Forecast quality metrics and the report rows built from them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn check_pair(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} actual values against {} predictions",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::InsufficientData("no values to score".into()));
    }
    if actual.iter().chain(predicted).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in metric input".into()));
    }
    Ok(())
}

/// Mean absolute error, in the units of the inputs.
pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    let n = actual.len() as f64;
    Ok(actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (p - a).abs())
        .sum::<f64>()
        / n)
}

/// Root mean squared error.
pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    let n = actual.len() as f64;
    Ok((actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (p - a) * (p - a))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// Mean absolute percentage error, in percent. Undefined when any
/// actual value is zero.
pub fn mape(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    if actual.iter().any(|a| *a == 0.0) {
        return Err(Error::Numerical(
            "percentage error is undefined for a zero actual value".into(),
        ));
    }
    let n = actual.len() as f64;
    Ok(100.0
        * actual
            .iter()
            .zip(predicted)
            .map(|(a, p)| ((p - a) / a).abs())
            .sum::<f64>()
        / n)
}

/// One minus SSE over the total variation about the actual mean.
/// Undefined when the actuals are constant. Predicting the mean itself
/// scores exactly zero: both sums are then the same floating-point
/// expression.
pub fn r2(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let sst: f64 = actual.iter().map(|a| (mean - a) * (mean - a)).sum();
    if sst == 0.0 {
        return Err(Error::Numerical(
            "explained variance is undefined for constant actual values".into(),
        ));
    }
    let sse: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (p - a) * (p - a))
        .sum();
    Ok(1.0 - sse / sst)
}

/// All four scores over one actual/predicted pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub r2: f64,
}

pub fn compute_metrics(actual: &[f64], predicted: &[f64]) -> Result<MetricSet> {
    Ok(MetricSet {
        mae: mae(actual, predicted)?,
        rmse: rmse(actual, predicted)?,
        mape: mape(actual, predicted)?,
        r2: r2(actual, predicted)?,
    })
}

/// Annualized close-to-close volatility, in percent: the sample standard
/// deviation of daily log returns scaled by sqrt(252).
pub fn historical_volatility(closes: &[f64]) -> Result<f64> {
    if closes.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "volatility needs at least 3 closes for 2 returns, got {}",
            closes.len()
        )));
    }
    if closes.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
        return Err(Error::Numerical(
            "volatility needs strictly positive closes".into(),
        ));
    }
    let returns: Vec<f64> = closes.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() * 252.0f64.sqrt() * 100.0)
}

/// Scores for one window and variant of the walk-forward run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub window: String,
    pub variant: String,
    pub test_year: i32,
    pub n: usize,
    pub metrics: MetricSet,
}

/// One test year's row of the evaluation table: realized volatility next
/// to both variants' scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct YearRow {
    pub test_year: i32,
    pub n: usize,
    pub hv_pct: f64,
    pub tech: MetricSet,
    pub full: MetricSet,
}

/// One group-count setting of the sensitivity sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub n_groups: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

/// The sweep plus its winner (highest r2; ties go to the smallest group
/// count).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
    pub chosen_n_groups: usize,
}

impl SensitivityReport {
    pub fn new(rows: Vec<SensitivityRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InsufficientData("empty sensitivity sweep".into()));
        }
        let mut best = 0usize;
        for (i, row) in rows.iter().enumerate() {
            if row.r2 > rows[best].r2 {
                best = i;
            }
        }
        let chosen_n_groups = rows[best].n_groups;
        Ok(SensitivityReport {
            rows,
            chosen_n_groups,
        })
    }
}

/// One side of the attribution benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSide {
    pub label: String,
    pub players: usize,
    pub method: String,
    pub evaluations: u64,
    pub wall_ms: f64,
    /// 2^players - 1, the brute-force coalition space, as a decimal
    /// string since it overflows anything fixed-width
    pub coalition_count: String,
}

/// Token-level sampling against group-level exact enumeration on the
/// same instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchComparison {
    pub token: BenchSide,
    pub group: BenchSide,
    pub wall_reduction_pct: f64,
    pub evaluation_reduction_pct: f64,
}

impl BenchComparison {
    pub fn new(token: BenchSide, group: BenchSide) -> Result<Self> {
        if !(token.wall_ms > 0.0) {
            return Err(Error::Numerical(
                "token-level benchmark measured no wall time".into(),
            ));
        }
        let wall_reduction_pct = 100.0 * (token.wall_ms - group.wall_ms) / token.wall_ms;
        let evaluation_reduction_pct = 100.0 * (token.evaluations as f64 - group.evaluations as f64)
            / token.evaluations as f64;
        Ok(BenchComparison {
            token,
            group,
            wall_reduction_pct,
            evaluation_reduction_pct,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// The worked example, rederived in place: errors 10 and -20 give
    /// mae 15, rmse sqrt(250), mape 10%; sse 500 against sst 5000 about
    /// the mean 150 gives r2 0.9.
    #[test]
    fn hand_arithmetic_example() {
        let actual = [100.0, 200.0];
        let predicted = [110.0, 180.0];
        assert!((mae(&actual, &predicted).unwrap() - 15.0).abs() < 1e-12);
        assert!((rmse(&actual, &predicted).unwrap() - 250.0f64.sqrt()).abs() < 1e-12);
        assert!((mape(&actual, &predicted).unwrap() - 10.0).abs() < 1e-12);
        let sse = 10.0f64 * 10.0 + 20.0 * 20.0;
        let sst = 50.0f64 * 50.0 + 50.0 * 50.0;
        assert!((r2(&actual, &predicted).unwrap() - (1.0 - sse / sst)).abs() < 1e-12);
        assert!((r2(&actual, &predicted).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let actual = [3.0, 7.0, 11.0];
        assert_eq!(mae(&actual, &actual).unwrap(), 0.0);
        assert_eq!(rmse(&actual, &actual).unwrap(), 0.0);
        assert_eq!(mape(&actual, &actual).unwrap(), 0.0);
        assert_eq!(r2(&actual, &actual).unwrap(), 1.0);
    }

    #[test]
    fn mean_predictor_scores_exactly_zero_r2() {
        let actual = [2.0, 5.0, 11.0, 17.0, 0.5];
        let mean = actual.iter().sum::<f64>() / actual.len() as f64;
        let predicted = vec![mean; actual.len()];
        assert_eq!(r2(&actual, &predicted).unwrap(), 0.0);
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let actual: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 50.0 + 1.0).collect();
            let predicted: Vec<f64> = actual
                .iter()
                .map(|a| a + rng.gen::<f64>() * 10.0 - 5.0)
                .collect();
            let m = mae(&actual, &predicted).unwrap();
            let r = rmse(&actual, &predicted).unwrap();
            assert!(m <= r + 1e-12, "mae {m} > rmse {r}");
        }
    }

    #[test]
    fn metric_domain_errors() {
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(mae(&[], &[]), Err(Error::InsufficientData(_))));
        assert!(matches!(
            mape(&[0.0, 1.0], &[1.0, 1.0]),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            r2(&[4.0, 4.0], &[1.0, 2.0]),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            mae(&[f64::NAN], &[1.0]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn volatility_hand_values() {
        // constant growth: identical log returns, zero dispersion
        let steady: Vec<f64> = (0..10).map(|i| 100.0 * 1.01f64.powi(i)).collect();
        assert!(historical_volatility(&steady).unwrap().abs() < 1e-9);

        // two returns, rederived in place
        let closes = [100.0, 110.0, 99.0];
        let r1 = (110.0f64 / 100.0).ln();
        let r2 = (99.0f64 / 110.0).ln();
        let mean = (r1 + r2) / 2.0;
        let var = ((r1 - mean).powi(2) + (r2 - mean).powi(2)) / 1.0;
        let want = var.sqrt() * 252.0f64.sqrt() * 100.0;
        assert!((historical_volatility(&closes).unwrap() - want).abs() < 1e-12);

        assert!(historical_volatility(&[100.0, 101.0]).is_err());
        assert!(historical_volatility(&[100.0, -1.0, 101.0]).is_err());
    }

    #[test]
    fn sensitivity_winner_is_argmax_r2_with_low_tie() {
        let rows = vec![
            SensitivityRow { n_groups: 1, mae: 5.0, rmse: 6.0, r2: 0.5 },
            SensitivityRow { n_groups: 2, mae: 4.0, rmse: 5.0, r2: 0.8 },
            SensitivityRow { n_groups: 3, mae: 4.5, rmse: 5.5, r2: 0.8 },
        ];
        let report = SensitivityReport::new(rows).unwrap();
        assert_eq!(report.chosen_n_groups, 2);
        assert!(SensitivityReport::new(vec![]).is_err());
    }

    #[test]
    fn bench_reductions_are_percentages_of_the_token_side() {
        let token = BenchSide {
            label: "token".into(),
            players: 320,
            method: "sampled".into(),
            evaluations: 3202,
            wall_ms: 1000.0,
            coalition_count: "whatever".into(),
        };
        let group = BenchSide {
            label: "group".into(),
            players: 5,
            method: "exact".into(),
            evaluations: 32,
            wall_ms: 100.0,
            coalition_count: "31".into(),
        };
        let cmp = BenchComparison::new(token, group).unwrap();
        assert!((cmp.wall_reduction_pct - 90.0).abs() < 1e-12);
        assert!((cmp.evaluation_reduction_pct - 100.0 * 3170.0 / 3202.0).abs() < 1e-12);
    }
}
