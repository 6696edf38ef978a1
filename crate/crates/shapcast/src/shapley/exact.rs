//! Exact Shapley values by full coalition enumeration.
//!
//! Every one of the 2^n coalitions is evaluated exactly once into a
//! table; each player's value is then the weighted sum of its marginal
//! contributions,
//!
//! ```text
//! phi_g = sum over S not containing g of
//!         |S|! (n - |S| - 1)! / n!  *  ( v(S + g) - v(S) )
//! ```
//!
//! which makes the enumeration affordable up to the 20-player cap.

use super::{
    Attribution, AttributionMethod, Coalition, CoalitionValue, FeatureGroups, MaskedModelValue,
    ValueMode,
};
use crate::error::{Error, Result};
use crate::forecaster::ForecastModel;
use ndarray::{Array1, Array2};

/// Exact enumeration is capped here; past this the sampled estimator is
/// the right tool.
pub const MAX_EXACT_PLAYERS: usize = 20;

/// How many coalitions one batched value call covers.
const CHUNK: usize = 512;

fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
    }
    out
}

/// The coalition weight |S|!(n-|S|-1)!/n! for |S| = s, computed exactly
/// as 1 / (n * C(n-1, s)) before the single rounding to f64.
pub fn shapley_weight(s: usize, n: usize) -> Result<f64> {
    if n == 0 || n > MAX_EXACT_PLAYERS {
        return Err(Error::Usage(format!(
            "weights are defined for 1..={MAX_EXACT_PLAYERS} players, got {n}"
        )));
    }
    if s >= n {
        return Err(Error::Usage(format!(
            "a coalition of {s} others cannot exist among {n} players"
        )));
    }
    let denom = n as u128 * binomial(n as u64 - 1, s as u64);
    Ok(1.0 / denom as f64)
}

/// The exact estimator's output.
#[derive(Debug, Clone)]
pub struct ExactResult {
    pub phi: Vec<f64>,
    pub v_empty: f64,
    pub v_full: f64,
    pub efficiency_residual: f64,
    pub evaluations: u64,
}

fn mask_to_coalition(mask: u64, n: usize) -> Coalition {
    (0..n).map(|i| mask & (1 << i) != 0).collect()
}

/// Runs the full enumeration against any value function.
pub fn exact_shapley(value: &mut dyn CoalitionValue) -> Result<ExactResult> {
    let n = value.n_players();
    if n == 0 {
        return Err(Error::Usage("no players to attribute over".into()));
    }
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::Usage(format!(
            "exact enumeration over {n} players would need 2^{n} evaluations; \
             the cap is {MAX_EXACT_PLAYERS}, use the sampled estimator instead"
        )));
    }
    let total = 1u64 << n;
    let before = value.evaluations();
    let mut table = Vec::with_capacity(total as usize);
    let mut mask = 0u64;
    while mask < total {
        let end = (mask + CHUNK as u64).min(total);
        let chunk: Vec<Coalition> = (mask..end).map(|m| mask_to_coalition(m, n)).collect();
        table.extend(value.values(&chunk)?);
        mask = end;
    }

    // weights by coalition size, shared across players
    let weights: Vec<f64> = (0..n).map(|s| shapley_weight(s, n)).collect::<Result<_>>()?;
    let mut phi = vec![0.0; n];
    for (g, phi_g) in phi.iter_mut().enumerate() {
        let bit = 1u64 << g;
        for mask in 0..total {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            *phi_g += weights[s] * (table[(mask | bit) as usize] - table[mask as usize]);
        }
    }

    let v_empty = table[0];
    let v_full = table[total as usize - 1];
    let efficiency_residual = (v_full - v_empty) - phi.iter().sum::<f64>();
    Ok(ExactResult {
        phi,
        v_empty,
        v_full,
        efficiency_residual,
        evaluations: value.evaluations() - before,
    })
}

/// Exact group attribution for one scaled instance of a trained model.
#[allow(clippy::too_many_arguments)]
pub fn exact_group_shap(
    model: &ForecastModel,
    groups: &FeatureGroups,
    instance: Array2<f64>,
    baseline: Array1<f64>,
    mode: ValueMode,
    actual: Option<f64>,
) -> Result<Attribution> {
    let mut value = MaskedModelValue::new(model, instance, baseline, groups, mode, actual)?;
    let baseline_hash = value.baseline_hash();
    let out = exact_shapley(&mut value)?;
    Ok(Attribution {
        method: AttributionMethod::Exact,
        mode,
        group_names: groups.names.clone(),
        phi: out.phi,
        v_empty: out.v_empty,
        v_full: out.v_full,
        efficiency_residual: out.efficiency_residual,
        evaluations: out.evaluations,
        baseline_hash,
        seed: None,
        budget: None,
        standard_errors: None,
    })
}
