//! Permutation-sampling Shapley estimator for player counts where
//! enumeration is hopeless, with per-player standard errors.
//!
//! Each sampled permutation is walked front to back, adding one player
//! at a time; the value deltas along the walk are unbiased draws of each
//! player's Shapley value. Nothing inside a walk is cached, so the
//! reported evaluation count is literal: `budget * n + 2` (the 2 pays
//! for the empty and full coalitions up front).

use super::{
    Attribution, AttributionMethod, Coalition, CoalitionValue, FeatureGroups, MaskedModelValue,
    ValueMode,
};
use crate::error::{Error, Result};
use crate::forecaster::ForecastModel;
use ndarray::{Array1, Array2};
use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// The number of nonempty coalitions over `n` units, as a decimal
/// string; this is what brute-force token attribution would face.
pub fn count_coalitions(n: usize) -> Result<String> {
    if n == 0 {
        return Err(Error::Usage("no units to form coalitions from".into()));
    }
    let count = (BigUint::from(1u8) << n) - 1u8;
    Ok(count.to_str_radix(10))
}

/// Walks one permutation: players join in `perm` order and each join is
/// priced. Returns the marginal contribution per player (indexed by
/// player, not by position). Costs exactly `n` evaluations.
pub fn permutation_walk(
    value: &mut dyn CoalitionValue,
    perm: &[usize],
    v_empty: f64,
) -> Result<Vec<f64>> {
    let n = value.n_players();
    if perm.len() != n {
        return Err(Error::Dimension(format!(
            "permutation of {} players, value function has {n}",
            perm.len()
        )));
    }
    let mut coalition = vec![false; n];
    let mut prefixes: Vec<Coalition> = Vec::with_capacity(n);
    for &p in perm {
        if coalition[p] {
            return Err(Error::Usage(format!("player {p} repeats in the permutation")));
        }
        coalition[p] = true;
        prefixes.push(coalition.clone());
    }
    let walked = value.values(&prefixes)?;
    let mut marginals = vec![0.0; n];
    let mut prev = v_empty;
    for (i, &p) in perm.iter().enumerate() {
        marginals[p] = walked[i] - prev;
        prev = walked[i];
    }
    Ok(marginals)
}

/// The sampling estimator's output.
#[derive(Debug, Clone)]
pub struct SampledResult {
    pub phi: Vec<f64>,
    /// sample standard deviation of the marginals / sqrt(budget)
    pub standard_errors: Vec<f64>,
    pub v_empty: f64,
    pub v_full: f64,
    pub efficiency_residual: f64,
    pub evaluations: u64,
}

/// Estimates Shapley values from `budget` sampled permutations.
pub fn sampled_shap(
    value: &mut dyn CoalitionValue,
    budget: usize,
    seed: u64,
) -> Result<SampledResult> {
    let n = value.n_players();
    if n == 0 {
        return Err(Error::Usage("no players to attribute over".into()));
    }
    if budget < 2 {
        return Err(Error::Usage(format!(
            "a budget of {budget} permutations cannot support a standard error; use at least 2"
        )));
    }
    let before = value.evaluations();
    let ends = value.values(&[vec![false; n], vec![true; n]])?;
    let (v_empty, v_full) = (ends[0], ends[1]);

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for _ in 0..budget {
        perm.shuffle(&mut rng);
        let marginals = permutation_walk(value, &perm, v_empty)?;
        for (i, m) in marginals.iter().enumerate() {
            sum[i] += m;
            sum_sq[i] += m * m;
        }
    }
    let b = budget as f64;
    let phi: Vec<f64> = sum.iter().map(|s| s / b).collect();
    let standard_errors: Vec<f64> = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, sq)| {
            let variance = ((sq - s * s / b) / (b - 1.0)).max(0.0);
            (variance / b).sqrt()
        })
        .collect();
    let efficiency_residual = (v_full - v_empty) - phi.iter().sum::<f64>();
    Ok(SampledResult {
        phi,
        standard_errors,
        v_empty,
        v_full,
        efficiency_residual,
        evaluations: value.evaluations() - before,
    })
}

/// Sampled attribution for one scaled instance of a trained model; with
/// singleton groups this is token-level attribution.
#[allow(clippy::too_many_arguments)]
pub fn sampled_group_shap(
    model: &ForecastModel,
    groups: &FeatureGroups,
    instance: Array2<f64>,
    baseline: Array1<f64>,
    mode: ValueMode,
    actual: Option<f64>,
    budget: usize,
    seed: u64,
) -> Result<Attribution> {
    let mut value = MaskedModelValue::new(model, instance, baseline, groups, mode, actual)?;
    let baseline_hash = value.baseline_hash();
    let out = sampled_shap(&mut value, budget, seed)?;
    Ok(Attribution {
        method: AttributionMethod::Sampled,
        mode,
        group_names: groups.names.clone(),
        phi: out.phi,
        v_empty: out.v_empty,
        v_full: out.v_full,
        efficiency_residual: out.efficiency_residual,
        evaluations: out.evaluations,
        baseline_hash,
        seed: Some(seed),
        budget: Some(budget),
        standard_errors: Some(out.standard_errors),
    })
}

/// Cap for the factorial reference estimator below.
pub const MAX_EXHAUSTIVE_PLAYERS: usize = 8;

/// Averages the walk marginals over every permutation, which reproduces
/// the Shapley value by definition. Factorial cost; a reference method
/// for validating the estimators, capped at 8 players.
pub fn exhaustive_permutation_shap(value: &mut dyn CoalitionValue) -> Result<Vec<f64>> {
    let n = value.n_players();
    if n == 0 {
        return Err(Error::Usage("no players to attribute over".into()));
    }
    if n > MAX_EXHAUSTIVE_PLAYERS {
        return Err(Error::Usage(format!(
            "all {n}! permutations is past the reference cap of {MAX_EXHAUSTIVE_PLAYERS} players"
        )));
    }
    let v_empty = value.values(&[vec![false; n]])?[0];
    let mut sum = vec![0.0; n];
    let mut count = 0u64;

    // Heap's algorithm, iteratively
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stack = vec![0usize; n];
    let mut walk = |perm: &[usize], sum: &mut [f64]| -> Result<()> {
        for (i, m) in permutation_walk(value, perm, v_empty)?.iter().enumerate() {
            sum[i] += m;
        }
        count += 1;
        Ok(())
    };
    walk(&perm, &mut sum)?;
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            walk(&perm, &mut sum)?;
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(sum.iter().map(|s| s / count as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapley::{exact_shapley, TableValue};
    use rand::Rng;

    fn random_table(n: usize, seed: u64) -> TableValue {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let table: Vec<f64> = (0..1usize << n)
            .map(|_| rng.gen::<f64>() * 6.0 - 3.0)
            .collect();
        TableValue::new(n, table).unwrap()
    }

    #[test]
    fn coalition_counts() {
        assert_eq!(count_coalitions(1).unwrap(), "1");
        assert_eq!(count_coalitions(5).unwrap(), "31");
        assert_eq!(count_coalitions(64).unwrap(), "18446744073709551615");
        assert!(count_coalitions(0).is_err());
    }

    #[test]
    fn evaluation_count_is_literal() {
        let mut tv = random_table(4, 1);
        let out = sampled_shap(&mut tv, 3, 9).unwrap();
        assert_eq!(out.evaluations, 3 * 4 + 2);
        assert_eq!(tv.evaluations(), 3 * 4 + 2);
    }

    #[test]
    fn budget_below_two_is_rejected() {
        let mut tv = random_table(3, 2);
        assert!(sampled_shap(&mut tv, 1, 0).is_err());
        assert!(sampled_shap(&mut tv, 0, 0).is_err());
    }

    /// In an additive game every walk sees the same marginals, so the
    /// estimate is exact and the standard errors collapse to zero.
    #[test]
    fn additive_game_has_zero_standard_error() {
        let n = 5;
        let coef = [2.0, -1.0, 0.5, 3.0, -0.25];
        let table: Vec<f64> = (0..1u64 << n)
            .map(|m| (0..n).filter(|i| m & (1 << i) != 0).map(|i| coef[i]).sum())
            .collect();
        let mut tv = TableValue::new(n, table).unwrap();
        let out = sampled_shap(&mut tv, 8, 3).unwrap();
        for i in 0..n {
            assert!((out.phi[i] - coef[i]).abs() < 1e-12, "player {i}");
            assert_eq!(out.standard_errors[i], 0.0, "player {i}");
        }
        assert!(out.efficiency_residual.abs() < 1e-12);
    }

    #[test]
    fn walks_preserve_efficiency_every_time() {
        let mut tv = random_table(6, 4);
        let out = sampled_shap(&mut tv, 5, 11).unwrap();
        assert!(
            out.efficiency_residual.abs() < 1e-12,
            "residual {}",
            out.efficiency_residual
        );
    }

    #[test]
    fn same_seed_same_estimate() {
        let out1 = sampled_shap(&mut random_table(5, 7), 6, 42).unwrap();
        let out2 = sampled_shap(&mut random_table(5, 7), 6, 42).unwrap();
        assert_eq!(out1.phi, out2.phi);
        assert_eq!(out1.standard_errors, out2.standard_errors);
        let out3 = sampled_shap(&mut random_table(5, 7), 6, 43).unwrap();
        assert_ne!(out1.phi, out3.phi);
    }

    /// Averaged over all permutations the walk marginals ARE the Shapley
    /// values; this pins the sampling machinery to the exact estimator.
    #[test]
    fn exhaustive_permutations_match_exact_enumeration() {
        for seed in [5, 6, 7] {
            let exact = exact_shapley(&mut random_table(5, seed)).unwrap();
            let perms = exhaustive_permutation_shap(&mut random_table(5, seed)).unwrap();
            for (a, b) in exact.phi.iter().zip(&perms) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sampling_converges_toward_exact() {
        let exact = exact_shapley(&mut random_table(6, 20)).unwrap();
        let sampled = sampled_shap(&mut random_table(6, 20), 600, 13).unwrap();
        for i in 0..6 {
            let err = (sampled.phi[i] - exact.phi[i]).abs();
            let bound = 5.0 * sampled.standard_errors[i] + 1e-9;
            assert!(err < bound, "player {i}: off by {err}, bound {bound}");
        }
    }

    #[test]
    fn permutation_must_cover_every_player_once() {
        let mut tv = random_table(3, 30);
        assert!(permutation_walk(&mut tv, &[0, 1], 0.0).is_err());
        assert!(permutation_walk(&mut tv, &[0, 0, 1], 0.0).is_err());
    }
}
