//! Shapley attribution over a trained forecaster.
//!
//! Players are feature groups: a coalition of groups keeps their columns
//! at observed values while every column outside the coalition is frozen
//! at its training mean (in scaled space). The value of a coalition is
//! the model's price-unit prediction on that masked input, or the
//! negated absolute error when attribution targets error reduction.
//!
//! Two estimators share this interface: exact enumeration of all
//! coalitions (`exact`) and permutation sampling (`sampled`).

pub mod exact;
pub mod sampled;

pub use exact::{exact_group_shap, exact_shapley, shapley_weight, ExactResult};
pub use sampled::{
    count_coalitions, exhaustive_permutation_shap, permutation_walk, sampled_group_shap,
    sampled_shap, SampledResult,
};

use crate::error::{Error, Result};
use crate::forecaster::ForecastModel;
use crate::util::hash_f64s;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// A coalition as a membership mask over players.
pub type Coalition = Vec<bool>;

/// Anything that can price coalitions of players. Implementations take
/// coalitions in batches so model-backed values can amortize inference.
pub trait CoalitionValue {
    fn n_players(&self) -> usize;
    fn values(&mut self, coalitions: &[Coalition]) -> Result<Vec<f64>>;
    /// How many coalition evaluations have been charged so far.
    fn evaluations(&self) -> u64;
}

/// What a coalition is worth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValueMode {
    /// The model's price-unit prediction on the masked input.
    Prediction,
    /// Negated absolute error against the realized price, so a higher
    /// value means the coalition reduces error.
    ErrorReduction,
}

impl std::fmt::Display for ValueMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ValueMode::Prediction => "PREDICTION",
            ValueMode::ErrorReduction => "ERROR_REDUCTION",
        })
    }
}

/// Named, disjoint sets of feature column indices. Columns outside every
/// group are never masked; they sit in the background at their observed
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroups {
    pub names: Vec<String>,
    pub members: Vec<Vec<usize>>,
}

impl FeatureGroups {
    pub fn new(names: Vec<String>, members: Vec<Vec<usize>>, n_columns: usize) -> Result<Self> {
        if names.len() != members.len() {
            return Err(Error::Dimension(format!(
                "{} group names against {} member lists",
                names.len(),
                members.len()
            )));
        }
        if names.is_empty() {
            return Err(Error::Usage("attribution needs at least one group".into()));
        }
        let mut seen = vec![false; n_columns];
        for (name, cols) in names.iter().zip(&members) {
            if cols.is_empty() {
                return Err(Error::Schema(format!("group {name} has no columns")));
            }
            for &c in cols {
                if c >= n_columns {
                    return Err(Error::Dimension(format!(
                        "group {name}: column index {c} out of range (0..{n_columns})"
                    )));
                }
                if seen[c] {
                    return Err(Error::Schema(format!(
                        "column index {c} appears in more than one group"
                    )));
                }
                seen[c] = true;
            }
        }
        Ok(FeatureGroups { names, members })
    }

    /// One group per column: the token-level setup.
    pub fn singletons(names: &[String]) -> Result<Self> {
        FeatureGroups::new(
            names.to_vec(),
            (0..names.len()).map(|i| vec![i]).collect(),
            names.len(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Replaces the columns of every group outside `coalition` with the
/// per-column baseline, across all time steps. Ungrouped columns pass
/// through untouched.
pub fn apply_coalition_mask(
    instance: &Array2<f64>,
    baseline: &Array1<f64>,
    groups: &FeatureGroups,
    coalition: &[bool],
) -> Result<Array2<f64>> {
    if coalition.len() != groups.len() {
        return Err(Error::Dimension(format!(
            "coalition over {} players against {} groups",
            coalition.len(),
            groups.len()
        )));
    }
    if baseline.len() != instance.ncols() {
        return Err(Error::Dimension(format!(
            "baseline has {} columns, instance has {}",
            baseline.len(),
            instance.ncols()
        )));
    }
    let mut masked = instance.clone();
    for (g, present) in coalition.iter().enumerate() {
        if *present {
            continue;
        }
        for &col in &groups.members[g] {
            for t in 0..masked.nrows() {
                masked[(t, col)] = baseline[col];
            }
        }
    }
    Ok(masked)
}

/// The model-backed value function: masked inference in price units.
pub struct MaskedModelValue<'a> {
    model: &'a ForecastModel,
    instance: Array2<f64>,
    baseline: Array1<f64>,
    groups: &'a FeatureGroups,
    mode: ValueMode,
    actual: Option<f64>,
    evaluations: u64,
}

impl<'a> MaskedModelValue<'a> {
    /// `instance` and `baseline` live in scaled space; `actual` is the
    /// realized price, required for error-reduction values.
    pub fn new(
        model: &'a ForecastModel,
        instance: Array2<f64>,
        baseline: Array1<f64>,
        groups: &'a FeatureGroups,
        mode: ValueMode,
        actual: Option<f64>,
    ) -> Result<Self> {
        if instance.nrows() != model.steps || instance.ncols() != model.manifest.columns.len() {
            return Err(Error::Dimension(format!(
                "instance is {} x {}, model expects {} x {}",
                instance.nrows(),
                instance.ncols(),
                model.steps,
                model.manifest.columns.len()
            )));
        }
        if mode == ValueMode::ErrorReduction && actual.is_none() {
            return Err(Error::Usage(
                "error-reduction values need the realized price".into(),
            ));
        }
        Ok(MaskedModelValue {
            model,
            instance,
            baseline,
            groups,
            mode,
            actual,
            evaluations: 0,
        })
    }

    pub fn baseline_hash(&self) -> String {
        hash_f64s(self.baseline.as_slice().expect("contiguous baseline"))
    }
}

impl CoalitionValue for MaskedModelValue<'_> {
    fn n_players(&self) -> usize {
        self.groups.len()
    }

    fn values(&mut self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        let masked: Vec<Array2<f64>> = coalitions
            .iter()
            .map(|c| apply_coalition_mask(&self.instance, &self.baseline, self.groups, c))
            .collect::<Result<_>>()?;
        let views: Vec<_> = masked.iter().map(|m| m.view()).collect();
        let preds = self.model.predict_batch(&views)?;
        self.evaluations += coalitions.len() as u64;
        Ok(match self.mode {
            ValueMode::Prediction => preds,
            ValueMode::ErrorReduction => {
                let actual = self.actual.expect("checked at construction");
                preds.into_iter().map(|p| -(p - actual).abs()).collect()
            }
        })
    }

    fn evaluations(&self) -> u64 {
        self.evaluations
    }
}

/// A value function backed by an explicit table indexed by coalition
/// bits; the reference implementation for validating the estimators.
pub struct TableValue {
    pub n: usize,
    pub table: Vec<f64>,
    evaluations: u64,
}

impl TableValue {
    pub fn new(n: usize, table: Vec<f64>) -> Result<Self> {
        if n > 30 {
            return Err(Error::Usage(format!("table over {n} players is too large")));
        }
        if table.len() != 1usize << n {
            return Err(Error::Dimension(format!(
                "table of {} entries cannot cover {n} players",
                table.len()
            )));
        }
        Ok(TableValue {
            n,
            table,
            evaluations: 0,
        })
    }
}

impl CoalitionValue for TableValue {
    fn n_players(&self) -> usize {
        self.n
    }

    fn values(&mut self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        self.evaluations += coalitions.len() as u64;
        coalitions
            .iter()
            .map(|c| {
                if c.len() != self.n {
                    return Err(Error::Dimension(format!(
                        "coalition over {} players against a {}-player table",
                        c.len(),
                        self.n
                    )));
                }
                let mut idx = 0usize;
                for (i, present) in c.iter().enumerate() {
                    if *present {
                        idx |= 1 << i;
                    }
                }
                Ok(self.table[idx])
            })
            .collect()
    }

    fn evaluations(&self) -> u64 {
        self.evaluations
    }
}

/// How an attribution was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Exact,
    Sampled,
}

/// One instance's Shapley attribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attribution {
    pub method: AttributionMethod,
    pub mode: ValueMode,
    pub group_names: Vec<String>,
    pub phi: Vec<f64>,
    /// value with every group masked to baseline
    pub v_empty: f64,
    /// value with nothing masked
    pub v_full: f64,
    /// (v_full - v_empty) - sum(phi); zero up to float error
    pub efficiency_residual: f64,
    pub evaluations: u64,
    /// fingerprint of the baseline the masking used
    pub baseline_hash: String,
    /// sampling settings and uncertainty; absent for the exact method
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<Vec<f64>>,
}

/// Per-column means over the given rows: the masking baseline.
pub fn mean_baseline(rows: ndarray::ArrayView2<f64>) -> Result<Array1<f64>> {
    if rows.nrows() == 0 {
        return Err(Error::InsufficientData(
            "cannot build a baseline from zero rows".into(),
        ));
    }
    Ok(rows.mean_axis(ndarray::Axis(0)).expect("nonempty rows"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn groups_validate_overlap_range_and_emptiness() {
        let ok = FeatureGroups::new(
            vec!["a".into(), "b".into()],
            vec![vec![0, 2], vec![1]],
            3,
        );
        assert!(ok.is_ok());
        assert!(matches!(
            FeatureGroups::new(vec!["a".into(), "b".into()], vec![vec![0], vec![0]], 2),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            FeatureGroups::new(vec!["a".into()], vec![vec![5]], 3),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            FeatureGroups::new(vec!["a".into()], vec![vec![]], 3),
            Err(Error::Schema(_))
        ));
        let singles = FeatureGroups::singletons(&["x".into(), "y".into()]).unwrap();
        assert_eq!(singles.members, vec![vec![0], vec![1]]);
    }

    #[test]
    fn masking_replaces_exactly_the_absent_groups() {
        let instance = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let baseline = array![10.0, 20.0, 30.0];
        let groups = FeatureGroups::new(
            vec!["g0".into(), "g1".into()],
            vec![vec![0], vec![2]],
            3,
        )
        .unwrap();
        // g0 present, g1 absent: column 2 masked, column 1 untouched
        // (ungrouped background), column 0 observed
        let m = apply_coalition_mask(&instance, &baseline, &groups, &[true, false]).unwrap();
        assert_eq!(m, array![[1.0, 2.0, 30.0], [4.0, 5.0, 30.0]]);
        let empty = apply_coalition_mask(&instance, &baseline, &groups, &[false, false]).unwrap();
        assert_eq!(empty, array![[10.0, 2.0, 30.0], [10.0, 5.0, 30.0]]);
        let full = apply_coalition_mask(&instance, &baseline, &groups, &[true, true]).unwrap();
        assert_eq!(full, instance);
        assert!(apply_coalition_mask(&instance, &baseline, &groups, &[true]).is_err());
    }

    #[test]
    fn table_value_indexes_by_membership_bits() {
        let mut tv = TableValue::new(2, vec![0.0, 1.0, 2.0, 5.0]).unwrap();
        let got = tv
            .values(&[
                vec![false, false],
                vec![true, false],
                vec![false, true],
                vec![true, true],
            ])
            .unwrap();
        assert_eq!(got, vec![0.0, 1.0, 2.0, 5.0]);
        assert_eq!(tv.evaluations(), 4);
        assert!(TableValue::new(2, vec![0.0]).is_err());
    }

    #[test]
    fn baseline_is_the_column_mean() {
        let rows = array![[1.0, 10.0], [3.0, 30.0]];
        let b = mean_baseline(rows.view()).unwrap();
        assert_eq!(b, array![2.0, 20.0]);
        assert!(mean_baseline(rows.slice(ndarray::s![0..0, ..])).is_err());
    }

    use crate::forecaster::{ForecastModel, FeatureManifest, ModelParams, TrainConfig, Variant};
    use crate::market_data::{ColumnScale, ScalerParams};
    use ndarray::Array2;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> ForecastModel {
        let manifest = FeatureManifest::new(
            vec![
                "close".into(),
                "volume".into(),
                "group_0_weight".into(),
                "sent_pos".into(),
            ],
            vec!["group_0_weight".into(), "sent_pos".into()],
            "close".into(),
        )
        .unwrap();
        let cfg = TrainConfig {
            hidden_size: 3,
            num_layers: 2,
            head_hidden: 4,
            steps: 3,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::zeros(&manifest, Variant::Full, &cfg).unwrap();
        params.init(&mut rand_chacha::ChaCha20Rng::seed_from_u64(seed));
        ForecastModel {
            manifest,
            variant: Variant::Full,
            steps: 3,
            params,
            scaler: ScalerParams {
                fitted_on: "test".into(),
                columns: vec![ColumnScale {
                    name: "close".into(),
                    min: 50.0,
                    max: 150.0,
                    constant: false,
                }],
            },
            config: cfg,
            seed,
        }
    }

    fn three_groups() -> FeatureGroups {
        FeatureGroups::new(
            vec!["price".into(), "volume".into(), "text".into()],
            vec![vec![0], vec![1], vec![2, 3]],
            4,
        )
        .unwrap()
    }

    /// The model-backed value function under the exact estimator: the
    /// full coalition reproduces the plain prediction, every coalition
    /// is priced exactly once, and the attribution is efficient.
    #[test]
    fn model_backed_exact_attribution_is_efficient() {
        let model = tiny_model(88);
        let instance = Array2::from_shape_fn((3, 4), |(t, j)| 0.1 + 0.13 * t as f64 + 0.07 * j as f64);
        let baseline = array![0.3, 0.4, 0.0, 0.5];
        let groups = three_groups();
        let att = exact_group_shap(
            &model,
            &groups,
            instance.clone(),
            baseline.clone(),
            ValueMode::Prediction,
            None,
        )
        .unwrap();
        assert_eq!(att.evaluations, 8);
        assert_eq!(att.group_names, vec!["price", "volume", "text"]);
        let plain = model.predict(instance.view()).unwrap();
        assert_eq!(att.v_full.to_bits(), plain.to_bits());
        assert!(att.efficiency_residual.abs() < 1e-8, "{}", att.efficiency_residual);
        assert!(att.standard_errors.is_none());

        // the empty coalition prices the all-baseline input
        let all_masked =
            apply_coalition_mask(&instance, &baseline, &groups, &[false, false, false]).unwrap();
        let base_pred = model.predict(all_masked.view()).unwrap();
        assert_eq!(att.v_empty.to_bits(), base_pred.to_bits());
    }

    /// Error-reduction values are never positive and vanish when the
    /// prediction is the realized price.
    #[test]
    fn error_reduction_values_negate_absolute_error() {
        let model = tiny_model(89);
        let instance = Array2::from_shape_fn((3, 4), |(t, j)| 0.05 * (t as f64 + 1.0) * (j as f64 + 1.0));
        let baseline = array![0.2, 0.2, 0.2, 0.2];
        let groups = three_groups();
        let plain = model.predict(instance.view()).unwrap();
        let att = exact_group_shap(
            &model,
            &groups,
            instance.clone(),
            baseline.clone(),
            ValueMode::ErrorReduction,
            Some(plain),
        )
        .unwrap();
        assert_eq!(att.v_full, 0.0); // -|plain - plain|
        assert!(att.v_empty <= 0.0);
        assert!(att.efficiency_residual.abs() < 1e-8);

        // realized price is mandatory in this mode
        assert!(exact_group_shap(
            &model,
            &groups,
            instance,
            baseline,
            ValueMode::ErrorReduction,
            None,
        )
        .is_err());
    }

    /// Token-level sampling over singleton groups carries its stated
    /// budget arithmetic and standard errors.
    #[test]
    fn model_backed_sampled_attribution_reports_uncertainty() {
        let model = tiny_model(90);
        let instance = Array2::from_shape_fn((3, 4), |(t, j)| 0.02 * (t as f64 * 4.0 + j as f64));
        let baseline = array![0.1, 0.1, 0.1, 0.1];
        let groups = FeatureGroups::singletons(&model.manifest.columns).unwrap();
        let att = sampled_group_shap(
            &model,
            &groups,
            instance,
            baseline,
            ValueMode::Prediction,
            None,
            4,
            7,
        )
        .unwrap();
        assert_eq!(att.evaluations, 4 * 4 + 2);
        assert_eq!(att.budget, Some(4));
        assert_eq!(att.seed, Some(7));
        let se = att.standard_errors.as_ref().unwrap();
        assert_eq!(se.len(), 4);
        assert!(se.iter().all(|s| s.is_finite() && *s >= 0.0));
        assert!(att.efficiency_residual.abs() < 1e-10);
    }

    #[test]
    fn attribution_json_roundtrip() {
        let model = tiny_model(91);
        let instance = Array2::from_elem((3, 4), 0.25);
        let baseline = array![0.0, 0.0, 0.0, 0.0];
        let groups = three_groups();
        let att = exact_group_shap(
            &model,
            &groups,
            instance,
            baseline,
            ValueMode::Prediction,
            None,
        )
        .unwrap();
        let json = serde_json::to_string_pretty(&att).unwrap();
        assert!(json.contains("\"method\": \"exact\""));
        assert!(json.contains("\"mode\": \"PREDICTION\""));
        assert!(!json.contains("standard_errors"), "absent fields stay out");
        let back: Attribution = serde_json::from_str(&json).unwrap();
        assert_eq!(back.phi, att.phi);
        assert_eq!(back.baseline_hash, att.baseline_hash);
    }
}
