//! Window-level orchestration and the reports built on it.
//!
//! Everything here follows one hygiene rule: nothing fitted (grouping
//! centroids, scaler extrema, trained parameters) may see a test-year
//! row. Indicators are causal, so the technical block is computed once
//! over the full history; grouping and scaling are refit per window on
//! training rows only, and the fitted models are then applied forward.

use crate::error::{Error, Result};
use crate::evaluation::{
    compute_metrics, historical_volatility, BenchComparison, BenchSide, MetricReport,
    SensitivityReport, SensitivityRow, YearRow,
};
use crate::forecaster::{
    train, EpochLog, FeatureManifest, ForecastModel, TrainConfig, Variant,
};
use crate::grouping::{
    build_group_feature_series, cluster_cosine_kmeans, DocumentEmbedding, GroupingModel,
};
use crate::market_data::{
    fit_minmax, make_sequences, scale_dataset, AlignedDataset, FeatureMatrix, RollingWindowPlan,
    SequenceRole, SupervisedPair, WindowSpec,
};
use crate::shapley::{
    count_coalitions, exact_group_shap, mean_baseline, sampled_group_shap, Attribution,
    FeatureGroups, ValueMode,
};
use crate::util::stage_seed;
use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One test-date prediction from both variants, in price units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub date: NaiveDate,
    pub actual: f64,
    pub predicted_tech: f64,
    pub predicted_full: f64,
}

/// A window's dataset after grouping, joining, scaling and sequencing,
/// before any variant is trained.
pub struct WindowData {
    pub window: WindowSpec,
    pub grouping: GroupingModel,
    pub dropped_docs: usize,
    pub manifest: FeatureManifest,
    pub train_pairs: Vec<SupervisedPair>,
    pub test_pairs: Vec<SupervisedPair>,
    /// per-column training means in scaled space, the masking baseline
    pub baseline: Array1<f64>,
    /// raw closes inside the test year, for realized volatility
    pub test_closes: Vec<f64>,
    scaler: crate::market_data::ScalerParams,
}

/// Clusters the window's training-year documents, builds group features
/// over the technical calendar, joins, scales on training rows, and cuts
/// supervised sequences for both spans.
pub fn assemble_window(
    tech: &FeatureMatrix,
    docs: &[DocumentEmbedding],
    window: &WindowSpec,
    n_groups: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<WindowData> {
    let train_range = window.train_range();
    let train_docs: Vec<DocumentEmbedding> = docs
        .iter()
        .filter(|d| train_range.contains(d.date))
        .cloned()
        .collect();
    if train_docs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "window {} has no training-year documents",
            window.id()
        )));
    }
    let (grouping, _stats) =
        cluster_cosine_kmeans(&train_docs, n_groups, stage_seed(seed, "grouping"))?;
    let (text, dropped_docs) = build_group_feature_series(docs, &grouping, tech.dates())?;
    let joined = tech.inner_join(&text)?;

    let mut text_columns = grouping.group_names();
    text_columns.extend(["sent_pos".into(), "sent_neg".into(), "sent_neu".into()]);
    let manifest = FeatureManifest::new(joined.columns().to_vec(), text_columns, "close".into())?;

    let ds = AlignedDataset::assemble(joined, "close")?;
    let test_closes: Vec<f64> = {
        let close = ds.features.column("close")?;
        match ds.features.rows_in(&window.test_range()) {
            Some((a, b)) => (a..=b).map(|i| close[i]).collect(),
            None => Vec::new(),
        }
    };
    let scaler = fit_minmax(&ds.features, &train_range, &window.id())?;
    let scaled = scale_dataset(&ds, &scaler)?;

    let (a, b) = scaled.features.rows_in(&train_range).ok_or_else(|| {
        Error::InsufficientData(format!("window {} has no training rows", window.id()))
    })?;
    let baseline = mean_baseline(scaled.features.values().slice(ndarray::s![a..=b, ..]))?;

    let train_pairs = make_sequences(&scaled, window, SequenceRole::Train, cfg.steps)?;
    let test_pairs = make_sequences(&scaled, window, SequenceRole::Test, cfg.steps)?;
    Ok(WindowData {
        window: *window,
        grouping,
        dropped_docs,
        manifest,
        train_pairs,
        test_pairs,
        baseline,
        test_closes,
        scaler,
    })
}

/// Trains one variant on an assembled window.
pub fn train_variant(
    data: &WindowData,
    variant: Variant,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ForecastModel, Vec<EpochLog>)> {
    train(
        &data.train_pairs,
        &data.manifest,
        variant,
        cfg,
        data.scaler.clone(),
        seed,
    )
}

/// Price-unit predictions over the window's test pairs.
pub fn predict_test(model: &ForecastModel, data: &WindowData) -> Result<Vec<f64>> {
    let views: Vec<_> = data.test_pairs.iter().map(|p| p.input.view()).collect();
    model.predict_batch(&views)
}

/// A fully trained window: both variants plus their test-year scores.
pub struct WindowRun {
    pub data: WindowData,
    pub full: ForecastModel,
    pub tech: ForecastModel,
    pub full_log: Vec<EpochLog>,
    pub tech_log: Vec<EpochLog>,
    pub predictions: Vec<PredictionRow>,
    pub year: YearRow,
}

/// Assembles, trains both variants, predicts the test year, and scores
/// it. Sub-stage seeds derive from the window id, so windows are
/// independent and the whole run is a pure function of (inputs, seed).
pub fn run_window(
    tech: &FeatureMatrix,
    docs: &[DocumentEmbedding],
    window: &WindowSpec,
    n_groups: usize,
    cfg: &TrainConfig,
    root_seed: u64,
) -> Result<WindowRun> {
    let wseed = stage_seed(root_seed, &window.id());
    let data = assemble_window(tech, docs, window, n_groups, cfg, wseed)?;
    if data.test_pairs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "window {} has no test pairs",
            window.id()
        )));
    }
    let (full, full_log) = train_variant(&data, Variant::Full, cfg, stage_seed(wseed, "train-full"))?;
    let (tech_model, tech_log) =
        train_variant(&data, Variant::TechOnly, cfg, stage_seed(wseed, "train-tech"))?;

    let pred_full = predict_test(&full, &data)?;
    let pred_tech = predict_test(&tech_model, &data)?;
    let close_scale = data.scaler.get(&data.manifest.target_column)?;
    let predictions: Vec<PredictionRow> = data
        .test_pairs
        .iter()
        .zip(pred_tech.iter().zip(&pred_full))
        .map(|(p, (t, f))| PredictionRow {
            date: p.target_date,
            actual: close_scale.invert(p.target),
            predicted_tech: *t,
            predicted_full: *f,
        })
        .collect();

    let actual: Vec<f64> = predictions.iter().map(|r| r.actual).collect();
    let tech_metrics = compute_metrics(
        &actual,
        &predictions.iter().map(|r| r.predicted_tech).collect::<Vec<_>>(),
    )?;
    let full_metrics = compute_metrics(
        &actual,
        &predictions.iter().map(|r| r.predicted_full).collect::<Vec<_>>(),
    )?;
    let year = YearRow {
        test_year: window.test_year,
        n: predictions.len(),
        hv_pct: historical_volatility(&data.test_closes)?,
        tech: tech_metrics,
        full: full_metrics,
    };
    Ok(WindowRun {
        data,
        full,
        tech: tech_model,
        full_log,
        tech_log,
        predictions,
        year,
    })
}

/// The walk-forward evaluation across a whole plan.
pub struct BacktestOutput {
    pub runs: Vec<WindowRun>,
    pub years: Vec<YearRow>,
    pub reports: Vec<MetricReport>,
}

pub fn rolling_backtest(
    tech: &FeatureMatrix,
    docs: &[DocumentEmbedding],
    plan: &RollingWindowPlan,
    n_groups: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BacktestOutput> {
    if plan.windows.is_empty() {
        return Err(Error::InsufficientData("empty window plan".into()));
    }
    let mut runs = Vec::with_capacity(plan.windows.len());
    for w in &plan.windows {
        runs.push(run_window(tech, docs, w, n_groups, cfg, seed)?);
    }
    let years = runs.iter().map(|r| r.year.clone()).collect();
    let reports = runs
        .iter()
        .flat_map(|r| {
            [
                MetricReport {
                    window: r.data.window.id(),
                    variant: Variant::TechOnly.to_string(),
                    test_year: r.data.window.test_year,
                    n: r.year.n,
                    metrics: r.year.tech.clone(),
                },
                MetricReport {
                    window: r.data.window.id(),
                    variant: Variant::Full.to_string(),
                    test_year: r.data.window.test_year,
                    n: r.year.n,
                    metrics: r.year.full.clone(),
                },
            ]
        })
        .collect();
    Ok(BacktestOutput {
        runs,
        years,
        reports,
    })
}

/// Refits grouping and the FULL variant for every group count in
/// `lo..=hi` on one window and scores each on its test year.
pub fn sensitivity_sweep(
    tech: &FeatureMatrix,
    docs: &[DocumentEmbedding],
    window: &WindowSpec,
    lo: usize,
    hi: usize,
    cfg: &TrainConfig,
    root_seed: u64,
) -> Result<SensitivityReport> {
    if lo == 0 || hi < lo {
        return Err(Error::Usage(format!(
            "group-count range {lo}..={hi} is empty or starts at zero"
        )));
    }
    let wseed = stage_seed(root_seed, &window.id());
    let mut rows = Vec::with_capacity(hi - lo + 1);
    for k in lo..=hi {
        let data = assemble_window(tech, docs, window, k, cfg, stage_seed(wseed, &format!("k{k}")))?;
        let (model, _) = train_variant(
            &data,
            Variant::Full,
            cfg,
            stage_seed(wseed, &format!("train-k{k}")),
        )?;
        let predicted = predict_test(&model, &data)?;
        let close_scale = data.scaler.get(&data.manifest.target_column)?;
        let actual: Vec<f64> = data
            .test_pairs
            .iter()
            .map(|p| close_scale.invert(p.target))
            .collect();
        let m = compute_metrics(&actual, &predicted)?;
        rows.push(SensitivityRow {
            n_groups: k,
            mae: m.mae,
            rmse: m.rmse,
            r2: m.r2,
        });
    }
    SensitivityReport::new(rows)
}

/// The semantic groups as Shapley players: one singleton group per
/// `group_*_weight` column. Sentiment aggregates and technical columns
/// stay unmasked background.
pub fn semantic_groups(manifest: &FeatureManifest) -> Result<FeatureGroups> {
    let mut names = Vec::new();
    let mut members = Vec::new();
    for (i, c) in manifest.columns.iter().enumerate() {
        if manifest.text.contains(c) && c.starts_with("group_") && c.ends_with("_weight") {
            names.push(c.clone());
            members.push(vec![i]);
        }
    }
    if names.is_empty() {
        return Err(Error::Schema(
            "manifest has no group weight columns to attribute over".into(),
        ));
    }
    FeatureGroups::new(names, members, manifest.columns.len())
}

/// One dated attribution of an explain batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatedAttribution {
    pub date: NaiveDate,
    pub attribution: Attribution,
}

/// Exact group attributions for every test date of a window, plus the
/// year-level aggregate (mean |phi| per group).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainReport {
    pub window: String,
    pub mode: ValueMode,
    pub group_names: Vec<String>,
    pub rows: Vec<DatedAttribution>,
    pub mean_abs_phi: Vec<f64>,
}

/// Runs exact attribution on each test date (all of them, or the first
/// `limit`). Wall times per date are returned separately so the report
/// itself stays byte-stable across reruns. The model must consume the
/// text stream; realized prices for error-reduction mode come from the
/// pairs' own targets.
pub fn explain_window(
    model: &ForecastModel,
    data: &WindowData,
    mode: ValueMode,
    limit: Option<usize>,
) -> Result<(ExplainReport, Vec<(NaiveDate, f64)>)> {
    let groups = semantic_groups(&model.manifest)?;
    let close_scale = data.scaler.get(&data.manifest.target_column)?;
    let take = limit.unwrap_or(data.test_pairs.len());
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for pair in data.test_pairs.iter().take(take) {
        let actual = match mode {
            ValueMode::Prediction => None,
            ValueMode::ErrorReduction => Some(close_scale.invert(pair.target)),
        };
        let started = Instant::now();
        let attribution = exact_group_shap(
            model,
            &groups,
            pair.input.clone(),
            data.baseline.clone(),
            mode,
            actual,
        )?;
        timing.push((pair.target_date, started.elapsed().as_secs_f64() * 1e3));
        rows.push(DatedAttribution {
            date: pair.target_date,
            attribution,
        });
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData(
            "no test dates to explain".into(),
        ));
    }
    let n_g = groups.names.len();
    let mut mean_abs_phi = vec![0.0f64; n_g];
    for r in &rows {
        for (g, phi) in r.attribution.phi.iter().enumerate() {
            mean_abs_phi[g] += phi.abs();
        }
    }
    for m in &mut mean_abs_phi {
        *m /= rows.len() as f64;
    }
    Ok((
        ExplainReport {
            window: data.window.id(),
            mode,
            group_names: groups.names.clone(),
            rows,
            mean_abs_phi,
        },
        timing,
    ))
}

/// Times sampled attribution over every input column (one player per
/// column) against exact attribution over the semantic groups, on the
/// same instances, and reports the cost reduction.
pub fn bench_attribution(
    model: &ForecastModel,
    instances: &[Array2<f64>],
    baseline: &Array1<f64>,
    budget: usize,
    seed: u64,
) -> Result<BenchComparison> {
    if instances.is_empty() {
        return Err(Error::Usage("no instances to benchmark".into()));
    }
    let groups = semantic_groups(&model.manifest)?;
    let tokens = FeatureGroups::singletons(&model.manifest.columns)?;

    let mut token_evals = 0u64;
    let started = Instant::now();
    for (i, inst) in instances.iter().enumerate() {
        let a = sampled_group_shap(
            model,
            &tokens,
            inst.clone(),
            baseline.clone(),
            ValueMode::Prediction,
            None,
            budget,
            stage_seed(seed, &format!("bench-{i}")),
        )?;
        token_evals += a.evaluations;
    }
    let token_wall = started.elapsed().as_secs_f64() * 1e3;

    let mut group_evals = 0u64;
    let started = Instant::now();
    for inst in instances {
        let a = exact_group_shap(
            model,
            &groups,
            inst.clone(),
            baseline.clone(),
            ValueMode::Prediction,
            None,
        )?;
        group_evals += a.evaluations;
    }
    let group_wall = started.elapsed().as_secs_f64() * 1e3;

    BenchComparison::new(
        BenchSide {
            label: "token".into(),
            players: tokens.names.len(),
            method: "sampled".into(),
            evaluations: token_evals,
            wall_ms: token_wall,
            coalition_count: count_coalitions(tokens.names.len())?,
        },
        BenchSide {
            label: "group".into(),
            players: groups.names.len(),
            method: "exact".into(),
            evaluations: group_evals,
            wall_ms: group_wall,
            coalition_count: count_coalitions(groups.names.len())?,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{build_feature_matrix, make_windows, IndicatorConfig};
    use crate::synth::{synth_generate, SynthSpec};
    use chrono::Datelike;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden_size: 4,
            num_layers: 1,
            head_hidden: 8,
            epochs: 2,
            steps: 4,
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    fn tiny_world(start: i32, end: i32) -> (FeatureMatrix, Vec<DocumentEmbedding>) {
        let spec = SynthSpec {
            start_year: start,
            end_year: end,
            dim: 6,
            k: 2,
            docs_per_day: 2,
            n_macro: 1,
            ..SynthSpec::default()
        };
        let data = synth_generate(&spec, 33).unwrap();
        let tech =
            build_feature_matrix(&data.prices, &data.macros, &IndicatorConfig::default()).unwrap();
        (tech, data.docs)
    }

    fn one_window() -> WindowSpec {
        WindowSpec {
            train_start: 2019,
            train_end: 2019,
            test_year: 2020,
        }
    }

    #[test]
    fn window_run_shapes_and_determinism() {
        let (tech, docs) = tiny_world(2019, 2020);
        let w = one_window();
        let run = run_window(&tech, &docs, &w, 2, &tiny_cfg(), 5).unwrap();
        assert!(!run.predictions.is_empty());
        assert!(run
            .predictions
            .iter()
            .all(|p| p.date.year() == 2020 && p.actual > 0.0));
        assert_eq!(run.year.n, run.predictions.len());
        assert!(run.year.tech.mae <= run.year.tech.rmse);
        assert!(run.year.hv_pct > 0.0);
        assert_ne!(run.full.params, run.tech.params);

        let again = run_window(&tech, &docs, &w, 2, &tiny_cfg(), 5).unwrap();
        assert_eq!(run.predictions, again.predictions);
        assert_eq!(run.full, again.full);
    }

    #[test]
    fn backtest_counts_follow_the_plan() {
        let (tech, docs) = tiny_world(2017, 2021);
        let plan = make_windows(2017, 2021).unwrap();
        assert_eq!(plan.windows.len(), 2);
        let out = rolling_backtest(&tech, &docs, &plan, 2, &tiny_cfg(), 9).unwrap();
        assert_eq!(out.years.len(), 2);
        assert_eq!(out.reports.len(), 4);
        assert_eq!(out.years[0].test_year, 2020);
        assert_eq!(out.years[1].test_year, 2021);
        for r in &out.reports {
            assert!(r.metrics.mae <= r.metrics.rmse);
            assert!(r.n > 0);
        }
        assert_eq!(out.reports[0].variant, "TECH_ONLY");
        assert_eq!(out.reports[1].variant, "FULL");
    }

    #[test]
    fn sensitivity_rows_are_ascending_and_chosen_by_r2() {
        let (tech, docs) = tiny_world(2019, 2020);
        let report =
            sensitivity_sweep(&tech, &docs, &one_window(), 1, 3, &tiny_cfg(), 5).unwrap();
        assert_eq!(report.rows.len(), 3);
        let counts: Vec<usize> = report.rows.iter().map(|r| r.n_groups).collect();
        assert_eq!(counts, vec![1, 2, 3]);
        let best = report
            .rows
            .iter()
            .max_by(|a, b| a.r2.partial_cmp(&b.r2).unwrap())
            .unwrap();
        assert_eq!(report.chosen_n_groups, best.n_groups);
    }

    /// Fitted state must be a function of training rows only: replacing
    /// every test-year document leaves centroids, scaler, and trained
    /// parameters bit-identical.
    #[test]
    fn test_year_rows_cannot_touch_fitted_state() {
        let (tech, docs) = tiny_world(2019, 2020);
        let w = one_window();
        let run = run_window(&tech, &docs, &w, 2, &tiny_cfg(), 5).unwrap();

        let mut tampered = docs.clone();
        for d in &mut tampered {
            if d.date.year() == 2020 {
                for v in &mut d.vector {
                    *v = -*v;
                }
                std::mem::swap(&mut d.p_pos, &mut d.p_neg);
            }
        }
        let tampered_run = run_window(&tech, &tampered, &w, 2, &tiny_cfg(), 5).unwrap();
        assert_eq!(run.data.grouping.centroids, tampered_run.data.grouping.centroids);
        assert_eq!(run.data.scaler, tampered_run.data.scaler);
        assert_eq!(run.full.params, tampered_run.full.params);
        assert_eq!(run.tech.params, tampered_run.tech.params);
        // the tampering does flow into test-time features
        assert_ne!(run.predictions, tampered_run.predictions);
    }

    #[test]
    fn explain_covers_every_test_date_and_balances() {
        let (tech, docs) = tiny_world(2019, 2020);
        let run = run_window(&tech, &docs, &one_window(), 2, &tiny_cfg(), 5).unwrap();
        let (report, timing) =
            explain_window(&run.full, &run.data, ValueMode::Prediction, Some(4)).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(timing.len(), 4);
        assert_eq!(report.group_names, vec!["group_0_weight", "group_1_weight"]);
        assert_eq!(report.mean_abs_phi.len(), 2);
        for r in &report.rows {
            assert!(r.attribution.efficiency_residual < 1e-8);
            assert_eq!(r.attribution.evaluations, 4); // 2^2 coalitions
        }

        let (err_report, _) =
            explain_window(&run.full, &run.data, ValueMode::ErrorReduction, Some(2)).unwrap();
        for r in &err_report.rows {
            assert!(r.attribution.v_full <= 0.0); // negated absolute error
        }
    }

    #[test]
    fn bench_counts_are_exact() {
        let (tech, docs) = tiny_world(2019, 2020);
        let run = run_window(&tech, &docs, &one_window(), 2, &tiny_cfg(), 5).unwrap();
        let instances: Vec<Array2<f64>> = run
            .data
            .test_pairs
            .iter()
            .take(2)
            .map(|p| p.input.clone())
            .collect();
        let cmp =
            bench_attribution(&run.full, &instances, &run.data.baseline, 3, 11).unwrap();
        let cols = run.full.manifest.columns.len() as u64;
        assert_eq!(cmp.token.evaluations, 2 * (3 * cols + 2));
        assert_eq!(cmp.group.evaluations, 2 * 4);
        assert_eq!(cmp.group.coalition_count, "3");
        assert!(cmp.token.wall_ms > 0.0);
        assert!(cmp.evaluation_reduction_pct > 90.0);
    }
}
