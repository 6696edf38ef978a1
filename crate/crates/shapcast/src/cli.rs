//! Command-line orchestration.
//!
//! Every subcommand is a pure function of (input files, config, seed):
//! it rebuilds whatever fitted state it needs from the raw inputs with
//! the same stage seeds, so reports never depend on files written by
//! earlier commands, and reruns are byte-identical. Timing sidecars
//! (`*_log.csv`, `*timing*`) are the only outputs that vary between
//! runs. All writes go through a temp-file rename, so a crashed run
//! never leaves a half-written report.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{BenchComparison, SensitivityReport};
use crate::forecaster::{EpochLog, Variant};
use crate::grouping::{load_embeddings_jsonl, DocumentEmbedding};
use crate::market_data::io::{
    dataset_to_csv, feature_matrix_to_csv, load_named_series_csv, load_price_csv,
    named_series_to_csv, price_series_to_csv, PriceColumnMap,
};
use crate::market_data::{
    build_feature_matrix, make_windows, AlignedDataset, FeatureMatrix, NamedSeries, PriceSeries,
    RollingWindowPlan, WindowSpec,
};
use crate::pipeline::{
    assemble_window, bench_attribution, explain_window, rolling_backtest, run_window,
    sensitivity_sweep, train_variant, BacktestOutput, ExplainReport,
};
use crate::synth::synth_generate;
use crate::util::{stage_seed, write_atomic};
use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "shapcast",
    version,
    about = "Group-level Shapley attribution for a two-stream GRU forecaster"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the config's root seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// overrides the config's output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the aligned price + indicator + exogenous dataset CSV
    Ingest,
    /// Fit the configured window's grouping model and export its features
    Group,
    /// Train the configured variant on the configured window
    Train,
    /// Predict the configured window's test year with both variants
    Predict,
    /// Exact group attributions for the configured window's test dates
    Explain,
    /// Walk-forward backtest of both variants over every window
    Evaluate,
    /// Refit grouping and the FULL model across a range of group counts
    Sensitivity,
    /// Time token-level sampling against exact group attribution
    BenchShap,
    /// Generate a synthetic corpus with planted structure
    Synth,
}

/// Parses arguments, runs the chosen command, and maps failures to exit
/// codes: 1 usage/config, 2 data, 3 numerical.
pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.data.out_dir = out;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.data.out_dir).map_err(|e| Error::io(&cfg.data.out_dir, e))?;
    match cli.command {
        Command::Ingest => cmd_ingest(&cfg),
        Command::Group => cmd_group(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Predict => cmd_predict(&cfg),
        Command::Explain => cmd_explain(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Sensitivity => cmd_sensitivity(&cfg),
        Command::BenchShap => cmd_bench(&cfg),
        Command::Synth => cmd_synth(&cfg),
    }
}

/// Config echo stamped into every report.
#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

fn meta<'a>(command: &'a str, cfg: &'a RunConfig) -> Meta<'a> {
    Meta {
        command,
        seed: cfg.seed,
        config: cfg,
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.data.out_dir.join(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Schema(format!("serializing {}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn load_prices(cfg: &RunConfig) -> Result<PriceSeries> {
    load_price_csv(&cfg.data.price_csv, &PriceColumnMap::default())
}

fn load_macros(cfg: &RunConfig) -> Result<Vec<NamedSeries>> {
    match &cfg.data.macro_csv {
        Some(path) if path.exists() => load_named_series_csv(path),
        _ => Ok(Vec::new()),
    }
}

fn load_docs(cfg: &RunConfig) -> Result<Vec<DocumentEmbedding>> {
    load_embeddings_jsonl(&cfg.data.embeddings_jsonl)
}

fn tech_matrix(cfg: &RunConfig) -> Result<FeatureMatrix> {
    let prices = load_prices(cfg)?;
    let macros = load_macros(cfg)?;
    build_feature_matrix(&prices, &macros, &cfg.indicators)
}

/// The walk-forward plan: configured years, or the data's own span.
fn plan_for(cfg: &RunConfig, tech: &FeatureMatrix) -> Result<RollingWindowPlan> {
    let (data_first, data_last) = tech
        .year_span()
        .ok_or_else(|| Error::InsufficientData("dataset is empty".into()))?;
    let first = cfg.windows.first_year.unwrap_or(data_first);
    let last = cfg.windows.last_year.unwrap_or(data_last);
    make_windows(first, last)
}

fn selected_window(cfg: &RunConfig, plan: &RollingWindowPlan) -> Result<WindowSpec> {
    plan.windows
        .get(cfg.windows.window_index)
        .copied()
        .ok_or_else(|| {
            Error::Config(format!(
                "windows.window_index {} is out of range; the plan has {} windows",
                cfg.windows.window_index,
                plan.windows.len()
            ))
        })
}

fn csv_bytes(rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    if cfg.synth.n_macro > 0 && cfg.data.macro_csv.is_none() {
        return Err(Error::Config(
            "synth.n_macro > 0 but data.macro_csv gives the file no destination".into(),
        ));
    }
    let data = synth_generate(&cfg.synth, cfg.seed)?;
    for path in [Some(&cfg.data.price_csv), Some(&cfg.data.embeddings_jsonl)]
        .into_iter()
        .flatten()
        .chain(cfg.data.macro_csv.iter())
    {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
    }
    write_atomic(&cfg.data.price_csv, &price_series_to_csv(&data.prices)?)?;
    write_atomic(
        &cfg.data.embeddings_jsonl,
        &crate::grouping::embeddings_to_jsonl(&data.docs)?,
    )?;
    if cfg.synth.n_macro > 0 {
        let path = cfg.data.macro_csv.as_ref().expect("checked above");
        write_atomic(path, &named_series_to_csv(&data.macros)?)?;
    }
    #[derive(Serialize)]
    struct SynthSummary<'a> {
        meta: Meta<'a>,
        trading_days: usize,
        documents: usize,
    }
    write_json(
        &out_path(cfg, "synth_meta.json"),
        &SynthSummary {
            meta: meta("synth", cfg),
            trading_days: data.prices.rows().len(),
            documents: data.docs.len(),
        },
    )?;
    println!(
        "synth: {} trading days, {} documents -> {}",
        data.prices.rows().len(),
        data.docs.len(),
        cfg.data.price_csv.display()
    );
    Ok(())
}

fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    cfg.require_inputs(true, false)?;
    let tech = tech_matrix(cfg)?;
    let ds = AlignedDataset::assemble(tech, "close")?;
    write_atomic(&out_path(cfg, "aligned_dataset.csv"), &dataset_to_csv(&ds)?)?;
    write_json(&out_path(cfg, "ingest_meta.json"), &meta("ingest", cfg))?;
    println!(
        "ingest: {} rows x {} columns -> aligned_dataset.csv",
        ds.features.n_rows(),
        ds.features.n_cols()
    );
    Ok(())
}

/// Assembles the configured window (grouping, join, scaling, sequences).
fn assembled(cfg: &RunConfig) -> Result<(crate::pipeline::WindowData, FeatureMatrix)> {
    cfg.require_inputs(true, true)?;
    let tech = tech_matrix(cfg)?;
    let docs = load_docs(cfg)?;
    let plan = plan_for(cfg, &tech)?;
    let window = selected_window(cfg, &plan)?;
    let wseed = stage_seed(cfg.seed, &window.id());
    let data = assemble_window(&tech, &docs, &window, cfg.grouping.n_groups, &cfg.train, wseed)?;
    Ok((data, tech))
}

fn cmd_group(cfg: &RunConfig) -> Result<()> {
    let (data, tech) = assembled(cfg)?;
    let docs = load_docs(cfg)?;
    let (features, dropped) =
        crate::grouping::build_group_feature_series(&docs, &data.grouping, tech.dates())?;
    #[derive(Serialize)]
    struct GroupExport<'a> {
        meta: Meta<'a>,
        window: String,
        dropped_documents: usize,
        model: &'a crate::grouping::GroupingModel,
    }
    write_json(
        &out_path(cfg, "grouping_model.json"),
        &GroupExport {
            meta: meta("group", cfg),
            window: data.window.id(),
            dropped_documents: dropped,
            model: &data.grouping,
        },
    )?;
    write_atomic(
        &out_path(cfg, "group_features.csv"),
        &feature_matrix_to_csv(&features)?,
    )?;
    println!(
        "group: window {} fitted {} groups ({} documents outside the calendar dropped)",
        data.window.id(),
        data.grouping.k,
        dropped
    );
    Ok(())
}

fn epoch_log_csv(rows: &[(String, String, &EpochLog)]) -> Result<Vec<u8>> {
    let mut out = vec![vec![
        "window".to_string(),
        "variant".to_string(),
        "epoch".to_string(),
        "mean_loss".to_string(),
        "wall_ms".to_string(),
    ]];
    for (window, variant, log) in rows {
        out.push(vec![
            window.clone(),
            variant.clone(),
            log.epoch.to_string(),
            log.mean_loss.to_string(),
            log.wall_ms.to_string(),
        ]);
    }
    csv_bytes(out)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (data, _) = assembled(cfg)?;
    let wseed = stage_seed(cfg.seed, &data.window.id());
    let label = match cfg.variant {
        Variant::Full => "train-full",
        Variant::TechOnly => "train-tech",
    };
    let (model, log) = train_variant(&data, cfg.variant, &cfg.train, stage_seed(wseed, label))?;
    #[derive(Serialize)]
    struct ModelExport<'a> {
        meta: Meta<'a>,
        model: &'a crate::forecaster::ForecastModel,
    }
    let name = format!("model_{}.json", cfg.variant.to_string().to_lowercase());
    write_json(
        &out_path(cfg, &name),
        &ModelExport {
            meta: meta("train", cfg),
            model: &model,
        },
    )?;
    let rows: Vec<(String, String, &EpochLog)> = log
        .iter()
        .map(|l| (data.window.id(), cfg.variant.to_string(), l))
        .collect();
    write_atomic(&out_path(cfg, "train_log.csv"), &epoch_log_csv(&rows)?)?;
    let final_loss = log.last().map(|l| l.mean_loss).unwrap_or(f64::NAN);
    println!(
        "train: {} on window {} finished at loss {final_loss:.6} -> {name}",
        cfg.variant,
        data.window.id()
    );
    Ok(())
}

fn prediction_csv(rows: &[crate::pipeline::PredictionRow]) -> Result<Vec<u8>> {
    let mut out = vec![vec![
        "date".to_string(),
        "actual".to_string(),
        "predicted_tech".to_string(),
        "predicted_full".to_string(),
    ]];
    for r in rows {
        out.push(vec![
            r.date.to_string(),
            r.actual.to_string(),
            r.predicted_tech.to_string(),
            r.predicted_full.to_string(),
        ]);
    }
    csv_bytes(out)
}

fn run_selected_window(cfg: &RunConfig) -> Result<crate::pipeline::WindowRun> {
    cfg.require_inputs(true, true)?;
    let tech = tech_matrix(cfg)?;
    let docs = load_docs(cfg)?;
    let plan = plan_for(cfg, &tech)?;
    let window = selected_window(cfg, &plan)?;
    run_window(&tech, &docs, &window, cfg.grouping.n_groups, &cfg.train, cfg.seed)
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let run = run_selected_window(cfg)?;
    write_atomic(
        &out_path(cfg, "predictions.csv"),
        &prediction_csv(&run.predictions)?,
    )?;
    write_json(&out_path(cfg, "predict_meta.json"), &meta("predict", cfg))?;
    println!(
        "predict: {} test dates of {} -> predictions.csv (FULL mae {:.4}, TECH_ONLY mae {:.4})",
        run.predictions.len(),
        run.data.window.test_year,
        run.year.full.mae,
        run.year.tech.mae
    );
    Ok(())
}

fn explain_csv(report: &ExplainReport) -> Result<Vec<u8>> {
    let mut out = vec![vec![
        "date".to_string(),
        "group".to_string(),
        "phi".to_string(),
        "v_empty".to_string(),
        "v_full".to_string(),
        "efficiency_residual".to_string(),
        "evaluations".to_string(),
    ]];
    for row in &report.rows {
        let a = &row.attribution;
        for (name, phi) in a.group_names.iter().zip(&a.phi) {
            out.push(vec![
                row.date.to_string(),
                name.clone(),
                phi.to_string(),
                a.v_empty.to_string(),
                a.v_full.to_string(),
                a.efficiency_residual.to_string(),
                a.evaluations.to_string(),
            ]);
        }
    }
    csv_bytes(out)
}

fn cmd_explain(cfg: &RunConfig) -> Result<()> {
    let (data, _) = assembled(cfg)?;
    let wseed = stage_seed(cfg.seed, &data.window.id());
    let (model, _) = train_variant(&data, Variant::Full, &cfg.train, stage_seed(wseed, "train-full"))?;
    let (report, timing) = explain_window(
        &model,
        &data,
        cfg.attribution.mode,
        cfg.attribution.explain_limit,
    )?;
    #[derive(Serialize)]
    struct ExplainExport<'a> {
        meta: Meta<'a>,
        report: &'a ExplainReport,
    }
    write_json(
        &out_path(cfg, "explain.json"),
        &ExplainExport {
            meta: meta("explain", cfg),
            report: &report,
        },
    )?;
    write_atomic(&out_path(cfg, "explain.csv"), &explain_csv(&report)?)?;
    let mut timing_rows = vec![vec!["date".to_string(), "wall_ms".to_string()]];
    for (date, ms) in &timing {
        timing_rows.push(vec![date.to_string(), ms.to_string()]);
    }
    write_atomic(&out_path(cfg, "explain_timing.csv"), &csv_bytes(timing_rows)?)?;
    let worst = report
        .rows
        .iter()
        .map(|r| r.attribution.efficiency_residual)
        .fold(0.0f64, f64::max);
    println!(
        "explain: {} dates x {} groups, worst efficiency residual {worst:.3e} -> explain.json",
        report.rows.len(),
        report.group_names.len()
    );
    Ok(())
}

fn year_csv(years: &[crate::evaluation::YearRow]) -> Result<Vec<u8>> {
    let mut out = vec![vec![
        "test_year".to_string(),
        "n".to_string(),
        "hv_pct".to_string(),
        "tech_mae".to_string(),
        "tech_rmse".to_string(),
        "tech_mape".to_string(),
        "tech_r2".to_string(),
        "full_mae".to_string(),
        "full_rmse".to_string(),
        "full_mape".to_string(),
        "full_r2".to_string(),
    ]];
    for y in years {
        out.push(vec![
            y.test_year.to_string(),
            y.n.to_string(),
            y.hv_pct.to_string(),
            y.tech.mae.to_string(),
            y.tech.rmse.to_string(),
            y.tech.mape.to_string(),
            y.tech.r2.to_string(),
            y.full.mae.to_string(),
            y.full.rmse.to_string(),
            y.full.mape.to_string(),
            y.full.r2.to_string(),
        ]);
    }
    csv_bytes(out)
}

fn window_csv(reports: &[crate::evaluation::MetricReport]) -> Result<Vec<u8>> {
    let mut out = vec![vec![
        "window".to_string(),
        "variant".to_string(),
        "test_year".to_string(),
        "n".to_string(),
        "mae".to_string(),
        "rmse".to_string(),
        "mape".to_string(),
        "r2".to_string(),
    ]];
    for r in reports {
        out.push(vec![
            r.window.clone(),
            r.variant.clone(),
            r.test_year.to_string(),
            r.n.to_string(),
            r.metrics.mae.to_string(),
            r.metrics.rmse.to_string(),
            r.metrics.mape.to_string(),
            r.metrics.r2.to_string(),
        ]);
    }
    csv_bytes(out)
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    cfg.require_inputs(true, true)?;
    let tech = tech_matrix(cfg)?;
    let docs = load_docs(cfg)?;
    let plan = plan_for(cfg, &tech)?;
    let out: BacktestOutput =
        rolling_backtest(&tech, &docs, &plan, cfg.grouping.n_groups, &cfg.train, cfg.seed)?;
    write_atomic(&out_path(cfg, "evaluate_years.csv"), &year_csv(&out.years)?)?;
    write_atomic(
        &out_path(cfg, "evaluate_windows.csv"),
        &window_csv(&out.reports)?,
    )?;
    for run in &out.runs {
        let name = format!("predictions_{}.csv", run.data.window.test_year);
        write_atomic(&out_path(cfg, &name), &prediction_csv(&run.predictions)?)?;
    }
    let mut log_rows: Vec<(String, String, &EpochLog)> = Vec::new();
    for run in &out.runs {
        for l in &run.tech_log {
            log_rows.push((run.data.window.id(), Variant::TechOnly.to_string(), l));
        }
        for l in &run.full_log {
            log_rows.push((run.data.window.id(), Variant::Full.to_string(), l));
        }
    }
    write_atomic(
        &out_path(cfg, "evaluate_train_log.csv"),
        &epoch_log_csv(&log_rows)?,
    )?;
    #[derive(Serialize)]
    struct EvaluateExport<'a> {
        meta: Meta<'a>,
        years: &'a [crate::evaluation::YearRow],
        windows: &'a [crate::evaluation::MetricReport],
    }
    write_json(
        &out_path(cfg, "evaluate.json"),
        &EvaluateExport {
            meta: meta("evaluate", cfg),
            years: &out.years,
            windows: &out.reports,
        },
    )?;
    println!(
        "evaluate: {} windows -> evaluate_years.csv, evaluate_windows.csv, predictions_<year>.csv",
        out.years.len()
    );
    Ok(())
}

fn sensitivity_csv(report: &SensitivityReport) -> Result<Vec<u8>> {
    let mut out = vec![vec![
        "n_groups".to_string(),
        "mae".to_string(),
        "rmse".to_string(),
        "r2".to_string(),
        "chosen".to_string(),
    ]];
    for r in &report.rows {
        out.push(vec![
            r.n_groups.to_string(),
            r.mae.to_string(),
            r.rmse.to_string(),
            r.r2.to_string(),
            (r.n_groups == report.chosen_n_groups).to_string(),
        ]);
    }
    csv_bytes(out)
}

fn cmd_sensitivity(cfg: &RunConfig) -> Result<()> {
    cfg.require_inputs(true, true)?;
    let tech = tech_matrix(cfg)?;
    let docs = load_docs(cfg)?;
    let plan = plan_for(cfg, &tech)?;
    let window = selected_window(cfg, &plan)?;
    let report = sensitivity_sweep(
        &tech,
        &docs,
        &window,
        cfg.grouping.sweep_min,
        cfg.grouping.sweep_max,
        &cfg.train,
        cfg.seed,
    )?;
    write_atomic(&out_path(cfg, "sensitivity.csv"), &sensitivity_csv(&report)?)?;
    #[derive(Serialize)]
    struct SensitivityExport<'a> {
        meta: Meta<'a>,
        window: String,
        report: &'a SensitivityReport,
    }
    write_json(
        &out_path(cfg, "sensitivity.json"),
        &SensitivityExport {
            meta: meta("sensitivity", cfg),
            window: window.id(),
            report: &report,
        },
    )?;
    println!(
        "sensitivity: n_groups {}..={} on window {}, best r2 at {}",
        cfg.grouping.sweep_min,
        cfg.grouping.sweep_max,
        window.id(),
        report.chosen_n_groups
    );
    Ok(())
}

fn bench_csv(cmp: &BenchComparison) -> Result<Vec<u8>> {
    let mut out = vec![vec![
        "label".to_string(),
        "players".to_string(),
        "method".to_string(),
        "evaluations".to_string(),
        "coalition_count".to_string(),
        "wall_ms".to_string(),
        "wall_reduction_pct".to_string(),
        "evaluation_reduction_pct".to_string(),
    ]];
    for side in [&cmp.token, &cmp.group] {
        let is_group = std::ptr::eq(side, &cmp.group);
        out.push(vec![
            side.label.clone(),
            side.players.to_string(),
            side.method.clone(),
            side.evaluations.to_string(),
            side.coalition_count.clone(),
            side.wall_ms.to_string(),
            if is_group {
                cmp.wall_reduction_pct.to_string()
            } else {
                String::new()
            },
            if is_group {
                cmp.evaluation_reduction_pct.to_string()
            } else {
                String::new()
            },
        ]);
    }
    csv_bytes(out)
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let (data, _) = assembled(cfg)?;
    let wseed = stage_seed(cfg.seed, &data.window.id());
    let (model, _) = train_variant(&data, Variant::Full, &cfg.train, stage_seed(wseed, "train-full"))?;
    let instances: Vec<Array2<f64>> = data
        .test_pairs
        .iter()
        .take(cfg.attribution.bench_instances)
        .map(|p| p.input.clone())
        .collect();
    if instances.len() < cfg.attribution.bench_instances {
        return Err(Error::InsufficientData(format!(
            "window {} has only {} test instances of the {} requested",
            data.window.id(),
            instances.len(),
            cfg.attribution.bench_instances
        )));
    }
    let cmp = bench_attribution(
        &model,
        &instances,
        &data.baseline,
        cfg.attribution.budget,
        stage_seed(wseed, "bench"),
    )?;
    write_atomic(&out_path(cfg, "bench_timing.csv"), &bench_csv(&cmp)?)?;
    #[derive(Serialize)]
    struct BenchExport<'a> {
        meta: Meta<'a>,
        window: String,
        instances: usize,
        comparison: &'a BenchComparison,
    }
    write_json(
        &out_path(cfg, "bench_timing.json"),
        &BenchExport {
            meta: meta("bench-shap", cfg),
            window: data.window.id(),
            instances: instances.len(),
            comparison: &cmp,
        },
    )?;
    println!(
        "bench-shap: {} token players sampled vs {} groups exact, wall reduction {:.1}% -> bench_timing.json",
        cmp.token.players, cmp.group.players, cmp.wall_reduction_pct
    );
    Ok(())
}
