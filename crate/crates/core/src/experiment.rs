//! Run orchestration: execute sweep grids, write run directories, build the
//! summary table and charts, and regenerate reports from stored files.
//!
//! Layout under the output root:
//!
//! ```text
//! <root>/<experiment name>/
//!   summary.json           sweep-level summary (table, speeds, pooled stats)
//!   table.txt              the printed method table
//!   histogram.csv          pooled and per-run difference histograms
//!   *.svg                  error-vs-time curves and difference histograms
//!   <run_id>/
//!     config.toml          exact configuration of the run
//!     VERSION              crate version and git description
//!     sync_metrics.csv     per-sync per-worker metrics
//!     train_loss.csv       per-iteration training loss per worker
//!     summary.json         per-run summary
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentSpec;
use crate::data::TrainTest;
use crate::error::{Error, Result};
use crate::harness::{self, Strategy, TrainConfig};
use crate::metrics::{
    self, distribution, normalized_speed, Histogram, RunRecord, SpeedEntry, SyncCsvRow, Variant,
};
use crate::svg;

/// Environment variable overriding the output root.
pub const OUTPUT_ROOT_ENV: &str = "ECDNN_OUT";

const ERROR_BIN_WIDTH: f64 = 0.01;
const LOSS_BIN_WIDTH: f64 = 0.05;

/// Per-run summary written to `<run dir>/summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub strategy: Strategy,
    pub workers: usize,
    pub tau: u64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// `ceil(relabel_fraction * largest shard)`; fixed per run.
    pub relabel_count: usize,
    pub final_report: metrics::FinalReport,
    pub mean_diff_lg: Option<f64>,
    pub mean_diff_lc: Option<f64>,
}

impl RunSummary {
    fn from_record(record: &RunRecord, data: &TrainTest, relabel_count: usize) -> Self {
        let diff_lg: Vec<f64> = record
            .sync_rows
            .iter()
            .filter(|r| r.t > 0)
            .map(|r| r.diff_lg())
            .collect();
        let diff_lc = record.diff_lc_series();
        RunSummary {
            run_id: record.run_id.clone(),
            strategy: record.strategy,
            workers: record.config.effective_workers(),
            tau: record.config.sync_every,
            seed: record.config.seed,
            n_train: data.train.len(),
            n_test: data.test.len(),
            relabel_count,
            final_report: record.final_report.clone(),
            mean_diff_lg: mean(&diff_lg),
            mean_diff_lc: mean(&diff_lc),
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// One line of the method table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRow {
    pub label: String,
    pub strategy: Strategy,
    pub variant: String,
    pub workers: usize,
    /// Mean final test error over seeds at the chosen tau.
    pub error: f64,
    /// Mean normalized speed over seeds; absent without a reference.
    pub speed: Option<f64>,
    /// Chosen tau; absent for strategies that do not communicate during
    /// training.
    pub tau: Option<u64>,
}

/// Sweep-level summary written to `<sweep dir>/summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: String,
    pub taus: Vec<u64>,
    pub workers: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<MethodRow>,
    pub runs: Vec<RunSummary>,
    /// Fraction of pooled error-level local-vs-global differences below zero,
    /// per strategy.
    pub negative_diff_fraction: BTreeMap<String, f64>,
    /// Same at the loss level.
    pub negative_loss_diff_fraction: BTreeMap<String, f64>,
}

/// Everything needed to analyze one run, whether freshly computed or read
/// back from a run directory.
#[derive(Debug, Clone)]
pub struct RunView {
    pub summary: RunSummary,
    /// Global-model curve: `(sim time, test error)` per sync row.
    pub curve_global: Vec<(f64, f64)>,
    /// Best-local curve (by training-window loss).
    pub curve_best_local: Vec<(f64, f64)>,
    /// Error-level local-vs-global differences at `t > 0`.
    pub diff_lg: Vec<f64>,
    /// Loss-level local-vs-global differences at `t > 0`.
    pub loss_diff_lg: Vec<f64>,
    /// Local-vs-compressed differences where compression ran.
    pub diff_lc: Vec<f64>,
}

impl RunView {
    fn from_record(record: &RunRecord, summary: &RunSummary) -> Self {
        RunView {
            summary: summary.clone(),
            curve_global: record.curve(Variant::Global),
            curve_best_local: record.curve(Variant::BestLocal),
            diff_lg: record
                .sync_rows
                .iter()
                .filter(|r| r.t > 0)
                .map(|r| r.diff_lg())
                .collect(),
            loss_diff_lg: record
                .sync_rows
                .iter()
                .filter(|r| r.t > 0)
                .map(|r| r.loss_diff_lg())
                .collect(),
            diff_lc: record.diff_lc_series(),
        }
    }

    fn curve(&self, variant: Variant) -> &[(f64, f64)] {
        match variant {
            Variant::Global => &self.curve_global,
            Variant::BestLocal => &self.curve_best_local,
        }
    }

    fn final_error(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Global => self.summary.final_report.global_error,
            Variant::BestLocal => self.summary.final_report.best_local_error,
        }
    }
}

/// Run one configuration and write its run directory under `root`.
pub fn run_single(cfg: &TrainConfig, data: &TrainTest, root: &Path) -> Result<(RunRecord, PathBuf)> {
    let record = harness::run(cfg, data)?;
    let dir = root.join(&record.run_id);
    write_run_dir(&record, data, &dir)?;
    Ok((record, dir))
}

/// Write `config.toml`, `VERSION`, both CSV files and the per-run
/// `summary.json` into `dir`.
pub fn write_run_dir(record: &RunRecord, data: &TrainTest, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_text = toml::to_string_pretty(&record.config)
        .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    fs::write(dir.join("config.toml"), cfg_text).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("VERSION"), version_stamp()).map_err(|e| Error::io(dir, e))?;

    let mut sync_csv = Vec::new();
    metrics::write_sync_csv(record, &mut sync_csv).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("sync_metrics.csv"), sync_csv).map_err(|e| Error::io(dir, e))?;

    let mut loss_csv = Vec::new();
    metrics::write_train_loss_csv(record, &mut loss_csv).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("train_loss.csv"), loss_csv).map_err(|e| Error::io(dir, e))?;

    let summary = RunSummary::from_record(record, data, relabel_count_of(record, data));
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(dir.join("summary.json"), json).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

fn relabel_count_of(record: &RunRecord, data: &TrainTest) -> usize {
    let k = record.config.effective_workers();
    let max_shard = match record.config.partition_mode {
        harness::PartitionMode::Disjoint => data.train.len().div_ceil(k),
        harness::PartitionMode::Replicated => data.train.len(),
    };
    (record.config.relabel_fraction * max_shard as f64).ceil() as usize
}

/// Version stamp for run directories: crate version plus a best-effort git
/// description of the working tree.
pub fn version_stamp() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string());
    format!("ecdnn {} ({git})\n", env!("CARGO_PKG_VERSION"))
}

/// All `(strategy, tau, workers, seed)` combinations of the sweep, with the
/// redundant axes of non-communicating strategies collapsed: the sequential
/// strategy runs once per seed and the independent-ensemble strategy once
/// per `(workers, seed)`, both at the finest tau as their evaluation cadence.
pub fn sweep_grid(spec: &ExperimentSpec) -> Vec<(Strategy, u64, usize, u64)> {
    let min_tau = spec.sweep.taus.iter().copied().min().unwrap_or(1);
    let mut grid = Vec::new();
    for &strategy in &spec.train.strategies {
        match strategy {
            Strategy::SDnn => {
                for &seed in &spec.sweep.seeds {
                    grid.push((strategy, min_tau, 1, seed));
                }
            }
            Strategy::EDnn => {
                for &workers in &spec.sweep.workers {
                    for &seed in &spec.sweep.seeds {
                        grid.push((strategy, min_tau, workers, seed));
                    }
                }
            }
            Strategy::MaDnn | Strategy::EcDnn => {
                for &tau in &spec.sweep.taus {
                    for &workers in &spec.sweep.workers {
                        for &seed in &spec.sweep.seeds {
                            grid.push((strategy, tau, workers, seed));
                        }
                    }
                }
            }
        }
    }
    grid
}

/// Execute the whole sweep, write every run directory plus the sweep-level
/// summary, table and charts, and return the summary.
pub fn run_experiment(spec: &ExperimentSpec, root: &Path) -> Result<SweepSummary> {
    spec.validate()?;
    let data = spec.dataset.load()?;
    let sweep_dir = root.join(&spec.name);
    fs::create_dir_all(&sweep_dir).map_err(|e| Error::io(&sweep_dir, e))?;

    let grid = sweep_grid(spec);
    let configs: Vec<TrainConfig> = grid
        .iter()
        .map(|&(strategy, tau, workers, seed)| {
            let mut cfg = spec.to_train_config(strategy, tau, workers, seed)?;
            let run_dir = sweep_dir.join(cfg.run_id());
            if spec.train.checkpoints {
                cfg.checkpoint_dir = Some(run_dir.join("checkpoints"));
            }
            if spec.train.dump_relabeled {
                cfg.relabel_dump_dir = Some(run_dir.join("relabel_dumps"));
            }
            Ok(cfg)
        })
        .collect::<Result<_>>()?;

    let outcomes: Vec<Result<(RunRecord, RunSummary)>> = run_all(&configs, &data, &sweep_dir);
    let mut views = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (record, summary) = o?;
        views.push(RunView::from_record(&record, &summary));
    }

    let summary = summarize(&spec.name, spec, &views)?;
    write_sweep_outputs(&sweep_dir, &summary, &views)?;
    Ok(summary)
}

fn run_all(
    configs: &[TrainConfig],
    data: &TrainTest,
    sweep_dir: &Path,
) -> Vec<Result<(RunRecord, RunSummary)>> {
    let one = |cfg: &TrainConfig| -> Result<(RunRecord, RunSummary)> {
        let record = harness::run(cfg, data)?;
        let dir = sweep_dir.join(&record.run_id);
        write_run_dir(&record, data, &dir)?;
        let summary = RunSummary::from_record(&record, data, relabel_count_of(&record, data));
        Ok((record, summary))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        configs.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        configs.iter().map(one).collect()
    }
}

/// Build the method table and pooled statistics from run views.
pub fn summarize(name: &str, spec: &ExperimentSpec, views: &[RunView]) -> Result<SweepSummary> {
    let mut rows = Vec::new();
    let mut negative_diff_fraction = BTreeMap::new();
    let mut negative_loss_diff_fraction = BTreeMap::new();

    for &workers in &spec.sweep.workers {
        // Choose tau per strategy by best mean final global error.
        let mut chosen: BTreeMap<&'static str, (Option<u64>, Vec<&RunView>)> = BTreeMap::new();
        for &strategy in &spec.train.strategies {
            let candidates: Vec<&RunView> = views
                .iter()
                .filter(|v| {
                    v.summary.strategy == strategy
                        && (strategy == Strategy::SDnn || v.summary.workers == workers)
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let (tau, picked) = match strategy {
                Strategy::MaDnn | Strategy::EcDnn => {
                    let mut best: Option<(u64, f64, Vec<&RunView>)> = None;
                    for &tau in &spec.sweep.taus {
                        let at_tau: Vec<&RunView> = candidates
                            .iter()
                            .copied()
                            .filter(|v| v.summary.tau == tau)
                            .collect();
                        if at_tau.is_empty() {
                            continue;
                        }
                        let err = at_tau
                            .iter()
                            .map(|v| v.final_error(Variant::Global))
                            .sum::<f64>()
                            / at_tau.len() as f64;
                        if best.as_ref().map_or(true, |(_, e, _)| err < *e) {
                            best = Some((tau, err, at_tau));
                        }
                    }
                    let (tau, _, picked) = best.expect("candidates nonempty");
                    (Some(tau), picked)
                }
                Strategy::SDnn | Strategy::EDnn => (None, candidates),
            };
            chosen.insert(strategy.slug(), (tau, picked));
        }

        // Reference: the parameter-averaging global model at its chosen tau.
        let reference: Option<&(Option<u64>, Vec<&RunView>)> = chosen.get(Strategy::MaDnn.slug());

        for &strategy in &spec.train.strategies {
            let Some((tau, picked)) = chosen.get(strategy.slug()) else {
                continue;
            };
            let variants: &[Variant] = if strategy == Strategy::SDnn {
                &[Variant::Global]
            } else {
                &[Variant::Global, Variant::BestLocal]
            };
            for &variant in variants {
                let error = picked
                    .iter()
                    .map(|v| v.final_error(variant))
                    .sum::<f64>()
                    / picked.len() as f64;
                let speed = reference.and_then(|(_, refs)| {
                    mean_speed_over_seeds(picked, refs, variant)
                });
                let label = if strategy == Strategy::SDnn {
                    strategy.to_string()
                } else {
                    format!("{strategy}_{}", variant.suffix())
                };
                rows.push(MethodRow {
                    label,
                    strategy,
                    variant: variant.suffix().to_string(),
                    workers,
                    error,
                    speed,
                    tau: *tau,
                });
            }
        }
    }

    for strategy in [Strategy::MaDnn, Strategy::EcDnn] {
        let pooled: Vec<f64> = views
            .iter()
            .filter(|v| v.summary.strategy == strategy)
            .flat_map(|v| v.diff_lg.iter().copied())
            .collect();
        if !pooled.is_empty() {
            let neg = pooled.iter().filter(|&&d| d < 0.0).count() as f64 / pooled.len() as f64;
            negative_diff_fraction.insert(strategy.slug().to_string(), neg);
        }
        let pooled_loss: Vec<f64> = views
            .iter()
            .filter(|v| v.summary.strategy == strategy)
            .flat_map(|v| v.loss_diff_lg.iter().copied())
            .collect();
        if !pooled_loss.is_empty() {
            let neg =
                pooled_loss.iter().filter(|&&d| d < 0.0).count() as f64 / pooled_loss.len() as f64;
            negative_loss_diff_fraction.insert(strategy.slug().to_string(), neg);
        }
    }

    Ok(SweepSummary {
        name: name.to_string(),
        taus: spec.sweep.taus.clone(),
        workers: spec.sweep.workers.clone(),
        seeds: spec.sweep.seeds.clone(),
        rows,
        runs: views.iter().map(|v| v.summary.clone()).collect(),
        negative_diff_fraction,
        negative_loss_diff_fraction,
    })
}

/// Mean normalized speed over seeds, pairing each run with the reference run
/// of the same seed.
fn mean_speed_over_seeds(
    picked: &[&RunView],
    reference: &[&RunView],
    variant: Variant,
) -> Option<f64> {
    let mut speeds = Vec::new();
    for v in picked {
        let r = reference
            .iter()
            .find(|r| r.summary.seed == v.summary.seed)?;
        let target = r.curve_global.last().map(|&(_, e)| e)?;
        let ref_time = metrics::time_to_reach(&r.curve_global, target)?;
        let speed = match metrics::time_to_reach(v.curve(variant), target) {
            Some(t) if t > 0.0 => ref_time / t,
            Some(_) => 1.0,
            None => 0.0,
        };
        speeds.push(speed);
    }
    mean(&speeds)
}

/// Render the Table-1-shaped text: one block per worker count with error,
/// speed and tau per method.
pub fn render_table(summary: &SweepSummary) -> String {
    let mut out = String::new();
    for &workers in &summary.workers {
        out.push_str(&format!(
            "{} (K = {workers})\n{:<12} {:>9} {:>7} {:>6}\n",
            summary.name, "method", "error", "speed", "tau"
        ));
        let block: Vec<&MethodRow> = summary
            .rows
            .iter()
            .filter(|r| r.workers == workers)
            .collect();
        let order = ["G", "L"];
        for variant in order {
            for strategy in [Strategy::MaDnn, Strategy::EDnn, Strategy::EcDnn] {
                if let Some(row) = block
                    .iter()
                    .find(|r| r.strategy == strategy && r.variant == variant)
                {
                    out.push_str(&render_row(row));
                }
            }
        }
        if let Some(row) = block.iter().find(|r| r.strategy == Strategy::SDnn) {
            out.push_str(&render_row(row));
        }
        out.push('\n');
    }
    out
}

fn render_row(row: &MethodRow) -> String {
    let speed = row
        .speed
        .map(|s| format!("{s:.2}"))
        .unwrap_or_else(|| "-".to_string());
    let tau = row
        .tau
        .map(|t| t.to_string())
        .unwrap_or_else(|| "-".to_string());
    format!(
        "{:<12} {:>9.4} {:>7} {:>6}\n",
        row.label, row.error, speed, tau
    )
}

fn write_sweep_outputs(dir: &Path, summary: &SweepSummary, views: &[RunView]) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)?;
    fs::write(dir.join("summary.json"), json).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("table.txt"), render_table(summary)).map_err(|e| Error::io(dir, e))?;
    write_histograms(dir, views)?;
    write_charts(dir, summary, views)?;
    Ok(())
}

/// Pooled and per-run difference histograms as
/// `metric,scope,bin_lo,bin_hi,count` rows.
fn write_histograms(dir: &Path, views: &[RunView]) -> Result<()> {
    let mut out = String::from("metric,scope,bin_lo,bin_hi,count\n");
    let emit = |metric: &str, scope: &str, hist: &Histogram, out: &mut String| {
        for &(lo, count) in &hist.bins {
            out.push_str(&format!(
                "{metric},{scope},{lo},{},{count}\n",
                lo + hist.bin_width
            ));
        }
    };
    for (metric, width, select) in [
        (
            "diff_lg_error",
            ERROR_BIN_WIDTH,
            &(|v: &RunView| v.diff_lg.clone()) as &dyn Fn(&RunView) -> Vec<f64>,
        ),
        ("diff_lg_loss", LOSS_BIN_WIDTH, &|v: &RunView| {
            v.loss_diff_lg.clone()
        }),
        ("diff_lc_error", ERROR_BIN_WIDTH, &|v: &RunView| {
            v.diff_lc.clone()
        }),
    ] {
        for strategy in [Strategy::MaDnn, Strategy::EcDnn] {
            let pooled: Vec<f64> = views
                .iter()
                .filter(|v| v.summary.strategy == strategy)
                .flat_map(|v| select(v))
                .collect();
            if !pooled.is_empty() {
                let hist = distribution(&pooled, width)?;
                emit(
                    metric,
                    &format!("pooled:{}", strategy.slug()),
                    &hist,
                    &mut out,
                );
            }
            for v in views.iter().filter(|v| v.summary.strategy == strategy) {
                let values = select(v);
                if !values.is_empty() {
                    let hist = distribution(&values, width)?;
                    emit(metric, &v.summary.run_id, &hist, &mut out);
                }
            }
        }
    }
    fs::write(dir.join("histogram.csv"), out).map_err(|e| Error::io(dir, e))
}

fn write_charts(dir: &Path, summary: &SweepSummary, views: &[RunView]) -> Result<()> {
    // Error-vs-time curves: global model of each method at its chosen tau,
    // first seed of the sweep.
    for &workers in &summary.workers {
        let first_seed = summary.seeds.first().copied().unwrap_or(0);
        let mut series = Vec::new();
        for row in summary.rows.iter().filter(|r| r.workers == workers) {
            if row.variant != "G" && row.strategy != Strategy::SDnn {
                continue;
            }
            let view = views.iter().find(|v| {
                v.summary.strategy == row.strategy
                    && v.summary.seed == first_seed
                    && row.tau.map_or(true, |t| v.summary.tau == t)
                    && (row.strategy == Strategy::SDnn || v.summary.workers == workers)
            });
            if let Some(v) = view {
                series.push(svg::Series {
                    label: row.label.clone(),
                    points: v.curve_global.clone(),
                });
            }
        }
        if !series.is_empty() {
            let chart = svg::line_chart(
                &format!("{} test error vs simulated time (K={workers})", summary.name),
                "simulated time",
                "test error",
                &series,
                820,
                480,
            );
            fs::write(dir.join(format!("error_vs_time_k{workers}.svg")), chart)
                .map_err(|e| Error::io(dir, e))?;
        }
    }

    // Pooled difference histograms.
    for (strategy, metric, file) in [
        (Strategy::MaDnn, "local vs global error difference", "diff_lg_ma.svg"),
        (Strategy::EcDnn, "local vs global error difference", "diff_lg_ec.svg"),
    ] {
        let pooled: Vec<f64> = views
            .iter()
            .filter(|v| v.summary.strategy == strategy)
            .flat_map(|v| v.diff_lg.iter().copied())
            .collect();
        if !pooled.is_empty() {
            let hist = distribution(&pooled, ERROR_BIN_WIDTH)?;
            let chart = svg::histogram_chart(
                &format!("{strategy} {metric}"),
                metric,
                &hist,
                640,
                420,
            );
            fs::write(dir.join(file), chart).map_err(|e| Error::io(dir, e))?;
        }
    }
    let pooled_lc: Vec<f64> = views
        .iter()
        .filter(|v| v.summary.strategy == Strategy::EcDnn)
        .flat_map(|v| v.diff_lc.iter().copied())
        .collect();
    if !pooled_lc.is_empty() {
        let hist = distribution(&pooled_lc, ERROR_BIN_WIDTH)?;
        let chart = svg::histogram_chart(
            "EC-DNN local vs compressed error difference",
            "local vs compressed error difference",
            &hist,
            640,
            420,
        );
        fs::write(dir.join("diff_lc_ec.svg"), chart).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Rebuild the sweep-level table, histograms and charts of an existing sweep
/// directory from the stored per-run files.
pub fn report(spec: &ExperimentSpec, sweep_dir: &Path) -> Result<SweepSummary> {
    let mut views = Vec::new();
    for (strategy, tau, workers, seed) in sweep_grid(spec) {
        let cfg = spec.to_train_config(strategy, tau, workers, seed)?;
        let run_dir = sweep_dir.join(cfg.run_id());
        if run_dir.is_dir() {
            views.push(load_run_view(&run_dir)?);
        }
    }
    if views.is_empty() {
        return Err(Error::Config(format!(
            "no run directories for `{}` under {}",
            spec.name,
            sweep_dir.display()
        )));
    }
    let summary = summarize(&spec.name, spec, &views)?;
    write_sweep_outputs(sweep_dir, &summary, &views)?;
    Ok(summary)
}

/// Reconstruct a [`RunView`] from a run directory: configuration from
/// `config.toml`, curves and differences from the CSV files, finals from the
/// per-run summary.
pub fn load_run_view(dir: &Path) -> Result<RunView> {
    let cfg_text =
        fs::read_to_string(dir.join("config.toml")).map_err(|e| Error::io(dir, e))?;
    let cfg: TrainConfig =
        toml::from_str(&cfg_text).map_err(|e| Error::Config(format!("config.toml: {e}")))?;
    let summary_text =
        fs::read_to_string(dir.join("summary.json")).map_err(|e| Error::io(dir, e))?;
    let summary: RunSummary = serde_json::from_str(&summary_text)?;
    let csv_text =
        fs::read_to_string(dir.join("sync_metrics.csv")).map_err(|e| Error::io(dir, e))?;
    let rows = metrics::read_sync_csv(&csv_text)?;
    let loss_text =
        fs::read_to_string(dir.join("train_loss.csv")).map_err(|e| Error::io(dir, e))?;
    let train_loss = read_train_loss_csv(&loss_text, cfg.effective_workers())?;

    // Group CSV rows back into sync points (they are written in order).
    let mut by_t: Vec<(u64, Vec<SyncCsvRow>)> = Vec::new();
    for row in rows {
        match by_t.last_mut() {
            Some((t, group)) if *t == row.t => group.push(row),
            _ => by_t.push((row.t, vec![row])),
        }
    }

    let mut curve_global = Vec::new();
    let mut curve_best_local = Vec::new();
    let mut diff_lg = Vec::new();
    let mut loss_diff_lg = Vec::new();
    let mut diff_lc = Vec::new();
    let mut window_start = 0usize;
    for (t, group) in &by_t {
        let sim = metrics::row_sim_time(&cfg, *t, summary.relabel_count);
        let locals: Vec<f64> = group.iter().map(|r| r.error_local).collect();
        let local_losses: Vec<f64> = group.iter().map(|r| r.loss_local).collect();
        let global = group[0].error_global;
        curve_global.push((sim, global));

        // Best local by mean training loss since the previous sync point.
        let window_end = (*t as usize).min(train_loss.first().map_or(0, Vec::len));
        let mut best = 0usize;
        let mut best_loss = f64::INFINITY;
        for (k, losses) in train_loss.iter().enumerate() {
            let window = &losses[window_start.min(losses.len())..window_end.min(losses.len())];
            let loss = if window.is_empty() {
                f64::INFINITY
            } else {
                window.iter().sum::<f64>() / window.len() as f64
            };
            if loss < best_loss {
                best_loss = loss;
                best = k;
            }
        }
        window_start = window_end;
        curve_best_local.push((sim, locals[best.min(locals.len() - 1)]));

        if *t > 0 {
            diff_lg.push(metrics::diff_lg(&locals, global)?);
            loss_diff_lg.push(metrics::diff_lg(&local_losses, group[0].loss_global)?);
            let compressed: Option<Vec<f64>> =
                group.iter().map(|r| r.error_compressed).collect();
            if let Some(c) = compressed {
                diff_lc.push(metrics::diff_lc(&locals, &c)?);
            }
        }
    }

    Ok(RunView {
        summary,
        curve_global,
        curve_best_local,
        diff_lg,
        loss_diff_lg,
        diff_lc,
    })
}

fn read_train_loss_csv(text: &str, workers: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Data("empty train_loss.csv".into()))?;
    if header != "t,worker,loss" {
        return Err(Error::Data(format!("unexpected header `{header}`")));
    }
    let mut per_worker: Vec<Vec<f64>> = vec![Vec::new(); workers];
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!("row {}: expected 3 fields", i + 2)));
        }
        let worker: usize = fields[1]
            .parse()
            .map_err(|e| Error::Data(format!("row {}: bad worker: {e}", i + 2)))?;
        let loss: f64 = fields[2]
            .parse()
            .map_err(|e| Error::Data(format!("row {}: bad loss: {e}", i + 2)))?;
        if worker >= per_worker.len() {
            return Err(Error::Data(format!("row {}: worker {worker} out of range", i + 2)));
        }
        per_worker[worker].push(loss);
    }
    Ok(per_worker)
}

/// Resolve the output root: explicit flag, then the `ECDNN_OUT` environment
/// variable, then the spec's `output_dir`.
pub fn resolve_output_root(flag: Option<&Path>, spec: &ExperimentSpec) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env_root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !env_root.is_empty() {
            return PathBuf::from(env_root);
        }
    }
    spec.output_dir.clone()
}

/// Speed table against an explicit reference record, exposed for reporting.
pub fn speed_table(
    records: &[(&RunRecord, Variant, String)],
    reference: &RunRecord,
) -> Result<Vec<SpeedEntry>> {
    normalized_speed(records, reference)
}
