//! Evaluation quantities and per-run records.
//!
//! Every run produces a `RunRecord`: the per-iteration training-loss stream,
//! one evaluation row per synchronization point, and a final report. Test
//! errors feed the local-vs-global difference (positive means the aggregate
//! beats the mean local model) and the local-vs-compressed difference; test
//! cross entropies feed the loss-level analogues, which is where the
//! convexity guarantee actually lives.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Strategy, TrainConfig};

/// Per-worker measurements at one synchronization point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerEval {
    /// Test error of the worker's current local model.
    pub error_local: f64,
    /// Mean test cross entropy of the local model.
    pub loss_local: f64,
    /// Mean training-batch cross entropy since the previous sync point
    /// (infinite before the first step); used to pick the best-local curve.
    pub train_window_loss: f64,
    /// Test error of the compressed model replacing this local model, when
    /// the sync compressed one.
    pub error_compressed: Option<f64>,
}

/// One evaluation row, taken at an iteration count divisible by the
/// communication period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRow {
    pub t: u64,
    /// Simulated time at the end of this synchronization.
    pub sim_time: f64,
    pub workers: Vec<WorkerEval>,
    /// Test error of the strategy's aggregate model.
    pub error_global: f64,
    /// Mean test cross entropy of the aggregate model.
    pub loss_global: f64,
}

impl SyncRow {
    pub fn local_errors(&self) -> Vec<f64> {
        self.workers.iter().map(|w| w.error_local).collect()
    }

    pub fn diff_lg(&self) -> f64 {
        diff_lg(&self.local_errors(), self.error_global).expect("rows have workers")
    }

    /// Loss-level analogue of [`SyncRow::diff_lg`].
    pub fn loss_diff_lg(&self) -> f64 {
        let losses: Vec<f64> = self.workers.iter().map(|w| w.loss_local).collect();
        diff_lg(&losses, self.loss_global).expect("rows have workers")
    }

    pub fn diff_lc(&self) -> Option<f64> {
        let compressed: Option<Vec<f64>> =
            self.workers.iter().map(|w| w.error_compressed).collect();
        compressed.map(|c| diff_lc(&self.local_errors(), &c).expect("lengths match"))
    }

    /// Worker index with the smallest training-window loss.
    pub fn best_train_worker(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.workers.iter().enumerate() {
            if w.train_window_loss < self.workers[best].train_window_loss {
                best = i;
            }
        }
        best
    }
}

/// Cost accounting and bookkeeping for one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    /// Test error of the strategy's aggregate model at the end.
    pub global_error: f64,
    pub global_loss: f64,
    /// Worker whose full-shard training loss is smallest, and that loss.
    pub best_worker: usize,
    pub best_worker_train_loss: f64,
    /// Test error of that worker's model.
    pub best_local_error: f64,
    pub sim_time: f64,
    /// Host wall-clock; informational only, never part of deterministic
    /// outputs.
    pub host_seconds: f64,
    pub local_steps: u64,
    pub compress_steps: u64,
    pub syncs: u64,
    pub relabel_passes: u64,
    /// Peak live model-sized buffers per worker observed during syncs.
    pub sync_model_buffer_peak: usize,
    /// Peak live running output sums per worker observed during syncs.
    pub sync_output_sum_peak: usize,
}

/// Everything recorded about one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub strategy: Strategy,
    pub config: TrainConfig,
    pub sync_rows: Vec<SyncRow>,
    /// `train_loss[worker][i]` is the mean batch cross entropy at that
    /// worker's local iteration `i + 1`.
    pub train_loss: Vec<Vec<f64>>,
    pub final_report: FinalReport,
    /// Final local parameters per worker; kept in memory for equivalence
    /// checks, not serialized (snapshot files cover persistence).
    #[serde(skip)]
    pub final_params: Vec<crate::net::ParamVec>,
}

/// Which curve of a run to follow over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// The aggregate (global) model.
    Global,
    /// The local model with the smallest training-window loss.
    BestLocal,
}

impl Variant {
    pub fn suffix(&self) -> &'static str {
        match self {
            Variant::Global => "G",
            Variant::BestLocal => "L",
        }
    }
}

impl RunRecord {
    /// `(sim_time, test_error)` points of the chosen curve, one per sync row.
    pub fn curve(&self, variant: Variant) -> Vec<(f64, f64)> {
        self.sync_rows
            .iter()
            .map(|row| {
                let err = match variant {
                    Variant::Global => row.error_global,
                    Variant::BestLocal => row.workers[row.best_train_worker()].error_local,
                };
                (row.sim_time, err)
            })
            .collect()
    }

    /// Local-vs-global error differences, one per sync row.
    pub fn diff_lg_series(&self) -> Vec<f64> {
        self.sync_rows.iter().map(SyncRow::diff_lg).collect()
    }

    /// Loss-level local-vs-global differences, one per sync row.
    pub fn loss_diff_lg_series(&self) -> Vec<f64> {
        self.sync_rows.iter().map(SyncRow::loss_diff_lg).collect()
    }

    /// Local-vs-compressed error differences for the rows that compressed.
    pub fn diff_lc_series(&self) -> Vec<f64> {
        self.sync_rows.iter().filter_map(SyncRow::diff_lc).collect()
    }

    pub fn final_error(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Global => self.final_report.global_error,
            Variant::BestLocal => self.final_report.best_local_error,
        }
    }
}

/// Mean local error minus global error. Positive means the global model
/// improves on the average local model.
pub fn diff_lg(local_errors: &[f64], global_error: f64) -> Result<f64> {
    if local_errors.is_empty() {
        return Err(Error::Empty("no local errors"));
    }
    let mean = local_errors.iter().sum::<f64>() / local_errors.len() as f64;
    Ok(mean - global_error)
}

/// Mean over workers of (local error minus compressed error). Positive means
/// compression improved on the local models on average.
pub fn diff_lc(local_errors: &[f64], compressed_errors: &[f64]) -> Result<f64> {
    if local_errors.len() != compressed_errors.len() {
        return Err(Error::LengthMismatch {
            expected: local_errors.len(),
            got: compressed_errors.len(),
        });
    }
    if local_errors.is_empty() {
        return Err(Error::Empty("no errors"));
    }
    let sum: f64 = local_errors
        .iter()
        .zip(compressed_errors)
        .map(|(&l, &c)| l - c)
        .sum();
    Ok(sum / local_errors.len() as f64)
}

/// One row of the speed table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedEntry {
    pub label: String,
    pub final_error: f64,
    /// Simulated-time speedup relative to the reference; 0 when the curve
    /// never reaches the reference's final accuracy.
    pub speed: f64,
}

/// Simulated time at which a curve first reaches `target` error, if ever.
pub fn time_to_reach(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    curve.iter().find(|&&(_, err)| err <= target).map(|&(t, _)| t)
}

/// Normalized speed table. The reference is a global-model curve whose speed
/// is defined as 1; every other entry is `reference time / own time` to the
/// reference's final accuracy, or 0 if that accuracy is never reached.
pub fn normalized_speed(
    records: &[(&RunRecord, Variant, String)],
    reference: &RunRecord,
) -> Result<Vec<SpeedEntry>> {
    let ref_curve = reference.curve(Variant::Global);
    let target = ref_curve
        .last()
        .map(|&(_, e)| e)
        .ok_or(Error::Empty("reference record has no sync rows"))?;
    let ref_time = time_to_reach(&ref_curve, target)
        .ok_or_else(|| Error::Config("reference never reached its own final accuracy".into()))?;
    Ok(records
        .iter()
        .map(|(record, variant, label)| {
            let curve = record.curve(*variant);
            let speed = match time_to_reach(&curve, target) {
                Some(t) if t > 0.0 => ref_time / t,
                Some(_) => 1.0, // both hit the target at time zero
                None => 0.0,
            };
            SpeedEntry {
                label: label.clone(),
                final_error: record.final_error(*variant),
                speed,
            }
        })
        .collect())
}

/// A fixed-width histogram with the below-zero mass reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `(bin lower edge, count)` in ascending order; a value `v` lands in
    /// the bin starting at `floor(v / width) * width`.
    pub bins: Vec<(f64, usize)>,
    pub total: usize,
    /// Fraction of values strictly below zero.
    pub negative_fraction: f64,
}

/// Bin `values` with the given width.
pub fn distribution(values: &[f64], bin_width: f64) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Empty("cannot histogram zero values"));
    }
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut negatives = 0usize;
    for &v in values {
        if v < 0.0 {
            negatives += 1;
        }
        let idx = (v / bin_width).floor() as i64;
        *counts.entry(idx).or_insert(0) += 1;
    }
    Ok(Histogram {
        bin_width,
        bins: counts
            .into_iter()
            .map(|(idx, c)| (idx as f64 * bin_width, c))
            .collect(),
        total: values.len(),
        negative_fraction: negatives as f64 / values.len() as f64,
    })
}

/// Simulated time after `local_steps` local iterations, `syncs`
/// synchronizations, `compress_steps` compression iterations and
/// `relabel_passes` relabel sweeps over `relabel_count` examples.
pub fn sim_time(
    cfg: &TrainConfig,
    local_steps: u64,
    compress_steps: u64,
    syncs: u64,
    relabel_passes: u64,
    relabel_count: usize,
) -> f64 {
    let comm = match cfg.strategy {
        Strategy::MaDnn => cfg.costs.comm_ma,
        Strategy::EcDnn | Strategy::EDnn => cfg.costs.comm_ec,
        Strategy::SDnn => 0.0,
    };
    (local_steps + compress_steps) as f64 * cfg.costs.step
        + syncs as f64 * comm
        + relabel_passes as f64 * cfg.costs.forward * relabel_count as f64
}

/// Simulated time at the evaluation row taken after iteration `t`, derived
/// purely from the config (used both by the engine and when rebuilding
/// curves from stored CSV files).
pub fn row_sim_time(cfg: &TrainConfig, t: u64, relabel_count: usize) -> f64 {
    let syncs = match cfg.strategy {
        Strategy::MaDnn | Strategy::EcDnn => t / cfg.sync_every,
        Strategy::SDnn | Strategy::EDnn => 0,
    };
    let (compress_steps, relabel_passes) = match cfg.strategy {
        Strategy::EcDnn => (syncs * cfg.compress_iterations, syncs),
        _ => (0, 0),
    };
    sim_time(cfg, t, compress_steps, syncs, relabel_passes, relabel_count)
}

/// Stream a record as CSV rows with the schema
/// `run_id,t,worker,error_local,error_global,error_compressed,loss_local,loss_global`
/// (one row per worker per sync point; `error_compressed` is empty when the
/// sync did not compress).
pub fn write_sync_csv(record: &RunRecord, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "run_id,t,worker,error_local,error_global,error_compressed,loss_local,loss_global"
    )?;
    for row in &record.sync_rows {
        for (k, w) in row.workers.iter().enumerate() {
            let compressed = w
                .error_compressed
                .map(|e| e.to_string())
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                record.run_id,
                row.t,
                k,
                w.error_local,
                row.error_global,
                compressed,
                w.loss_local,
                row.loss_global
            )?;
        }
    }
    Ok(())
}

/// Stream the per-iteration training losses as `t,worker,loss` rows.
pub fn write_train_loss_csv(record: &RunRecord, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "t,worker,loss")?;
    let steps = record.train_loss.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..steps {
        for (k, losses) in record.train_loss.iter().enumerate() {
            if let Some(loss) = losses.get(t) {
                writeln!(out, "{},{},{}", t + 1, k, loss)?;
            }
        }
    }
    Ok(())
}

/// A parsed `sync_metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncCsvRow {
    pub run_id: String,
    pub t: u64,
    pub worker: usize,
    pub error_local: f64,
    pub error_global: f64,
    pub error_compressed: Option<f64>,
    pub loss_local: f64,
    pub loss_global: f64,
}

/// Parse the output of [`write_sync_csv`].
pub fn read_sync_csv(text: &str) -> Result<Vec<SyncCsvRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Data("empty csv".into()))?;
    if header
        != "run_id,t,worker,error_local,error_global,error_compressed,loss_local,loss_global"
    {
        return Err(Error::Data(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Data(format!("row {}: expected 8 fields", i + 2)));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Data(format!("row {}: bad {what}: {e}", i + 2)))
        };
        rows.push(SyncCsvRow {
            run_id: fields[0].to_string(),
            t: fields[1]
                .parse()
                .map_err(|e| Error::Data(format!("row {}: bad t: {e}", i + 2)))?,
            worker: fields[2]
                .parse()
                .map_err(|e| Error::Data(format!("row {}: bad worker: {e}", i + 2)))?,
            error_local: parse_f(fields[3], "error_local")?,
            error_global: parse_f(fields[4], "error_global")?,
            error_compressed: if fields[5].is_empty() {
                None
            } else {
                Some(parse_f(fields[5], "error_compressed")?)
            },
            loss_local: parse_f(fields[6], "loss_local")?,
            loss_global: parse_f(fields[7], "loss_global")?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_lg_arithmetic() {
        assert!((diff_lg(&[0.2, 0.3], 0.15).unwrap() - 0.10).abs() < 1e-15);
        let locals = [0.4, 0.1, 0.25];
        let mean = locals.iter().sum::<f64>() / 3.0;
        assert_eq!(diff_lg(&locals, mean).unwrap(), 0.0);
        assert!(diff_lg(&[], 0.1).is_err());
    }

    #[test]
    fn diff_lg_sign_convention() {
        // Positive means the global model improved on the local models.
        assert!(diff_lg(&[0.5, 0.5], 0.3).unwrap() > 0.0);
        assert!(diff_lg(&[0.2, 0.2], 0.4).unwrap() < 0.0);
    }

    #[test]
    fn diff_lc_arithmetic() {
        assert_eq!(diff_lc(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert!((diff_lc(&[0.4, 0.2], &[0.3, 0.1]).unwrap() - 0.10).abs() < 1e-15);
        assert!(diff_lc(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn diffs_are_translation_covariant() {
        let locals = [0.3, 0.45, 0.2];
        let global = 0.25;
        let c = 0.07;
        let shifted: Vec<f64> = locals.iter().map(|&l| l + c).collect();
        let a = diff_lg(&locals, global).unwrap();
        let b = diff_lg(&shifted, global + c).unwrap();
        assert!((a - b).abs() < 1e-12);

        let compressed = [0.25, 0.4, 0.15];
        let shifted_c: Vec<f64> = compressed.iter().map(|&l| l + c).collect();
        let x = diff_lc(&locals, &compressed).unwrap();
        let y = diff_lc(&shifted, &shifted_c).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_sum_to_total() {
        let h = distribution(&[0.05], 0.1).unwrap();
        assert_eq!(h.bins, vec![(0.0, 1)]);
        assert_eq!(h.total, 1);

        let h = distribution(&[-0.1, 0.1], 0.1).unwrap();
        assert_eq!(h.total, 2);
        assert!((h.negative_fraction - 0.5).abs() < 1e-15);
        let count: usize = h.bins.iter().map(|&(_, c)| c).sum();
        assert_eq!(count, h.total);

        let values = [-0.35, -0.05, 0.0, 0.02, 0.02, 0.8];
        let h = distribution(&values, 0.1).unwrap();
        let count: usize = h.bins.iter().map(|&(_, c)| c).sum();
        assert_eq!(count, values.len());
        assert!((h.negative_fraction - 2.0 / 6.0).abs() < 1e-15);

        assert!(distribution(&[], 0.1).is_err());
        assert!(distribution(&[1.0], 0.0).is_err());
    }

    #[test]
    fn time_to_reach_finds_first_crossing() {
        let curve = [(1.0, 0.5), (2.0, 0.3), (3.0, 0.35), (4.0, 0.2)];
        assert_eq!(time_to_reach(&curve, 0.3), Some(2.0));
        assert_eq!(time_to_reach(&curve, 0.1), None);
        assert_eq!(time_to_reach(&curve, 0.9), Some(1.0));
    }
}
