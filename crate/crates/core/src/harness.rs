//! Deterministic synchronous round simulator for the four training
//! strategies.
//!
//! `K` simulated workers train on disjoint shards and hit a barrier every
//! `sync_every` iterations. What happens at the barrier is the strategy:
//! nothing (sequential, independent-ensemble), parameter averaging, or
//! ensemble-plus-compression. Workers own their state between barriers and
//! every stochastic choice comes from a per-worker stream keyed by
//! `(seed, worker)`, so a run's outputs are identical whether workers execute
//! sequentially or on a thread pool.

use std::path::PathBuf;
use std::time::Instant;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{ensemble_mean_output, ma_aggregate};
use crate::compress::{distill_train, make_pseudo_labels, RelabelPlan};
use crate::data::{Dataset, LabeledBatch, TrainTest};
use crate::error::{Error, Result};
use crate::gauge;
use crate::loss::{loss_ce, LossSelector, Target};
use crate::metrics::{row_sim_time, FinalReport, RunRecord, SyncRow, WorkerEval};
use crate::net::{argmax, DenseNet, Layout, ParamVec};
use crate::optim::{train_step, OptState};
use crate::seedstream::{stream_rng, StreamDomain};
use crate::snapshot;

/// The four training strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Sequential training of a single model on the full dataset.
    SDnn,
    /// Independent local trainings with one terminal ensemble.
    EDnn,
    /// Periodic parameter averaging.
    MaDnn,
    /// Periodic output-ensemble aggregation followed by distillation-based
    /// compression back to local size.
    EcDnn,
}

impl Strategy {
    pub fn slug(&self) -> &'static str {
        match self {
            Strategy::SDnn => "s-dnn",
            Strategy::EDnn => "e-dnn",
            Strategy::MaDnn => "ma-dnn",
            Strategy::EcDnn => "ec-dnn",
        }
    }

    pub const ALL: [Strategy; 4] = [
        Strategy::SDnn,
        Strategy::EDnn,
        Strategy::MaDnn,
        Strategy::EcDnn,
    ];
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Strategy::SDnn => "S-DNN",
            Strategy::EDnn => "E-DNN",
            Strategy::MaDnn => "MA-DNN",
            Strategy::EcDnn => "EC-DNN",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s-dnn" | "sdnn" => Ok(Strategy::SDnn),
            "e-dnn" | "ednn" => Ok(Strategy::EDnn),
            "ma-dnn" | "madnn" => Ok(Strategy::MaDnn),
            "ec-dnn" | "ecdnn" => Ok(Strategy::EcDnn),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}`; expected one of s-dnn, e-dnn, ma-dnn, ec-dnn"
            ))),
        }
    }
}

/// How to run the worker loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    /// Parallel when compiled with the `parallel` feature, else sequential.
    #[default]
    Auto,
    Sequential,
    /// Rayon worker pool; an error when the feature is compiled out.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ResolvedExec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl ExecMode {
    pub(crate) fn resolve(self) -> Result<ResolvedExec> {
        match self {
            ExecMode::Sequential => Ok(ResolvedExec::Sequential),
            #[cfg(feature = "parallel")]
            ExecMode::Auto | ExecMode::Parallel => Ok(ResolvedExec::Parallel),
            #[cfg(not(feature = "parallel"))]
            ExecMode::Auto => Ok(ResolvedExec::Sequential),
            #[cfg(not(feature = "parallel"))]
            ExecMode::Parallel => Err(Error::Config(
                "parallel execution requested but the `parallel` feature is compiled out".into(),
            )),
        }
    }
}

/// How the training set is distributed over workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// Seeded shuffle, then contiguous disjoint shards of near-equal size.
    #[default]
    Disjoint,
    /// Every worker sees the full training set.
    Replicated,
}

/// Cost constants for the simulated-time model. A local SGD iteration costs
/// `step`; a synchronization costs the strategy's `comm_*`; relabeling costs
/// `forward` per example swept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub step: f64,
    pub comm_ma: f64,
    pub comm_ec: f64,
    pub forward: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            step: 1.0,
            comm_ma: 50.0,
            comm_ec: 50.0,
            forward: 0.3,
        }
    }
}

/// Full configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Worker count `K` (ignored by the sequential strategy).
    pub workers: usize,
    /// Communication period in iterations; evaluation rows are taken at its
    /// multiples for every strategy.
    pub sync_every: u64,
    pub total_iterations: u64,
    pub batch_size: usize,
    /// Hidden layer widths; input and output widths come from the dataset.
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2: f64,
    /// Diversity-regularization coefficient for ensemble-compression runs.
    pub alpha: f64,
    /// `(progress threshold, beta)` schedule over each compression run.
    pub beta_schedule: Vec<(f64, f64)>,
    /// Compression iteration count `p`.
    pub compress_iterations: u64,
    /// Fraction of each shard relabeled with pseudo-labels.
    pub relabel_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub partition_mode: PartitionMode,
    /// Derive every worker's streams with index 0 so all workers make
    /// identical stochastic choices.
    #[serde(default)]
    pub identical_workers: bool,
    #[serde(default)]
    pub execution: ExecMode,
    #[serde(default)]
    pub costs: CostModel,
    /// When set, worker snapshots are written here at every sync point.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// When set, every compression's relabeled triples are dumped here as
    /// CSV.
    #[serde(default)]
    pub relabel_dump_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// A reasonable starting point; callers override what they sweep.
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            workers: 4,
            sync_every: 50,
            total_iterations: 2000,
            batch_size: 32,
            hidden_layers: vec![32, 32],
            learning_rate: 0.05,
            momentum: 0.9,
            l2: 1e-4,
            alpha: 0.6,
            beta_schedule: vec![(0.0, 0.4), (0.2, 0.6)],
            compress_iterations: 200,
            relabel_fraction: 0.7,
            seed: 1,
            partition_mode: PartitionMode::Disjoint,
            identical_workers: false,
            execution: ExecMode::Auto,
            costs: CostModel::default(),
            checkpoint_dir: None,
            relabel_dump_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("worker count must be >= 1".into()));
        }
        if self.sync_every == 0 {
            return Err(Error::Config("sync period must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.strategy == Strategy::EcDnn {
            // Surfaces beta-schedule and relabel-fraction problems before the
            // first synchronization would hit them.
            RelabelPlan::new(self.relabel_fraction, 0, self.beta_schedule.clone())?;
        }
        self.execution.resolve()?;
        Ok(())
    }

    /// Effective worker count: the sequential strategy always runs one.
    pub fn effective_workers(&self) -> usize {
        match self.strategy {
            Strategy::SDnn => 1,
            _ => self.workers,
        }
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}_k{}_tau{}_seed{}",
            self.strategy.slug(),
            self.effective_workers(),
            self.sync_every,
            self.seed
        )
    }
}

/// Split `data` into `k` disjoint shards of near-equal size: a seeded
/// shuffle followed by a contiguous split. Shard sizes differ by at most 1.
pub fn partition(data: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("cannot partition into zero shards".into()));
    }
    if k > data.len() {
        return Err(Error::Config(format!(
            "cannot split {} examples into {k} nonempty shards",
            data.len()
        )));
    }
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, StreamDomain::Partition, 0);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut shards = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        shards.push(idx[at..at + size].to_vec());
        at += size;
    }
    Ok(shards)
}

struct WorkerState {
    id: usize,
    net: DenseNet,
    opt: OptState,
    /// Global indices of this worker's training examples.
    shard: Vec<usize>,
    /// Current epoch order over shard-local indices.
    order: Vec<usize>,
    cursor: usize,
    batch_rng: ChaCha8Rng,
    relabel_rng: ChaCha8Rng,
    /// Reference outputs for the diversity term, aligned with `shard`;
    /// absent until the first compression refreshes it.
    zbar: Option<Vec<Vec<f64>>>,
    train_losses: Vec<f64>,
    window_start: usize,
    steps: u64,
}

impl WorkerState {
    fn next_batch_local(&mut self, batch_size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.batch_rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let picked = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        picked
    }

    fn local_step(&mut self, cfg: &TrainConfig, train: &Dataset) -> Result<()> {
        let local = self.next_batch_local(cfg.batch_size);
        let global: Vec<usize> = local.iter().map(|&j| self.shard[j]).collect();
        let batch = train.batch(&global);
        let selector = match (&self.zbar, cfg.strategy) {
            (Some(z), Strategy::EcDnn) if cfg.alpha > 0.0 => LossSelector::Diversity {
                alpha: cfg.alpha,
                references: local.iter().map(|&j| z[j].clone()).collect(),
            },
            _ => LossSelector::CrossEntropy,
        };
        let ce = train_step(&mut self.net, &batch, &selector, &mut self.opt)?;
        self.train_losses.push(ce);
        self.steps += 1;
        Ok(())
    }

    /// Mean training-batch cross entropy since the last sync point.
    fn window_loss(&self) -> f64 {
        let window = &self.train_losses[self.window_start..];
        if window.is_empty() {
            f64::INFINITY
        } else {
            window.iter().sum::<f64>() / window.len() as f64
        }
    }
}

fn map_indices<T, F>(exec: ResolvedExec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        ResolvedExec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        ResolvedExec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

fn map_workers_mut<T, F>(exec: ResolvedExec, workers: &mut [WorkerState], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut WorkerState) -> T + Sync + Send,
{
    match exec {
        ResolvedExec::Sequential => workers.iter_mut().map(f).collect(),
        #[cfg(feature = "parallel")]
        ResolvedExec::Parallel => {
            use rayon::prelude::*;
            workers.par_iter_mut().map(f).collect()
        }
    }
}

/// Test error and mean test cross entropy of one model.
fn test_stats(net: &DenseNet, test: &Dataset, exec: ResolvedExec) -> Result<(f64, f64)> {
    let evals: Vec<Result<(bool, f64)>> = map_indices(exec, test.len(), |i| {
        let p = net.forward(test.feature(i))?;
        let y = test.label(i);
        Ok((argmax(&p) == y, loss_ce(&p, Target::Class(y))))
    });
    reduce_stats(evals, test.len())
}

/// Test error and mean test cross entropy of the output-averaging ensemble.
fn ensemble_test_stats(
    members: &[&DenseNet],
    test: &Dataset,
    exec: ResolvedExec,
) -> Result<(f64, f64)> {
    let evals: Vec<Result<(bool, f64)>> = map_indices(exec, test.len(), |i| {
        let p = ensemble_mean_output(members, test.feature(i))?;
        let y = test.label(i);
        Ok((argmax(&p) == y, loss_ce(&p, Target::Class(y))))
    });
    reduce_stats(evals, test.len())
}

fn reduce_stats(evals: Vec<Result<(bool, f64)>>, n: usize) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    for e in evals {
        let (ok, ce) = e?;
        correct += usize::from(ok);
        ce_sum += ce;
    }
    Ok((1.0 - correct as f64 / n as f64, ce_sum / n as f64))
}

pub fn run_sdnn(cfg: &TrainConfig, data: &TrainTest) -> Result<RunRecord> {
    expect_strategy(cfg, Strategy::SDnn)?;
    run_with_init(cfg, data, None)
}

pub fn run_ednn(cfg: &TrainConfig, data: &TrainTest) -> Result<RunRecord> {
    expect_strategy(cfg, Strategy::EDnn)?;
    run_with_init(cfg, data, None)
}

pub fn run_madnn(cfg: &TrainConfig, data: &TrainTest) -> Result<RunRecord> {
    expect_strategy(cfg, Strategy::MaDnn)?;
    run_with_init(cfg, data, None)
}

pub fn run_ecdnn(cfg: &TrainConfig, data: &TrainTest) -> Result<RunRecord> {
    expect_strategy(cfg, Strategy::EcDnn)?;
    run_with_init(cfg, data, None)
}

fn expect_strategy(cfg: &TrainConfig, want: Strategy) -> Result<()> {
    if cfg.strategy != want {
        return Err(Error::Config(format!(
            "config says strategy {}, but {want} was requested",
            cfg.strategy
        )));
    }
    Ok(())
}

/// Run whatever strategy the config selects.
pub fn run(cfg: &TrainConfig, data: &TrainTest) -> Result<RunRecord> {
    run_with_init(cfg, data, None)
}

/// Run with explicit initial parameters per worker (e.g. loaded snapshots)
/// instead of the seeded initialization.
pub fn run_with_init(
    cfg: &TrainConfig,
    data: &TrainTest,
    init: Option<&[ParamVec]>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let exec = cfg.execution.resolve()?;
    let started = Instant::now();
    let k = cfg.effective_workers();

    let layer_sizes: Vec<usize> = std::iter::once(data.train.dim())
        .chain(cfg.hidden_layers.iter().copied())
        .chain(std::iter::once(data.train.classes()))
        .collect();
    let layout = Layout::new(layer_sizes)?;

    let shards: Vec<Vec<usize>> = match cfg.partition_mode {
        PartitionMode::Disjoint => partition(&data.train, k, cfg.seed)?,
        PartitionMode::Replicated => vec![(0..data.train.len()).collect(); k],
    };

    if let Some(params) = init {
        if params.len() != k {
            return Err(Error::Config(format!(
                "got {} initial parameter vectors for {k} workers",
                params.len()
            )));
        }
        for p in params {
            if p.layout() != &layout {
                return Err(Error::LayoutMismatch);
            }
        }
    }

    let mut workers: Vec<WorkerState> = (0..k)
        .map(|i| -> Result<WorkerState> {
            let stream_idx = if cfg.identical_workers { 0 } else { i as u64 };
            let net = match init {
                Some(params) => DenseNet::new(params[i].clone()),
                None => DenseNet::init(
                    layout.clone(),
                    &mut stream_rng(cfg.seed, StreamDomain::Init, stream_idx),
                ),
            };
            let shard = shards[i].clone();
            let order: Vec<usize> = (0..shard.len()).collect();
            Ok(WorkerState {
                id: i,
                net,
                opt: OptState::new(cfg.learning_rate, cfg.momentum, cfg.l2, layout.clone())?,
                cursor: order.len(), // forces a shuffle on first use
                order,
                shard,
                batch_rng: stream_rng(cfg.seed, StreamDomain::BatchOrder, stream_idx),
                relabel_rng: stream_rng(cfg.seed, StreamDomain::Relabel, stream_idx),
                zbar: None,
                train_losses: Vec::new(),
                window_start: 0,
                steps: 0,
            })
        })
        .collect::<Result<_>>()?;

    let max_shard = workers.iter().map(|w| w.shard.len()).max().unwrap_or(0);
    let relabel_count = (cfg.relabel_fraction * max_shard as f64).ceil() as usize;

    let mut peaks = gauge::BufferPeaks::default();
    let mut rows: Vec<SyncRow> = Vec::new();
    rows.push(eval_row(cfg, data, &workers, exec, 0, relabel_count)?);

    let mut t: u64 = 0;
    while t < cfg.total_iterations {
        let block = cfg.sync_every.min(cfg.total_iterations - t);
        let stepped: Vec<Result<()>> = map_workers_mut(exec, &mut workers, |w| {
            for _ in 0..block {
                w.local_step(cfg, &data.train)?;
            }
            Ok(())
        });
        stepped.into_iter().collect::<Result<Vec<_>>>()?;
        t += block;

        if t % cfg.sync_every != 0 {
            // Only possible on the final truncated block; no barrier there.
            continue;
        }

        // Barrier: every worker has taken the same number of steps and the
        // period divides it.
        debug_assert!(workers.iter().all(|w| w.steps == t));

        // The row reports the local models as they stood at the barrier and
        // the aggregate built from them. Its timestamp charges the full cost
        // of this synchronization.
        let mut row = eval_row(cfg, data, &workers, exec, t, relabel_count)?;

        match cfg.strategy {
            Strategy::SDnn | Strategy::EDnn => {}
            Strategy::MaDnn => ma_sync(&mut workers)?,
            Strategy::EcDnn => {
                let (errors, sync_peaks) = ec_sync(cfg, data, &mut workers, exec)?;
                peaks = max_peaks(peaks, sync_peaks);
                for (eval, error) in row.workers.iter_mut().zip(errors) {
                    eval.error_compressed = Some(error);
                }
            }
        }
        rows.push(row);

        for w in &mut workers {
            w.window_start = w.train_losses.len();
        }

        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for w in &workers {
                let path = dir.join(format!("checkpoint_t{t}_worker{}.json", w.id));
                snapshot::save(w.net.params(), &path)?;
            }
        }
    }

    // Final report. The terminal ensemble of the independent strategy is its
    // one communication round, charged here.
    let barrier_count = t / cfg.sync_every;
    let (comm_rounds, compress_steps, relabel_passes) = match cfg.strategy {
        Strategy::MaDnn => (barrier_count, 0, 0),
        Strategy::EcDnn => (
            barrier_count,
            barrier_count * cfg.compress_iterations,
            barrier_count,
        ),
        Strategy::EDnn => (1, 0, 0),
        Strategy::SDnn => (0, 0, 0),
    };
    let final_sim = row_sim_time(cfg, t, relabel_count)
        + if cfg.strategy == Strategy::EDnn {
            cfg.costs.comm_ec
        } else {
            0.0
        };
    let (global_error, global_loss) = global_stats(cfg, &workers, exec, &data.test)?;
    let shard_losses: Vec<Result<f64>> = map_indices(exec, workers.len(), |i| {
        let w = &workers[i];
        let batch = data.train.batch(&w.shard);
        Ok(crate::loss::local_loss(&w.net, &batch, None, 0.0)? / batch.len() as f64)
    });
    let shard_losses = shard_losses.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut best_worker = 0;
    for (i, loss) in shard_losses.iter().enumerate() {
        if *loss < shard_losses[best_worker] {
            best_worker = i;
        }
    }
    let (best_local_error, _) = test_stats(&workers[best_worker].net, &data.test, exec)?;

    let final_report = FinalReport {
        global_error,
        global_loss,
        best_worker,
        best_worker_train_loss: shard_losses[best_worker],
        best_local_error,
        sim_time: final_sim,
        host_seconds: started.elapsed().as_secs_f64(),
        local_steps: t,
        compress_steps,
        syncs: comm_rounds,
        relabel_passes,
        sync_model_buffer_peak: peaks.model_buffers,
        sync_output_sum_peak: peaks.output_sums,
    };

    let mut train_loss = Vec::with_capacity(workers.len());
    let mut final_params = Vec::with_capacity(workers.len());
    for w in workers {
        train_loss.push(w.train_losses);
        final_params.push(w.net.into_params());
    }
    Ok(RunRecord {
        run_id: cfg.run_id(),
        strategy: cfg.strategy,
        config: cfg.clone(),
        sync_rows: rows,
        train_loss,
        final_report,
        final_params,
    })
}

/// The aggregate the strategy would report right now: the averaged model for
/// parameter averaging, the output ensemble for the ensemble strategies, the
/// single model for sequential training.
fn global_stats(
    cfg: &TrainConfig,
    workers: &[WorkerState],
    exec: ResolvedExec,
    test: &Dataset,
) -> Result<(f64, f64)> {
    match cfg.strategy {
        Strategy::SDnn => test_stats(&workers[0].net, test, exec),
        Strategy::MaDnn => {
            let refs: Vec<&ParamVec> = workers.iter().map(|w| w.net.params()).collect();
            let averaged = DenseNet::new(ma_aggregate(&refs)?);
            test_stats(&averaged, test, exec)
        }
        Strategy::EDnn | Strategy::EcDnn => {
            let members: Vec<&DenseNet> = workers.iter().map(|w| &w.net).collect();
            ensemble_test_stats(&members, test, exec)
        }
    }
}

/// One evaluation row over the current worker state. Local models are the
/// ones standing at the barrier; the aggregate is built from those same
/// models.
fn eval_row(
    cfg: &TrainConfig,
    data: &TrainTest,
    workers: &[WorkerState],
    exec: ResolvedExec,
    t: u64,
    relabel_count: usize,
) -> Result<SyncRow> {
    let locals: Vec<Result<(f64, f64)>> = map_indices(exec, workers.len(), |i| {
        test_stats(&workers[i].net, &data.test, ResolvedExec::Sequential)
    });
    let (error_global, loss_global) = global_stats(cfg, workers, exec, &data.test)?;
    let mut evals = Vec::with_capacity(workers.len());
    for (w, r) in workers.iter().zip(locals) {
        let (error_local, loss_local) = r?;
        evals.push(WorkerEval {
            error_local,
            loss_local,
            train_window_loss: w.window_loss(),
            error_compressed: None,
        });
    }
    Ok(SyncRow {
        t,
        sim_time: row_sim_time(cfg, t, relabel_count),
        workers: evals,
        error_global,
        loss_global,
    })
}

/// Parameter-averaging synchronization: every worker restarts from the mean
/// of the local parameters. Velocity buffers are left alone.
fn ma_sync(workers: &mut [WorkerState]) -> Result<()> {
    let averaged = {
        let refs: Vec<&ParamVec> = workers.iter().map(|w| w.net.params()).collect();
        ma_aggregate(&refs)?
    };
    for w in workers.iter_mut() {
        w.net = DenseNet::new(averaged.clone());
    }
    Ok(())
}

struct CompressJob {
    params: ParamVec,
    velocity: ParamVec,
    relabeled: LabeledBatch,
    plan: RelabelPlan,
}

/// Ensemble-compression synchronization, in three phases per worker:
/// relabel the plan's subset with ensemble pseudo-labels (members read one
/// at a time), distill into the local model starting from its current
/// parameters, then refresh the diversity references from the new models.
///
/// During distillation the worker's resident model and velocity are moved
/// into the job, so at most two model-sized buffers are live per worker.
/// Returns the compressed models' test errors and the gauge peaks.
fn ec_sync(
    cfg: &TrainConfig,
    data: &TrainTest,
    workers: &mut [WorkerState],
    exec: ResolvedExec,
) -> Result<(Vec<f64>, gauge::BufferPeaks)> {
    let k = workers.len();
    let mut peaks = gauge::BufferPeaks::default();
    let plan_seeds: Vec<u64> = workers
        .iter_mut()
        .map(|w| w.relabel_rng.next_u64())
        .collect();

    // Relabel against the pre-compression members.
    let relabeled: Vec<(LabeledBatch, RelabelPlan)> = {
        let members: Vec<&DenseNet> = workers.iter().map(|w| &w.net).collect();
        let out: Vec<Result<(LabeledBatch, RelabelPlan, gauge::BufferPeaks)>> =
            map_indices(exec, k, |i| {
                gauge::reset();
                let _resident = gauge::track_model_buffer();
                let w = &workers[i];
                let plan = RelabelPlan::new(
                    cfg.relabel_fraction,
                    plan_seeds[i],
                    cfg.beta_schedule.clone(),
                )?;
                let subset = plan.select_subset(w.shard.len())?;
                let global: Vec<usize> = subset.iter().map(|&j| w.shard[j]).collect();
                let sub = data.train.batch(&global);
                let pseudo = make_pseudo_labels(&members, &sub)?;
                Ok((sub.with_soft_targets(pseudo)?, plan, gauge::peaks()))
            });
        let mut collected = Vec::with_capacity(k);
        for r in out {
            let (batch, plan, p) = r?;
            peaks = max_peaks(peaks, p);
            collected.push((batch, plan));
        }
        collected
    };

    if let Some(dir) = &cfg.relabel_dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let t = workers[0].steps;
        for (i, (batch, _)) in relabeled.iter().enumerate() {
            let path = dir.join(format!("relabeled_t{t}_worker{i}.csv"));
            crate::compress::dump_relabeled_csv(batch, &path)?;
        }
    }

    // Distill. Each job owns the worker's parameter and velocity buffers.
    let jobs: Vec<CompressJob> = workers
        .iter_mut()
        .zip(relabeled)
        .map(|(w, (relabeled, plan))| {
            let net = std::mem::replace(&mut w.net, DenseNet::new(ParamVec::shell()));
            CompressJob {
                params: net.into_params(),
                velocity: w.opt.take_velocity(),
                relabeled,
                plan,
            }
        })
        .collect();

    let run_job = |mut job: CompressJob| -> Result<(ParamVec, ParamVec, f64, gauge::BufferPeaks)> {
        gauge::reset();
        let (params, velocity) = if cfg.compress_iterations == 0 {
            // Zero-iteration compression is the identity and must not touch
            // the training velocity either.
            let _resident = gauge::track_model_buffer();
            (job.params, job.velocity)
        } else {
            job.velocity.fill(0.0);
            // Compression runs the literal plain-SGD refinement
            // `w <- w - eta * grad`; momentum and decay stay with local
            // training.
            let mut opt =
                OptState::from_buffer(cfg.learning_rate, 0.0, 0.0, job.velocity)?;
            let params = distill_train(
                job.params,
                &job.relabeled,
                &job.plan,
                cfg.compress_iterations,
                cfg.batch_size,
                &mut opt,
            )?;
            let mut velocity = opt.take_velocity();
            velocity.fill(0.0);
            (params, velocity)
        };
        let net = DenseNet::new(params);
        let (error, _) = test_stats(&net, &data.test, ResolvedExec::Sequential)?;
        Ok((net.into_params(), velocity, error, gauge::peaks()))
    };

    let results: Vec<Result<(ParamVec, ParamVec, f64, gauge::BufferPeaks)>> = match exec {
        ResolvedExec::Sequential => jobs.into_iter().map(run_job).collect(),
        #[cfg(feature = "parallel")]
        ResolvedExec::Parallel => {
            use rayon::prelude::*;
            jobs.into_par_iter().map(run_job).collect()
        }
    };

    let mut errors = Vec::with_capacity(k);
    for (w, r) in workers.iter_mut().zip(results) {
        let (params, velocity, error, p) = r?;
        w.net = DenseNet::new(params);
        w.opt.put_velocity(velocity);
        w.zbar = None;
        errors.push(error);
        peaks = max_peaks(peaks, p);
    }

    // Refresh the diversity references from the latest compressed models.
    let zbars: Vec<Result<(Vec<Vec<f64>>, gauge::BufferPeaks)>> = {
        let members: Vec<&DenseNet> = workers.iter().map(|w| &w.net).collect();
        map_indices(exec, k, |i| {
            gauge::reset();
            let _resident = gauge::track_model_buffer();
            let shard_batch = data.train.batch(&workers[i].shard);
            let z = make_pseudo_labels(&members, &shard_batch)?;
            Ok((z, gauge::peaks()))
        })
    };
    for (w, r) in workers.iter_mut().zip(zbars) {
        let (z, p) = r?;
        w.zbar = Some(z);
        peaks = max_peaks(peaks, p);
    }

    Ok((errors, peaks))
}

fn max_peaks(a: gauge::BufferPeaks, b: gauge::BufferPeaks) -> gauge::BufferPeaks {
    gauge::BufferPeaks {
        model_buffers: a.model_buffers.max(b.model_buffers),
        output_sums: a.output_sums.max(b.output_sums),
    }
}
