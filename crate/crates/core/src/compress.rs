//! Distillation-based model compression.
//!
//! A worker relabels a seeded fraction of its local data with pseudo-labels
//! averaged over the member models, then trains its own parameters for `p`
//! mini-batch steps on the accelerated compression loss. The member models
//! are only ever read one at a time into a running output sum, so the
//! aggregate network is never materialized.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aggregate::ensemble_mean_output;
use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::gauge;
use crate::net::{DenseNet, ParamVec};
use crate::optim::{train_step, OptState};
use crate::loss::LossSelector;
use crate::seedstream::{stream_rng, StreamDomain};

/// How a worker relabels and compresses: the fraction to relabel, the seed
/// driving subset selection and batch order, and the beta schedule over the
/// compression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelPlan {
    /// Fraction of the local data to relabel, in `(0, 1]`.
    pub relabel_fraction: f64,
    /// Seed for subset selection and epoch shuffles.
    pub seed: u64,
    /// `(progress threshold, beta)` pairs; the entry whose threshold covers
    /// `i / p` supplies beta for compression step `i`. Thresholds start at 0
    /// and increase strictly; betas are nonnegative.
    pub beta_schedule: Vec<(f64, f64)>,
}

impl RelabelPlan {
    pub fn new(relabel_fraction: f64, seed: u64, beta_schedule: Vec<(f64, f64)>) -> Result<Self> {
        let plan = Self {
            relabel_fraction,
            seed,
            beta_schedule,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.relabel_fraction > 0.0 && self.relabel_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "relabel fraction must be in (0, 1], got {}",
                self.relabel_fraction
            )));
        }
        if self.beta_schedule.is_empty() {
            return Err(Error::Config("beta schedule is empty".into()));
        }
        if self.beta_schedule[0].0 != 0.0 {
            return Err(Error::Config(
                "beta schedule must start at threshold 0".into(),
            ));
        }
        for w in self.beta_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(
                    "beta schedule thresholds must increase strictly".into(),
                ));
            }
        }
        if self.beta_schedule.iter().any(|&(t, b)| !(0.0..=1.0).contains(&t) || b < 0.0) {
            return Err(Error::Config(
                "beta schedule needs thresholds in [0, 1] and betas >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Beta for relative progress in `[0, 1]`: the last entry whose
    /// threshold does not exceed it.
    pub fn beta_at(&self, progress: f64) -> f64 {
        let mut beta = self.beta_schedule[0].1;
        for &(threshold, b) in &self.beta_schedule {
            if progress >= threshold {
                beta = b;
            }
        }
        beta
    }

    /// The relabeled subset of `0..len`: a pure function of
    /// `(seed, len, relabel_fraction)`, with `ceil(fraction * len)` indices
    /// in ascending order.
    pub fn select_subset(&self, len: usize) -> Result<Vec<usize>> {
        let want = (self.relabel_fraction * len as f64).ceil() as usize;
        if want == 0 || len == 0 {
            return Err(Error::Config(format!(
                "relabel fraction {} of {len} examples selects nothing",
                self.relabel_fraction
            )));
        }
        let mut all: Vec<usize> = (0..len).collect();
        let mut rng = stream_rng(self.seed, StreamDomain::Relabel, 0);
        all.shuffle(&mut rng);
        let mut subset = all[..want.min(len)].to_vec();
        subset.sort_unstable();
        Ok(subset)
    }
}

/// Ensemble pseudo-labels for a batch: the mean of the member output vectors
/// on each input, evaluated one member at a time into a running sum.
pub fn make_pseudo_labels(members: &[&DenseNet], batch: &LabeledBatch) -> Result<Vec<Vec<f64>>> {
    let _sum_guard = gauge::track_output_sum();
    batch
        .inputs()
        .iter()
        .map(|x| ensemble_mean_output(members, x))
        .collect()
}

/// Distill the member ensemble into one local-sized model.
///
/// Starts from `params` (not from random values), relabels the plan's subset
/// of `local_data` with ensemble pseudo-labels, and runs `p` mini-batch SGD
/// steps on the accelerated compression loss over that subset. Examples
/// outside the subset do not participate. Returns the final parameters;
/// `p == 0` returns `params` unchanged.
pub fn compress(
    params: ParamVec,
    members: &[&DenseNet],
    local_data: &LabeledBatch,
    plan: &RelabelPlan,
    p: u64,
    batch_size: usize,
    opt: &mut OptState,
) -> Result<ParamVec> {
    plan.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if p == 0 {
        return Ok(params);
    }
    let subset = plan.select_subset(local_data.len())?;
    let relabeled = {
        let subset_batch = local_data.select(&subset);
        let pseudo = make_pseudo_labels(members, &subset_batch)?;
        subset_batch.with_soft_targets(pseudo)?
    };
    distill_train(params, &relabeled, plan, p, batch_size, opt)
}

/// The training half of [`compress`]: `p` steps of SGD on the accelerated
/// compression loss over an already relabeled subset. Mini-batch order is a
/// fresh seeded shuffle of the subset each epoch.
pub(crate) fn distill_train(
    params: ParamVec,
    relabeled: &LabeledBatch,
    plan: &RelabelPlan,
    p: u64,
    batch_size: usize,
    opt: &mut OptState,
) -> Result<ParamVec> {
    if p == 0 {
        return Ok(params);
    }
    if relabeled.soft_targets().is_none() {
        return Err(Error::Config("relabeled data is missing soft targets".into()));
    }
    let _params_guard = gauge::track_model_buffer();
    let _velocity_guard = gauge::track_model_buffer();
    let mut net = DenseNet::new(params);
    let mut shuffle_rng = stream_rng(plan.seed, StreamDomain::CompressShuffle, 0);
    let mut order: Vec<usize> = (0..relabeled.len()).collect();
    let mut cursor = order.len(); // force a shuffle on first use
    for i in 0..p {
        if cursor >= order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(order.len());
        let batch = relabeled.select(&order[cursor..end]);
        cursor = end;
        let beta = plan.beta_at(i as f64 / p as f64);
        train_step(&mut net, &batch, &LossSelector::Compression { beta }, opt)?;
    }
    Ok(net.into_params())
}

/// Debug dump of relabeled triples `(x, y, ybar)` as CSV.
pub fn dump_relabeled_csv(relabeled: &LabeledBatch, path: &Path) -> Result<()> {
    let soft = relabeled.soft_targets().ok_or(Error::Config(
        "nothing to dump: batch has no soft targets".into(),
    ))?;
    let dim = relabeled.inputs().first().map_or(0, Vec::len);
    let classes = soft.first().map_or(0, Vec::len);
    let mut out = String::from("y");
    for j in 0..dim {
        out.push_str(&format!(",x{j}"));
    }
    for c in 0..classes {
        out.push_str(&format!(",ybar{c}"));
    }
    out.push('\n');
    for ((x, &y), row) in relabeled.inputs().iter().zip(relabeled.labels()).zip(soft) {
        out.push_str(&y.to_string());
        for v in x {
            out.push_str(&format!(",{v}"));
        }
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
