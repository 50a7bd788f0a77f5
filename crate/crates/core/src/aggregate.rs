//! The two model-aggregation operators and numerical probes for the
//! inequalities behind them.
//!
//! Parameter averaging produces a single model whose loss carries no
//! guarantee for non-convex nets. Output averaging (the ensemble operator)
//! keeps the loss of the aggregate at or below the mean member loss whenever
//! the loss is convex in the outputs, which cross entropy is.

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::loss::{loss_ce, Target};
use crate::net::{DenseNet, ParamVec};

/// Elementwise arithmetic mean of `K >= 1` parameter vectors with identical
/// layouts. Members are summed in slice order.
pub fn ma_aggregate(members: &[&ParamVec]) -> Result<ParamVec> {
    let first = *members.first().ok_or(Error::Empty("no members to average"))?;
    for m in &members[1..] {
        first.check_combinable(m)?;
    }
    let k = members.len() as f64;
    let mut out = ParamVec::zeros(first.layout().clone());
    for (i, v) in out.values_mut().iter_mut().enumerate() {
        let mut acc = 0.0;
        for m in members {
            acc += m.values()[i];
        }
        *v = acc / k;
    }
    Ok(out)
}

/// An output-averaging ensemble over `K` member networks with identical
/// layouts. Members are held as a list and evaluated one at a time; the
/// combined wide network is never materialized.
pub struct Ensemble<'a> {
    members: Vec<&'a DenseNet>,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a DenseNet>) -> Result<Self> {
        let first = members.first().ok_or(Error::Empty("ensemble has no members"))?;
        for m in &members[1..] {
            first.params().check_combinable(m.params())?;
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[&'a DenseNet] {
        &self.members
    }

    /// Mean of the member output probability vectors, accumulated in member
    /// order into a single running sum.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensemble_mean_output(&self.members, x)
    }

    /// Index of the most probable class under the ensemble.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::net::argmax(&self.predict(x)?))
    }

    /// Both sides of the convexity inequality for cross entropy, averaged
    /// over the batch: the loss of the ensemble output on the left, the mean
    /// member loss on the right. The contract is `lhs <= rhs + 1e-9`.
    pub fn jensen_gap(&self, batch: &LabeledBatch) -> Result<JensenGap> {
        if batch.is_empty() {
            return Err(Error::Empty("jensen gap needs a nonempty batch"));
        }
        let k = self.members.len() as f64;
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for (x, &y) in batch.inputs().iter().zip(batch.labels()) {
            let p = self.predict(x)?;
            lhs += loss_ce(&p, Target::Class(y));
            let mut member_sum = 0.0;
            for m in &self.members {
                member_sum += loss_ce(&m.forward(x)?, Target::Class(y));
            }
            rhs += member_sum / k;
        }
        let n = batch.len() as f64;
        Ok(JensenGap {
            ensemble_loss: lhs / n,
            mean_member_loss: rhs / n,
        })
    }
}

/// Streaming mean of member outputs on one input; shared with the
/// pseudo-labeling path so both produce bit-identical values.
pub(crate) fn ensemble_mean_output(members: &[&DenseNet], x: &[f64]) -> Result<Vec<f64>> {
    let first = members.first().ok_or(Error::Empty("ensemble has no members"))?;
    let mut sum = vec![0.0; first.layout().class_count()];
    for m in members {
        let p = m.forward(x)?;
        for (s, v) in sum.iter_mut().zip(&p) {
            *s += v;
        }
    }
    let k = members.len() as f64;
    for s in &mut sum {
        *s /= k;
    }
    Ok(sum)
}

/// The two sides of the convexity inequality for cross entropy.
#[derive(Debug, Clone, Copy)]
pub struct JensenGap {
    /// Mean batch loss of the ensemble prediction.
    pub ensemble_loss: f64,
    /// Mean over the batch of the mean member loss.
    pub mean_member_loss: f64,
}

/// Evaluate both the loss of the parameter-averaged model and the mean of
/// the member losses on a batch (mean cross entropy per example).
///
/// There is deliberately no ordering contract between the two values: for
/// non-convex nets the averaged model can be arbitrarily worse, and the
/// mirror-basin fixture in this repository shows it happening.
pub fn ma_nonconvex_probe(members: &[&ParamVec], batch: &LabeledBatch) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Empty("probe needs a nonempty batch"));
    }
    let averaged = DenseNet::new(ma_aggregate(members)?);
    let n = batch.len() as f64;
    let avg_loss = crate::loss::local_loss(&averaged, batch, None, 0.0)? / n;
    let mut member_mean = 0.0;
    for m in members {
        let net = DenseNet::new((*m).clone());
        member_mean += crate::loss::local_loss(&net, batch, None, 0.0)? / n;
    }
    member_mean /= members.len() as f64;
    Ok((avg_loss, member_mean))
}
