//! SGD with momentum and l2 regularization.

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::loss::{accumulate_grad, LossSelector};
use crate::net::{DenseNet, Layout, ParamVec};

/// Optimizer state: step size, momentum coefficient, l2 coefficient, and the
/// velocity accumulator (same layout as the model).
#[derive(Debug, Clone)]
pub struct OptState {
    learning_rate: f64,
    momentum: f64,
    l2: f64,
    velocity: ParamVec,
}

impl OptState {
    pub fn new(learning_rate: f64, momentum: f64, l2: f64, layout: Layout) -> Result<Self> {
        Self::from_buffer(learning_rate, momentum, l2, ParamVec::zeros(layout))
    }

    /// Build an optimizer around an existing velocity buffer, reusing its
    /// allocation. The buffer's current contents are kept.
    pub(crate) fn from_buffer(
        learning_rate: f64,
        momentum: f64,
        l2: f64,
        velocity: ParamVec,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be >= 0, got {l2}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            l2,
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn velocity(&self) -> &ParamVec {
        &self.velocity
    }

    /// Zero the velocity accumulator.
    pub fn reset_velocity(&mut self) {
        self.velocity.fill(0.0);
    }

    /// Hand the velocity buffer over (used to reuse the allocation across
    /// phases), leaving a tiny placeholder behind. The optimizer is not
    /// usable again until [`OptState::put_velocity`] restores a real buffer.
    pub(crate) fn take_velocity(&mut self) -> ParamVec {
        std::mem::replace(&mut self.velocity, ParamVec::shell())
    }

    pub(crate) fn put_velocity(&mut self, velocity: ParamVec) {
        self.velocity = velocity;
    }
}

/// One SGD update:
/// `velocity <- momentum * velocity + grad + l2 * params`, then
/// `params <- params - learning_rate * velocity`.
///
/// With zero momentum and l2 this is the plain `w - eta * grad` rule.
pub fn sgd_step(params: &mut ParamVec, grad: &ParamVec, opt: &mut OptState) -> Result<()> {
    params.check_combinable(grad)?;
    params.check_combinable(&opt.velocity)?;
    let eta = opt.learning_rate;
    let m = opt.momentum;
    let l2 = opt.l2;
    for ((w, &g), v) in params
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(opt.velocity.values_mut())
    {
        *v = m * *v + g + l2 * *w;
        *w -= eta * *v;
    }
    Ok(())
}

/// One mini-batch training step on `net` with the selected loss, using the
/// mean-over-batch gradient. Returns the batch's mean hard-label cross
/// entropy (computed from the same forward passes).
///
/// The gradient is accumulated directly into the velocity buffer, so a step
/// touches exactly two model-sized buffers: the parameters and the velocity.
pub fn train_step(
    net: &mut DenseNet,
    batch: &LabeledBatch,
    selector: &LossSelector,
    opt: &mut OptState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    net.params().check_combinable(&opt.velocity)?;
    let inv_batch = 1.0 / batch.len() as f64;
    opt.velocity.scale(opt.momentum);
    // A failed accumulation leaves the velocity half-updated; callers treat
    // any step error as fatal for the run.
    let ce_sum = accumulate_grad(&*net, batch, selector, inv_batch, &mut opt.velocity)?;
    let eta = opt.learning_rate;
    let l2 = opt.l2;
    for (w, v) in net
        .params_mut()
        .values_mut()
        .iter_mut()
        .zip(opt.velocity.values_mut())
    {
        *v += l2 * *w;
        *w -= eta * *v;
    }
    Ok(ce_sum * inv_batch)
}
