//! Forward bridge sampling plus the two quantities built on it: the
//! denoiser's regression target and the reverse chain's posterior mean.
//!
//! Sign convention: the network regresses `m_t(y − x0) + √δ_t·ε` (which equals
//! `x_t − x0`) and the reverse mean subtracts it: `c_x·x_t + c_y·y − c_eps·ε_θ`.
//! That is the only pairing under which a perfect prediction reproduces the
//! analytic posterior mean.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::BridgeSchedule;
use crate::tensor::Tensor;

/// A forward draw `x_t = (1 − m_t)·x0 + m_t·y + √δ_t·eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeDraw {
    pub x_t: Tensor,
    pub eps: Tensor,
    pub t: usize,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Evaluates the bridge marginal for a given Gaussian draw.
pub fn bridge_state(
    sched: &BridgeSchedule,
    x0: &Tensor,
    y: &Tensor,
    eps: &Tensor,
    t: usize,
) -> Result<Tensor> {
    same_shape("bridge_state", x0, y)?;
    same_shape("bridge_state", x0, eps)?;
    if t > sched.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    let m = sched.m(t);
    Tensor::lincomb(&[(1.0 - m, x0), (m, y), (sched.delta(t).sqrt(), eps)])
}

pub fn forward_sample(
    sched: &BridgeSchedule,
    x0: &Tensor,
    y: &Tensor,
    t: usize,
    rng: &mut RngStream,
) -> Result<BridgeDraw> {
    same_shape("forward_sample", x0, y)?;
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = bridge_state(sched, x0, y, &eps, t)?;
    Ok(BridgeDraw { x_t, eps, t })
}

/// `m_t·(y − x0) + √δ_t·eps`, the regression target for the denoiser.
pub fn loss_target(
    sched: &BridgeSchedule,
    x0: &Tensor,
    y: &Tensor,
    draw: &BridgeDraw,
) -> Result<Tensor> {
    same_shape("loss_target", x0, y)?;
    same_shape("loss_target", x0, &draw.eps)?;
    let m = sched.m(draw.t);
    Tensor::lincomb(&[(m, y), (-m, x0), (sched.delta(draw.t).sqrt(), &draw.eps)])
}

/// Reverse mean for the adjacent step `t → t − 1`.
pub fn posterior_mean(
    sched: &BridgeSchedule,
    x_t: &Tensor,
    y: &Tensor,
    eps_pred: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let c = sched.coefficients(t)?;
    same_shape("posterior_mean", x_t, y)?;
    same_shape("posterior_mean", x_t, eps_pred)?;
    Tensor::lincomb(&[(c.c_x, x_t), (c.c_y, y), (-c.c_eps, eps_pred)])
}
