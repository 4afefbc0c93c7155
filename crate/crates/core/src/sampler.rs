//! Reverse-process generation over a (possibly subsampled) inference plan.
//!
//! Each hop `t_cur → t_next` uses the posterior coefficients recomputed for
//! that pair, so a subsampled plan is the exact bridge posterior between the
//! two pinned times. The last hop lands on `t = 0` and injects no noise.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::BridgeSchedule;
use crate::tensor::Tensor;

/// Anything that predicts the bridge regression target `m_t(y − x0) + √δ_t·ε`.
pub trait EpsModel {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> EpsModel for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// Strictly decreasing timesteps starting at `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferencePlan {
    steps: Vec<usize>,
    deterministic_tail: bool,
}

impl InferencePlan {
    /// `S` evenly spaced timesteps `round(T·(S − i)/S)` for `i = 0..S`,
    /// rounding half up.
    pub fn new(total: usize, count: usize) -> Result<Self> {
        if count < 1 || count > total {
            return Err(Error::InvalidArgument(format!(
                "inference steps must lie in 1..={total}, got {count}"
            )));
        }
        let mut steps: Vec<usize> = (0..count)
            .map(|i| (2 * total * (count - i) + count) / (2 * count))
            .collect();
        steps.dedup();
        Ok(Self {
            steps,
            deterministic_tail: true,
        })
    }

    /// Plan from explicit timesteps; must start at `total` and strictly decrease to ≥ 1.
    pub fn from_steps(total: usize, steps: Vec<usize>) -> Result<Self> {
        let ok = steps.first() == Some(&total)
            && steps.windows(2).all(|w| w[0] > w[1])
            && steps.last().is_some_and(|&t| t >= 1);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid plan {steps:?} for T = {total}"
            )));
        }
        Ok(Self {
            steps,
            deterministic_tail: true,
        })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn deterministic_tail(&self) -> bool {
        self.deterministic_tail
    }

    /// `(t_cur, t_next)` hops, ending at `t_next = 0`.
    pub fn hops(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
    }
}

/// One reverse hop: `c_x·x + c_y·y − c_eps·eps_pred + √δ̃·noise`.
pub fn reverse_step(
    sched: &BridgeSchedule,
    x_cur: &Tensor,
    y: &Tensor,
    eps_pred: &Tensor,
    t_cur: usize,
    t_next: usize,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let c = sched.pair_coefficients(t_cur, t_next)?;
    let mut terms = vec![(c.c_x, x_cur), (c.c_y, y), (-c.c_eps, eps_pred)];
    if let Some(n) = noise {
        if t_next == 0 && n.data().iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument(
                "final reverse step must be noiseless".into(),
            ));
        }
        terms.push((c.delta_tilde.sqrt(), n));
    }
    Tensor::lincomb(&terms)
}

/// Runs the reverse chain from `x_T = y`. `noise` supplies the Gaussian draw
/// for every non-final hop; `observe` sees each state `(t_next, x)`.
pub fn generate_with(
    sched: &BridgeSchedule,
    plan: &InferencePlan,
    model: &dyn EpsModel,
    y: &Tensor,
    noise: &mut dyn FnMut(usize) -> Tensor,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    if plan.steps().first() != Some(&sched.steps()) {
        return Err(Error::InvalidArgument("plan does not start at T".into()));
    }
    let mut x = y.clone();
    for (t_cur, t_next) in plan.hops() {
        let eps_pred = model.predict(&x, t_cur)?;
        let z = if t_next == 0 && plan.deterministic_tail() {
            None
        } else {
            Some(noise(t_cur))
        };
        x = reverse_step(sched, &x, y, &eps_pred, t_cur, t_next, z.as_ref())?;
        observe(t_next, &x);
    }
    Ok(x)
}

pub fn generate(
    sched: &BridgeSchedule,
    plan: &InferencePlan,
    model: &dyn EpsModel,
    y: &Tensor,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let shape = y.shape().to_vec();
    generate_with(
        sched,
        plan,
        model,
        y,
        &mut |_| Tensor::randn(&shape, rng),
        &mut |_, _| {},
    )
}
