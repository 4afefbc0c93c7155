//! Brownian-bridge variance schedule and reverse-process coefficients.
//!
//! With `m_t = t/T` and bridge variance `δ_t = 2s(m_t − m_t²)`, the forward
//! marginal is `q(x_t | x0, y) = N((1 − m_t)·x0 + m_t·y, δ_t)`. For any earlier
//! pinned time `u < t` the one-hop kernel `q(x_t | x_u, y)` and the posterior
//! `q(x_u | x_t, x0, y)` are Gaussian with
//!
//! ```text
//! δ̂(t,u) = δ_t − δ_u·(1 − m_t)²/(1 − m_u)²         forward hop variance
//! δ̃(t,u) = δ̂(t,u)·δ_u/δ_t                         posterior variance
//! c_x    = (δ_u/δ_t)·(1 − m_t)/(1 − m_u) + (δ̂/δ_t)·(1 − m_u)
//! c_y    = m_u − m_t·(1 − m_t)/(1 − m_u)·δ_u/δ_t
//! c_eps  = (1 − m_u)·δ̂/δ_t
//! ```
//!
//! The coefficients are evaluated here in the form obtained by substituting
//! `δ = 2s·m(1 − m)`, which removes every division by `δ_t`:
//!
//! ```text
//! δ̂ = 2s(1 − m_t)(m_t − m_u)/(1 − m_u)     δ̃ = 2s·m_u(m_t − m_u)/m_t
//! c_eps = (m_t − m_u)/m_t                  δ_u(1 − m_t)/(δ_t(1 − m_u)) = m_u/m_t
//! ```
//!
//! so `t = T` (where `δ_T = 0`) needs no special casing: `δ̂_T = 0`,
//! `δ̃_T = δ_{T−1}` and the first reverse step injects the full bridge variance.
//! For adjacent steps `c_eps` is exactly `1/t`.

use std::io::Write;

use crate::error::{Error, Result};

/// Posterior coefficients for one reverse hop `t → u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub c_x: f64,
    pub c_y: f64,
    pub c_eps: f64,
    pub delta_hat: f64,
    pub delta_tilde: f64,
}

/// ELBO loss weight with a diagnostic against the `1/t` asymptote.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeight {
    pub value: f64,
    /// `value` is within 10% of `1/t`.
    pub near_inverse_t: bool,
}

/// Precomputed, immutable bridge schedule for `t = 0..=T`. Index 0 of the
/// per-step arrays (`delta_hat`, `delta_tilde`, `c_*`) is unused and zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    steps: usize,
    var_scale: f64,
    m: Vec<f64>,
    delta: Vec<f64>,
    delta_hat: Vec<f64>,
    delta_tilde: Vec<f64>,
    c_x: Vec<f64>,
    c_y: Vec<f64>,
    c_eps: Vec<f64>,
}

impl BridgeSchedule {
    pub fn new(steps: usize, var_scale: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 2, got {steps}"
            )));
        }
        if !var_scale.is_finite() || var_scale <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "variance scale must be finite and positive, got {var_scale}"
            )));
        }
        let m: Vec<f64> = (0..=steps).map(|t| t as f64 / steps as f64).collect();
        let delta: Vec<f64> = m
            .iter()
            .map(|&mt| 2.0 * var_scale * (mt - mt * mt))
            .collect();

        let mut sched = Self {
            steps,
            var_scale,
            m,
            delta,
            delta_hat: vec![0.0; steps + 1],
            delta_tilde: vec![0.0; steps + 1],
            c_x: vec![0.0; steps + 1],
            c_y: vec![0.0; steps + 1],
            c_eps: vec![0.0; steps + 1],
        };
        for t in 1..=steps {
            let c = sched.hop(t, t - 1);
            sched.delta_hat[t] = c.delta_hat;
            sched.delta_tilde[t] = c.delta_tilde;
            sched.c_x[t] = c.c_x;
            sched.c_y[t] = c.c_y;
            sched.c_eps[t] = c.c_eps;
        }
        Ok(sched)
    }

    fn hop(&self, t: usize, u: usize) -> StepCoefficients {
        let s2 = 2.0 * self.var_scale;
        let (mt, mu) = (self.m[t], self.m[u]);
        let c_eps = (mt - mu) / mt;
        // δ_u·(1 − m_t) / (δ_t·(1 − m_u)) for the bridge variance family.
        let carry = mu / mt;
        StepCoefficients {
            c_x: carry + c_eps,
            c_y: mu - mt * carry,
            c_eps,
            delta_hat: s2 * (1.0 - mt) * (mt - mu) / (1.0 - mu),
            delta_tilde: s2 * mu * (mt - mu) / mt,
        }
    }

    /// Total diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn var_scale(&self) -> f64 {
        self.var_scale
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::TimestepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(Error::TimestepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn m_all(&self) -> &[f64] {
        &self.m
    }

    pub fn delta_all(&self) -> &[f64] {
        &self.delta
    }

    pub fn delta_hat_all(&self) -> &[f64] {
        &self.delta_hat
    }

    pub fn delta_tilde_all(&self) -> &[f64] {
        &self.delta_tilde
    }

    /// Adjacent-step coefficients `t → t−1`.
    pub fn coefficients(&self, t: usize) -> Result<StepCoefficients> {
        self.check_step(t)?;
        Ok(StepCoefficients {
            c_x: self.c_x[t],
            c_y: self.c_y[t],
            c_eps: self.c_eps[t],
            delta_hat: self.delta_hat[t],
            delta_tilde: self.delta_tilde[t],
        })
    }

    /// Coefficients for a skip hop `t_cur → t_next` with `t_next < t_cur`.
    /// `t_next = 0` collapses to the deterministic estimate of x0.
    pub fn pair_coefficients(&self, t_cur: usize, t_next: usize) -> Result<StepCoefficients> {
        self.check_step(t_cur)?;
        self.check(t_next)?;
        if t_next >= t_cur {
            return Err(Error::InvalidArgument(format!(
                "reverse hop must decrease: {t_cur} -> {t_next}"
            )));
        }
        if t_next + 1 == t_cur {
            return self.coefficients(t_cur);
        }
        Ok(self.hop(t_cur, t_next))
    }

    /// The ELBO weight `c_eps[t]` of the regression loss.
    pub fn loss_weight(&self, t: usize) -> Result<LossWeight> {
        self.check_step(t)?;
        let value = self.c_eps[t];
        let inv_t = 1.0 / t as f64;
        Ok(LossWeight {
            value,
            near_inverse_t: (value - inv_t).abs() <= 0.1 * inv_t,
        })
    }

    /// CSV dump, one row per `t`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,m,delta,delta_hat,delta_tilde,c_x,c_y,c_eps")?;
        for t in 0..=self.steps {
            let row = [
                self.m[t],
                self.delta[t],
                self.delta_hat[t],
                self.delta_tilde[t],
                self.c_x[t],
                self.c_y[t],
                self.c_eps[t],
            ];
            write!(out, "{t}")?;
            for v in row {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
