//! A jointly Gaussian `(x0, y)` world in which everything the sampler needs
//! is closed-form.
//!
//! With `ε ~ N(0, I)` independent of `(x0, y)`, the pair `(x_t, y)` is jointly
//! Gaussian with `x0`, so `E[x0 | x_t, y]` is an affine map and the optimal
//! regression target is `x_t − E[x0 | x_t, y]`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sampler::{generate_with, EpsModel, InferencePlan};
use crate::schedule::BridgeSchedule;
use crate::tensor::Tensor;

/// Added to a singular conditioning covariance.
pub const RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWorld {
    dim: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianWorld {
    /// `mean` has length `2d` and `cov` is `2d × 2d`, ordered `(x0, y)`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || !n.is_multiple_of(2) || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::InvalidArgument(format!(
                "world needs an even-length mean and matching covariance, got {n} and {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument(
                "world covariance is not symmetric".into(),
            ));
        }
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.min() < -1e-10 {
            return Err(Error::InvalidArgument(format!(
                "world covariance has eigenvalue {}",
                eig.eigenvalues.min()
            )));
        }
        // Square root through the eigendecomposition so PSD-singular worlds
        // (e.g. x0 = y) can still be sampled.
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let chol = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        Ok(Self {
            dim: n / 2,
            mean,
            cov,
            chol,
        })
    }

    /// `d = 1`, zero means, unit variances, correlation `rho`.
    pub fn bivariate(rho: f64) -> Result<Self> {
        Self::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    fn block(&self, r: usize, c: usize) -> DMatrix<f64> {
        let d = self.dim;
        self.cov.view((r * d, c * d), (d, d)).into_owned()
    }

    fn mu(&self, i: usize) -> DVector<f64> {
        self.mean.rows(i * self.dim, self.dim).into_owned()
    }

    /// Draws `(x0, y)`.
    pub fn sample(&self, rng: &mut RngStream) -> (DVector<f64>, DVector<f64>) {
        let z = DVector::from_vec(rng.normals(2 * self.dim));
        let v = &self.mean + &self.chol * z;
        (
            v.rows(0, self.dim).into_owned(),
            v.rows(self.dim, self.dim).into_owned(),
        )
    }

    /// Analytic `q(x0 | y)`: mean and covariance.
    pub fn conditional(&self, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (s00, s0y, syy) = (self.block(0, 0), self.block(0, 1), self.block(1, 1));
        let (inv, _) = regularized_inverse(&syy)?;
        let gain = &s0y * inv;
        let mean = self.mu(0) + &gain * (y - self.mu(1));
        let cov = s00 - &gain * s0y.transpose();
        Ok((mean, cov))
    }
}

fn regularized_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let scale = m.diagonal().amax().max(1.0);
    let eig = m.clone().symmetric_eigen();
    let ridged = eig.eigenvalues.min() <= 1e-12 * scale;
    let a = if ridged {
        m + DMatrix::identity(m.nrows(), m.ncols()) * RIDGE
    } else {
        m.clone()
    };
    let inv = a
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().pseudo_inverse(1e-12).ok())
        .ok_or_else(|| Error::InvalidArgument("conditioning covariance not invertible".into()))?;
    Ok((inv, ridged))
}

/// `E[x0 | x_t, y] = a·x_t + b·y + c` for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMap {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    /// The conditioning covariance was singular and got the ridge.
    pub ridged: bool,
}

impl ConditionalMap {
    pub fn new(world: &GaussianWorld, sched: &BridgeSchedule, t: usize) -> Result<Self> {
        if t > sched.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: sched.steps(),
            });
        }
        let d = world.dim;
        let (m, delta) = (sched.m(t), sched.delta(t));
        let (s00, s0y, syy) = (world.block(0, 0), world.block(0, 1), world.block(1, 1));
        let sy0 = s0y.transpose();
        let cov_x0_xt = &s00 * (1.0 - m) + &s0y * m;
        let var_xt = &s00 * (1.0 - m).powi(2)
            + &syy * (m * m)
            + (&s0y + &sy0) * (m * (1.0 - m))
            + DMatrix::identity(d, d) * delta;
        let cov_xt_y = &s0y * (1.0 - m) + &syy * m;
        let mut s_oo = DMatrix::zeros(2 * d, 2 * d);
        s_oo.view_mut((0, 0), (d, d)).copy_from(&var_xt);
        s_oo.view_mut((0, d), (d, d)).copy_from(&cov_xt_y);
        s_oo.view_mut((d, 0), (d, d))
            .copy_from(&cov_xt_y.transpose());
        s_oo.view_mut((d, d), (d, d)).copy_from(&syy);
        let mut s_0o = DMatrix::zeros(d, 2 * d);
        s_0o.view_mut((0, 0), (d, d)).copy_from(&cov_x0_xt);
        s_0o.view_mut((0, d), (d, d)).copy_from(&s0y);
        let (inv, ridged) = regularized_inverse(&s_oo)?;
        let gain = s_0o * inv;
        let a = gain.columns(0, d).into_owned();
        let b = gain.columns(d, d).into_owned();
        let mu_xt = world.mu(0) * (1.0 - m) + world.mu(1) * m;
        let c = world.mu(0) - &a * mu_xt - &b * world.mu(1);
        Ok(Self { a, b, c, ridged })
    }

    pub fn apply(&self, x_t: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.a * x_t + &self.b * y + &self.c
    }
}

/// Conditional expectation of the regression target given `(x_t, y)`.
pub fn optimal_eps(
    world: &GaussianWorld,
    sched: &BridgeSchedule,
    x_t: &DVector<f64>,
    y: &DVector<f64>,
    t: usize,
) -> Result<(DVector<f64>, bool)> {
    let map = ConditionalMap::new(world, sched, t)?;
    Ok((x_t - map.apply(x_t, y), map.ridged))
}

/// The optimal denoiser with all conditional maps precomputed.
#[derive(Debug, Clone)]
pub struct OptimalDenoiser {
    maps: Vec<ConditionalMap>,
}

impl OptimalDenoiser {
    pub fn new(world: &GaussianWorld, sched: &BridgeSchedule) -> Result<Self> {
        let maps = (0..=sched.steps())
            .map(|t| ConditionalMap::new(world, sched, t))
            .collect::<Result<_>>()?;
        Ok(Self { maps })
    }

    pub fn map(&self, t: usize) -> &ConditionalMap {
        &self.maps[t]
    }

    /// Timesteps whose conditioning needed the ridge.
    pub fn ridged_steps(&self) -> Vec<usize> {
        (0..self.maps.len())
            .filter(|&t| self.maps[t].ridged)
            .collect()
    }

    pub fn predict_vec(&self, x_t: &DVector<f64>, y: &DVector<f64>, t: usize) -> DVector<f64> {
        x_t - self.maps[t].apply(x_t, y)
    }

    /// Binds the control so the denoiser fits the sampler interface.
    pub fn given<'a>(&'a self, y: &DVector<f64>) -> GivenControl<'a> {
        GivenControl {
            oracle: self,
            y: y.clone(),
        }
    }
}

pub struct GivenControl<'a> {
    oracle: &'a OptimalDenoiser,
    y: DVector<f64>,
}

impl EpsModel for GivenControl<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        if t >= self.oracle.maps.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.oracle.maps.len() - 1,
            });
        }
        let x = DVector::from_column_slice(x_t.data());
        if x.len() != self.y.len() {
            return Err(Error::shape("oracle predict", x_t.shape(), &[self.y.len()]));
        }
        let out = self.oracle.predict_vec(&x, &self.y, t);
        Tensor::new(x_t.shape().to_vec(), out.as_slice().to_vec())
    }
}

fn mean_and_cov(rows: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean = rows.iter().fold(DVector::zeros(d), |acc, r| acc + r) / n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = r - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / (n - 1.0).max(1.0))
}

/// With a degenerate law (`se = 0`) only summation round-off is tolerated.
fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff.abs() < 1e-9 {
        0.0
    } else {
        f64::INFINITY * diff.signum()
    }
}

/// Empirical vs analytic `q(x0 | y)` for samples from the reverse chain.
#[derive(Debug, Clone, Serialize)]
pub struct SamplerReport {
    pub n: usize,
    pub plan_len: usize,
    pub empirical_mean: Vec<f64>,
    pub analytic_mean: Vec<f64>,
    pub mean_z: Vec<f64>,
    pub empirical_cov: Vec<Vec<f64>>,
    pub analytic_cov: Vec<Vec<f64>>,
    /// Covariance z-scores; informative only, a subsampled plan injects less
    /// variance than the true conditional.
    pub cov_z: Vec<Vec<f64>>,
    pub ridged_steps: Vec<usize>,
}

impl SamplerReport {
    pub fn max_abs_mean_z(&self) -> f64 {
        self.mean_z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Runs the reverse chain with the optimal denoiser `n` times from a fixed `y`.
pub fn verify_sampler(
    world: &GaussianWorld,
    sched: &BridgeSchedule,
    plan: &InferencePlan,
    n: usize,
    y: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<SamplerReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("verify_sampler needs n >= 2".into()));
    }
    let oracle = OptimalDenoiser::new(world, sched)?;
    let model = oracle.given(y);
    let d = world.dim;
    let y_t = Tensor::new(vec![d], y.as_slice().to_vec())?;
    let mut outs = Vec::with_capacity(n);
    for _ in 0..n {
        let x = generate_with(
            sched,
            plan,
            &model,
            &y_t,
            &mut |_| Tensor::new(vec![d], rng.normals(d)).expect("noise shape"),
            &mut |_, _| {},
        )?;
        outs.push(DVector::from_column_slice(x.data()));
    }
    let (emp_mean, emp_cov) = mean_and_cov(&outs);
    let (ana_mean, ana_cov) = world.conditional(y)?;
    let nf = n as f64;
    let mean_z = (0..d)
        .map(|i| z_score(emp_mean[i] - ana_mean[i], (emp_cov[(i, i)] / nf).sqrt()))
        .collect();
    let cov_z = DMatrix::from_fn(d, d, |i, j| {
        let se = ((ana_cov[(i, i)] * ana_cov[(j, j)] + ana_cov[(i, j)].powi(2)) / nf).sqrt();
        z_score(emp_cov[(i, j)] - ana_cov[(i, j)], se)
    });
    Ok(SamplerReport {
        n,
        plan_len: plan.len(),
        empirical_mean: emp_mean.as_slice().to_vec(),
        analytic_mean: ana_mean.as_slice().to_vec(),
        mean_z,
        empirical_cov: rows(&emp_cov),
        analytic_cov: rows(&ana_cov),
        cov_z: rows(&cov_z),
        ridged_steps: oracle.ridged_steps(),
    })
}

/// Mean and variance z-scores per coordinate.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub n: usize,
    pub mean_z: Vec<f64>,
    pub var_z: Vec<f64>,
}

impl MomentReport {
    pub fn max_abs_z(&self) -> f64 {
        self.mean_z
            .iter()
            .chain(&self.var_z)
            .fold(0.0, |m, z| m.max(z.abs()))
    }

    fn from_draws(draws: &[Vec<f64>], mean: &[f64], var: f64) -> Self {
        let n = draws.len() as f64;
        let d = mean.len();
        let mut mean_z = Vec::with_capacity(d);
        let mut var_z = Vec::with_capacity(d);
        for i in 0..d {
            let m = draws.iter().map(|r| r[i]).sum::<f64>() / n;
            let v = draws.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / (n - 1.0);
            mean_z.push(z_score(m - mean[i], (var / n).sqrt()));
            var_z.push(z_score(v - var, var * (2.0 / (n - 1.0)).sqrt()));
        }
        Self {
            n: draws.len(),
            mean_z,
            var_z,
        }
    }
}

/// One forward step `q(x_t | x_{t−1}, y)`: `(a, b, var)` with mean
/// `a·x_{t−1} + b·y`.
pub fn forward_transition(sched: &BridgeSchedule, t: usize) -> Result<(f64, f64, f64)> {
    if t == 0 || t > sched.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    let (mt, mp) = (sched.m(t), sched.m(t - 1));
    let a = (1.0 - mt) / (1.0 - mp);
    let b = mt - a * mp;
    let var = 2.0 * sched.var_scale() * (1.0 - mt) * (mt - mp) / (1.0 - mp);
    Ok((a, b, var))
}

/// Draws `x_{t−1}` from its marginal, pushes it one forward step and compares
/// the result with the marginal `q(x_t | x0, y)`.
pub fn mc_transition_check(
    sched: &BridgeSchedule,
    x0: &[f64],
    y: &[f64],
    t: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<MomentReport> {
    if x0.len() != y.len() {
        return Err(Error::shape("mc_transition_check", &[x0.len()], &[y.len()]));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "mc_transition_check needs n >= 2".into(),
        ));
    }
    let (a, b, var) = forward_transition(sched, t)?;
    let (mp, dp) = (sched.m(t - 1), sched.delta(t - 1));
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            x0.iter()
                .zip(y)
                .map(|(&x, &yy)| {
                    let prev = (1.0 - mp) * x + mp * yy + dp.sqrt() * rng.normal();
                    a * prev + b * yy + var.sqrt() * rng.normal()
                })
                .collect()
        })
        .collect();
    let mt = sched.m(t);
    let mean: Vec<f64> = x0
        .iter()
        .zip(y)
        .map(|(&x, &yy)| (1.0 - mt) * x + mt * yy)
        .collect();
    Ok(MomentReport::from_draws(&draws, &mean, sched.delta(t)))
}

/// Forward draws `x_t` at a fixed `(x0, y, t)` against `N(μ_t, δ_t)`.
pub fn mc_forward_check(
    sched: &BridgeSchedule,
    x0: &[f64],
    y: &[f64],
    t: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<MomentReport> {
    let shape = [x0.len()];
    let x0_t = Tensor::new(shape.to_vec(), x0.to_vec())?;
    let y_t = Tensor::new(shape.to_vec(), y.to_vec())?;
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            crate::bridge::forward_sample(sched, &x0_t, &y_t, t, rng).map(|d| d.x_t.into_data())
        })
        .collect::<Result<_>>()?;
    let m = sched.m(t);
    let mean: Vec<f64> = x0
        .iter()
        .zip(y)
        .map(|(&x, &yy)| (1.0 - m) * x + m * yy)
        .collect();
    Ok(MomentReport::from_draws(&draws, &mean, sched.delta(t)))
}

/// Regression of `x_{t−1}` on `(1, x_t, y)` under the world's joint law,
/// against the affine map of the posterior mean driven by [`optimal_eps`].
#[derive(Debug, Clone, Serialize)]
pub struct PosteriorReport {
    pub n: usize,
    /// Per output coordinate: `[intercept, x_t coefficients…, y coefficients…]`.
    pub mc_coef: Vec<Vec<f64>>,
    pub oracle_coef: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

impl PosteriorReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().flatten().fold(0.0, |m, z| m.max(z.abs()))
    }
}

pub fn mc_posterior_check(
    world: &GaussianWorld,
    sched: &BridgeSchedule,
    t: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<PosteriorReport> {
    if t == 0 || t > sched.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    let d = world.dim;
    let p = 1 + 2 * d;
    if n <= p {
        return Err(Error::InvalidArgument(
            "mc_posterior_check needs more samples".into(),
        ));
    }
    let (a, b, var) = forward_transition(sched, t)?;
    let (mp, dp) = (sched.m(t - 1), sched.delta(t - 1));
    let mut design = DMatrix::zeros(n, p);
    let mut target = DMatrix::zeros(n, d);
    for r in 0..n {
        let (x0, y) = world.sample(rng);
        let prev = DVector::from_fn(d, |i, _| {
            (1.0 - mp) * x0[i] + mp * y[i] + dp.sqrt() * rng.normal()
        });
        let xt = DVector::from_fn(d, |i, _| a * prev[i] + b * y[i] + var.sqrt() * rng.normal());
        design[(r, 0)] = 1.0;
        for i in 0..d {
            design[(r, 1 + i)] = xt[i];
            design[(r, 1 + d + i)] = y[i];
            target[(r, i)] = prev[i];
        }
    }
    let xtx = design.transpose() * &design;
    let xtx_inv = xtx
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("degenerate regression design".into()))?
        .inverse();
    let beta = &xtx_inv * design.transpose() * &target;
    let resid = &target - &design * &beta;

    // Oracle affine map of c_x·x_t + c_y·y − c_eps·(x_t − E[x0 | x_t, y]).
    let c = sched.coefficients(t)?;
    let map = ConditionalMap::new(world, sched, t)?;
    let eye = DMatrix::<f64>::identity(d, d);
    let ax = &eye * (c.c_x - c.c_eps) + &map.a * c.c_eps;
    let ay = &eye * c.c_y + &map.b * c.c_eps;
    let a0 = &map.c * c.c_eps;

    let mut mc_coef = Vec::with_capacity(d);
    let mut oracle_coef = Vec::with_capacity(d);
    let mut z = Vec::with_capacity(d);
    for i in 0..d {
        let sigma2 = resid.column(i).norm_squared() / (n - p) as f64;
        let want: Vec<f64> = std::iter::once(a0[i])
            .chain(ax.row(i).iter().copied())
            .chain(ay.row(i).iter().copied())
            .collect();
        let got: Vec<f64> = beta.column(i).iter().copied().collect();
        z.push(
            (0..p)
                .map(|k| z_score(got[k] - want[k], (sigma2 * xtx_inv[(k, k)]).sqrt()))
                .collect(),
        );
        mc_coef.push(got);
        oracle_coef.push(want);
    }
    Ok(PosteriorReport {
        n,
        mc_coef,
        oracle_coef,
        z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn rejects_bad_worlds() {
        assert!(GaussianWorld::new(DVector::zeros(3), DMatrix::identity(3, 3)).is_err());
        assert!(GaussianWorld::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])
        )
        .is_err());
        assert!(GaussianWorld::bivariate(1.5).is_err());
        assert!(GaussianWorld::bivariate(1.0).is_ok());
    }

    #[test]
    fn independent_world_closed_form() {
        // x0 ⟂ y, unit variances: E[x0 | x_t, y] = (1 − m)(x_t − m·y) / ((1 − m)² + δ).
        let w = GaussianWorld::bivariate(0.0).unwrap();
        let s = BridgeSchedule::new(10, 1.0).unwrap();
        for t in 1..10 {
            let (m, d) = (s.m(t), s.delta(t));
            let (xt, y) = (0.8, -0.3);
            let want_x0 = (1.0 - m) * (xt - m * y) / ((1.0 - m).powi(2) + d);
            let (eps, ridged) = optimal_eps(&w, &s, &v(&[xt]), &v(&[y]), t).unwrap();
            assert!(!ridged);
            assert!((eps[0] - (xt - want_x0)).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn terminal_transition_is_exactly_the_control() {
        let s = BridgeSchedule::new(100, 1.0).unwrap();
        let rep = mc_transition_check(
            &s,
            &[0.4, -2.0],
            &[1.3, -0.7],
            100,
            100_000,
            &mut RngStream::new(2),
        )
        .unwrap();
        assert_eq!(rep.max_abs_z(), 0.0);
    }

    #[test]
    fn degenerate_world_returns_bridge_noise() {
        let w = GaussianWorld::bivariate(1.0).unwrap();
        let s = BridgeSchedule::new(10, 1.0).unwrap();
        for t in 1..10 {
            let (eps, _) = optimal_eps(&w, &s, &v(&[1.3]), &v(&[0.4]), t).unwrap();
            assert!((eps[0] - 0.9).abs() < 1e-6, "t={t}: {}", eps[0]);
            let (at_mean, _) = optimal_eps(&w, &s, &v(&[0.4]), &v(&[0.4]), t).unwrap();
            assert!(at_mean[0].abs() < 1e-6);
        }
    }

    #[test]
    fn terminal_step_is_ridged() {
        let w = GaussianWorld::bivariate(0.8).unwrap();
        let s = BridgeSchedule::new(10, 1.0).unwrap();
        let o = OptimalDenoiser::new(&w, &s).unwrap();
        assert!(o.ridged_steps().contains(&10));
        assert!(!o.ridged_steps().contains(&5));
        // At t = T, x_t = y and the conditional collapses to E[x0 | y].
        let (eps, _) = optimal_eps(&w, &s, &v(&[1.0]), &v(&[1.0]), 10).unwrap();
        assert!((eps[0] - (1.0 - 0.8)).abs() < 1e-6);
    }

    #[test]
    fn single_step_plan_hits_conditional_mean_exactly() {
        let w = GaussianWorld::bivariate(0.8).unwrap();
        let s = BridgeSchedule::new(10, 1.0).unwrap();
        let plan = InferencePlan::new(10, 1).unwrap();
        let y = v(&[0.5]);
        let r = verify_sampler(&w, &s, &plan, 16, &y, &mut RngStream::new(0)).unwrap();
        assert!((r.empirical_mean[0] - 0.4).abs() < 1e-6);
        assert!(r.empirical_cov[0][0] < 1e-20);
    }

    #[test]
    fn forward_transition_composes_to_marginal() {
        for s in [0.5, 1.0, 2.0] {
            let sched = BridgeSchedule::new(12, s).unwrap();
            for t in 1..=12 {
                let (a, b, var) = forward_transition(&sched, t).unwrap();
                let (mp, mt) = (sched.m(t - 1), sched.m(t));
                assert!(((a * (1.0 - mp)) - (1.0 - mt)).abs() < 1e-12);
                assert!((a * mp + b - mt).abs() < 1e-12);
                assert!((a * a * sched.delta(t - 1) + var - sched.delta(t)).abs() < 1e-12);
                assert!(var >= 0.0);
            }
        }
    }

    #[test]
    fn conditional_of_bivariate() {
        let w = GaussianWorld::bivariate(0.6).unwrap();
        let (m, c) = w.conditional(&v(&[2.0])).unwrap();
        assert!((m[0] - 1.2).abs() < 1e-12);
        assert!((c[(0, 0)] - 0.64).abs() < 1e-12);
    }
}
