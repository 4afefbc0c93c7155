//! Monte Carlo checks against the Gaussian oracle. Every tolerance is four
//! standard errors; seeds are pinned.

use exbridge::oracle::{
    mc_forward_check, mc_posterior_check, mc_transition_check, optimal_eps, verify_sampler,
    GaussianWorld, OptimalDenoiser,
};
use exbridge::sampler::InferencePlan;
use exbridge::{BridgeSchedule, RngStream};
use nalgebra::{DMatrix, DVector};

#[test]
fn forward_variance_law() {
    let sched = BridgeSchedule::new(100, 1.0).unwrap();
    let mut rng = RngStream::new(41);
    for _ in 0..10 {
        let t = rng.int_inclusive(1, 99);
        let x0 = rng.normals(3);
        let y = rng.normals(3);
        let r = mc_forward_check(&sched, &x0, &y, t, 100_000, &mut rng).unwrap();
        assert!(r.max_abs_z() < 4.0, "t={t}: {r:?}");
    }
}

#[test]
fn composed_transitions_match_marginal() {
    for (steps, s) in [(10, 1.0), (200, 2.0), (1000, 0.5)] {
        let sched = BridgeSchedule::new(steps, s).unwrap();
        let mut rng = RngStream::new(steps as u64);
        for t in [1, steps / 2, steps] {
            let r = mc_transition_check(&sched, &[0.5, -2.0], &[1.0, 1.0], t, 100_000, &mut rng)
                .unwrap();
            assert!(r.max_abs_z() < 4.0, "T={steps} t={t}: {r:?}");
        }
    }
}

#[test]
fn posterior_mean_with_optimal_eps_matches_regression() {
    let world = GaussianWorld::new(
        DVector::from_column_slice(&[0.3, -0.2, 1.0, 0.0]),
        DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.2, 0.6, 0.1, //
                0.2, 0.8, 0.0, 0.3, //
                0.6, 0.0, 1.2, 0.2, //
                0.1, 0.3, 0.2, 0.9,
            ],
        ),
    )
    .unwrap();
    let sched = BridgeSchedule::new(30, 1.0).unwrap();
    for (i, t) in [2, 15, 29].into_iter().enumerate() {
        let r = mc_posterior_check(
            &world,
            &sched,
            t,
            200_000,
            &mut RngStream::new(90 + i as u64),
        )
        .unwrap();
        assert!(r.max_abs_z() < 4.0, "t={t}: {r:?}");
    }
}

#[test]
fn full_plan_sampler_matches_conditional_mean() {
    let world = GaussianWorld::bivariate(0.8).unwrap();
    let sched = BridgeSchedule::new(40, 1.0).unwrap();
    let plan = InferencePlan::new(40, 40).unwrap();
    for seed in [1, 2, 3, 4, 5] {
        let y = DVector::from_column_slice(&[-0.5 + 0.3 * seed as f64]);
        let r =
            verify_sampler(&world, &sched, &plan, 10_000, &y, &mut RngStream::new(seed)).unwrap();
        assert!(r.max_abs_mean_z() < 4.0, "seed {seed}: {r:?}");
    }
}

#[test]
fn half_plan_keeps_the_mean_and_reports_covariance() {
    let world = GaussianWorld::bivariate(0.8).unwrap();
    let sched = BridgeSchedule::new(40, 1.0).unwrap();
    let plan = InferencePlan::new(40, 20).unwrap();
    let y = DVector::from_column_slice(&[0.4]);
    let r = verify_sampler(&world, &sched, &plan, 10_000, &y, &mut RngStream::new(17)).unwrap();
    assert!(r.max_abs_mean_z() < 4.0, "{r:?}");
    assert!(r.cov_z[0][0].is_finite());
    assert!(r.empirical_cov[0][0] > 0.0);
}

#[test]
fn optimal_eps_beats_perturbed_predictors() {
    let world = GaussianWorld::bivariate(0.6).unwrap();
    let sched = BridgeSchedule::new(20, 1.0).unwrap();
    let oracle = OptimalDenoiser::new(&world, &sched).unwrap();
    let mut rng = RngStream::new(3);
    let n = 20_000;
    for t in [3, 10, 17] {
        let dir = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let (mut best, mut perturbed) = (0.0, 0.0);
        for _ in 0..n {
            let (x0, y) = world.sample(&mut rng);
            let eps = rng.normal();
            let (m, d) = (sched.m(t), sched.delta(t));
            let xt = (1.0 - m) * x0[0] + m * y[0] + d.sqrt() * eps;
            let target = m * (y[0] - x0[0]) + d.sqrt() * eps;
            let pred = oracle.predict_vec(&DVector::from_column_slice(&[xt]), &y, t)[0];
            best += (target - pred).powi(2);
            perturbed += (target - pred - 0.1 * dir).powi(2);
        }
        assert!(best < perturbed, "t={t}");
    }
}

#[test]
fn oracle_handles_the_terminal_step() {
    let world = GaussianWorld::bivariate(0.5).unwrap();
    let sched = BridgeSchedule::new(10, 1.0).unwrap();
    let y = DVector::from_column_slice(&[2.0]);
    let (eps, ridged) = optimal_eps(&world, &sched, &y, &y, 10).unwrap();
    assert!(ridged);
    // E[x0 | y] = 1, so the target is y − 1.
    assert!((eps[0] - 1.0).abs() < 1e-6);
}
