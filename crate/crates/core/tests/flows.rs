//! Long-horizon behaviour of the integrated flows.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repflow::flow_engine::{
    classify_asymptotics, closed_form_covariance, fit_convergence_rate, gaussian_flow, sigma_flow, simplex_flow,
    FlowConfig, RateModel,
};
use repflow::gaussian_manifold::{GaussianParams, QuadBilinearLandscape};
use repflow::oracle::{random_gaussian, random_landscape, random_spd};
use repflow::simplex_games::{lyapunov_series, FiniteLandscape, SimplexPoint};

fn max_cov_error(l: &QuadBilinearLandscape, g0: &GaussianParams, dt: f64, t_end: f64) -> f64 {
    let traj = gaussian_flow(l, g0, &FlowConfig::new(dt, t_end, 1).unwrap()).unwrap();
    traj.times()
        .iter()
        .zip(traj.states())
        .map(|(&t, g)| (g.cov() - closed_form_covariance(g0.cov(), l.q(), t).unwrap()).norm())
        .fold(0.0, f64::max)
}

#[test]
fn rk4_is_fourth_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let l = random_landscape(&mut rng, 3);
    let g0 = random_gaussian(&mut rng, 3);
    let coarse = max_cov_error(&l, &g0, 0.02, 5.0);
    let fine = max_cov_error(&l, &g0, 0.01, 5.0);
    let ratio = coarse / fine;
    assert!((12.0..=20.0).contains(&ratio), "error ratio {ratio} ({coarse:e} -> {fine:e})");
}

#[test]
fn gaussian_flows_stay_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for n in 1..=4 {
        let l = random_landscape(&mut rng, n);
        let g0 = random_gaussian(&mut rng, n);
        let traj = gaussian_flow(&l, &g0, &FlowConfig::new(0.01, 20.0, 10).unwrap()).unwrap();
        for g in traj.states() {
            assert!(g.cov().clone().cholesky().is_some());
        }
    }
}

fn interior_ess_games() -> Vec<(FiniteLandscape, SimplexPoint)> {
    vec![
        (
            FiniteLandscape::matrix(dmatrix![0.0, 1.0; 1.0, 0.0]).unwrap(),
            SimplexPoint::new(vec![0.9, 0.1]).unwrap(),
        ),
        (
            FiniteLandscape::matrix(-DMatrix::identity(3, 3)).unwrap(),
            SimplexPoint::new(vec![0.7, 0.2, 0.1]).unwrap(),
        ),
        // Rock-paper-scissors with a self-interaction penalty.
        (
            FiniteLandscape::matrix(dmatrix![-1.0, -1.0, 1.0; 1.0, -1.0, -1.0; -1.0, 1.0, -1.0]).unwrap(),
            SimplexPoint::new(vec![0.1, 0.3, 0.6]).unwrap(),
        ),
    ]
}

#[test]
fn simplex_flows_conserve_total_mass() {
    let cfg = FlowConfig::new(0.01, 100.0, 1).unwrap();
    for (game, p0) in interior_ess_games() {
        let traj = simplex_flow(&game, &p0, None, &cfg).unwrap();
        for p in traj.states() {
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(p.as_slice().iter().all(|&x| x > 0.0));
        }
    }
}

#[test]
fn interior_ess_attracts_and_lyapunov_decreases() {
    let cfg = FlowConfig::new(0.01, 50.0, 10).unwrap();
    let (game, p0) = interior_ess_games().remove(0);
    let target = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
    let traj = simplex_flow(&game, &p0, Some(&target), &cfg).unwrap();
    let (_, last) = traj.last().unwrap();
    assert!((last.as_slice()[0] - 0.5).abs() <= 1e-6);
    let v = lyapunov_series(&target, &traj).unwrap();
    assert!(v.windows(2).all(|w| w[1] < w[0] || w[1] == 0.0));
    assert_eq!(traj.diagnostic("KL").unwrap(), v);
}

#[test]
fn zero_sum_game_conserves_cross_entropy() {
    let rps = FiniteLandscape::matrix(dmatrix![0.0, -1.0, 1.0; 1.0, 0.0, -1.0; -1.0, 1.0, 0.0]).unwrap();
    let target = SimplexPoint::uniform(3);
    let p0 = SimplexPoint::new(vec![0.5, 0.3, 0.2]).unwrap();
    let traj = simplex_flow(&rps, &p0, Some(&target), &FlowConfig::new(0.01, 100.0, 10).unwrap()).unwrap();
    let v = lyapunov_series(&target, &traj).unwrap();
    assert!(v.iter().all(|x| (x - v[0]).abs() <= 1e-6));
}

#[test]
fn inverse_time_and_exponential_regimes() {
    let l = QuadBilinearLandscape::new(DMatrix::identity(2, 2) * 0.5, DMatrix::zeros(2, 2)).unwrap();
    let g0 = GaussianParams::standard(2);
    let cfg = FlowConfig::new(0.01, 20.0, 10).unwrap();

    let plain = fit_convergence_rate(&gaussian_flow(&l, &g0, &cfg).unwrap()).unwrap();
    assert_eq!(plain.model, RateModel::OneOverT);

    let shaped = fit_convergence_rate(&sigma_flow(&l, &g0, &cfg).unwrap()).unwrap();
    assert_eq!(shaped.model, RateModel::Exponential);
    // From a = 0, dC/dt = -2C / sqrt(n) exactly.
    assert!((shaped.rate - 2.0 / 2f64.sqrt()).abs() < 1e-6, "gamma {}", shaped.rate);
    assert!(shaped.r_squared >= 0.999);
}

#[test]
fn inverse_time_regime_on_random_landscapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..3 {
        let q = random_spd(&mut rng, 3, 0.5);
        let l = QuadBilinearLandscape::new(q, DMatrix::zeros(3, 3)).unwrap();
        let g0 = GaussianParams::new(DVector::zeros(3), random_spd(&mut rng, 3, 0.3)).unwrap();
        let traj = gaussian_flow(&l, &g0, &FlowConfig::new(0.01, 50.0, 10).unwrap()).unwrap();
        assert_eq!(fit_convergence_rate(&traj).unwrap().model, RateModel::OneOverT);
    }
}

/// A stable spectrum drives the state to a point mass at the origin. The mean
/// only decays like a power of t, so the landscapes have Q large enough for
/// both `||a||` and `tr C` to pass 1e-3 by t = 1000.
#[test]
fn stable_spectrum_implies_collapse_to_origin() {
    let landscapes = [
        QuadBilinearLandscape::new(DMatrix::identity(2, 2) * 2.0, dmatrix![0.0, -3.0; 3.0, 0.0]).unwrap(),
        QuadBilinearLandscape::new(dmatrix![2.0, 0.3; 0.3, 1.5], dmatrix![-1.0, 0.5; 0.0, -2.0]).unwrap(),
        QuadBilinearLandscape::new(DMatrix::identity(3, 3) * 3.0, -DMatrix::identity(3, 3)).unwrap(),
    ];
    for l in landscapes {
        let report = classify_asymptotics(&l).unwrap();
        assert!(report.converges_to_delta_at_zero);
        let n = l.dim();
        let g0 = GaussianParams::new(DVector::from_element(n, 1.0), DMatrix::identity(n, n)).unwrap();
        let traj = gaussian_flow(&l, &g0, &FlowConfig::new(0.01, 1000.0, 1000).unwrap()).unwrap();
        let (_, last) = traj.last().unwrap();
        assert!(last.mean().norm() < 1e-3, "|a| = {}", last.mean().norm());
        assert!(last.cov().trace() < 1e-3, "tr C = {}", last.cov().trace());
    }
}

#[test]
fn unstable_spectrum_is_flagged() {
    let l = QuadBilinearLandscape::new(dmatrix![0.5], dmatrix![3.0]).unwrap();
    assert!(!classify_asymptotics(&l).unwrap().converges_to_delta_at_zero);
    let g0 = GaussianParams::new(dvector![1.0], dmatrix![1.0]).unwrap();
    let traj = gaussian_flow(&l, &g0, &FlowConfig::new(0.01, 10.0, 100).unwrap()).unwrap();
    // The mean grows even though the covariance still shrinks.
    assert!(traj.last().unwrap().1.mean()[0] > 1.0);
}

/// With B = beta Q and beta <= 1 the expected fitness never decreases along the flow.
#[test]
fn mean_fitness_rises_when_b_is_a_multiple_of_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for beta in [-1.0, 0.0, 0.5, 1.0] {
        let q = random_spd(&mut rng, 3, 0.5);
        let l = QuadBilinearLandscape::new(q.clone(), q * beta).unwrap();
        let g0 = random_gaussian(&mut rng, 3);
        let traj = gaussian_flow(&l, &g0, &FlowConfig::new(0.01, 20.0, 5).unwrap()).unwrap();
        let j = traj.diagnostic("J").unwrap();
        assert!(j.windows(2).all(|w| w[1] >= w[0] - 1e-12), "beta {beta}");
    }
}

#[test]
fn non_tangent_field_is_rejected_not_renormalised() {
    use repflow::flow_engine::integrate;
    let p0 = SimplexPoint::uniform(3);
    let err = integrate(|_: &SimplexPoint| Ok(vec![0.1, 0.0, 0.0]), &p0, &FlowConfig::new(0.01, 1.0, 1).unwrap())
        .unwrap_err();
    assert!(matches!(err, repflow::Error::NotInterior(_)), "{err:?}");
}
