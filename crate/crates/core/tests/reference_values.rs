//! Values frozen from independent computations.

use jumpflow::forward::{moment_estimate, simulate_paths, CoefficientSet, TimeGrid};
use jumpflow::harness::registry;
use jumpflow::measure::LevyMeasure;
use jumpflow::picard::{solve_fixed_point, PicardOptions};
use jumpflow::reflected::{apriori_bound_ratio, CALIBRATED_BOUND, CALIBRATION_FACTOR};

/// `E[sup_{j ≤ 20} |B_{t_j}|²]` on a 20-step grid over `[0, 0.1]`, from 10⁶ brute-force paths.
const SUP_SQUARE_REFERENCE: f64 = 0.15439;
const SUP_SQUARE_REFERENCE_ERROR: f64 = 0.00015;

fn brownian(horizon: f64, steps: usize, paths: usize) -> jumpflow::forward::PathBundle {
    let coeffs = CoefficientSet::scalar(|_, _| 0.0, |_, _| 1.0, |_, _, _| 0.0, 1.0);
    let grid = TimeGrid::new(0.0, horizon, steps).unwrap();
    simulate_paths(&coeffs, &LevyMeasure::empty(1), &[0.0], grid, paths, 2024).unwrap()
}

#[test]
fn running_maximum_of_squared_brownian_motion() {
    let est = moment_estimate(&brownian(0.1, 20, 200_000), 2, &[0.0]);
    let tol = 4.0 * est.std_error.hypot(SUP_SQUARE_REFERENCE_ERROR);
    assert!((est.value - SUP_SQUARE_REFERENCE).abs() < tol, "{est:?}");
}

#[test]
fn moment_scales_linearly_with_the_horizon() {
    let full = moment_estimate(&brownian(0.1, 20, 100_000), 2, &[0.0]).value;
    let half = moment_estimate(&brownian(0.05, 20, 100_000), 2, &[0.0]).value;
    let factor = full / half;
    assert!((factor - 2.0).abs() <= 0.5, "{factor}");
}

#[test]
fn bound_constant_matches_its_calibration() {
    let problem = registry::build("jumplinear1d", &Default::default()).unwrap();
    let mut largest: f64 = 0.0;
    for (k, x) in problem.probes.iter().enumerate() {
        let bundle = problem
            .simulate(x, 20, 10_000, jumpflow::rng::derive_seed(0, k as u64))
            .unwrap();
        let fp = solve_fixed_point(&problem.driver, &bundle, &PicardOptions::default()).unwrap();
        let ratio = apriori_bound_ratio(&fp.solution, &problem.driver, None, &bundle).unwrap().ratio;
        largest = largest.max(ratio);
    }
    let calibrated = (CALIBRATION_FACTOR * largest * 10.0).ceil() / 10.0;
    assert_eq!(calibrated, CALIBRATED_BOUND, "largest ratio {largest}");
}
