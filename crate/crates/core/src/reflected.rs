//! Lower-obstacle problems: reflected backward equations with jumps.
//!
//! The discrete solution is pushed up to the obstacle after every backward step,
//! `Y_j = max(ŷ_j, ℓ(t_j, X_j))`, and the push is recorded as `ΔK_j`. A penalized
//! variant replaces the max by the implicit update of `ŷ + (ℓ − Y)⁺ Δt / ε`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::bsde::{backward, jump_surrogate, BsdeSolution, Constraint, DriverArgs, DriverSpec, SolverOptions, ValueFunction};
use crate::forward::PathBundle;
use crate::picard::{solve_fixed_point_with, FixedPoint, PicardOptions};
use crate::{par, Error, Result};

pub type ObstacleFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Which ordering between `g` and `ℓ(T, ·)` is required at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatibilityRule {
    /// `g(x) ≥ ℓ(T, x)`.
    #[default]
    Standard,
    /// `ℓ(T, x) ≥ g(x)`.
    Reversed,
}

#[derive(Clone)]
pub struct ObstacleSpec {
    obstacle: ObstacleFn,
    pub rule: CompatibilityRule,
}

impl fmt::Debug for ObstacleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObstacleSpec").field("rule", &self.rule).finish_non_exhaustive()
    }
}

impl ObstacleSpec {
    pub fn new(obstacle: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ObstacleSpec {
            obstacle: Arc::new(obstacle),
            rule: CompatibilityRule::Standard,
        }
    }

    pub fn with_rule(mut self, rule: CompatibilityRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.obstacle)(t, x)
    }

    /// Checks the horizon ordering at the given points.
    pub fn check_compatibility<'a>(
        &self,
        driver: &DriverSpec,
        horizon: f64,
        points: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<()> {
        for x in points {
            let terminal = driver.g(0, x);
            let obstacle = self.value(horizon, x);
            let ok = match self.rule {
                CompatibilityRule::Standard => terminal >= obstacle,
                CompatibilityRule::Reversed => obstacle >= terminal,
            };
            if !ok {
                return Err(Error::Compatibility {
                    x: x.to_vec(),
                    terminal,
                    obstacle,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epsilon")]
pub enum ReflectionMode {
    Max,
    Penalty(f64),
}

/// A solution together with its nondecreasing process `K`.
#[derive(Debug, Clone)]
pub struct ReflectedSolution {
    solution: BsdeSolution,
    /// `[path · (N + 1) + step]`, with `K[·, 0] = 0`.
    k: Vec<f64>,
    pub mode: ReflectionMode,
}

impl AsRef<BsdeSolution> for ReflectedSolution {
    fn as_ref(&self) -> &BsdeSolution {
        &self.solution
    }
}

impl ReflectedSolution {
    pub fn solution(&self) -> &BsdeSolution {
        &self.solution
    }

    pub fn k(&self, path: usize, step: usize) -> f64 {
        self.k[path * (self.solution.steps() + 1) + step]
    }

    /// Push applied at node `step < N`.
    pub fn increment(&self, path: usize, step: usize) -> f64 {
        self.solution.reflection.as_ref().expect("reflected")[step * self.solution.n_paths() + path]
    }

    pub fn k_terminal(&self, path: usize) -> f64 {
        self.k(path, self.solution.steps())
    }

    pub fn k_stats(&self) -> KStats {
        let n = self.solution.steps();
        let mp = self.solution.n_paths();
        let mean = par::sum(mp, |p| self.k_terminal(p)) / mp as f64;
        let max = (0..mp).map(|p| self.k_terminal(p)).fold(0.0, f64::max);
        let active = par::sum(mp, |p| (0..n).filter(|&j| self.increment(p, j) > 0.0).count() as f64);
        KStats {
            mean_terminal: mean,
            max_terminal: max,
            activation_frequency: active / (mp * n) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KStats {
    pub mean_terminal: f64,
    pub max_terminal: f64,
    /// Fraction of `(path, step)` nodes with `ΔK > 0`.
    pub activation_frequency: f64,
}

pub fn solve_reflected(
    driver: &DriverSpec,
    obstacle: &ObstacleSpec,
    bundle: &PathBundle,
    frozen_u: Option<&ValueFunction>,
    options: &SolverOptions,
    mode: ReflectionMode,
) -> Result<ReflectedSolution> {
    let n = bundle.grid().steps();
    let horizon = bundle.grid().horizon();
    obstacle.check_compatibility(driver, horizon, (0..bundle.n_paths()).map(|p| bundle.state(p, n)))?;
    let ell = |t: f64, x: &[f64]| obstacle.value(t, x);
    let constraint = match mode {
        ReflectionMode::Max => Constraint::Reflect(&ell),
        ReflectionMode::Penalty(eps) => {
            if eps.is_nan() || eps <= 0.0 {
                return Err(Error::Config(format!("penalty epsilon must be positive, got {eps}")));
            }
            Constraint::Penalize(&ell, eps)
        }
    };
    let solution = backward(driver, bundle, frozen_u, options, constraint)?;
    let mp = bundle.n_paths();
    let dk = solution.reflection.as_ref().expect("constrained solve records pushes");
    let mut k = vec![0.0; mp * (n + 1)];
    for p in 0..mp {
        let row = &mut k[p * (n + 1)..(p + 1) * (n + 1)];
        for j in 0..n {
            row[j + 1] = row[j] + dk[j * mp + p];
        }
    }
    Ok(ReflectedSolution { solution, k, mode })
}

/// Fixed-point loop over the frozen nonlocal argument with the reflected inner solver.
pub fn solve_reflected_fixed_point(
    driver: &DriverSpec,
    obstacle: &ObstacleSpec,
    bundle: &PathBundle,
    options: &PicardOptions,
    mode: ReflectionMode,
) -> Result<FixedPoint<ReflectedSolution>> {
    solve_fixed_point_with(driver, bundle, options, |u| {
        solve_reflected(driver, obstacle, bundle, Some(u), &options.solver, mode)
    })
}

/// Worst violations of the discrete Skorokhod conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SkorokhodCheck {
    /// `min (Y_j − ℓ(t_j, X_j))`; nonnegative when the solution stays above the obstacle.
    pub min_gap: f64,
    /// `min ΔK_j`.
    pub min_push: f64,
    /// `max |(Y_j − ℓ_j) ΔK_j|`.
    pub max_product: f64,
}

impl SkorokhodCheck {
    pub fn exact(&self) -> bool {
        self.min_gap >= 0.0 && self.min_push >= 0.0 && self.max_product == 0.0
    }
}

pub fn skorokhod_check(solution: &ReflectedSolution, obstacle: &ObstacleSpec, bundle: &PathBundle) -> SkorokhodCheck {
    let sol = solution.solution();
    let n = sol.steps();
    let grid = *bundle.grid();
    let parts = par::map_chunks(sol.n_paths(), |r| {
        let mut c = SkorokhodCheck {
            min_gap: f64::INFINITY,
            min_push: f64::INFINITY,
            max_product: 0.0,
        };
        for p in r {
            for j in 0..=n {
                let gap = sol.y(p, j, 0) - obstacle.value(grid.node(j), bundle.state(p, j));
                c.min_gap = c.min_gap.min(gap);
                if j < n {
                    let push = solution.increment(p, j);
                    c.min_push = c.min_push.min(push);
                    c.max_product = c.max_product.max((gap * push).abs());
                }
            }
        }
        c
    });
    parts.into_iter().fold(
        SkorokhodCheck {
            min_gap: f64::INFINITY,
            min_push: f64::INFINITY,
            max_product: 0.0,
        },
        |a, b| SkorokhodCheck {
            min_gap: a.min_gap.min(b.min_gap),
            min_push: a.min_push.min(b.min_push),
            max_product: a.max_product.max(b.max_product),
        },
    )
}

/// Path average of `Σ_j (Y_j − ℓ(t_j, X_j)) ΔK_j`.
pub fn complementarity_residual(solution: &ReflectedSolution, obstacle: &ObstacleSpec, bundle: &PathBundle) -> f64 {
    let sol = solution.solution();
    let grid = *bundle.grid();
    let n = sol.steps();
    let mp = sol.n_paths();
    let total = par::sum(mp, |p| {
        (0..n)
            .map(|j| {
                let gap = sol.y(p, j, 0) - obstacle.value(grid.node(j), bundle.state(p, j));
                gap * solution.increment(p, j)
            })
            .sum::<f64>()
    });
    let residual = total / mp as f64;
    if solution.mode == ReflectionMode::Max {
        debug_assert_eq!(residual, 0.0);
    }
    residual
}

/// Safety factor over the ratio measured on the linear reference problem.
pub const CALIBRATION_FACTOR: f64 = 2.0;

/// Calibrated constant of the a priori estimate: [`CALIBRATION_FACTOR`] times the
/// largest ratio over the probes of `jumplinear1d` (10⁴ paths, 20 steps, seed 0),
/// rounded up to one decimal.
pub const CALIBRATED_BOUND: f64 = 4.8;

/// Left- and right-hand sides of the a priori estimate and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundRatio {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// `E[sup|Y|² + K_T² + Σ(|Z|² + ‖U‖²)Δt] / E[|g(X_T)|² + sup ℓ² + Σ|h(·, 0, 0, 0)|²Δt]`.
///
/// `U` is the surrogate `u(t_j, X_j + β) − u(t_j, X_j)` built from the solution's value function.
/// Without an obstacle the `K` and `ℓ` terms vanish.
pub fn apriori_bound_ratio(
    solution: &BsdeSolution,
    driver: &DriverSpec,
    obstacle: Option<&ObstacleSpec>,
    bundle: &PathBundle,
) -> Result<BoundRatio> {
    let grid = *bundle.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let mp = solution.n_paths();
    let m = solution.components();
    let d = bundle.brownian_dim();
    let na = bundle.measure().len();
    let weights: Vec<f64> = bundle.measure().weights().collect();
    let vf = solution.value_function();
    let zeros_y = vec![0.0; m];
    let zeros_z = vec![0.0; d];

    let sums = par::sum_vectors(mp, 2, |r, acc| {
        let mut surrogate = vec![0.0; na];
        for p in r {
            let mut sup_y = 0.0f64;
            let mut sup_l = 0.0f64;
            let mut integral = 0.0;
            let mut data = 0.0;
            let mut k_terminal = 0.0;
            for j in 0..=n {
                let x = bundle.state(p, j);
                let t = grid.node(j);
                let y2: f64 = (0..m).map(|i| solution.y(p, j, i).powi(2)).sum();
                sup_y = sup_y.max(y2);
                if let Some(o) = obstacle {
                    sup_l = sup_l.max(o.value(t, x).powi(2));
                }
                if j == n {
                    break;
                }
                for i in 0..m {
                    let z2: f64 = solution.z(p, j, i).iter().map(|v| v * v).sum();
                    let mut u2 = 0.0;
                    if na > 0 {
                        jump_surrogate(vf, bundle, j, t, x, i, &mut surrogate);
                        u2 = surrogate.iter().zip(&weights).map(|(u, w)| u * u * w).sum();
                    }
                    integral += (z2 + u2) * dt;
                    let h0 = driver.h(i, &DriverArgs { t, x, y: &zeros_y, z: &zeros_z, q: 0.0 });
                    data += h0 * h0 * dt;
                }
                if let Some(dk) = solution.reflection.as_ref() {
                    k_terminal += dk[j * mp + p];
                }
            }
            let xn = bundle.state(p, n);
            let g2: f64 = (0..m).map(|i| driver.g(i, xn).powi(2)).sum();
            acc[0] += sup_y + k_terminal * k_terminal + integral;
            acc[1] += g2 + sup_l + data;
        }
    });
    let lhs = sums[0] / mp as f64;
    let rhs = sums[1] / mp as f64;
    if rhs == 0.0 {
        if lhs == 0.0 {
            return Ok(BoundRatio { lhs, rhs, ratio: 0.0 });
        }
        return Err(Error::BoundFailure { lhs });
    }
    Ok(BoundRatio { lhs, rhs, ratio: lhs / rhs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_system, Targets};
    use crate::forward::{simulate_paths, CoefficientSet, TimeGrid};
    use crate::measure::LevyMeasure;
    use crate::nonlocal::WeightFamily;

    fn bundle(paths: usize) -> PathBundle {
        let coeffs = CoefficientSet::scalar(|_, _| 0.0, |_, _| 0.2, |_, _, e| e, 1.0);
        let measure = LevyMeasure::scalar(&[(-0.2, 0.5)]).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 20).unwrap();
        simulate_paths(&coeffs, &measure, &[1.0], grid, paths, 17).unwrap()
    }

    fn put_driver() -> DriverSpec {
        DriverSpec::scalar(
            |_, _, y, _, _| -0.05 * y,
            |x| (1.0 - x).max(0.0),
            WeightFamily::scalar(|_, _, _| 1.0, 1.0),
            0.05,
        )
    }

    #[test]
    fn inactive_obstacle_matches_free_solve() {
        let b = bundle(3000);
        let driver = put_driver();
        let low = ObstacleSpec::new(|_, _| -1e9);
        let opts = SolverOptions::default();
        let r = solve_reflected(&driver, &low, &b, None, &opts, ReflectionMode::Max).unwrap();
        let free = solve_system(&driver, &b, None, &opts).unwrap();
        for p in 0..b.n_paths() {
            assert_eq!(r.k_terminal(p), 0.0);
        }
        let (a, f) = (r.solution().start_value(0), free.start_value(0));
        assert!((a.value - f.value).abs() <= 3.0 * f.std_error, "{a:?} {f:?}");
        assert_eq!(complementarity_residual(&r, &low, &b), 0.0);
    }

    #[test]
    fn inactive_obstacle_with_fitted_targets_is_the_free_solve() {
        let b = bundle(3000);
        let driver = put_driver();
        let low = ObstacleSpec::new(|_, _| -1e9);
        let opts = SolverOptions { targets: Targets::Fitted, ..SolverOptions::default() };
        let r = solve_reflected(&driver, &low, &b, None, &opts, ReflectionMode::Max).unwrap();
        let free = solve_system(&driver, &b, None, &opts).unwrap();
        for p in 0..b.n_paths() {
            for j in 0..=b.grid().steps() {
                assert_eq!(r.solution().y(p, j, 0).to_bits(), free.y(p, j, 0).to_bits());
            }
        }
    }

    #[test]
    fn fitted_targets_are_monotone_in_the_obstacle() {
        let b = bundle(3000);
        let driver = DriverSpec::scalar(
            |_, _, _, _, _| 0.01,
            |x| (1.0 - x).max(0.0),
            WeightFamily::scalar(|_, _, _| 1.0, 1.0),
            0.0,
        );
        let opts = SolverOptions { degree: 0, targets: Targets::Fitted, ..SolverOptions::default() };
        let lo = ObstacleSpec::new(|_, x| (0.95 - x[0]).max(0.0));
        let hi = ObstacleSpec::new(|_, x| (1.0 - x[0]).max(0.0));
        let a = solve_reflected(&driver, &lo, &b, None, &opts, ReflectionMode::Max).unwrap();
        let c = solve_reflected(&driver, &hi, &b, None, &opts, ReflectionMode::Max).unwrap();
        for p in 0..b.n_paths() {
            for j in 0..=b.grid().steps() {
                assert!(c.solution().y(p, j, 0) >= a.solution().y(p, j, 0));
            }
        }
    }

    #[test]
    fn constant_data_sits_on_obstacle() {
        let b = bundle(2000);
        let driver = DriverSpec::scalar(
            |_, _, _, _, _| 0.0,
            |_| 0.7,
            WeightFamily::scalar(|_, _, _| 1.0, 1.0),
            0.0,
        );
        let obstacle = ObstacleSpec::new(|_, _| 0.7);
        let r = solve_reflected(&driver, &obstacle, &b, None, &SolverOptions::default(), ReflectionMode::Max).unwrap();
        for p in 0..b.n_paths() {
            assert!(r.k_terminal(p) < 1e-5, "{}", r.k_terminal(p));
            for j in 0..=b.grid().steps() {
                assert!((r.solution().y(p, j, 0) - 0.7).abs() < 1e-5);
            }
        }
        assert_eq!(complementarity_residual(&r, &obstacle, &b), 0.0);
    }

    #[test]
    fn skorokhod_conditions_are_exact() {
        let b = bundle(4000);
        let obstacle = ObstacleSpec::new(|_, x| (1.0 - x[0]).max(0.0));
        let r = solve_reflected(&put_driver(), &obstacle, &b, None, &SolverOptions::default(), ReflectionMode::Max).unwrap();
        let check = skorokhod_check(&r, &obstacle, &b);
        assert!(check.exact(), "{check:?}");
        assert!(r.k_stats().activation_frequency > 0.0);
        for p in 0..50 {
            for j in 0..b.grid().steps() {
                assert!(r.k(p, j + 1) >= r.k(p, j));
            }
            assert_eq!(r.k(p, 0), 0.0);
        }
        assert_eq!(complementarity_residual(&r, &obstacle, &b), 0.0);
    }

    #[test]
    fn incompatible_terminal_is_rejected() {
        let b = bundle(500);
        let obstacle = ObstacleSpec::new(|_, _| 5.0);
        let err = solve_reflected(&put_driver(), &obstacle, &b, None, &SolverOptions::default(), ReflectionMode::Max);
        assert!(matches!(err, Err(Error::Compatibility { .. })));
        let reversed = ObstacleSpec::new(|_, _| 5.0).with_rule(CompatibilityRule::Reversed);
        assert!(reversed
            .check_compatibility(&put_driver(), 0.5, [&[1.0][..], &[0.0][..]])
            .is_ok());
    }

    #[test]
    fn raising_the_obstacle_does_not_lower_the_value() {
        let b = bundle(3000);
        let driver = DriverSpec::scalar(
            |_, _, _, _, _| 0.01,
            |x| (1.0 - x).max(0.0),
            WeightFamily::scalar(|_, _, _| 1.0, 1.0),
            0.0,
        );
        let opts = SolverOptions::default();
        let lo = ObstacleSpec::new(|_, x| (0.95 - x[0]).max(0.0));
        let hi = ObstacleSpec::new(|_, x| (1.0 - x[0]).max(0.0));
        let a = solve_reflected(&driver, &lo, &b, None, &opts, ReflectionMode::Max).unwrap();
        let c = solve_reflected(&driver, &hi, &b, None, &opts, ReflectionMode::Max).unwrap();
        let (lo_v, hi_v) = (a.solution().start_value(0), c.solution().start_value(0));
        assert!(hi_v.value >= lo_v.value - 3.0 * lo_v.std_error, "{lo_v:?} {hi_v:?}");
        for p in 0..b.n_paths() {
            let x = b.state(p, 10);
            assert!(c.solution().y(p, 10, 0) >= (1.0 - x[0]).max(0.0));
        }
    }

    #[test]
    fn zero_data_gives_zero_ratio() {
        let b = bundle(500);
        let driver = DriverSpec::scalar(
            |_, _, _, _, _| 0.0,
            |_| 0.0,
            WeightFamily::scalar(|_, _, _| 1.0, 1.0),
            0.0,
        );
        let obstacle = ObstacleSpec::new(|_, _| 0.0);
        let r = solve_reflected(&driver, &obstacle, &b, None, &SolverOptions::default(), ReflectionMode::Max).unwrap();
        let ratio = apriori_bound_ratio(r.solution(), &driver, Some(&obstacle), &b).unwrap();
        assert_eq!(ratio.ratio, 0.0);
    }

    #[test]
    fn penalty_approaches_reflection() {
        let b = bundle(4000);
        let obstacle = ObstacleSpec::new(|_, x| (1.0 - x[0]).max(0.0));
        let opts = SolverOptions::default();
        let max = solve_reflected(&put_driver(), &obstacle, &b, None, &opts, ReflectionMode::Max).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3] {
            let pen = solve_reflected(&put_driver(), &obstacle, &b, None, &opts, ReflectionMode::Penalty(eps)).unwrap();
            let gap = (pen.solution().start_value(0).value - max.solution().start_value(0).value).abs();
            assert!(gap <= last + 1e-12);
            last = gap;
        }
        assert!(solve_reflected(&put_driver(), &obstacle, &b, None, &opts, ReflectionMode::Penalty(0.0)).is_err());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::bsde::Targets;
    use crate::forward::{simulate_paths, CoefficientSet, TimeGrid};
    use crate::measure::LevyMeasure;
    use crate::nonlocal::WeightFamily;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn skorokhod_holds_for_any_put_obstacle(
            strike in 0.8f64..1.2,
            rate in 0.0f64..0.2,
            fitted in any::<bool>(),
            seed in 0u64..1000,
        ) {
            let coeffs = CoefficientSet::scalar(|_, _| 0.0, |_, _| 0.2, |_, _, e| e, 1.0);
            let measure = LevyMeasure::scalar(&[(-0.2, 0.5)]).unwrap();
            let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
            let b = simulate_paths(&coeffs, &measure, &[1.0], grid, 600, seed).unwrap();
            let driver = DriverSpec::scalar(
                move |_, _, y, _, _| -rate * y,
                move |x| (strike - x).max(0.0),
                WeightFamily::scalar(|_, _, _| 1.0, 1.0),
                rate,
            );
            let obstacle = ObstacleSpec::new(move |_, x| (strike - x[0]).max(0.0));
            let targets = if fitted { Targets::Fitted } else { Targets::Cashflow };
            let opts = SolverOptions { targets, ..SolverOptions::default() };
            let r = solve_reflected(&driver, &obstacle, &b, None, &opts, ReflectionMode::Max).unwrap();
            prop_assert!(skorokhod_check(&r, &obstacle, &b).exact());
            prop_assert_eq!(complementarity_residual(&r, &obstacle, &b), 0.0);
        }
    }
}
