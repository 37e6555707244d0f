//! Fixed-point iteration over the frozen nonlocal argument.
//!
//! Starting from `u⁰`, each iterate solves the system with `q` built from the
//! previous value function. Distances between successive iterates are measured
//! in the exponentially weighted norm
//!
//! ```text
//! ‖(y, v)‖²_α = E Σ_j e^{α t_j} (|y_j|² + Σ_a v_j(a)² w_a) Δt
//! ```
//!
//! with `v_j(a) = u(t_j, X_j + β(e_a)) − u(t_j, X_j)`.

use serde::Serialize;

use crate::bsde::{jump_surrogate, solve_system, BsdeSolution, DriverSpec, SolverOptions, ValueFunction};
use crate::forward::{PathBundle, TimeGrid};
use crate::{par, Error, Result};

/// Paths whose states form the probe set for the sup-norm stopping test.
const PROBE_PATHS: usize = 256;

#[derive(Debug, Clone, Serialize)]
pub struct PicardDiagnostics {
    pub iterations: usize,
    pub alpha: f64,
    /// α-norm distance between iterate `n` and `n − 1`.
    pub deltas: Vec<f64>,
    /// Sup-norm distance of value functions on the probe set.
    pub sup_deltas: Vec<f64>,
    /// `deltas[n] / deltas[n − 1]`.
    pub ratios: Vec<f64>,
}

impl PicardDiagnostics {
    /// Median of the contraction ratios from the third iterate on (all ratios if fewer).
    pub fn median_ratio(&self) -> Option<f64> {
        let tail = if self.ratios.len() > 1 { &self.ratios[1..] } else { &self.ratios[..] };
        let mut r: Vec<f64> = tail.iter().copied().filter(|v| v.is_finite()).collect();
        if r.is_empty() {
            return None;
        }
        r.sort_by(f64::total_cmp);
        let n = r.len();
        Some(if n % 2 == 1 { r[n / 2] } else { 0.5 * (r[n / 2 - 1] + r[n / 2]) })
    }
}

/// Pathwise pair `(y, v)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PairField {
    pub n_paths: usize,
    pub steps: usize,
    pub components: usize,
    pub atoms: usize,
    /// `[(step · M + path) · m + i]`, steps `0..N`.
    pub y: Vec<f64>,
    /// `[((step · M + path) · m + i) · atoms + a]`.
    pub v: Vec<f64>,
}

impl PairField {
    pub fn zeros(n_paths: usize, steps: usize, components: usize, atoms: usize) -> Self {
        let w = steps * n_paths * components;
        PairField {
            n_paths,
            steps,
            components,
            atoms,
            y: vec![0.0; w],
            v: vec![0.0; w * atoms],
        }
    }

    /// `y` from the solution and `v` from the surrogate of its value function.
    pub fn from_solution(solution: &BsdeSolution, bundle: &PathBundle) -> Self {
        let (mp, n, m) = (solution.n_paths(), solution.steps(), solution.components());
        let na = bundle.measure().len();
        let mut out = PairField::zeros(mp, n, m, na);
        let grid = *bundle.grid();
        let vf = solution.value_function();
        for j in 0..n {
            let w = mp * m;
            let ys = &mut out.y[j * w..(j + 1) * w];
            par::fill_chunks(ys, m, |r, slice| {
                for (row, p) in r.enumerate() {
                    for i in 0..m {
                        slice[row * m + i] = solution.y(p, j, i);
                    }
                }
            });
            if na > 0 {
                let t = grid.node(j);
                let vs = &mut out.v[j * w * na..(j + 1) * w * na];
                par::fill_chunks(vs, m * na, |r, slice| {
                    for (row, p) in r.enumerate() {
                        let x = bundle.state(p, j);
                        for i in 0..m {
                            let at = (row * m + i) * na;
                            jump_surrogate(vf, bundle, j, t, x, i, &mut slice[at..at + na]);
                        }
                    }
                });
            }
        }
        out
    }

    pub fn sub(&self, other: &PairField) -> PairField {
        assert_eq!(self.y.len(), other.y.len());
        assert_eq!(self.v.len(), other.v.len());
        PairField {
            y: self.y.iter().zip(&other.y).map(|(a, b)| a - b).collect(),
            v: self.v.iter().zip(&other.v).map(|(a, b)| a - b).collect(),
            ..*self
        }
    }
}

impl PairField {
    fn clone_shape(&self) -> (usize, usize, usize, usize) {
        (self.n_paths, self.steps, self.components, self.atoms)
    }
}

/// `‖(y, v)‖_α` with atom weights `weights`.
pub fn alpha_norm(field: &PairField, weights: &[f64], alpha: f64, grid: &TimeGrid) -> f64 {
    let (mp, n, m, na) = field.clone_shape();
    assert_eq!(weights.len(), na);
    assert_eq!(n, grid.steps());
    let dt = grid.dt();
    let mut total = 0.0;
    for j in 0..n {
        let discount = (alpha * grid.node(j)).exp();
        let s = par::sum(mp, |p| {
            let mut acc = 0.0;
            for i in 0..m {
                let at = (j * mp + p) * m + i;
                acc += field.y[at].powi(2);
                for (a, w) in weights.iter().enumerate() {
                    acc += field.v[at * na + a].powi(2) * w;
                }
            }
            acc
        });
        total += discount * s * dt;
    }
    (total / mp as f64).sqrt()
}

/// `α = 2 C² (1 + λ(E) C_β²)`.
pub fn default_alpha(driver: &DriverSpec, bundle: &PathBundle) -> f64 {
    let c = driver.lipschitz_bound;
    let cb = bundle.coefficients().lipschitz_bound;
    2.0 * c * c * (1.0 + bundle.measure().total_mass() * cb * cb)
}

/// One frozen solve: the value function of the system with `q` built from `u_prev`.
pub fn iterate(
    driver: &DriverSpec,
    bundle: &PathBundle,
    u_prev: &ValueFunction,
    options: &SolverOptions,
) -> Result<ValueFunction> {
    Ok(solve_system(driver, bundle, Some(u_prev), options)?.value_function().clone())
}

#[derive(Debug, Clone)]
pub struct PicardOptions {
    /// `None` selects [`default_alpha`].
    pub alpha: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub solver: SolverOptions,
    /// Starting function; `u ≡ 0` when `None`.
    pub initial: Option<ValueFunction>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            alpha: None,
            tol: 1e-6,
            max_iter: 30,
            solver: SolverOptions::default(),
            initial: None,
        }
    }
}

/// Result of a converged fixed-point loop.
#[derive(Debug, Clone)]
pub struct FixedPoint<S> {
    pub solution: S,
    pub diagnostics: PicardDiagnostics,
}

impl<S: AsRef<BsdeSolution>> FixedPoint<S> {
    pub fn value_function(&self) -> &ValueFunction {
        self.solution.as_ref().value_function()
    }
}

/// Iterates [`iterate`] from `u⁰` until both the α-norm and the sup-norm deltas fall below `tol`.
pub fn solve_fixed_point(
    driver: &DriverSpec,
    bundle: &PathBundle,
    options: &PicardOptions,
) -> Result<FixedPoint<BsdeSolution>> {
    solve_fixed_point_with(driver, bundle, options, |u| {
        solve_system(driver, bundle, Some(u), &options.solver)
    })
}

/// Fixed-point loop around an arbitrary frozen inner solver.
pub fn solve_fixed_point_with<S, F>(
    driver: &DriverSpec,
    bundle: &PathBundle,
    options: &PicardOptions,
    inner: F,
) -> Result<FixedPoint<S>>
where
    S: AsRef<BsdeSolution>,
    F: Fn(&ValueFunction) -> Result<S>,
{
    if options.tol.is_nan() || options.tol <= 0.0 || options.max_iter == 0 {
        return Err(Error::Config("fixed-point loop needs tol > 0 and max_iter ≥ 1".into()));
    }
    let grid = *bundle.grid();
    let m = driver.components();
    let alpha = options.alpha.unwrap_or_else(|| default_alpha(driver, bundle));
    let weights: Vec<f64> = bundle.measure().weights().collect();
    let probes: Vec<usize> = (0..bundle.n_paths().min(PROBE_PATHS)).collect();

    let mut u = options
        .initial
        .clone()
        .unwrap_or_else(|| ValueFunction::zero(grid, m));
    let mut prev_field = None::<PairField>;
    let mut diag = PicardDiagnostics {
        iterations: 0,
        alpha,
        deltas: Vec::new(),
        sup_deltas: Vec::new(),
        ratios: Vec::new(),
    };

    for _ in 0..options.max_iter {
        let solution = inner(&u)?;
        let sol = solution.as_ref();
        let field = PairField::from_solution(sol, bundle);
        let prev = prev_field.take().unwrap_or_else(|| {
            let mut f = PairField::zeros(sol.n_paths(), sol.steps(), m, weights.len());
            fill_from_function(&mut f, &u, bundle);
            f
        });
        let delta = alpha_norm(&field.sub(&prev), &weights, alpha, &grid);
        let sup = sup_distance(sol.value_function(), &u, bundle, &probes);
        if let Some(&last) = diag.deltas.last() {
            diag.ratios.push(if last > 0.0 { delta / last } else { 0.0 });
        }
        diag.deltas.push(delta);
        diag.sup_deltas.push(sup);
        diag.iterations += 1;
        if delta < options.tol && sup < options.tol {
            return Ok(FixedPoint {
                solution,
                diagnostics: diag,
            });
        }
        u = sol.value_function().clone();
        prev_field = Some(field);
    }
    Err(Error::NotConverged {
        iterations: diag.iterations,
        last_delta: diag.deltas.last().copied().unwrap_or(f64::NAN),
        diagnostics: Box::new(diag),
    })
}

fn fill_from_function(field: &mut PairField, u: &ValueFunction, bundle: &PathBundle) {
    let (mp, n, m, na) = field.clone_shape();
    let grid = *bundle.grid();
    let mut surrogate = vec![0.0; na];
    for j in 0..n {
        let t = grid.node(j);
        for p in 0..mp {
            let x = bundle.state(p, j);
            for i in 0..m {
                let at = (j * mp + p) * m + i;
                field.y[at] = u.at_step(j, x, i);
                if na > 0 {
                    jump_surrogate(u, bundle, j, t, x, i, &mut surrogate);
                    field.v[at * na..(at + 1) * na].copy_from_slice(&surrogate);
                }
            }
        }
    }
}

fn sup_distance(a: &ValueFunction, b: &ValueFunction, bundle: &PathBundle, probes: &[usize]) -> f64 {
    let n = bundle.grid().steps();
    let m = a.components();
    let mut sup = 0.0f64;
    for j in 0..=n {
        for &p in probes {
            let x = bundle.state(p, j);
            for i in 0..m {
                sup = sup.max((a.at_step(j, x, i) - b.at_step(j, x, i)).abs());
            }
        }
    }
    sup
}
