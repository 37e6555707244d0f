//! One-dimensional finite-difference solver for the nonlocal equation.
//!
//! Backward IMEX stepping on a uniform grid: the local operator
//! `−b̃ ∂x − ½σ² ∂xx` with `b̃ = b − Σ_a w_a β_a` is implicit, the jump difference
//! `Σ_a w_a (u(x + β_a) − u(x))` and the driver `h(t, x, u, σ ∂x u, B u)` are explicit.
//! Values outside the grid are linearly extrapolated.

use std::io::Write;

use serde::Serialize;

use crate::bsde::{DriverArgs, ValueFunction};
use crate::problem::ProblemSpec;
use crate::reflected::ObstacleSpec;
use crate::{Error, Result};

/// Uniform grid on `[x_min, x_max]` with linear extrapolation at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpatialGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nodes: usize,
}

impl SpatialGrid {
    pub fn new(x_min: f64, x_max: f64, nodes: usize) -> Result<Self> {
        if x_min >= x_max || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::InvalidGrid(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if nodes < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 nodes, got {nodes}")));
        }
        Ok(SpatialGrid { x_min, x_max, nodes })
    }

    /// `x₀ ± 6` standard deviations of the forward process plus the largest jump.
    pub fn around(problem: &ProblemSpec, x0: f64, nodes: usize) -> Result<Self> {
        let t = problem.t_start;
        let x = [x0];
        let mut s = [0.0];
        problem.coefficients.diffusion(t, &x, &mut s);
        let mut jb = [0.0];
        let mut jump_var = 0.0;
        let mut max_jump = 0.0f64;
        for atom in problem.measure.atoms() {
            problem.coefficients.jump(t, &x, &atom.mark, &mut jb);
            jump_var += atom.weight * jb[0] * jb[0];
            max_jump = max_jump.max(jb[0].abs());
        }
        let mut b = [0.0];
        problem.coefficients.drift(t, &x, &mut b);
        let span = problem.horizon - problem.t_start;
        let half = 6.0 * ((s[0] * s[0] + jump_var) * span).sqrt() + b[0].abs() * span + max_jump;
        let half = if half > 0.0 { half } else { 1.0 };
        Self::new(x0 - half, x0 + half, nodes)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nodes - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    /// The grid with every cell halved.
    pub fn refined(&self) -> Self {
        SpatialGrid {
            nodes: 2 * self.nodes - 1,
            ..*self
        }
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x - self.x_min) / self.dx();
        let i = (s.floor() as isize).clamp(0, self.nodes as isize - 2) as usize;
        (i, s - i as f64)
    }

    /// Piecewise-linear interpolation with linear extrapolation.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (i, w) = self.locate(x);
        values[i] + w * (values[i + 1] - values[i])
    }
}

/// Which interpolant the nonlocal terms are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlocalArgument {
    /// The piecewise-linear interpolant of the discrete solution.
    #[default]
    Solution,
    /// A natural cubic spline through the discrete solution, a smooth test function touching it at the nodes.
    TestFunction,
}

enum Interpolant<'a> {
    Linear(&'a [f64]),
    Spline { values: &'a [f64], second: Vec<f64> },
}

impl<'a> Interpolant<'a> {
    fn build(kind: NonlocalArgument, grid: &SpatialGrid, values: &'a [f64]) -> Self {
        match kind {
            NonlocalArgument::Solution => Interpolant::Linear(values),
            NonlocalArgument::TestFunction => {
                let n = values.len();
                let h2 = grid.dx() * grid.dx();
                let mut second = vec![0.0; n];
                let inner = n - 2;
                let sub = vec![1.0; inner];
                let diag = vec![4.0; inner];
                let sup = vec![1.0; inner];
                let rhs: Vec<f64> = (1..n - 1)
                    .map(|i| 6.0 * (values[i + 1] - 2.0 * values[i] + values[i - 1]) / h2)
                    .collect();
                second[1..n - 1].copy_from_slice(&solve_tridiagonal(&sub, &diag, &sup, &rhs));
                Interpolant::Spline { values, second }
            }
        }
    }

    fn eval(&self, grid: &SpatialGrid, x: f64) -> f64 {
        match self {
            Interpolant::Linear(v) => grid.interpolate(v, x),
            Interpolant::Spline { values, second } => {
                let h = grid.dx();
                let n = values.len();
                if x < grid.x_min {
                    let slope = (values[1] - values[0]) / h - h * (2.0 * second[0] + second[1]) / 6.0;
                    return values[0] + slope * (x - grid.x_min);
                }
                if x > grid.x_max {
                    let slope = (values[n - 1] - values[n - 2]) / h + h * (second[n - 2] + 2.0 * second[n - 1]) / 6.0;
                    return values[n - 1] + slope * (x - grid.x_max);
                }
                let (i, w) = grid.locate(x);
                let a = 1.0 - w;
                a * values[i]
                    + w * values[i + 1]
                    + h * h / 6.0 * ((a * a * a - a) * second[i] + (w * w * w - w) * second[i + 1])
            }
        }
    }
}

/// Thomas algorithm; `sub[0]` and `sup[n − 1]` are ignored.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * c[i - 1];
        c[i] = if i + 1 < n { sup[i] / m } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Values on the space-time grid for every component.
#[derive(Debug, Clone)]
pub struct GridSolution {
    pub grid: SpatialGrid,
    pub t_start: f64,
    pub horizon: f64,
    pub time_steps: usize,
    pub components: usize,
    /// `[(i · (time_steps + 1) + n) · nodes + node]`.
    values: Vec<f64>,
}

impl GridSolution {
    pub fn dt(&self) -> f64 {
        (self.horizon - self.t_start) / self.time_steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.time_steps {
            self.horizon
        } else {
            self.t_start + n as f64 * self.dt()
        }
    }

    pub fn row(&self, i: usize, n: usize) -> &[f64] {
        let nx = self.grid.nodes;
        let at = (i * (self.time_steps + 1) + n) * nx;
        &self.values[at..at + nx]
    }

    /// Linear interpolation in space and time.
    pub fn value(&self, i: usize, t: f64, x: f64) -> f64 {
        let s = ((t - self.t_start) / self.dt()).clamp(0.0, self.time_steps as f64);
        let n = (s.floor() as usize).min(self.time_steps.saturating_sub(1));
        let w = s - n as f64;
        let a = self.grid.interpolate(self.row(i, n), x);
        if w == 0.0 {
            return a;
        }
        let b = self.grid.interpolate(self.row(i, n + 1), x);
        a + w * (b - a)
    }

    pub fn start_value(&self, i: usize, x: f64) -> f64 {
        self.grid.interpolate(self.row(i, 0), x)
    }

    /// Writes `t,x,u_0,…` rows keeping every `stride`-th time step and node.
    pub fn write_csv<W: Write>(&self, mut out: W, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let header: Vec<String> = (0..self.components).map(|i| format!("u{i}")).collect();
        writeln!(out, "t,x,{}", header.join(","))?;
        let mut steps: Vec<usize> = (0..=self.time_steps).step_by(stride).collect();
        if steps.last() != Some(&self.time_steps) {
            steps.push(self.time_steps);
        }
        for n in steps {
            for node in (0..self.grid.nodes).step_by(stride) {
                let vals: Vec<String> = (0..self.components)
                    .map(|i| format!("{:.12e}", self.row(i, n)[node]))
                    .collect();
                writeln!(out, "{:.12e},{:.12e},{}", self.time(n), self.grid.node(node), vals.join(","))?;
            }
        }
        Ok(())
    }

    /// A value function reading this grid at the nodes of `time_grid`.
    pub fn as_value_function(&self, time_grid: crate::forward::TimeGrid) -> ValueFunction {
        let me = self.clone();
        ValueFunction::from_fn(time_grid, self.components, move |t, x, i| me.value(i, t, x[0]))
    }
}

pub fn solve_pide(problem: &ProblemSpec, grid: SpatialGrid, time_steps: usize) -> Result<GridSolution> {
    solve_pide_with(problem, grid, time_steps, NonlocalArgument::Solution, None)
}

pub fn solve_pide_obstacle(
    problem: &ProblemSpec,
    obstacle: &ObstacleSpec,
    grid: SpatialGrid,
    time_steps: usize,
) -> Result<GridSolution> {
    solve_pide_with(problem, grid, time_steps, NonlocalArgument::Solution, Some(obstacle))
}

/// Full-control entry point: choice of nonlocal argument and optional projection onto `u ≥ ℓ`.
pub fn solve_pide_with(
    problem: &ProblemSpec,
    grid: SpatialGrid,
    time_steps: usize,
    argument: NonlocalArgument,
    obstacle: Option<&ObstacleSpec>,
) -> Result<GridSolution> {
    if problem.state_dim() != 1 || problem.brownian_dim() != 1 {
        return Err(Error::Config("the grid solver handles one state and one Brownian dimension".into()));
    }
    if time_steps == 0 {
        return Err(Error::InvalidGrid("at least one time step required".into()));
    }
    let nx = grid.nodes;
    let m = problem.components();
    let coeffs = &problem.coefficients;
    let measure = &problem.measure;
    let driver = &problem.driver;
    let xs: Vec<f64> = (0..nx).map(|i| grid.node(i)).collect();
    let dx = grid.dx();
    let dt = (problem.horizon - problem.t_start) / time_steps as f64;
    let time = |n: usize| {
        if n == time_steps {
            problem.horizon
        } else {
            problem.t_start + n as f64 * dt
        }
    };

    let mut gamma_sup = 0.0f64;
    for &x in &xs {
        for atom in measure.atoms() {
            for i in 0..m {
                gamma_sup = gamma_sup.max(driver.weights.eval(i, problem.t_start, &[x], &atom.mark).abs());
            }
        }
    }
    let lh = driver.lipschitz_bound;
    let cfl = dt * (measure.total_mass() * (1.0 + gamma_sup) * lh + lh);
    if cfl > 1.0 {
        return Err(Error::Stability(format!(
            "explicit nonlocal step has Δt·(λ(E)(1 + ‖γ‖∞)L_h + L_h) = {cfl:.3} > 1; use more time steps"
        )));
    }

    let stride = (time_steps + 1) * nx;
    let mut values = vec![0.0; m * stride];
    for i in 0..m {
        let row = &mut values[i * stride + time_steps * nx..i * stride + (time_steps + 1) * nx];
        for (v, &x) in row.iter_mut().zip(&xs) {
            *v = driver.g(i, &[x]);
            if !v.is_finite() {
                return Err(Error::Driver { component: i, step: time_steps });
            }
        }
    }

    let na = measure.len();
    let mut shifted = vec![0.0; nx * na];
    let mut gammas = vec![0.0; m * nx * na];
    let mut sub = vec![0.0; nx - 2];
    let mut diag = vec![0.0; nx - 2];
    let mut sup = vec![0.0; nx - 2];
    let mut rhs = vec![0.0; nx - 2];
    let mut explicit = vec![0.0; m * nx];
    let mut u_here = vec![0.0; m];
    let mut z = [0.0];
    let mut buf = [0.0];

    for n in (0..time_steps).rev() {
        let t_next = time(n + 1);
        let t_now = time(n);
        for (node, &x) in xs.iter().enumerate() {
            for (a, atom) in measure.atoms().iter().enumerate() {
                coeffs.jump(t_next, &[x], &atom.mark, &mut buf);
                shifted[node * na + a] = x + buf[0];
                for i in 0..m {
                    gammas[(i * nx + node) * na + a] = driver.weights.eval(i, t_next, &[x], &atom.mark);
                }
            }
        }
        {
            let rows: Vec<&[f64]> = (0..m)
                .map(|i| &values[i * stride + (n + 1) * nx..i * stride + (n + 2) * nx])
                .collect();
            let interps: Vec<Interpolant<'_>> = rows.iter().map(|r| Interpolant::build(argument, &grid, r)).collect();
            for (node, &x) in xs.iter().enumerate() {
                for i in 0..m {
                    u_here[i] = rows[i][node];
                }
                let mut sig = [0.0];
                coeffs.diffusion(t_next, &[x], &mut sig);
                for i in 0..m {
                    let u = rows[i];
                    let grad = if node == 0 {
                        (u[1] - u[0]) / dx
                    } else if node == nx - 1 {
                        (u[nx - 1] - u[nx - 2]) / dx
                    } else {
                        (u[node + 1] - u[node - 1]) / (2.0 * dx)
                    };
                    z[0] = sig[0] * grad;
                    let mut jump = 0.0;
                    let mut b_op = 0.0;
                    if na > 0 {
                        let base = interps[i].eval(&grid, x);
                        for (a, w) in measure.weights().enumerate() {
                            let diff = interps[i].eval(&grid, shifted[node * na + a]) - base;
                            jump += w * diff;
                            b_op += w * gammas[(i * nx + node) * na + a] * diff;
                        }
                    }
                    let h = driver.h(i, &DriverArgs { t: t_next, x: &[x], y: &u_here, z: &z, q: b_op });
                    if !h.is_finite() {
                        return Err(Error::Driver { component: i, step: n });
                    }
                    explicit[i * nx + node] = u[node] + dt * (jump + h);
                }
            }
        }

        for (k, &x) in xs.iter().enumerate().take(nx - 1).skip(1) {
            let mut b = [0.0];
            let mut s = [0.0];
            coeffs.drift(t_now, &[x], &mut b);
            coeffs.diffusion(t_now, &[x], &mut s);
            let mut drift = b[0];
            for atom in measure.atoms() {
                coeffs.jump(t_now, &[x], &atom.mark, &mut buf);
                drift -= atom.weight * buf[0];
            }
            let diff = 0.5 * s[0] * s[0];
            let (mut lo, mut mid, mut hi) = (diff / (dx * dx), -2.0 * diff / (dx * dx), diff / (dx * dx));
            if drift.abs() * dx <= 2.0 * diff {
                lo -= drift / (2.0 * dx);
                hi += drift / (2.0 * dx);
            } else if drift > 0.0 {
                mid -= drift / dx;
                hi += drift / dx;
            } else {
                lo -= drift / dx;
                mid += drift / dx;
            }
            let r = k - 1;
            sub[r] = -dt * lo;
            diag[r] = 1.0 - dt * mid;
            sup[r] = -dt * hi;
        }
        // v_0 = 2 v_1 − v_2 and v_{nx−1} = 2 v_{nx−2} − v_{nx−3}
        let last = nx - 3;
        if nx == 3 {
            diag[0] += 2.0 * sub[0] + 2.0 * sup[0];
            sub[0] = 0.0;
            sup[0] = 0.0;
        } else {
            diag[0] += 2.0 * sub[0];
            sup[0] -= sub[0];
            sub[0] = 0.0;
            diag[last] += 2.0 * sup[last];
            sub[last] -= sup[last];
            sup[last] = 0.0;
        }

        for i in 0..m {
            rhs.copy_from_slice(&explicit[i * nx + 1..i * nx + nx - 1]);
            let inner = solve_tridiagonal(&sub, &diag, &sup, &rhs);
            let row = &mut values[i * stride + n * nx..i * stride + (n + 1) * nx];
            row[1..nx - 1].copy_from_slice(&inner);
            row[0] = 2.0 * row[1] - row[2];
            row[nx - 1] = 2.0 * row[nx - 2] - row[nx - 3];
            if let Some(o) = obstacle {
                for (v, &x) in row.iter_mut().zip(&xs) {
                    *v = v.max(o.value(t_now, &[x]));
                }
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Stability(format!("non-finite grid value at time step {n}")));
            }
        }
    }

    Ok(GridSolution {
        grid,
        t_start: problem.t_start,
        horizon: problem.horizon,
        time_steps,
        components: m,
        values,
    })
}

/// Two-resolution self-consistency study at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Refinement {
    pub coarse: f64,
    pub fine: f64,
    /// `2 · fine − coarse`, the first-order extrapolation.
    pub extrapolated: f64,
    /// `|fine − coarse| / |fine|`.
    pub error_bar: f64,
}

impl Refinement {
    pub fn from_values(coarse: f64, fine: f64) -> Self {
        let scale = fine.abs().max(f64::MIN_POSITIVE);
        Refinement {
            coarse,
            fine,
            extrapolated: 2.0 * fine - coarse,
            error_bar: (fine - coarse).abs() / scale,
        }
    }
}

/// Solves on `(grid, time_steps)` and on the grid with halved cells and doubled steps,
/// returning the fine solution and the study at `(t_start, x)` for component `i`.
pub fn refinement_study(
    problem: &ProblemSpec,
    grid: SpatialGrid,
    time_steps: usize,
    argument: NonlocalArgument,
    obstacle: Option<&ObstacleSpec>,
    x: f64,
    i: usize,
) -> Result<(GridSolution, Refinement)> {
    let coarse = solve_pide_with(problem, grid, time_steps, argument, obstacle)?;
    let fine = solve_pide_with(problem, grid.refined(), 2 * time_steps, argument, obstacle)?;
    let study = Refinement::from_values(coarse.start_value(i, x), fine.start_value(i, x));
    Ok((fine, study))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeError {
    pub x: Vec<f64>,
    pub component: usize,
    pub estimate: f64,
    pub reference: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub max_rel_error: f64,
    pub rms_rel_error: f64,
    pub probes: Vec<ProbeError>,
}

impl ErrorReport {
    pub fn from_pairs(rows: Vec<ProbeError>) -> Self {
        let max = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        let rms = if rows.is_empty() {
            0.0
        } else {
            (rows.iter().map(|r| r.rel_error * r.rel_error).sum::<f64>() / rows.len() as f64).sqrt()
        };
        ErrorReport {
            max_rel_error: max,
            rms_rel_error: rms,
            probes: rows,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,component,estimate,reference,abs_error,rel_error")?;
        for r in &self.probes {
            let x: Vec<String> = r.x.iter().map(|v| format!("{v}")).collect();
            writeln!(
                out,
                "{},{},{:.12e},{:.12e},{:.6e},{:.6e}",
                x.join(" "),
                r.component,
                r.estimate,
                r.reference,
                r.abs_error,
                r.rel_error
            )?;
        }
        Ok(())
    }
}

pub fn probe_error(x: &[f64], component: usize, estimate: f64, reference: f64) -> ProbeError {
    let abs_error = (estimate - reference).abs();
    let scale = reference.abs().max(1e-12);
    ProbeError {
        x: x.to_vec(),
        component,
        estimate,
        reference,
        abs_error,
        rel_error: abs_error / scale,
    }
}

/// Relative errors of `value_function` against `grid_solution` at time `t` and the given points.
pub fn compare(value_function: &ValueFunction, grid_solution: &GridSolution, probes: &[Vec<f64>], t: f64) -> ErrorReport {
    let t_node = value_function.grid().node(value_function.grid().nearest(t));
    let mut rows = Vec::new();
    for x in probes {
        for i in 0..value_function.components() {
            let est = value_function.evaluate(t, x, i);
            let reference = grid_solution.value(i, t_node, x[0]);
            rows.push(probe_error(x, i, est, reference));
        }
    }
    ErrorReport::from_pairs(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::DriverSpec;
    use crate::forward::{CoefficientSet, TimeGrid};
    use crate::measure::LevyMeasure;
    use crate::nonlocal::WeightFamily;

    fn problem(
        sigma: f64,
        atoms: &[(f64, f64)],
        h: impl Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        gamma: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        lh: f64,
        horizon: f64,
    ) -> ProblemSpec {
        ProblemSpec {
            name: "test".into(),
            coefficients: CoefficientSet::scalar(|_, _| 0.0, move |_, _| sigma, |_, _, e| e, 1.0),
            measure: LevyMeasure::scalar(atoms).unwrap(),
            driver: DriverSpec::scalar(h, g, WeightFamily::scalar(gamma, 1.0), lh),
            obstacle: None,
            t_start: 0.0,
            horizon,
            probes: vec![vec![1.0]],
            degree: 3,
        }
    }

    #[test]
    fn linear_terminal_is_exact() {
        let p = problem(1.0, &[], |_, _, _, _, _| 0.0, |x| x, |_, _, _| 1.0, 0.0, 1.0);
        let grid = SpatialGrid::new(-3.0, 3.0, 61).unwrap();
        let sol = solve_pide(&p, grid, 50).unwrap();
        for n in 0..=50 {
            for (k, v) in sol.row(0, n).iter().enumerate() {
                assert!((v - grid.node(k)).abs() < 1e-6);
            }
        }
        let q = problem(0.0, &[(1.0, 1.0)], |_, _, _, _, _| 0.0, |x| x, |_, _, _| 1.0, 0.0, 1.0);
        let sol = solve_pide(&q, SpatialGrid::around(&q, 0.0, 101).unwrap(), 40).unwrap();
        assert!((sol.start_value(0, 0.37) - 0.37).abs() < 1e-6);
    }

    #[test]
    fn constant_driver_is_exact() {
        let p = problem(1.0, &[], |_, _, _, _, _| 0.3, |x| x, |_, _, _| 1.0, 0.0, 1.0);
        let grid = SpatialGrid::new(-3.0, 3.0, 61).unwrap();
        let sol = solve_pide(&p, grid, 50).unwrap();
        for n in 0..=50 {
            let t = sol.time(n);
            assert!((sol.value(0, t, 0.5) - (0.5 + 0.3 * (1.0 - t))).abs() < 1e-6);
        }
    }

    fn bachelier_with_jump(x: f64, strike: f64, sigma: f64, e: f64, w: f64, r: f64, horizon: f64) -> f64 {
        let cdf = |d: f64| 0.5 * libm::erfc(-d / std::f64::consts::SQRT_2);
        let pdf = |d: f64| (-0.5 * d * d).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let s = sigma * horizon.sqrt();
        let lt = w * horizon;
        let mut total = 0.0;
        let mut pois = (-lt).exp();
        for n in 0..60 {
            if n > 0 {
                pois *= lt / n as f64;
            }
            let mean = x + n as f64 * e - lt * e;
            let d = (mean - strike) / s;
            total += pois * ((mean - strike) * cdf(d) + s * pdf(d));
        }
        (-r * horizon).exp() * total
    }

    #[test]
    fn matches_closed_form_call_with_jumps() {
        let p = problem(0.2, &[(0.3, 1.0)], |_, _, y, _, _| -0.05 * y, |x| (x - 1.0).max(0.0), |_, _, _| 1.0, 0.05, 0.5);
        let grid = SpatialGrid::around(&p, 1.0, 801).unwrap();
        let (_, study) = refinement_study(&p, grid, 200, NonlocalArgument::Solution, None, 1.0, 0).unwrap();
        let exact = bachelier_with_jump(1.0, 1.0, 0.2, 0.3, 1.0, 0.05, 0.5);
        let rel = (study.fine - exact).abs() / exact;
        assert!(rel < 2e-3, "fine {} exact {exact} rel {rel}", study.fine);
        assert!(rel < 2.0 * study.error_bar.max(1e-4), "{study:?}");
    }

    #[test]
    fn inactive_obstacle_is_bitwise_free() {
        let p = problem(0.2, &[(-0.2, 0.5)], |_, _, y, _, _| -0.05 * y, |x| (1.0 - x).max(0.0), |_, _, _| 1.0, 0.05, 0.5);
        let grid = SpatialGrid::around(&p, 1.0, 201).unwrap();
        let free = solve_pide(&p, grid, 50).unwrap();
        let low = ObstacleSpec::new(|_, _| -1e9);
        let obs = solve_pide_obstacle(&p, &low, grid, 50).unwrap();
        for n in 0..=50 {
            for (a, b) in free.row(0, n).iter().zip(obs.row(0, n)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn constant_obstacle_and_data() {
        let p = problem(0.2, &[(-0.2, 0.5)], |_, _, _, _, _| 0.0, |_| 0.4, |_, _, _| 1.0, 0.0, 0.5);
        let grid = SpatialGrid::around(&p, 1.0, 101).unwrap();
        let c = ObstacleSpec::new(|_, _| 0.4);
        let sol = solve_pide_obstacle(&p, &c, grid, 20).unwrap();
        for n in 0..=20 {
            assert!(sol.row(0, n).iter().all(|v| (v - 0.4).abs() < 1e-14));
        }
    }

    #[test]
    fn obstacle_raises_the_put() {
        let p = problem(0.2, &[(-0.2, 0.5)], |_, _, y, _, _| -0.05 * y, |x| (1.0 - x).max(0.0), |_, _, _| 1.0, 0.05, 0.5);
        let grid = SpatialGrid::around(&p, 1.0, 401).unwrap();
        let free = solve_pide(&p, grid, 100).unwrap();
        let ell = ObstacleSpec::new(|_, x| (1.0 - x[0]).max(0.0));
        let am = solve_pide_obstacle(&p, &ell, grid, 100).unwrap();
        assert!(am.start_value(0, 0.8) > free.start_value(0, 0.8));
        assert!(am.row(0, 0).iter().zip(free.row(0, 0)).all(|(a, f)| *a >= *f - 1e-12));
    }

    #[test]
    fn affine_shift_of_terminal_and_driver() {
        let c = 0.75;
        let base = problem(0.2, &[(0.3, 1.0)], |_, _, y, _, q| -0.05 * y + 0.2 * q, |x| (x - 1.0).max(0.0), |_, _, _| 1.0, 0.2, 0.5);
        let shifted = problem(
            0.2,
            &[(0.3, 1.0)],
            move |_, _, y, _, q| -0.05 * (y - c) + 0.2 * q,
            move |x| (x - 1.0).max(0.0) + c,
            |_, _, _| 1.0,
            0.2,
            0.5,
        );
        let grid = SpatialGrid::around(&base, 1.0, 201).unwrap();
        let a = solve_pide(&base, grid, 50).unwrap();
        let b = solve_pide(&shifted, grid, 50).unwrap();
        for n in 0..=50 {
            for (u, v) in a.row(0, n).iter().zip(b.row(0, n)) {
                assert!((v - u - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unstable_explicit_step_is_rejected() {
        let p = problem(0.2, &[(0.3, 10.0)], |_, _, _, _, q| q, |x| x, |_, _, _| 1.0, 1.0, 1.0);
        let grid = SpatialGrid::around(&p, 1.0, 51).unwrap();
        assert!(matches!(solve_pide(&p, grid, 5), Err(Error::Stability(_))));
    }

    #[test]
    fn spline_reproduces_cubic_interior_and_linear_data() {
        let grid = SpatialGrid::new(0.0, 1.0, 11).unwrap();
        let lin: Vec<f64> = (0..11).map(|i| 2.0 * grid.node(i) - 1.0).collect();
        let s = Interpolant::build(NonlocalArgument::TestFunction, &grid, &lin);
        for x in [-0.3, 0.05, 0.47, 1.2] {
            assert!((s.eval(&grid, x) - (2.0 * x - 1.0)).abs() < 1e-12);
        }
        let sq: Vec<f64> = (0..11).map(|i| grid.node(i).powi(2)).collect();
        let s = Interpolant::build(NonlocalArgument::TestFunction, &grid, &sq);
        assert!((s.eval(&grid, 0.55) - 0.3025).abs() < 1e-3);
    }

    #[test]
    fn self_comparison_is_exact() {
        let p = problem(0.2, &[(0.3, 1.0)], |_, _, y, _, _| -0.05 * y, |x| (x - 1.0).max(0.0), |_, _, _| 1.0, 0.05, 0.5);
        let grid = SpatialGrid::around(&p, 1.0, 201).unwrap();
        let sol = solve_pide(&p, grid, 40).unwrap();
        let vf = sol.as_value_function(TimeGrid::new(0.0, 0.5, 10).unwrap());
        let probes = vec![vec![0.8], vec![1.0], vec![1.3]];
        let report = compare(&vf, &sol, &probes, 0.2);
        assert!(report.max_rel_error < 1e-8);
        let constant = ValueFunction::constant(TimeGrid::new(0.0, 0.5, 10).unwrap(), vec![1.0]);
        let flat = problem(0.2, &[], |_, _, _, _, _| 0.0, |_| 1.0, |_, _, _| 1.0, 0.0, 0.5);
        let one = solve_pide(&flat, grid, 10).unwrap();
        assert_eq!(compare(&constant, &one, &probes, 0.0).max_rel_error, 0.0);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }
}
