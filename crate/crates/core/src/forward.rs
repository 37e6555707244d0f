//! Forward jump-diffusion
//!
//! ```text
//! dX = b(t, X) dt + σ(t, X) dB + ∫ β(t, X⁻, e) μ̃(dt, de)
//! ```
//!
//! discretised by an Euler scheme on a uniform grid. Jumps falling inside a
//! step are applied with the step-start state and the compensator is removed
//! exactly as `Δt ∫ β dλ`.

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::measure::{JumpRecord, LevyMeasure};
use crate::rng::path_stream;
use crate::stats::{mean_and_error, Estimate};
use crate::{par, Error, Result};

/// `(t, x, out)`: writes a vector field evaluated at `(t, x)` into `out`.
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, e, out)`: writes the jump size `β(t, x, e)` into `out`.
pub type JumpField = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Coefficients `b`, `σ`, `β` of the forward equation.
#[derive(Clone)]
pub struct CoefficientSet {
    state_dim: usize,
    brownian_dim: usize,
    drift: VectorField,
    /// Row-major `k × d`.
    diffusion: VectorField,
    jump: JumpField,
    pub lipschitz_bound: f64,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("state_dim", &self.state_dim)
            .field("brownian_dim", &self.brownian_dim)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    pub fn new(
        state_dim: usize,
        brownian_dim: usize,
        drift: VectorField,
        diffusion: VectorField,
        jump: JumpField,
        lipschitz_bound: f64,
    ) -> Self {
        assert!(state_dim >= 1 && brownian_dim >= 1);
        CoefficientSet {
            state_dim,
            brownian_dim,
            drift,
            diffusion,
            jump,
            lipschitz_bound,
        }
    }

    /// One-dimensional state driven by one Brownian motion and scalar marks.
    pub fn scalar(
        drift: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        jump: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        lipschitz_bound: f64,
    ) -> Self {
        Self::new(
            1,
            1,
            Arc::new(move |t, x, out| out[0] = drift(t, x[0])),
            Arc::new(move |t, x, out| out[0] = diffusion(t, x[0])),
            Arc::new(move |t, x, e, out| out[0] = jump(t, x[0], e[0])),
            lipschitz_bound,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    pub fn jump(&self, t: f64, x: &[f64], e: &[f64], out: &mut [f64]) {
        (self.jump)(t, x, e, out)
    }

    /// Checks `|β| ≤ C(1 ∧ |e|)` and `|b| + |σ| ≤ C(1 + |x|)` at the given points.
    pub fn check_bounds(&self, measure: &LevyMeasure, times: &[f64], points: &[Vec<f64>]) -> Result<()> {
        let k = self.state_dim;
        let c = self.lipschitz_bound;
        let mut b = vec![0.0; k];
        let mut s = vec![0.0; k * self.brownian_dim];
        let mut jb = vec![0.0; k];
        for &t in times {
            for x in points {
                let xn = norm(x);
                self.drift(t, x, &mut b);
                self.diffusion(t, x, &mut s);
                let growth = norm(&b) + norm(&s);
                if growth > c * (1.0 + xn) * (1.0 + 1e-12) {
                    return Err(Error::Coefficients(format!(
                        "linear growth violated at t = {t}, x = {x:?}: |b| + |σ| = {growth}"
                    )));
                }
                for atom in measure.atoms() {
                    self.jump(t, x, &atom.mark, &mut jb);
                    let bound = c * norm(&atom.mark).min(1.0);
                    if norm(&jb) > bound * (1.0 + 1e-12) {
                        return Err(Error::Coefficients(format!(
                            "jump bound violated at t = {t}, x = {x:?}, e = {:?}",
                            atom.mark
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Uniform grid `t_start = t_0 < … < t_N = horizon`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TimeGrid {
    t_start: f64,
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidGrid("at least one step required".into()));
        }
        if !(t_start.is_finite() && horizon.is_finite() && t_start < horizon) {
            return Err(Error::InvalidGrid(format!(
                "need t_start < horizon, got {t_start} and {horizon}"
            )));
        }
        Ok(TimeGrid {
            t_start,
            horizon,
            steps,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t_start) / self.steps as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j >= self.steps {
            self.horizon
        } else {
            self.t_start + j as f64 * self.dt()
        }
    }

    /// Nearest node to `t`; ties go to the earlier node.
    pub fn nearest(&self, t: f64) -> usize {
        let s = (t - self.t_start) / self.dt();
        if s <= 0.0 {
            return 0;
        }
        let lo = s.floor();
        let j = if s - lo > 0.5 { lo + 1.0 } else { lo };
        (j as usize).min(self.steps)
    }
}

/// Simulated trajectories of the forward process.
#[derive(Clone)]
pub struct PathBundle {
    grid: TimeGrid,
    n_paths: usize,
    start: Vec<f64>,
    /// `[path][step][k]`, steps `0..=N`.
    states: Vec<f64>,
    /// `[path][step][d]`, steps `0..N`.
    increments: Vec<f64>,
    /// CSR offsets into `jumps`, indexed by `path * N + step`.
    jump_offsets: Vec<usize>,
    jumps: Vec<JumpRecord>,
    seed: u64,
    coeffs: CoefficientSet,
    measure: LevyMeasure,
}

impl fmt::Debug for PathBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PathBundle")
            .field("grid", &self.grid)
            .field("n_paths", &self.n_paths)
            .field("start", &self.start)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

struct ChunkPaths {
    states: Vec<f64>,
    increments: Vec<f64>,
    counts: Vec<usize>,
    jumps: Vec<JumpRecord>,
}

/// Simulates `n_paths` Euler paths of the forward equation started at `(grid.t_start, start)`.
pub fn simulate_paths(
    coeffs: &CoefficientSet,
    measure: &LevyMeasure,
    start: &[f64],
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    let k = coeffs.state_dim();
    let d = coeffs.brownian_dim();
    if start.len() != k {
        return Err(Error::InvalidGrid(format!(
            "start point has dimension {}, expected {k}",
            start.len()
        )));
    }
    if n_paths == 0 {
        return Err(Error::InvalidGrid("at least one path required".into()));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let has_jumps = !measure.is_empty();

    let chunks = par::map_chunks(n_paths, |range| -> Result<ChunkPaths> {
        let len = range.len();
        let mut out = ChunkPaths {
            states: Vec::with_capacity(len * (n + 1) * k),
            increments: Vec::with_capacity(len * n * d),
            counts: Vec::with_capacity(len * n),
            jumps: Vec::new(),
        };
        let mut x = vec![0.0; k];
        let mut b = vec![0.0; k];
        let mut s = vec![0.0; k * d];
        let mut jb = vec![0.0; k];
        let mut comp = vec![0.0; k];
        let mut db = vec![0.0; d];
        let mut next = vec![0.0; k];
        let mut step_jumps = Vec::new();
        for p in range {
            let mut rng = path_stream(seed, p as u64);
            x.copy_from_slice(start);
            out.states.extend_from_slice(&x);
            for j in 0..n {
                let t = grid.node(j);
                for v in db.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * sqrt_dt;
                }
                out.increments.extend_from_slice(&db);
                coeffs.drift(t, &x, &mut b);
                coeffs.diffusion(t, &x, &mut s);
                for r in 0..k {
                    let noise: f64 = (0..d).map(|c| s[r * d + c] * db[c]).sum();
                    next[r] = x[r] + b[r] * dt + noise;
                }
                step_jumps.clear();
                if has_jumps {
                    measure.sample_jumps_into(t, t + dt, &mut rng, &mut step_jumps);
                    comp.iter_mut().for_each(|c| *c = 0.0);
                    for atom in measure.atoms() {
                        coeffs.jump(t, &x, &atom.mark, &mut jb);
                        for r in 0..k {
                            comp[r] += atom.weight * jb[r];
                        }
                    }
                    for rec in &step_jumps {
                        coeffs.jump(t, &x, rec.mark(measure), &mut jb);
                        for r in 0..k {
                            next[r] += jb[r];
                        }
                    }
                    for r in 0..k {
                        next[r] -= dt * comp[r];
                    }
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Simulation { path: p, step: j + 1 });
                }
                x.copy_from_slice(&next);
                out.states.extend_from_slice(&x);
                out.counts.push(step_jumps.len());
                out.jumps.extend_from_slice(&step_jumps);
            }
        }
        Ok(out)
    });

    let mut states = Vec::with_capacity(n_paths * (n + 1) * k);
    let mut increments = Vec::with_capacity(n_paths * n * d);
    let mut jump_offsets = Vec::with_capacity(n_paths * n + 1);
    let mut jumps = Vec::new();
    jump_offsets.push(0);
    for chunk in chunks {
        let chunk = chunk?;
        states.extend_from_slice(&chunk.states);
        increments.extend_from_slice(&chunk.increments);
        for c in chunk.counts {
            let last = *jump_offsets.last().unwrap();
            jump_offsets.push(last + c);
        }
        jumps.extend_from_slice(&chunk.jumps);
    }

    Ok(PathBundle {
        grid,
        n_paths,
        start: start.to_vec(),
        states,
        increments,
        jump_offsets,
        jumps,
        seed,
        coeffs: coeffs.clone(),
        measure: measure.clone(),
    })
}

impl PathBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn state_dim(&self) -> usize {
        self.coeffs.state_dim()
    }

    pub fn brownian_dim(&self) -> usize {
        self.coeffs.brownian_dim()
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coeffs
    }

    pub fn measure(&self) -> &LevyMeasure {
        &self.measure
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let k = self.state_dim();
        let at = (path * (self.grid.steps() + 1) + step) * k;
        &self.states[at..at + k]
    }

    /// Whole trajectory of one path, `(N + 1) × k` values.
    pub fn trajectory(&self, path: usize) -> &[f64] {
        let w = (self.grid.steps() + 1) * self.state_dim();
        &self.states[path * w..(path + 1) * w]
    }

    /// `ΔB` over `(t_step, t_step+1]`.
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let d = self.brownian_dim();
        let at = (path * self.grid.steps() + step) * d;
        &self.increments[at..at + d]
    }

    pub fn jumps(&self, path: usize, step: usize) -> &[JumpRecord] {
        let i = path * self.grid.steps() + step;
        &self.jumps[self.jump_offsets[i]..self.jump_offsets[i + 1]]
    }

    /// Compensated counts `μ̃({e_a} × (t_j, t_j+1])` for every atom `a`.
    pub fn compensated_counts(&self, path: usize, step: usize, out: &mut [f64]) {
        let dt = self.grid.dt();
        for (o, w) in out.iter_mut().zip(self.measure.weights()) {
            *o = -w * dt;
        }
        for rec in self.jumps(path, step) {
            out[rec.atom] += 1.0;
        }
    }

    pub fn total_jumps(&self) -> usize {
        self.jumps.len()
    }
}

/// Monte-Carlo estimate of `E[sup_j |X_j − x|^p]`.
pub fn moment_statistic(bundle: &PathBundle, p: u32, x: &[f64]) -> f64 {
    moment_estimate(bundle, p, x).value
}

pub fn moment_estimate(bundle: &PathBundle, p: u32, x: &[f64]) -> Estimate {
    assert!(p >= 2, "moment order must be at least 2");
    let k = bundle.state_dim();
    let samples = par::map_indexed(bundle.n_paths(), |path| {
        bundle
            .trajectory(path)
            .chunks(k)
            .map(|s| {
                let d2: f64 = s.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt().powi(p as i32)
            })
            .fold(0.0, f64::max)
    });
    mean_and_error(&samples)
}

/// `E[sup_j |X_j − X'_j − (x − x')|²]` for two bundles driven by the same noise.
pub fn flow_deviation(a: &PathBundle, b: &PathBundle) -> Result<f64> {
    if a.seed() != b.seed() || a.grid() != b.grid() || a.n_paths() != b.n_paths() {
        return Err(Error::InvalidGrid(
            "flow comparison needs bundles with equal seed, grid and path count".into(),
        ));
    }
    let shift: Vec<f64> = a.start().iter().zip(b.start()).map(|(p, q)| p - q).collect();
    let k = a.state_dim();
    let samples = par::map_indexed(a.n_paths(), |path| {
        a.trajectory(path)
            .chunks(k)
            .zip(b.trajectory(path).chunks(k))
            .map(|(u, v)| {
                u.iter()
                    .zip(v)
                    .zip(&shift)
                    .map(|((p, q), s)| (p - q - s).powi(2))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    });
    Ok(mean_and_error(&samples).value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(b: f64, s: f64) -> CoefficientSet {
        CoefficientSet::scalar(move |_, _| b, move |_, _| s, |_, _, e| e, 2.0)
    }

    #[test]
    fn grid_nodes_and_lookup() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.node(4), 1.0);
        assert_eq!(g.nearest(0.125), 0); // tie goes to the earlier node
        assert_eq!(g.nearest(0.13), 1);
        assert_eq!(g.nearest(2.0), 4);
        assert_eq!(g.nearest(-1.0), 0);
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn no_dynamics_keeps_start() {
        let c = constant(0.0, 0.0);
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let bundle = simulate_paths(&c, &LevyMeasure::empty(1), &[0.7], g, 50, 1).unwrap();
        for p in 0..50 {
            for j in 0..=10 {
                assert_eq!(bundle.state(p, j), &[0.7]);
            }
        }
        assert_eq!(moment_statistic(&bundle, 2, &[0.7]), 0.0);
        assert_eq!(bundle.total_jumps(), 0);
    }

    #[test]
    fn deterministic_drift() {
        let c = constant(1.0, 0.0);
        let g = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let bundle = simulate_paths(&c, &LevyMeasure::empty(1), &[0.0], g, 20, 3).unwrap();
        for p in 0..20 {
            assert!((bundle.state(p, 10)[0] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn compensated_jumps_are_a_martingale() {
        let c = constant(0.0, 0.0);
        let m = LevyMeasure::scalar(&[(1.0, 1.0)]).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let bundle = simulate_paths(&c, &m, &[0.3], g, 100_000, 9).unwrap();
        let terminal: Vec<f64> = (0..bundle.n_paths()).map(|p| bundle.state(p, 10)[0]).collect();
        let e = mean_and_error(&terminal);
        assert!(e.covers(0.3, 4.0), "{e:?}");
    }

    #[test]
    fn brownian_increment_variance() {
        let c = constant(0.0, 1.0);
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let bundle = simulate_paths(&c, &LevyMeasure::empty(1), &[0.0], g, 20_000, 4).unwrap();
        let dt = g.dt();
        for j in 0..8 {
            let sq: Vec<f64> = (0..bundle.n_paths())
                .map(|p| bundle.increment(p, j)[0].powi(2))
                .collect();
            let e = mean_and_error(&sq);
            assert!(e.covers(dt, 4.0), "step {j}: {e:?}");
        }
    }

    #[test]
    fn empty_measure_reduces_to_diffusion_euler() {
        let c = CoefficientSet::scalar(|_, x| -0.5 * x, |_, x| 0.3 + 0.1 * x.sin(), |_, _, e| e, 2.0);
        let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let bundle = simulate_paths(&c, &LevyMeasure::empty(1), &[0.4], g, 64, 21).unwrap();
        let dt = g.dt();
        for p in 0..64 {
            let mut x = 0.4;
            for j in 0..16 {
                let db = bundle.increment(p, j)[0];
                let next = [x + (-0.5 * x) * dt + (0.3 + 0.1 * f64::sin(x)) * db];
                x = next[0];
                assert_eq!(bundle.state(p, j + 1)[0].to_bits(), x.to_bits());
            }
        }
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let c = constant(0.1, 0.4);
        let m = LevyMeasure::scalar(&[(0.5, 2.0), (-0.3, 1.0)]).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 12).unwrap();
        let a = par::with_threads(Some(1), || simulate_paths(&c, &m, &[1.0], g, 5000, 77).unwrap());
        let b = par::with_threads(Some(3), || simulate_paths(&c, &m, &[1.0], g, 5000, 77).unwrap());
        assert_eq!(a.states, b.states);
        assert_eq!(a.jumps, b.jumps);
        assert_eq!(a.jump_offsets, b.jump_offsets);
    }

    #[test]
    fn non_finite_state_is_reported() {
        let c = CoefficientSet::scalar(|_, x| if x > 0.5 { f64::NAN } else { 1.0 }, |_, _| 0.0, |_, _, e| e, 2.0);
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let err = simulate_paths(&c, &LevyMeasure::empty(1), &[0.0], g, 3, 1).unwrap_err();
        assert!(matches!(err, Error::Simulation { path: 0, step: 4 }), "{err}");
    }

    #[test]
    fn bound_checks() {
        let m = LevyMeasure::scalar(&[(0.5, 1.0)]).unwrap();
        let ok = CoefficientSet::scalar(|_, x| -x, |_, _| 0.3, |_, _, e| e, 1.0);
        let pts: Vec<Vec<f64>> = [-2.0, 0.0, 3.0].iter().map(|&x| vec![x]).collect();
        ok.check_bounds(&m, &[0.0, 1.0], &pts).unwrap();
        let bad = CoefficientSet::scalar(|_, _| 0.0, |_, _| 0.0, |_, x, e| x * e, 1.0);
        assert!(bad.check_bounds(&m, &[0.0], &pts).is_err());
    }
}
