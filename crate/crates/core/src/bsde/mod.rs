//! Backward SDE system with jumps, solved by regression Monte Carlo.
//!
//! For `j = N−1, …, 0` and every component `i`:
//!
//! 1. `E_j^i(x)`: regression of `Y_{j+1}^i` on a polynomial basis of `X_j`;
//! 2. `Z_j^i`: regression of `(Y_{j+1}^i − E_j^i(X_j)) ΔB_j / Δt`;
//! 3. `q_j^i = ∫ γ_i(t_j, X_j, e) (û^i(X_j + β) − û^i(X_j)) λ(de)` where `û` is the
//!    fitted value at node `j+1`, or a caller-supplied frozen function;
//! 4. `Y_j^i = E_j^i + h_i(t_j, X_j, Ȳ, Z_j^i, q_j^i) Δt`, with `Ȳ` resolved by one
//!    predictor–corrector sweep.
//!
//! The jump component `U` never enters the driver directly: it is represented
//! by `u(t, x + β) − u(t, x)` and the driver only sees `q`.

pub mod basis;
pub mod regress;
pub mod value;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

pub use basis::PolyBasis;
pub use regress::{regress, NormalSystem};
pub use value::{StepFit, ValueFunction};

use crate::forward::PathBundle;
use crate::nonlocal::WeightFamily;
use crate::rng::path_stream;
use crate::stats::{mean_and_error, Estimate};
use crate::{par, Error, Result};

/// Arguments of a driver `h_i(t, x, ȳ, z, q)`.
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub q: f64,
}

pub type DriverFn = Arc<dyn Fn(&DriverArgs<'_>) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Drivers `h_i`, terminal conditions `g_i` and jump weights `γ_i`.
#[derive(Clone)]
pub struct DriverSpec {
    drivers: Vec<DriverFn>,
    terminals: Vec<TerminalFn>,
    pub weights: WeightFamily,
    pub lipschitz_bound: f64,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverSpec")
            .field("m", &self.drivers.len())
            .field("weights", &self.weights)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .finish()
    }
}

impl DriverSpec {
    pub fn new(
        drivers: Vec<DriverFn>,
        terminals: Vec<TerminalFn>,
        weights: WeightFamily,
        lipschitz_bound: f64,
    ) -> Result<Self> {
        let m = drivers.len();
        if m == 0 || terminals.len() != m || weights.len() != m {
            return Err(Error::Config(format!(
                "driver system needs matching counts, got {m} drivers, {} terminals, {} weights",
                terminals.len(),
                weights.len()
            )));
        }
        Ok(DriverSpec {
            drivers,
            terminals,
            weights,
            lipschitz_bound,
        })
    }

    /// Single component with scalar state and Brownian motion: `h(t, x, y, z, q)`.
    pub fn scalar(
        h: impl Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        weights: WeightFamily,
        lipschitz_bound: f64,
    ) -> Self {
        let h: DriverFn = Arc::new(move |a: &DriverArgs<'_>| h(a.t, a.x[0], a.y[0], a.z[0], a.q));
        let g: TerminalFn = Arc::new(move |x: &[f64]| g(x[0]));
        DriverSpec::new(vec![h], vec![g], weights, lipschitz_bound).expect("one component")
    }

    pub fn components(&self) -> usize {
        self.drivers.len()
    }

    pub fn h(&self, i: usize, args: &DriverArgs<'_>) -> f64 {
        (self.drivers[i])(args)
    }

    pub fn g(&self, i: usize, x: &[f64]) -> f64 {
        (self.terminals[i])(x)
    }

    pub fn terminals(&self) -> &[TerminalFn] {
        &self.terminals
    }

    /// Sample-based check of `|h(ȳ, z, q) − h(ȳ', z', q')| ≤ C(|Δȳ| + |Δz| + |Δq|)`.
    pub fn check_lipschitz(&self, d: usize, times: &[f64], points: &[Vec<f64>], samples: usize) -> Result<()> {
        let m = self.components();
        let mut rng = path_stream(0x5eed, 0);
        let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect() };
        for &t in times {
            for x in points {
                for _ in 0..samples {
                    let (y1, y2) = (draw(m, &mut rng), draw(m, &mut rng));
                    let (z1, z2) = (draw(d, &mut rng), draw(d, &mut rng));
                    let (q1, q2): (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                    let dist = dist(&y1, &y2) + dist(&z1, &z2) + (q1 - q2).abs();
                    for i in 0..m {
                        let a = self.h(i, &DriverArgs { t, x, y: &y1, z: &z1, q: q1 });
                        let b = self.h(i, &DriverArgs { t, x, y: &y2, z: &z2, q: q2 });
                        if (a - b).abs() > self.lipschitz_bound * dist * (1.0 + 1e-9) + 1e-12 {
                            return Err(Error::Coefficients(format!(
                                "driver {i} exceeds its Lipschitz bound at t = {t}, x = {x:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether every `q ↦ h_i(t, x, 0, 0, q)` is nondecreasing at the sampled points.
    pub fn nondecreasing_in_q(&self, d: usize, times: &[f64], points: &[Vec<f64>]) -> bool {
        let y = vec![0.0; self.components()];
        let z = vec![0.0; d];
        let qs: Vec<f64> = (-20..=20).map(|k| k as f64 * 0.1).collect();
        (0..self.components()).all(|i| {
            times.iter().all(|&t| {
                points.iter().all(|x| {
                    qs.windows(2).all(|w| {
                        let a = self.h(i, &DriverArgs { t, x, y: &y, z: &z, q: w[0] });
                        let b = self.h(i, &DriverArgs { t, x, y: &y, z: &z, q: w[1] });
                        b >= a - 1e-14
                    })
                })
            })
        })
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverOptions {
    /// Total degree of the regression basis.
    pub degree: usize,
    /// When false the nonlocal argument is identically zero.
    pub jumps: bool,
    /// Regression targets under an obstacle.
    pub targets: Targets,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            degree: 3,
            jumps: true,
            targets: Targets::Cashflow,
        }
    }
}

/// What the backward regression fits when an obstacle is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    /// Realised pathwise cashflows, reset to the obstacle where the constraint
    /// binds; the continuation is refitted on paths above the obstacle floor.
    Cashflow,
    /// Constrained fitted values of the next node, one regression per step.
    Fitted,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// RMS of `Y_{j+1} − E_j(X_j)` per component.
    pub residual: Vec<f64>,
    pub condition: f64,
}

/// Discrete solution on the time grid of the bundle that produced it.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    n_paths: usize,
    components: usize,
    brownian_dim: usize,
    steps: usize,
    /// `[(step · M + path) · m + i]`, steps `0..=N`.
    y: Vec<f64>,
    /// `[((step · M + path) · m + i) · d + c]`, steps `0..N`.
    z: Vec<f64>,
    /// Nonlocal driver argument, laid out like `y` over steps `0..N`.
    gamma: Vec<f64>,
    /// Realised pathwise value at node 0: `g(X_N) + Σ_j (h_j Δt + ΔK_j)`, or the
    /// cashflow reset to the obstacle at exercise under [`Targets::Cashflow`].
    pathwise: Vec<f64>,
    /// Reflection increments `ΔK_j`, `[step · M + path]`, steps `0..N`.
    pub(crate) reflection: Option<Vec<f64>>,
    value_function: ValueFunction,
    diagnostics: Vec<StepDiagnostics>,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn y(&self, path: usize, step: usize, i: usize) -> f64 {
        self.y[(step * self.n_paths + path) * self.components + i]
    }

    pub fn z(&self, path: usize, step: usize, i: usize) -> &[f64] {
        let d = self.brownian_dim;
        let at = ((step * self.n_paths + path) * self.components + i) * d;
        &self.z[at..at + d]
    }

    /// The scalar `q = ∫ U γ dλ` fed to the driver.
    pub fn nonlocal_arg(&self, path: usize, step: usize, i: usize) -> f64 {
        self.gamma[(step * self.n_paths + path) * self.components + i]
    }

    pub fn value_function(&self) -> &ValueFunction {
        &self.value_function
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics] {
        &self.diagnostics
    }

    /// `u^i(t_0, x_0)` with its Monte-Carlo standard error.
    pub fn start_value(&self, i: usize) -> Estimate {
        let samples: Vec<f64> = (0..self.n_paths)
            .map(|p| self.pathwise[p * self.components + i])
            .collect();
        let se = mean_and_error(&samples).std_error;
        let value = par::sum(self.n_paths, |p| self.y(p, 0, i)) / self.n_paths as f64;
        Estimate { value, std_error: se }
    }

    pub(crate) fn step_slice(&self, step: usize) -> &[f64] {
        let w = self.n_paths * self.components;
        &self.y[step * w..(step + 1) * w]
    }
}

impl AsRef<BsdeSolution> for BsdeSolution {
    fn as_ref(&self) -> &BsdeSolution {
        self
    }
}

/// Per-step constraint applied after the driver update (single component).
#[derive(Clone, Copy)]
pub(crate) enum Constraint<'a> {
    Free,
    Reflect(&'a (dyn Fn(f64, &[f64]) -> f64 + Sync)),
    Penalize(&'a (dyn Fn(f64, &[f64]) -> f64 + Sync), f64),
}

struct StepOut {
    y: Vec<f64>,
    z: Vec<f64>,
    q: Vec<f64>,
    h: Vec<f64>,
    dk: Vec<f64>,
    /// Obstacle value where the constraint bound on a path above the obstacle
    /// floor, NaN elsewhere.
    floor: Vec<f64>,
}

/// Solves the system on `bundle`. With `frozen_u` the nonlocal argument is built
/// from that function instead of the current backward fit.
pub fn solve_system(
    driver: &DriverSpec,
    bundle: &PathBundle,
    frozen_u: Option<&ValueFunction>,
    options: &SolverOptions,
) -> Result<BsdeSolution> {
    backward(driver, bundle, frozen_u, options, Constraint::Free)
}

pub(crate) fn backward(
    driver: &DriverSpec,
    bundle: &PathBundle,
    frozen_u: Option<&ValueFunction>,
    options: &SolverOptions,
    constraint: Constraint<'_>,
) -> Result<BsdeSolution> {
    let grid = *bundle.grid();
    let n = grid.steps();
    let mp = bundle.n_paths();
    let m = driver.components();
    let k = bundle.state_dim();
    let d = bundle.brownian_dim();
    let dt = grid.dt();
    let measure = bundle.measure();
    let coeffs = bundle.coefficients();
    let use_jumps = options.jumps && !measure.is_empty();
    let constrained = !matches!(constraint, Constraint::Free);
    let cashflow = constrained && options.targets == Targets::Cashflow;

    if let Some(f) = frozen_u {
        if f.components() != m {
            return Err(Error::Config(format!(
                "frozen function has {} components, driver has {m}",
                f.components()
            )));
        }
    }
    if constrained && m != 1 {
        return Err(Error::Config("obstacle problems are scalar (m = 1)".into()));
    }

    let width = mp * m;
    let mut y = vec![0.0; (n + 1) * width];
    let mut z = vec![0.0; n * width * d];
    let mut q = vec![0.0; n * width];
    let mut reflection = constrained.then(|| vec![0.0; n * mp]);

    {
        let terminal = &mut y[n * width..];
        let bad = par::map_chunks(mp, |r| {
            let mut vals = Vec::with_capacity(r.len() * m);
            for p in r {
                let x = bundle.state(p, n);
                for i in 0..m {
                    let v = driver.g(i, x);
                    if !v.is_finite() {
                        return Err(Error::Driver { component: i, step: n });
                    }
                    vals.push(v);
                }
            }
            Ok(vals)
        });
        let mut at = 0;
        for chunk in bad {
            let chunk = chunk?;
            terminal[at..at + chunk.len()].copy_from_slice(&chunk);
            at += chunk.len();
        }
    }
    let mut pathwise = y[n * width..].to_vec();

    let mut fits: Vec<Option<StepFit>> = vec![None; n + 1];
    fits[n] = Some(StepFit::Terminal);
    let mut diagnostics = Vec::with_capacity(n);
    let terminals = driver.terminals();

    for j in (0..n).rev() {
        let t = grid.node(j);
        let t_next = grid.node(j + 1);
        let (head, tail) = y.split_at_mut((j + 1) * width);
        let y_cur = &mut head[j * width..];
        let y_next: &[f64] = if cashflow { &pathwise } else { &tail[..width] };

        let basis = PolyBasis::standardized(k, options.degree, mp, |p| bundle.state(p, j));
        let nb = basis.len();
        let sys = NormalSystem::assemble(mp, nb, m, |p, phi, tgt| {
            basis.eval(bundle.state(p, j), phi);
            tgt.copy_from_slice(&y_next[p * m..(p + 1) * m]);
        });
        let fac = sys.factor()?;
        let cond_coef = fac.solve(sys.rhs(), m)?;

        let residual = par::sum_vectors(mp, m, |r, acc| {
            for p in r {
                let x = bundle.state(p, j);
                for i in 0..m {
                    let e = y_next[p * m + i] - basis.combine(x, &cond_coef[i]);
                    acc[i] += e * e;
                }
            }
        });

        let z_coef = fac.solve_rows(mp, nb, m * d, |p, phi, tgt| {
            let x = bundle.state(p, j);
            basis.eval(x, phi);
            let db = bundle.increment(p, j);
            for i in 0..m {
                let centred = y_next[p * m + i] - basis.combine(x, &cond_coef[i]);
                for c in 0..d {
                    tgt[i * d + c] = centred * db[c] / dt;
                }
            }
        })?;

        let local = match constraint {
            _ if !cashflow => None,
            Constraint::Free => None,
            Constraint::Reflect(obstacle) | Constraint::Penalize(obstacle, _) => {
                Some(continuation_fit(bundle, j, obstacle, options.degree, y_next)?)
            }
        };

        let next_fit = fits[j + 1].clone().expect("fit of the next node");
        let uhat = |x: &[f64], i: usize| -> f64 {
            match frozen_u {
                Some(f) => f.evaluate(t_next, x, i),
                None => next_fit.value(terminals, t_next, x, i),
            }
        };

        let outs = par::map_chunks(mp, |r| -> Result<StepOut> {
            let len = r.len();
            let mut out = StepOut {
                y: Vec::with_capacity(len * m),
                z: Vec::with_capacity(len * m * d),
                q: Vec::with_capacity(len * m),
                h: Vec::with_capacity(len * m),
                dk: Vec::with_capacity(if constrained { len } else { 0 }),
                floor: Vec::with_capacity(if constrained { len } else { 0 }),
            };
            let mut cond = vec![0.0; m];
            let mut zv = vec![0.0; m * d];
            let mut qv = vec![0.0; m];
            let mut base = vec![0.0; m];
            let mut y1 = vec![0.0; m];
            let mut jb = vec![0.0; k];
            let mut shifted = vec![0.0; k];
            for p in r {
                let x = bundle.state(p, j);
                let active = local.as_ref().is_some_and(|l| l.active[p]);
                let local_here = local.as_ref().filter(|_| active).and_then(|l| l.fit.as_ref());
                for i in 0..m {
                    cond[i] = match local_here {
                        Some((b, coef)) => b.combine(x, &coef[i]),
                        None => basis.combine(x, &cond_coef[i]),
                    };
                    for c in 0..d {
                        zv[i * d + c] = basis.combine(x, &z_coef[i * d + c]);
                    }
                    qv[i] = 0.0;
                }
                if use_jumps {
                    for (i, b) in base.iter_mut().enumerate() {
                        *b = uhat(x, i);
                    }
                    for atom in measure.atoms() {
                        coeffs.jump(t, x, &atom.mark, &mut jb);
                        for r in 0..k {
                            shifted[r] = x[r] + jb[r];
                        }
                        for i in 0..m {
                            let g = driver.weights.eval(i, t, x, &atom.mark);
                            qv[i] += atom.weight * g * (uhat(&shifted, i) - base[i]);
                        }
                    }
                }
                for i in 0..m {
                    let h = driver.h(
                        i,
                        &DriverArgs { t, x, y: &cond, z: &zv[i * d..(i + 1) * d], q: qv[i] },
                    );
                    y1[i] = cond[i] + h * dt;
                }
                for i in 0..m {
                    let h = driver.h(
                        i,
                        &DriverArgs { t, x, y: &y1, z: &zv[i * d..(i + 1) * d], q: qv[i] },
                    );
                    if !h.is_finite() {
                        return Err(Error::Driver { component: i, step: j });
                    }
                    let mut value = cond[i] + h * dt;
                    match constraint {
                        Constraint::Free => {}
                        Constraint::Reflect(obstacle) => {
                            let floor = obstacle(t, x);
                            let push = if value < floor {
                                let push = floor - value;
                                value = floor;
                                out.floor.push(if active { floor } else { f64::NAN });
                                push
                            } else {
                                out.floor.push(f64::NAN);
                                0.0
                            };
                            out.dk.push(push);
                        }
                        Constraint::Penalize(obstacle, eps) => {
                            let floor = obstacle(t, x);
                            let push = if value < floor {
                                let kappa = dt / eps;
                                let pushed = (value + kappa * floor) / (1.0 + kappa);
                                let push = pushed - value;
                                value = pushed;
                                out.floor.push(if active { floor } else { f64::NAN });
                                push
                            } else {
                                out.floor.push(f64::NAN);
                                0.0
                            };
                            out.dk.push(push);
                        }
                    }
                    out.y.push(value);
                    out.h.push(h);
                }
                out.z.extend_from_slice(&zv);
                out.q.extend_from_slice(&qv);
            }
            Ok(out)
        });

        let z_step = &mut z[j * width * d..(j + 1) * width * d];
        let q_step = &mut q[j * width..(j + 1) * width];
        let (mut ay, mut az, mut ap) = (0, 0, 0);
        for out in outs {
            let out = out?;
            let rows = out.y.len() / m;
            y_cur[ay..ay + out.y.len()].copy_from_slice(&out.y);
            z_step[az..az + out.z.len()].copy_from_slice(&out.z);
            q_step[ay..ay + out.q.len()].copy_from_slice(&out.q);
            for (s, h) in pathwise[ay..ay + out.h.len()].iter_mut().zip(&out.h) {
                *s += h * dt;
            }
            if let Some(refl) = reflection.as_mut() {
                let dk = &mut refl[j * mp..(j + 1) * mp];
                dk[ap..ap + rows].copy_from_slice(&out.dk);
                let reset = match constraint {
                    Constraint::Penalize(_, eps) => (dt / eps) / (1.0 + dt / eps),
                    _ => 1.0,
                };
                let cells = pathwise[ay..ay + out.h.len()].iter_mut().zip(&out.floor).zip(&out.dk);
                for ((s, floor), push) in cells {
                    if !cashflow {
                        *s += push;
                    } else if !floor.is_nan() {
                        *s += reset * (floor - *s);
                    }
                }
            }
            ay += out.y.len();
            az += out.z.len();
            ap += rows;
        }

        let y_now = &y_cur[..width];
        let value_coef = fac.solve_rows(mp, nb, m, |p, phi, tgt| {
            basis.eval(bundle.state(p, j), phi);
            tgt.copy_from_slice(&y_now[p * m..(p + 1) * m]);
        })?;
        fits[j] = Some(StepFit::Poly { basis, coeffs: value_coef });
        diagnostics.push(StepDiagnostics {
            step: j,
            residual: residual.iter().map(|s| (s / mp as f64).sqrt()).collect(),
            condition: fac.condition,
        });
    }
    diagnostics.reverse();

    let fits = fits.into_iter().map(|f| f.expect("every node fitted")).collect();
    Ok(BsdeSolution {
        n_paths: mp,
        components: m,
        brownian_dim: d,
        steps: n,
        y,
        z,
        gamma: q,
        pathwise,
        reflection,
        value_function: ValueFunction::from_steps(grid, m, fits, terminals.to_vec()),
        diagnostics,
    })
}

/// Paths where the obstacle sits above its sample minimum, with the conditional
/// expectation refitted on them when there are enough.
struct LocalFit {
    active: Vec<bool>,
    fit: Option<(PolyBasis, Vec<Vec<f64>>)>,
}

fn continuation_fit(
    bundle: &PathBundle,
    j: usize,
    obstacle: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
    degree: usize,
    targets: &[f64],
) -> Result<LocalFit> {
    let t = bundle.grid().node(j);
    let mp = bundle.n_paths();
    let levels = par::map_indexed(mp, |p| obstacle(t, bundle.state(p, j)));
    let floor = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = floor + 1e-12 * (1.0 + floor.abs());
    let active: Vec<bool> = levels.iter().map(|l| *l > cut).collect();
    let idx: Vec<usize> = (0..mp).filter(|p| active[*p]).collect();
    let basis = PolyBasis::standardized(bundle.state_dim(), degree, idx.len(), |r| bundle.state(idx[r], j));
    let nb = basis.len();
    if idx.len() == mp || idx.len() < 10 * nb {
        return Ok(LocalFit { active, fit: None });
    }
    let sys = NormalSystem::assemble(idx.len(), nb, 1, |r, phi, tgt| {
        basis.eval(bundle.state(idx[r], j), phi);
        tgt[0] = targets[idx[r]];
    });
    let coef = sys.factor()?.solve(sys.rhs(), 1)?;
    Ok(LocalFit {
        active,
        fit: Some((basis, coef)),
    })
}

/// `u^i(t, x)` from a fitted value function.
pub fn evaluate(value_function: &ValueFunction, t: f64, x: &[f64], i: usize) -> f64 {
    value_function.evaluate(t, x, i)
}

/// Jump surrogate `u(t_j, X + β(t_j, X, e_a)) − u(t_j, X)` for every atom, with `u` read at node `node`.
pub fn jump_surrogate(
    u: &ValueFunction,
    bundle: &PathBundle,
    node: usize,
    t: f64,
    x: &[f64],
    i: usize,
    out: &mut [f64],
) {
    let k = x.len();
    let base = u.at_step(node, x, i);
    let mut jb = vec![0.0; k];
    let mut shifted = vec![0.0; k];
    for (o, atom) in out.iter_mut().zip(bundle.measure().atoms()) {
        bundle.coefficients().jump(t, x, &atom.mark, &mut jb);
        for r in 0..k {
            shifted[r] = x[r] + jb[r];
        }
        *o = u.at_step(node, &shifted, i) - base;
    }
}

/// Relative `L²(dt ⊗ dP ⊗ λ)` distance between a direct regression estimate of the
/// jump integrand and the surrogate `û(X_j + β) − û(X_j)`, per component.
pub fn jump_residual(solution: &BsdeSolution, bundle: &PathBundle, options: &SolverOptions) -> Result<Vec<f64>> {
    let m = solution.components();
    let measure = bundle.measure();
    if measure.is_empty() {
        return Ok(vec![0.0; m]);
    }
    let grid = *bundle.grid();
    let n = grid.steps();
    let mp = bundle.n_paths();
    let k = bundle.state_dim();
    let dt = grid.dt();
    let na = measure.len();
    let weights: Vec<f64> = measure.weights().collect();
    let vf = solution.value_function();

    let mut num = vec![0.0; m];
    let mut den = vec![0.0; m];
    for j in 0..n {
        let t = grid.node(j);
        let y_next = solution.step_slice(j + 1);
        let basis = PolyBasis::standardized(k, options.degree, mp, |p| bundle.state(p, j));
        let nb = basis.len();
        let sys = NormalSystem::assemble(mp, nb, m, |p, phi, tgt| {
            basis.eval(bundle.state(p, j), phi);
            tgt.copy_from_slice(&y_next[p * m..(p + 1) * m]);
        });
        let fac = sys.factor()?;
        let cond_coef = fac.solve(sys.rhs(), m)?;
        let direct = fac.solve_rows(mp, nb, m * na, |p, phi, tgt| {
            let x = bundle.state(p, j);
            basis.eval(x, phi);
            let mut counts = vec![0.0; na];
            bundle.compensated_counts(p, j, &mut counts);
            for i in 0..m {
                let centred = y_next[p * m + i] - basis.combine(x, &cond_coef[i]);
                for a in 0..na {
                    tgt[i * na + a] = centred * counts[a] / (weights[a] * dt);
                }
            }
        })?;
        let acc = par::sum_vectors(mp, 2 * m, |r, acc| {
            let mut surrogate = vec![0.0; na];
            for p in r {
                let x = bundle.state(p, j);
                for i in 0..m {
                    jump_surrogate(vf, bundle, j + 1, t, x, i, &mut surrogate);
                    for a in 0..na {
                        let u_direct = basis.combine(x, &direct[i * na + a]);
                        acc[i] += weights[a] * (u_direct - surrogate[a]).powi(2);
                        acc[m + i] += weights[a] * surrogate[a].powi(2);
                    }
                }
            }
        });
        for i in 0..m {
            num[i] += acc[i];
            den[i] += acc[m + i];
        }
    }
    Ok((0..m)
        .map(|i| {
            if den[i] > 0.0 {
                (num[i] / den[i]).sqrt()
            } else if num[i] == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect())
}
