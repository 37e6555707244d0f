//! Nonlocal operators
//!
//! ```text
//! B_i u(t, x) = ∫ γ_i(t, x, e) (u(t, x + β(t, x, e)) − u(t, x)) λ(de)
//! K u(t, x)   = ∫ (u(t, x + β) − u(t, x) − βᵀ D_x u(t, x)) λ(de)
//! ```
//!
//! evaluated exactly over the atoms of a finite measure.

use std::fmt;
use std::sync::Arc;

use crate::forward::{norm, CoefficientSet};
use crate::measure::LevyMeasure;
use crate::{Error, Result};

/// `(t, x, e) ↦ γ(t, x, e)`.
pub type WeightFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Jump weights `γ_1, …, γ_m`. Signs are unrestricted.
#[derive(Clone)]
pub struct WeightFamily {
    gammas: Vec<WeightFn>,
    pub bound: f64,
}

impl fmt::Debug for WeightFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightFamily")
            .field("m", &self.gammas.len())
            .field("bound", &self.bound)
            .finish()
    }
}

impl WeightFamily {
    pub fn new(gammas: Vec<WeightFn>, bound: f64) -> Self {
        WeightFamily { gammas, bound }
    }

    /// The same weight for every one of `m` components.
    pub fn uniform(m: usize, gamma: WeightFn, bound: f64) -> Self {
        WeightFamily {
            gammas: vec![gamma; m],
            bound,
        }
    }

    pub fn scalar(gamma: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static, bound: f64) -> Self {
        Self::new(vec![Arc::new(move |t, x: &[f64], e: &[f64]| gamma(t, x[0], e[0]))], bound)
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    pub fn gamma(&self, i: usize) -> &WeightFn {
        &self.gammas[i]
    }

    pub fn eval(&self, i: usize, t: f64, x: &[f64], e: &[f64]) -> f64 {
        (self.gammas[i])(t, x, e)
    }

    /// Checks `|γ_i(t, x, e)| ≤ C(1 ∧ |e|)` at the sampled points.
    pub fn check_bounds(&self, measure: &LevyMeasure, times: &[f64], points: &[Vec<f64>]) -> Result<()> {
        for i in 0..self.len() {
            for &t in times {
                for x in points {
                    for atom in measure.atoms() {
                        let g = self.eval(i, t, x, &atom.mark);
                        if g.is_nan() || g.abs() > self.bound * norm(&atom.mark).min(1.0) * (1.0 + 1e-12) {
                            return Err(Error::Coefficients(format!(
                                "weight {i} violates its bound at t = {t}, x = {x:?}, e = {:?}",
                                atom.mark
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether every `γ_i` is nonnegative at the sampled points.
    pub fn nonnegative_on(&self, measure: &LevyMeasure, times: &[f64], points: &[Vec<f64>]) -> bool {
        (0..self.len()).all(|i| {
            times.iter().all(|&t| {
                points
                    .iter()
                    .all(|x| measure.atoms().iter().all(|a| self.eval(i, t, x, &a.mark) >= 0.0))
            })
        })
    }
}

/// `B u(t, x)` for the weight `gamma`.
pub fn op_b(
    u: impl Fn(f64, &[f64]) -> f64,
    gamma: impl Fn(f64, &[f64], &[f64]) -> f64,
    coeffs: &CoefficientSet,
    measure: &LevyMeasure,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let base = u(t, x);
    if !base.is_finite() {
        return Err(Error::Evaluation { atom: 0 });
    }
    let mut shifted = vec![0.0; x.len()];
    let mut acc = 0.0;
    for (a, atom) in measure.atoms().iter().enumerate() {
        coeffs.jump(t, x, &atom.mark, &mut shifted);
        for (s, xi) in shifted.iter_mut().zip(x) {
            *s += xi;
        }
        let v = u(t, &shifted);
        if !v.is_finite() {
            return Err(Error::Evaluation { atom: a });
        }
        acc += atom.weight * gamma(t, x, &atom.mark) * (v - base);
    }
    Ok(acc)
}

/// `K u(t, x)` with a caller-supplied gradient.
pub fn op_k(
    u: impl Fn(f64, &[f64]) -> f64,
    grad_u: impl Fn(f64, &[f64], &mut [f64]),
    coeffs: &CoefficientSet,
    measure: &LevyMeasure,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let base = u(t, x);
    if !base.is_finite() {
        return Err(Error::Evaluation { atom: 0 });
    }
    let k = x.len();
    let mut grad = vec![0.0; k];
    grad_u(t, x, &mut grad);
    let mut jump = vec![0.0; k];
    let mut shifted = vec![0.0; k];
    let mut acc = 0.0;
    for (a, atom) in measure.atoms().iter().enumerate() {
        coeffs.jump(t, x, &atom.mark, &mut jump);
        for r in 0..k {
            shifted[r] = x[r] + jump[r];
        }
        let v = u(t, &shifted);
        if !v.is_finite() {
            return Err(Error::Evaluation { atom: a });
        }
        let slope: f64 = jump.iter().zip(&grad).map(|(b, g)| b * g).sum();
        acc += atom.weight * (v - base - slope);
    }
    Ok(acc)
}

/// Default central-difference step `10⁻⁴ (1 + |x|)`.
pub fn default_step(x: &[f64]) -> f64 {
    1e-4 * (1.0 + norm(x))
}

/// Central-difference gradient of `u` in `x`.
pub fn central_gradient(u: impl Fn(f64, &[f64]) -> f64, t: f64, x: &[f64], h: f64, out: &mut [f64]) {
    let mut probe = x.to_vec();
    for r in 0..x.len() {
        probe[r] = x[r] + h;
        let up = u(t, &probe);
        probe[r] = x[r] - h;
        let down = u(t, &probe);
        probe[r] = x[r];
        out[r] = (up - down) / (2.0 * h);
    }
}

/// `K u` with the gradient replaced by central differences of step `h`.
pub fn op_k_numeric(
    u: impl Fn(f64, &[f64]) -> f64,
    coeffs: &CoefficientSet,
    measure: &LevyMeasure,
    t: f64,
    x: &[f64],
    h: Option<f64>,
) -> Result<f64> {
    let h = h.unwrap_or_else(|| default_step(x));
    op_k(&u, |t, x, g| central_gradient(&u, t, x, h, g), coeffs, measure, t, x)
}
