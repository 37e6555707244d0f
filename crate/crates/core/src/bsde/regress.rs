//! Ridge least squares through the normal equations.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::{par, Error, Result};

/// Relative ridge strength: `ρ = RIDGE · trace(FᵀF) / B`.
pub const RIDGE: f64 = 1e-8;

/// Accumulated `FᵀF` and `FᵀT` for `targets` right-hand sides.
#[derive(Debug, Clone)]
pub struct NormalSystem {
    features: usize,
    targets: usize,
    gram: Vec<f64>,
    rhs: Vec<f64>,
}

impl NormalSystem {
    /// Accumulates over `n` rows; `row(p, features, targets)` fills one row.
    pub fn assemble<F>(n: usize, features: usize, targets: usize, row: F) -> Self
    where
        F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
    {
        let len = features * features + features * targets;
        let acc = par::sum_vectors(n, len, |range, acc| {
            let mut phi = vec![0.0; features];
            let mut tgt = vec![0.0; targets];
            let (gram, rhs) = acc.split_at_mut(features * features);
            for p in range {
                row(p, &mut phi, &mut tgt);
                for a in 0..features {
                    let fa = phi[a];
                    for b in a..features {
                        gram[a * features + b] += fa * phi[b];
                    }
                    for (r, t) in tgt.iter().enumerate() {
                        rhs[a * targets + r] += fa * t;
                    }
                }
            }
        });
        let (gram, rhs) = acc.split_at(features * features);
        let mut gram = gram.to_vec();
        for a in 0..features {
            for b in 0..a {
                gram[a * features + b] = gram[b * features + a];
            }
        }
        NormalSystem {
            features,
            targets,
            gram,
            rhs: rhs.to_vec(),
        }
    }

    pub fn factor(&self) -> Result<Factored> {
        let b = self.features;
        if self.gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression("non-finite features".into()));
        }
        let trace: f64 = (0..b).map(|a| self.gram[a * b + a]).sum();
        let ridge = (RIDGE * trace / b as f64).max(f64::MIN_POSITIVE);
        let mut m = DMatrix::from_row_slice(b, b, &self.gram);
        for a in 0..b {
            m[(a, a)] += ridge;
        }
        let chol = Cholesky::new(m).ok_or_else(|| Error::Regression("normal matrix is not positive definite".into()))?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        Ok(Factored {
            chol,
            condition: (hi / lo).powi(2),
        })
    }

    /// Coefficients for every target, `[target][feature]`.
    pub fn solve(&self) -> Result<(Vec<Vec<f64>>, f64)> {
        let f = self.factor()?;
        let coeffs = f.solve(&self.rhs, self.targets)?;
        Ok((coeffs, f.condition))
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }
}

/// A factored ridge normal matrix.
pub struct Factored {
    chol: Cholesky<f64, Dyn>,
    /// Squared ratio of extreme Cholesky pivots.
    pub condition: f64,
}

impl Factored {
    /// Solves for `targets` right-hand sides stored as `[feature][target]`.
    pub fn solve(&self, rhs: &[f64], targets: usize) -> Result<Vec<Vec<f64>>> {
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression("non-finite targets".into()));
        }
        let b = rhs.len() / targets.max(1);
        let m = DMatrix::from_row_slice(b, targets, rhs);
        let sol = self.chol.solve(&m);
        Ok((0..targets).map(|r| sol.column(r).iter().copied().collect()).collect())
    }

    /// Solves for right-hand sides assembled over `n` rows with the same features.
    pub fn solve_rows<F>(&self, n: usize, features: usize, targets: usize, row: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
    {
        let rhs = par::sum_vectors(n, features * targets, |range, acc| {
            let mut phi = vec![0.0; features];
            let mut tgt = vec![0.0; targets];
            for p in range {
                row(p, &mut phi, &mut tgt);
                for a in 0..features {
                    for (r, t) in tgt.iter().enumerate() {
                        acc[a * targets + r] += phi[a] * t;
                    }
                }
            }
        });
        self.solve(&rhs, targets)
    }
}

/// Ridge least-squares coefficients for a row-major `rows × cols` design matrix.
pub fn regress(features: &[f64], cols: usize, targets: &[f64]) -> Result<Vec<f64>> {
    let rows = targets.len();
    if cols == 0 || features.len() != rows * cols {
        return Err(Error::Regression(format!(
            "design matrix has {} entries, expected {rows} × {cols}",
            features.len()
        )));
    }
    if rows < cols {
        return Err(Error::Regression(format!("{rows} rows cannot determine {cols} coefficients")));
    }
    if features.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::Regression("non-finite input".into()));
    }
    let sys = NormalSystem::assemble(rows, cols, 1, |p, phi, t| {
        phi.copy_from_slice(&features[p * cols..(p + 1) * cols]);
        t[0] = targets[p];
    });
    let (mut coeffs, _) = sys.solve()?;
    Ok(coeffs.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_linear_relation() {
        let rows = 200;
        let mut f = Vec::new();
        let mut t = Vec::new();
        for i in 0..rows {
            let x = i as f64 / rows as f64 - 0.5;
            let row = [1.0, x, x * x];
            t.push(0.5 - 2.0 * x + 3.0 * x * x);
            f.extend_from_slice(&row);
        }
        let c = regress(&f, 3, &t).unwrap();
        for (got, want) in c.iter().zip([0.5, -2.0, 3.0]) {
            assert!((got - want).abs() <= 1e-6 * want.abs(), "{got} vs {want}");
        }
    }

    #[test]
    fn zero_targets_give_zero_coefficients() {
        let f = [1.0, 0.0, 1.0, 1.0, 1.0, 2.0];
        assert_eq!(regress(&f, 2, &[0.0; 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn three_by_two_matches_direct_solve() {
        // Independent route: normal equations solved by Cramer's rule, ridge included.
        let f = [1.0, 0.5, 1.0, -1.0, 1.0, 2.0];
        let t = [1.0, 0.0, 2.5];
        let (a, b, d) = (
            f[0] * f[0] + f[2] * f[2] + f[4] * f[4],
            f[0] * f[1] + f[2] * f[3] + f[4] * f[5],
            f[1] * f[1] + f[3] * f[3] + f[5] * f[5],
        );
        let rho = RIDGE * (a + d) / 2.0;
        let (a, d) = (a + rho, d + rho);
        let r0 = f[0] * t[0] + f[2] * t[1] + f[4] * t[2];
        let r1 = f[1] * t[0] + f[3] * t[1] + f[5] * t[2];
        let det = a * d - b * b;
        let want = [(r0 * d - b * r1) / det, (a * r1 - b * r0) / det];
        let got = regress(&f, 2, &t).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(regress(&[1.0, f64::NAN], 1, &[1.0, 2.0]).is_err());
        assert!(regress(&[1.0, 1.0], 2, &[1.0]).is_err());
        assert!(regress(&[1.0, 2.0, 3.0], 2, &[1.0]).is_err());
    }
}
