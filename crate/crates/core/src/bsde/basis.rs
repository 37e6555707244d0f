use serde::Serialize;

use crate::par;

/// Monomials of total degree `≤ degree` in standardised coordinates `(x − center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolyBasis {
    dim: usize,
    degree: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
}

fn exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(dim: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == dim {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(dim, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        rec(dim, total, &mut Vec::new(), &mut out);
    }
    out
}

impl PolyBasis {
    pub fn new(dim: usize, degree: usize, center: Vec<f64>, scale: Vec<f64>) -> Self {
        assert_eq!(center.len(), dim);
        assert_eq!(scale.len(), dim);
        PolyBasis {
            dim,
            degree,
            center,
            scale,
            exponents: exponents(dim, degree),
        }
    }

    /// Basis centred and scaled by the sample mean and standard deviation of `n` points.
    pub fn standardized<'a, F>(dim: usize, degree: usize, n: usize, point: F) -> Self
    where
        F: Fn(usize) -> &'a [f64] + Sync + Send,
    {
        let sums = par::sum_vectors(n, dim, |r, acc| {
            for p in r {
                for (a, v) in acc.iter_mut().zip(point(p)) {
                    *a += v;
                }
            }
        });
        let center: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        let sq = par::sum_vectors(n, dim, |r, acc| {
            for p in r {
                for ((a, v), c) in acc.iter_mut().zip(point(p)).zip(&center) {
                    *a += (v - c) * (v - c);
                }
            }
        });
        let scale = sq
            .iter()
            .zip(&center)
            .map(|(s, c)| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-10 * (1.0 + c.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self::new(dim, degree, center, scale)
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        if self.dim == 1 {
            let z = (x[0] - self.center[0]) / self.scale[0];
            let mut p = 1.0;
            for o in out.iter_mut() {
                *o = p;
                p *= z;
            }
            return;
        }
        let z: Vec<f64> = (0..self.dim)
            .map(|r| (x[r] - self.center[r]) / self.scale[r])
            .collect();
        for (o, ex) in out.iter_mut().zip(&self.exponents) {
            *o = ex.iter().zip(&z).map(|(&e, &v)| v.powi(e as i32)).product();
        }
    }

    /// `Σ_b coeffs[b] φ_b(x)`.
    pub fn combine(&self, x: &[f64], coeffs: &[f64]) -> f64 {
        if self.dim == 1 {
            let z = (x[0] - self.center[0]) / self.scale[0];
            return coeffs.iter().rev().fold(0.0, |acc, c| acc * z + c);
        }
        let mut phi = vec![0.0; self.len()];
        self.eval(x, &mut phi);
        phi.iter().zip(coeffs).map(|(p, c)| p * c).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(PolyBasis::new(1, 3, vec![0.0], vec![1.0]).len(), 4);
        assert_eq!(PolyBasis::new(2, 2, vec![0.0; 2], vec![1.0; 2]).len(), 6);
        assert_eq!(PolyBasis::new(3, 3, vec![0.0; 3], vec![1.0; 3]).len(), 20);
    }

    #[test]
    fn eval_matches_combine() {
        let b = PolyBasis::new(2, 3, vec![0.5, -1.0], vec![2.0, 0.5]);
        let coeffs: Vec<f64> = (0..b.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = [0.3, -0.8];
        let mut phi = vec![0.0; b.len()];
        b.eval(&x, &mut phi);
        let direct: f64 = phi.iter().zip(&coeffs).map(|(p, c)| p * c).sum();
        assert!((direct - b.combine(&x, &coeffs)).abs() < 1e-14);
        assert_eq!(phi[0], 1.0);
    }

    #[test]
    fn standardization_handles_degenerate_samples() {
        let pts = [[2.0]; 10];
        let b = PolyBasis::standardized(1, 2, 10, |p| &pts[p][..]);
        assert_eq!(b.center, vec![2.0]);
        assert_eq!(b.scale, vec![1.0]);
    }
}
