//! Finite Lévy measures on the mark space `E = R^ℓ \ {0}`.
//!
//! A measure is a list of weighted atoms. Densities are handled by placing
//! atoms at fixed quadrature nodes, so every integral against the measure is
//! an exact finite sum.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub mark: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevyMeasure {
    mark_dim: usize,
    atoms: Vec<Atom>,
    total_mass: f64,
    /// Cumulative weights for categorical sampling of marks.
    #[serde(skip)]
    cumulative: Vec<f64>,
}

/// One jump of the Poisson random measure: a time and the index of its mark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub time: f64,
    pub atom: usize,
}

impl JumpRecord {
    pub fn mark<'a>(&self, measure: &'a LevyMeasure) -> &'a [f64] {
        &measure.atoms[self.atom].mark
    }
}

impl LevyMeasure {
    pub fn new(mark_dim: usize, atoms: Vec<Atom>) -> Result<Self> {
        if mark_dim == 0 {
            return Err(Error::InvalidMeasure("mark dimension must be positive".into()));
        }
        let mut cumulative = Vec::with_capacity(atoms.len());
        let mut total = 0.0;
        let mut small_jump_mass = 0.0;
        for (i, atom) in atoms.iter().enumerate() {
            if atom.mark.len() != mark_dim {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} has mark of length {}, expected {mark_dim}",
                    atom.mark.len()
                )));
            }
            if !(atom.weight.is_finite() && atom.weight > 0.0) {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} has non-positive or non-finite weight {}",
                    atom.weight
                )));
            }
            if atom.mark.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMeasure(format!("atom {i} has a non-finite mark")));
            }
            let norm2: f64 = atom.mark.iter().map(|v| v * v).sum();
            if norm2 == 0.0 {
                return Err(Error::InvalidMeasure(format!("atom {i} sits at the origin")));
            }
            total += atom.weight;
            small_jump_mass += atom.weight * norm2.min(1.0);
            cumulative.push(total);
        }
        if !total.is_finite() || !small_jump_mass.is_finite() {
            return Err(Error::InvalidMeasure("total mass is not finite".into()));
        }
        Ok(LevyMeasure {
            mark_dim,
            atoms,
            total_mass: total,
            cumulative,
        })
    }

    /// Scalar marks `(e, w)`.
    pub fn scalar(atoms: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            1,
            atoms
                .iter()
                .map(|&(e, w)| Atom {
                    mark: vec![e],
                    weight: w,
                })
                .collect(),
        )
    }

    pub fn empty(mark_dim: usize) -> Self {
        LevyMeasure {
            mark_dim: mark_dim.max(1),
            atoms: Vec::new(),
            total_mass: 0.0,
            cumulative: Vec::new(),
        }
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.atoms.iter().map(|a| a.weight)
    }

    /// λ(E).
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// ∫ (1 ∧ |e|²) λ(de).
    pub fn small_jump_moment(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * a.mark.iter().map(|v| v * v).sum::<f64>().min(1.0))
            .sum()
    }

    /// Exact ∫ φ dλ.
    pub fn integrate(&self, phi: impl Fn(&[f64]) -> f64) -> Result<f64> {
        self.integrate_indexed(|_, e| phi(e))
    }

    /// Like [`integrate`](Self::integrate) with the atom index passed along.
    pub fn integrate_indexed(&self, phi: impl Fn(usize, &[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (i, atom) in self.atoms.iter().enumerate() {
            let v = phi(i, &atom.mark);
            if !v.is_finite() {
                return Err(Error::Integration { atom: i });
            }
            acc += v * atom.weight;
        }
        Ok(acc)
    }

    /// Index of the atom selected by a uniform draw on `[0, 1)`.
    pub fn pick_atom(&self, unit: f64) -> usize {
        let target = unit * self.total_mass;
        let idx = self.cumulative.partition_point(|&c| c <= target);
        idx.min(self.atoms.len() - 1)
    }

    /// Realisation of the Poisson random measure on `(t0, t1) × E`, sorted by time.
    pub fn sample_jumps<R: Rng + ?Sized>(&self, t0: f64, t1: f64, rng: &mut R) -> Vec<JumpRecord> {
        let mut out = Vec::new();
        self.sample_jumps_into(t0, t1, rng, &mut out);
        out
    }

    pub(crate) fn sample_jumps_into<R: Rng + ?Sized>(
        &self,
        t0: f64,
        t1: f64,
        rng: &mut R,
        out: &mut Vec<JumpRecord>,
    ) {
        debug_assert!(t0 < t1);
        let intensity = self.total_mass * (t1 - t0);
        if intensity <= 0.0 {
            return;
        }
        let count = match Poisson::new(intensity) {
            Ok(p) => p.sample(rng) as usize,
            Err(_) => 0,
        };
        let start = out.len();
        for _ in 0..count {
            let u: f64 = rng.gen();
            let time = t0 + (t1 - t0) * u;
            // keep strictly inside the interval
            let time = if time <= t0 { t0 + f64::EPSILON * (t1 - t0) } else { time };
            let atom = self.pick_atom(rng.gen());
            out.push(JumpRecord { time, atom });
        }
        out[start..].sort_by(|a, b| a.time.total_cmp(&b.time));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::path_stream;

    #[test]
    fn total_mass_examples() {
        assert_eq!(LevyMeasure::scalar(&[(1.0, 2.0)]).unwrap().total_mass(), 2.0);
        assert_eq!(LevyMeasure::empty(1).total_mass(), 0.0);
        assert_eq!(LevyMeasure::scalar(&[]).unwrap().total_mass(), 0.0);
        assert_eq!(
            LevyMeasure::scalar(&[(1.0, 0.5), (-2.0, 1.5)]).unwrap().total_mass(),
            2.0
        );
    }

    #[test]
    fn rejects_bad_atoms() {
        assert!(LevyMeasure::scalar(&[(0.0, 1.0)]).is_err());
        assert!(LevyMeasure::scalar(&[(1.0, 0.0)]).is_err());
        assert!(LevyMeasure::scalar(&[(1.0, -1.0)]).is_err());
        assert!(LevyMeasure::scalar(&[(f64::NAN, 1.0)]).is_err());
        assert!(LevyMeasure::new(
            2,
            vec![Atom {
                mark: vec![1.0],
                weight: 1.0
            }]
        )
        .is_err());
        assert!(LevyMeasure::new(0, vec![]).is_err());
    }

    #[test]
    fn integrate_examples() {
        let m = LevyMeasure::scalar(&[(1.0, 2.0), (-1.0, 1.0)]).unwrap();
        assert_eq!(m.integrate(|_| 1.0).unwrap(), 3.0);
        assert_eq!(m.integrate(|_| 0.0).unwrap(), 0.0);
        assert_eq!(m.integrate(|e| e[0]).unwrap(), 1.0);
        assert!(matches!(
            m.integrate(|e| if e[0] < 0.0 { f64::INFINITY } else { 0.0 }),
            Err(Error::Integration { atom: 1 })
        ));
        assert!(m.small_jump_moment().is_finite());
    }

    #[test]
    fn empty_measure_never_jumps() {
        let m = LevyMeasure::empty(1);
        let mut rng = path_stream(1, 0);
        for _ in 0..100 {
            assert!(m.sample_jumps(0.0, 1.0, &mut rng).is_empty());
        }
    }

    #[test]
    fn poisson_mean_count() {
        let m = LevyMeasure::scalar(&[(0.5, 3.0)]).unwrap();
        let n = 100_000;
        let mut rng = path_stream(11, 0);
        let mut total = 0usize;
        for _ in 0..n {
            let jumps = m.sample_jumps(0.0, 1.0, &mut rng);
            assert!(jumps.windows(2).all(|w| w[0].time <= w[1].time));
            assert!(jumps.iter().all(|j| j.time > 0.0 && j.time < 1.0));
            total += jumps.len();
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 3.0).abs() <= 3.0 * (3.0f64 / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn categorical_marks() {
        let m = LevyMeasure::scalar(&[(1.0, 1.0), (-1.0, 3.0)]).unwrap();
        let mut rng = path_stream(5, 2);
        let mut counts = [0usize; 2];
        let mut n = 0usize;
        while n < 100_000 {
            for j in m.sample_jumps(0.0, 1.0, &mut rng) {
                counts[j.atom] += 1;
                n += 1;
            }
        }
        let p0 = counts[0] as f64 / n as f64;
        let se = (0.25 * 0.75 / n as f64).sqrt();
        assert!((p0 - 0.25).abs() <= 3.0 * se, "p0 {p0}");
    }

    #[test]
    fn same_seed_same_jumps() {
        let m = LevyMeasure::scalar(&[(1.0, 1.0), (-1.0, 3.0)]).unwrap();
        let a = m.sample_jumps(0.2, 0.9, &mut path_stream(3, 8));
        let b = m.sample_jumps(0.2, 0.9, &mut path_stream(3, 8));
        assert_eq!(a, b);
    }
}
