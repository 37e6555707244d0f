use std::fmt;
use std::sync::Arc;

use super::basis::PolyBasis;
use super::TerminalFn;
use crate::forward::TimeGrid;

/// `(t, x, i) ↦ u^i(t, x)`.
pub type AnalyticFn = Arc<dyn Fn(f64, &[f64], usize) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum StepFit {
    /// Per-component constants.
    Constant(Vec<f64>),
    /// The terminal functions `g_i` themselves.
    Terminal,
    Poly { basis: PolyBasis, coeffs: Vec<Vec<f64>> },
    Analytic(AnalyticFn),
}

impl fmt::Debug for StepFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepFit::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            StepFit::Terminal => f.write_str("Terminal"),
            StepFit::Poly { basis, coeffs } => f
                .debug_struct("Poly")
                .field("degree", &basis.degree())
                .field("coeffs", coeffs)
                .finish(),
            StepFit::Analytic(_) => f.write_str("Analytic"),
        }
    }
}

impl StepFit {
    pub fn value(&self, terminals: &[TerminalFn], t: f64, x: &[f64], i: usize) -> f64 {
        match self {
            StepFit::Constant(c) => c[i],
            StepFit::Terminal => (terminals[i])(x),
            StepFit::Poly { basis, coeffs } => basis.combine(x, &coeffs[i]),
            StepFit::Analytic(f) => f(t, x, i),
        }
    }
}

/// Per-node representation of `(u^i)_{i ≤ m}` on a time grid.
#[derive(Clone)]
pub struct ValueFunction {
    grid: TimeGrid,
    components: usize,
    steps: Vec<StepFit>,
    terminals: Vec<TerminalFn>,
}

impl fmt::Debug for ValueFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ValueFunction")
            .field("grid", &self.grid)
            .field("components", &self.components)
            .field("steps", &self.steps)
            .finish()
    }
}

impl ValueFunction {
    pub(crate) fn from_steps(grid: TimeGrid, components: usize, steps: Vec<StepFit>, terminals: Vec<TerminalFn>) -> Self {
        assert_eq!(steps.len(), grid.steps() + 1);
        ValueFunction {
            grid,
            components,
            steps,
            terminals,
        }
    }

    /// `u ≡ 0`.
    pub fn zero(grid: TimeGrid, components: usize) -> Self {
        Self::constant(grid, vec![0.0; components])
    }

    pub fn constant(grid: TimeGrid, values: Vec<f64>) -> Self {
        let components = values.len();
        ValueFunction {
            grid,
            components,
            steps: vec![StepFit::Constant(values); grid.steps() + 1],
            terminals: Vec::new(),
        }
    }

    /// `u(t, x) = g(x)` for every `t`.
    pub fn from_terminal(grid: TimeGrid, terminals: Vec<TerminalFn>) -> Self {
        ValueFunction {
            grid,
            components: terminals.len(),
            steps: vec![StepFit::Terminal; grid.steps() + 1],
            terminals,
        }
    }

    /// Wraps a closed-form function.
    pub fn from_fn(grid: TimeGrid, components: usize, f: impl Fn(f64, &[f64], usize) -> f64 + Send + Sync + 'static) -> Self {
        let f: AnalyticFn = Arc::new(f);
        ValueFunction {
            grid,
            components,
            steps: vec![StepFit::Analytic(f); grid.steps() + 1],
            terminals: Vec::new(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn step_fit(&self, j: usize) -> &StepFit {
        &self.steps[j]
    }

    /// Highest polynomial degree used by any node.
    pub fn max_degree(&self) -> usize {
        self.steps
            .iter()
            .map(|s| match s {
                StepFit::Poly { basis, .. } => basis.degree(),
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }

    /// Value at node `j`.
    pub fn at_step(&self, j: usize, x: &[f64], i: usize) -> f64 {
        self.steps[j].value(&self.terminals, self.grid.node(j), x, i)
    }

    /// Value at the node nearest to `t` (ties to the earlier node).
    pub fn evaluate(&self, t: f64, x: &[f64], i: usize) -> f64 {
        self.at_step(self.grid.nearest(t), x, i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_terminal() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let c = ValueFunction::constant(g, vec![2.5]);
        assert_eq!(c.evaluate(0.3, &[9.0], 0), 2.5);
        let term: TerminalFn = Arc::new(|x: &[f64]| x[0] * x[0]);
        let v = ValueFunction::from_terminal(g, vec![term]);
        assert_eq!(v.evaluate(1.0, &[3.0], 0), 9.0);
        assert_eq!(v.max_degree(), 0);
    }

    #[test]
    fn analytic_uses_node_time() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let v = ValueFunction::from_fn(g, 1, |t, x, _| t + x[0]);
        assert_eq!(v.evaluate(0.3, &[1.0], 0), 1.25);
        assert_eq!(v.evaluate(0.375, &[1.0], 0), 1.25);
    }
}
