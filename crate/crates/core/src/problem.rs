//! Complete problem descriptions.

use crate::bsde::DriverSpec;
use crate::forward::{simulate_paths, CoefficientSet, PathBundle, TimeGrid};
use crate::measure::LevyMeasure;
use crate::reflected::ObstacleSpec;
use crate::Result;

/// Coefficients, measure, drivers and optional obstacle of one nonlocal equation.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub coefficients: CoefficientSet,
    pub measure: LevyMeasure,
    pub driver: DriverSpec,
    pub obstacle: Option<ObstacleSpec>,
    pub t_start: f64,
    pub horizon: f64,
    /// Start points at which values are reported.
    pub probes: Vec<Vec<f64>>,
    /// Suggested regression degree.
    pub degree: usize,
}

impl ProblemSpec {
    pub fn state_dim(&self) -> usize {
        self.coefficients.state_dim()
    }

    pub fn brownian_dim(&self) -> usize {
        self.coefficients.brownian_dim()
    }

    pub fn components(&self) -> usize {
        self.driver.components()
    }

    pub fn time_grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.t_start, self.horizon, steps)
    }

    pub fn simulate(&self, start: &[f64], steps: usize, paths: usize, seed: u64) -> Result<PathBundle> {
        simulate_paths(&self.coefficients, &self.measure, start, self.time_grid(steps)?, paths, seed)
    }
}
