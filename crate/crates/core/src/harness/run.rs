//! Experiment pipelines and report files.

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Mode};
use super::registry;
use crate::bsde::{jump_residual, solve_system, BsdeSolution, SolverOptions, ValueFunction};
use crate::forward::PathBundle;
use crate::measure::LevyMeasure;
use crate::oracle::{probe_error, refinement_study, GridSolution, ProbeError, Refinement, SpatialGrid};
use crate::picard::{solve_fixed_point, PicardDiagnostics, PicardOptions};
use crate::problem::ProblemSpec;
use crate::reflected::{
    apriori_bound_ratio, complementarity_residual, skorokhod_check, solve_reflected, solve_reflected_fixed_point,
    BoundRatio, KStats, CALIBRATED_BOUND, ObstacleSpec, ReflectionMode, SkorokhodCheck,
};
use crate::rng::derive_seed;
use crate::stats::Estimate;
use crate::{par, Error, Result};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "JUMPFLOW_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum StdError {
    Estimated(f64),
    Tag(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReportedValue {
    pub value: f64,
    pub std_error: StdError,
}

impl ReportedValue {
    pub fn estimate(e: Estimate) -> Self {
        ReportedValue {
            value: e.value,
            std_error: StdError::Estimated(e.std_error),
        }
    }

    pub fn deterministic(value: f64) -> Self {
        ReportedValue {
            value,
            std_error: StdError::Tag("deterministic"),
        }
    }

    pub fn std_error(&self) -> f64 {
        match self.std_error {
            StdError::Estimated(s) => s,
            StdError::Tag(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProblemSummary {
    pub name: String,
    pub state_dim: usize,
    pub brownian_dim: usize,
    pub components: usize,
    pub atoms: usize,
    pub degree: usize,
    pub horizon: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressionSummary {
    pub max_condition: f64,
    /// Mean over steps of the per-component residual RMS.
    pub mean_residual: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrozenCheck {
    pub values: Vec<ReportedValue>,
    /// `|u¹ − u⁰|` in units of the standard error, per component.
    pub shift_in_std_errors: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PenaltyRow {
    pub epsilon: f64,
    pub value: ReportedValue,
    pub rel_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReflectionReport {
    pub skorokhod: SkorokhodCheck,
    pub complementarity: f64,
    pub k: KStats,
    pub penalties: Vec<PenaltyRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub values: Vec<ReportedValue>,
    pub refinement: Vec<Refinement>,
    pub space_nodes: usize,
    pub time_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    #[serde(flatten)]
    pub error: ProbeError,
    pub std_error: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ProbeReport {
    pub x: Vec<f64>,
    pub values: Vec<ReportedValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jump_residual: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_ratio: Option<BoundRatio>,
    /// Whether the ratio stays below [`CALIBRATED_BOUND`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub within_bound: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picard: Option<PicardDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen_check: Option<FrozenCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Vec<ComparisonRow>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub probe_seconds: Vec<f64>,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub problem: ProblemSummary,
    pub probes: Vec<ProbeReport>,
    /// SHA-256 of everything above, serialized as JSON.
    pub numerics_digest: String,
    pub timings: Timings,
}

/// Everything a run produces besides the report.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub grids: Vec<GridSolution>,
}

#[derive(Serialize)]
struct Numerics<'a> {
    config: &'a ExperimentConfig,
    problem: &'a ProblemSummary,
    probes: &'a [ProbeReport],
}

fn digest(config: &ExperimentConfig, problem: &ProblemSummary, probes: &[ProbeReport]) -> Result<String> {
    let bytes = serde_json::to_vec(&Numerics { config, problem, probes })?;
    let hash = Sha256::digest(&bytes);
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}

/// Worker cap from [`THREADS_ENV`].
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|n| *n >= 1)
}

fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs the configured pipeline on the current thread pool.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let mut problem = registry::build(&config.problem, &config.params)?;
    if let Some(atoms) = &config.levy {
        let mark_dim = atoms.first().map_or(1, |a| a.mark.len());
        problem.measure = LevyMeasure::new(mark_dim, atoms.clone())?;
        let times = [problem.t_start, problem.horizon];
        let points: Vec<Vec<f64>> = problem
            .probes
            .iter()
            .flat_map(|x| (-4..=4).map(move |k| x.iter().map(|v| v + 0.25 * k as f64).collect()))
            .collect();
        problem.coefficients.check_bounds(&problem.measure, &times, &points)?;
        problem.driver.weights.check_bounds(&problem.measure, &times, &points)?;
    }
    let degree = config.degree.unwrap_or(problem.degree);
    let mut obstacle = problem.obstacle.clone();
    if let Some(o) = obstacle.as_mut() {
        o.rule = config.reflected.compatibility;
    }
    match config.mode {
        Mode::Reflected if obstacle.is_none() => {
            return Err(Error::Config(format!("problem `{}` has no obstacle", problem.name)));
        }
        Mode::Oracle | Mode::Compare if problem.state_dim() != 1 => {
            return Err(Error::Config("oracle modes need a one-dimensional state".into()));
        }
        _ => {}
    }
    let probes: Vec<Vec<f64>> = match &config.probes {
        Some(p) if problem.state_dim() == 1 => p.iter().map(|x| vec![*x]).collect(),
        Some(_) => return Err(Error::Config("probe overrides are scalar".into())),
        None => problem.probes.clone(),
    };
    let summary = ProblemSummary {
        name: problem.name.clone(),
        state_dim: problem.state_dim(),
        brownian_dim: problem.brownian_dim(),
        components: problem.components(),
        atoms: problem.measure.len(),
        degree,
        horizon: problem.horizon,
    };
    let solver = SolverOptions {
        degree,
        ..SolverOptions::default()
    };
    let picard = PicardOptions {
        alpha: config.alpha,
        tol: config.tol,
        max_iter: config.max_iter,
        solver: solver.clone(),
        initial: None,
    };

    let mut reports = Vec::with_capacity(probes.len());
    let mut grids = Vec::new();
    let mut probe_seconds = Vec::with_capacity(probes.len());
    for (k, x) in probes.iter().enumerate() {
        let t0 = Instant::now();
        let mut report = ProbeReport {
            x: x.clone(),
            ..ProbeReport::default()
        };
        if config.mode != Mode::Oracle {
            let bundle = problem.simulate(x, config.steps, config.paths, derive_seed(config.seed, k as u64))?;
            monte_carlo(config, &problem, obstacle.as_ref(), &bundle, &solver, &picard, &mut report)?;
        }
        if matches!(config.mode, Mode::Oracle | Mode::Compare) {
            let grid = SpatialGrid::around(&problem, x[0], config.oracle.space_nodes)?;
            let mut refinement = Vec::new();
            let mut values = Vec::new();
            let mut fine = None;
            for i in 0..problem.components() {
                let (sol, study) = refinement_study(
                    &problem,
                    grid,
                    config.oracle.time_steps,
                    config.oracle.argument,
                    obstacle.as_ref(),
                    x[0],
                    i,
                )?;
                values.push(ReportedValue::deterministic(study.fine));
                refinement.push(study);
                fine = Some(sol);
            }
            if config.mode == Mode::Compare {
                let rows = values
                    .iter()
                    .zip(&report.values)
                    .enumerate()
                    .map(|(i, (oracle, mc))| {
                        let error = probe_error(x, i, mc.value, oracle.value);
                        let se = mc.std_error();
                        let threshold = (config.rel_tol * oracle.value.abs()).max(3.0 * se);
                        ComparisonRow {
                            pass: error.abs_error <= threshold,
                            error,
                            std_error: se,
                            threshold,
                        }
                    })
                    .collect();
                report.comparison = Some(rows);
            } else {
                report.values = values.clone();
            }
            report.oracle = Some(OracleReport {
                values,
                refinement,
                space_nodes: grid.refined().nodes,
                time_steps: 2 * config.oracle.time_steps,
            });
            grids.extend(fine);
        }
        probe_seconds.push(t0.elapsed().as_secs_f64());
        reports.push(report);
    }

    let numerics_digest = digest(config, &summary, &reports)?;
    Ok(RunOutput {
        report: Report {
            config: config.clone(),
            problem: summary,
            probes: reports,
            numerics_digest,
            timings: Timings {
                total_seconds: started.elapsed().as_secs_f64(),
                probe_seconds,
                threads: current_threads(),
            },
        },
        grids,
    })
}

fn regression_summary(sol: &BsdeSolution) -> RegressionSummary {
    let diags = sol.diagnostics();
    let m = sol.components();
    let max_condition = diags.iter().skip(1).map(|d| d.condition).fold(0.0, f64::max);
    let mean_residual = (0..m)
        .map(|i| diags.iter().map(|d| d.residual[i]).sum::<f64>() / diags.len().max(1) as f64)
        .collect();
    RegressionSummary {
        max_condition,
        mean_residual,
    }
}

fn start_values(sol: &BsdeSolution) -> Vec<ReportedValue> {
    (0..sol.components())
        .map(|i| ReportedValue::estimate(sol.start_value(i)))
        .collect()
}

fn frozen_check(before: &BsdeSolution, after: &BsdeSolution) -> FrozenCheck {
    let values = start_values(after);
    let shift = (0..before.components())
        .map(|i| {
            let (a, b) = (before.start_value(i), after.start_value(i));
            let se = a.std_error.max(f64::MIN_POSITIVE);
            (b.value - a.value).abs() / se
        })
        .collect();
    FrozenCheck {
        values,
        shift_in_std_errors: shift,
    }
}

fn monte_carlo(
    config: &ExperimentConfig,
    problem: &ProblemSpec,
    obstacle: Option<&ObstacleSpec>,
    bundle: &PathBundle,
    solver: &SolverOptions,
    picard: &PicardOptions,
    report: &mut ProbeReport,
) -> Result<()> {
    let driver = &problem.driver;
    let reflected = obstacle.is_some() && matches!(config.mode, Mode::Reflected | Mode::Compare);
    let solution = if reflected {
        let obstacle = obstacle.expect("checked above");
        let fp = solve_reflected_fixed_point(driver, obstacle, bundle, picard, ReflectionMode::Max)?;
        let converged = fp.value_function().clone();
        let again = solve_reflected(driver, obstacle, bundle, Some(&converged), solver, ReflectionMode::Max)?;
        report.frozen_check = Some(frozen_check(fp.solution.solution(), again.solution()));
        let max_value = fp.solution.solution().start_value(0);
        let mut penalties = Vec::new();
        for &eps in &config.reflected.penalties {
            let pen = solve_reflected(driver, obstacle, bundle, Some(&converged), solver, ReflectionMode::Penalty(eps))?;
            let v = pen.solution().start_value(0);
            penalties.push(PenaltyRow {
                epsilon: eps,
                value: ReportedValue::estimate(v),
                rel_gap: (v.value - max_value.value).abs() / max_value.value.abs().max(1e-12),
            });
        }
        report.reflection = Some(ReflectionReport {
            skorokhod: skorokhod_check(&fp.solution, obstacle, bundle),
            complementarity: complementarity_residual(&fp.solution, obstacle, bundle),
            k: fp.solution.k_stats(),
            penalties,
        });
        report.picard = Some(fp.diagnostics.clone());
        fp.solution.solution().clone()
    } else {
        match config.mode {
            Mode::Plain => solve_system(driver, bundle, None, solver)?,
            Mode::Frozen => {
                let zero = ValueFunction::zero(*bundle.grid(), problem.components());
                solve_system(driver, bundle, Some(&zero), solver)?
            }
            _ => {
                let fp = solve_fixed_point(driver, bundle, picard)?;
                let again = solve_system(driver, bundle, Some(fp.value_function()), solver)?;
                report.frozen_check = Some(frozen_check(&fp.solution, &again));
                report.picard = Some(fp.diagnostics);
                fp.solution
            }
        }
    };
    report.values = start_values(&solution);
    report.regression = Some(regression_summary(&solution));
    report.jump_residual = Some(jump_residual(&solution, bundle, solver)?);
    let used_obstacle = if reflected { obstacle } else { None };
    let bound = apriori_bound_ratio(&solution, driver, used_obstacle, bundle)?;
    report.within_bound = Some(bound.ratio.is_finite() && bound.ratio <= CALIBRATED_BOUND);
    report.bound_ratio = Some(bound);
    Ok(())
}

/// Runs with the worker cap from the environment and writes the report files into `dir`.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<Report> {
    let output = par::with_threads(threads_from_env(), || run(config))?;
    write_outputs(&output, dir)?;
    Ok(output.report)
}

pub fn write_outputs(output: &RunOutput, dir: &Path) -> Result<()> {
    use std::io::Write;
    fs::create_dir_all(dir)?;
    let report = &output.report;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;

    let mut conv = BufWriter::new(fs::File::create(dir.join("convergence.csv"))?);
    writeln!(conv, "probe,iteration,alpha_delta,sup_delta,ratio")?;
    for (k, probe) in report.probes.iter().enumerate() {
        if let Some(d) = &probe.picard {
            for (n, (delta, sup)) in d.deltas.iter().zip(&d.sup_deltas).enumerate() {
                let ratio = if n == 0 { String::new() } else { format!("{:.6e}", d.ratios[n - 1]) };
                writeln!(conv, "{k},{},{delta:.6e},{sup:.6e},{ratio}", n + 1)?;
            }
        }
    }
    conv.flush()?;

    if report.config.mode == Mode::Compare {
        let mut errs = BufWriter::new(fs::File::create(dir.join("errors.csv"))?);
        writeln!(errs, "x,component,estimate,reference,abs_error,rel_error,std_error,threshold,pass")?;
        for probe in &report.probes {
            for row in probe.comparison.iter().flatten() {
                let x: Vec<String> = row.error.x.iter().map(|v| v.to_string()).collect();
                writeln!(
                    errs,
                    "{},{},{:.12e},{:.12e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
                    x.join(" "),
                    row.error.component,
                    row.error.estimate,
                    row.error.reference,
                    row.error.abs_error,
                    row.error.rel_error,
                    row.std_error,
                    row.threshold,
                    row.pass
                )?;
            }
        }
        errs.flush()?;
    }
    for (k, grid) in output.grids.iter().enumerate() {
        let stride = (grid.grid.nodes / 200).max(1);
        let file = BufWriter::new(fs::File::create(dir.join(format!("oracle_grid_{k}.csv")))?);
        grid.write_csv(file, stride)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(problem: &str, mode: Mode) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(problem, mode);
        c.paths = 2000;
        c.steps = 10;
        c.seed = 5;
        c.oracle.space_nodes = 101;
        c.oracle.time_steps = 20;
        c
    }

    #[test]
    fn plain_martingale_report() {
        let out = run(&small("martingale1d", Mode::Plain)).unwrap();
        for p in &out.report.probes {
            let v = p.values[0];
            assert!((v.value - p.x[0]).abs() <= 3.0 * v.std_error() + 1e-12);
        }
        assert_eq!(out.report.numerics_digest.len(), 64);
    }

    #[test]
    fn oracle_values_are_deterministic() {
        let out = run(&small("monotone1d", Mode::Oracle)).unwrap();
        let json = serde_json::to_value(out.report.probes[0].values[0]).unwrap();
        assert_eq!(json["std_error"], "deterministic");
        assert_eq!(out.grids.len(), 1);
    }

    #[test]
    fn digest_ignores_timings() {
        let c = small("jumplinear1d", Mode::Picard);
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.report.numerics_digest, b.report.numerics_digest);
    }

    #[test]
    fn files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&small("american1d", Mode::Compare)).unwrap();
        write_outputs(&out, dir.path()).unwrap();
        for f in ["report.json", "convergence.csv", "errors.csv", "oracle_grid_0.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let conv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        assert!(conv.lines().count() >= 3);
        let refl = out.report.probes[0].reflection.as_ref().unwrap();
        assert!(refl.skorokhod.exact());
    }

    #[test]
    fn levy_override_replaces_the_measure() {
        let mut c = small("monotone1d", Mode::Plain);
        let base = run(&c).unwrap().report;
        c.levy = Some(vec![crate::measure::Atom { mark: vec![0.3], weight: 2.0 }]);
        let more = run(&c).unwrap().report;
        assert_eq!(more.problem.atoms, 1);
        assert!(more.probes[0].values[0].value > base.probes[0].values[0].value);
        c.levy = Some(vec![crate::measure::Atom { mark: vec![0.01], weight: 1.0 }]);
        assert!(run(&c).is_err());
    }

    #[test]
    fn reflected_mode_needs_an_obstacle() {
        assert!(matches!(run(&small("martingale1d", Mode::Reflected)), Err(Error::Config(_))));
    }
}
