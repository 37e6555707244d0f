//! Built-in problems.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::bsde::{DriverArgs, DriverFn, DriverSpec, TerminalFn};
use crate::forward::CoefficientSet;
use crate::measure::LevyMeasure;
use crate::nonlocal::WeightFamily;
use crate::problem::ProblemSpec;
use crate::reflected::ObstacleSpec;
use crate::{Error, Result};

pub struct Entry {
    pub name: &'static str,
    pub description: &'static str,
    pub state_dim: usize,
    pub components: usize,
    pub obstacle: bool,
    /// Tunable parameters and their defaults.
    pub params: &'static [(&'static str, f64)],
    build: fn(&Params<'_>) -> Result<ProblemSpec>,
}

impl Entry {
    pub fn build(&self, overrides: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
        for key in overrides.keys() {
            if !self.params.iter().any(|(k, _)| k == key) {
                return Err(Error::Config(format!("unknown parameter `{key}` for problem `{}`", self.name)));
            }
        }
        (self.build)(&Params { entry: self, overrides })
    }
}

pub struct Params<'a> {
    entry: &'a Entry,
    overrides: &'a BTreeMap<String, f64>,
}

impl Params<'_> {
    fn get(&self, key: &str) -> f64 {
        self.overrides.get(key).copied().unwrap_or_else(|| {
            self.entry
                .params
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .expect("parameter declared by the entry")
        })
    }
}

static ENTRIES: &[Entry] = &[
    Entry {
        name: "martingale1d",
        description: "Brownian motion, h = 0, g(x) = x; u(t, x) = x",
        state_dim: 1,
        components: 1,
        obstacle: false,
        params: &[("sigma", 1.0), ("horizon", 1.0)],
        build: martingale1d,
    },
    Entry {
        name: "jumplinear1d",
        description: "compensated pure-jump motion, h = 0, g(x) = x; u(t, x) = x",
        state_dim: 1,
        components: 1,
        obstacle: false,
        params: &[("mark", 1.0), ("weight", 1.0), ("horizon", 1.0)],
        build: jumplinear1d,
    },
    Entry {
        name: "jumpmerton1d",
        description: "arithmetic call under Gaussian jumps on Gauss-Hermite atoms, h = -r y",
        state_dim: 1,
        components: 1,
        obstacle: false,
        params: &[
            ("sigma", 0.2),
            ("rate", 0.05),
            ("strike", 1.0),
            ("intensity", 0.5),
            ("jump_mean", -0.1),
            ("jump_std", 0.15),
            ("horizon", 0.5),
        ],
        build: jumpmerton1d,
    },
    Entry {
        name: "monotone1d",
        description: "call with h = -r y + c q, gamma = 1",
        state_dim: 1,
        components: 1,
        obstacle: false,
        params: &[
            ("sigma", 0.2),
            ("rate", 0.05),
            ("coupling", 0.2),
            ("mark", 0.3),
            ("weight", 1.0),
            ("horizon", 0.5),
        ],
        build: monotone1d,
    },
    Entry {
        name: "nonmonotone1d",
        description: "call with h = -r y - c q decreasing in q and gamma(e) = e changing sign",
        state_dim: 1,
        components: 1,
        obstacle: false,
        params: &[("sigma", 0.2), ("rate", 0.05), ("coupling", 0.5), ("horizon", 0.5)],
        build: nonmonotone1d,
    },
    Entry {
        name: "american1d",
        description: "put with early exercise, obstacle = payoff, h = -r y",
        state_dim: 1,
        components: 1,
        obstacle: true,
        params: &[
            ("sigma", 0.2),
            ("rate", 0.05),
            ("strike", 1.0),
            ("mark", -0.2),
            ("weight", 0.5),
            ("horizon", 0.5),
        ],
        build: american1d,
    },
    Entry {
        name: "coupled2",
        description: "two identical components coupled through y, h_i = -r y_i + k (y_j - y_i) + c q_i",
        state_dim: 1,
        components: 2,
        obstacle: false,
        params: &[
            ("sigma", 0.2),
            ("rate", 0.05),
            ("cross", 0.1),
            ("coupling", 0.2),
            ("mark", 0.3),
            ("weight", 1.0),
            ("horizon", 0.5),
        ],
        build: coupled2,
    },
];

pub fn entries() -> &'static [Entry] {
    ENTRIES
}

pub fn names() -> impl Iterator<Item = &'static str> {
    ENTRIES.iter().map(|e| e.name)
}

pub fn find(name: &str) -> Option<&'static Entry> {
    ENTRIES.iter().find(|e| e.name == name)
}

/// Builds a registered problem with parameter overrides.
pub fn build(name: &str, overrides: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    find(name)
        .ok_or_else(|| Error::UnknownProblem(name.to_string()))?
        .build(overrides)
}

fn scalar_coeffs(sigma: f64) -> CoefficientSet {
    CoefficientSet::scalar(|_, _| 0.0, move |_, _| sigma, |_, _, e| e, 1.0f64.max(sigma))
}

fn unit_weights() -> WeightFamily {
    WeightFamily::scalar(|_, _, _| 1.0, 10.0)
}

fn spec(
    name: &str,
    coefficients: CoefficientSet,
    measure: LevyMeasure,
    driver: DriverSpec,
    horizon: f64,
    probes: &[f64],
    degree: usize,
) -> ProblemSpec {
    ProblemSpec {
        name: name.to_string(),
        coefficients,
        measure,
        driver,
        obstacle: None,
        t_start: 0.0,
        horizon,
        probes: probes.iter().map(|x| vec![*x]).collect(),
        degree,
    }
}

fn martingale1d(p: &Params<'_>) -> Result<ProblemSpec> {
    let driver = DriverSpec::scalar(|_, _, _, _, _| 0.0, |x| x, unit_weights(), 0.0);
    Ok(spec(
        "martingale1d",
        scalar_coeffs(p.get("sigma")),
        LevyMeasure::empty(1),
        driver,
        p.get("horizon"),
        &[-1.0, 0.0, 0.5, 2.0],
        3,
    ))
}

fn jumplinear1d(p: &Params<'_>) -> Result<ProblemSpec> {
    let driver = DriverSpec::scalar(|_, _, _, _, _| 0.0, |x| x, unit_weights(), 0.0);
    let mark = p.get("mark");
    let coeffs = CoefficientSet::scalar(|_, _| 0.0, |_, _| 0.0, |_, _, e| e, 1.0f64.max(mark.abs()));
    Ok(spec(
        "jumplinear1d",
        coeffs,
        LevyMeasure::scalar(&[(mark, p.get("weight"))])?,
        driver,
        p.get("horizon"),
        &[0.0, 1.0],
        1,
    ))
}

/// Five-point Gauss-Hermite rule for `∫ f(ξ) e^{−ξ²} dξ`.
const HERMITE: [(f64, f64); 5] = [
    (-2.020_182_870_456_086, 0.019_953_242_059_046),
    (-0.958_572_464_613_819, 0.393_619_323_152_241),
    (0.0, 0.945_308_720_482_942),
    (0.958_572_464_613_819, 0.393_619_323_152_241),
    (2.020_182_870_456_086, 0.019_953_242_059_046),
];

fn jumpmerton1d(p: &Params<'_>) -> Result<ProblemSpec> {
    let (mu, delta, lambda) = (p.get("jump_mean"), p.get("jump_std"), p.get("intensity"));
    let atoms: Vec<(f64, f64)> = HERMITE
        .iter()
        .map(|(xi, w)| (mu + std::f64::consts::SQRT_2 * delta * xi, lambda * w / std::f64::consts::PI.sqrt()))
        .collect();
    let (r, strike) = (p.get("rate"), p.get("strike"));
    let driver = DriverSpec::scalar(move |_, _, y, _, _| -r * y, move |x| (x - strike).max(0.0), unit_weights(), r);
    Ok(spec(
        "jumpmerton1d",
        scalar_coeffs(p.get("sigma")),
        LevyMeasure::scalar(&atoms)?,
        driver,
        p.get("horizon"),
        &[0.9, 1.0, 1.1],
        3,
    ))
}

fn monotone1d(p: &Params<'_>) -> Result<ProblemSpec> {
    let (r, c) = (p.get("rate"), p.get("coupling"));
    let driver = DriverSpec::scalar(
        move |_, _, y, _, q| -r * y + c * q,
        |x| (x - 1.0).max(0.0),
        unit_weights(),
        r.abs().max(c.abs()),
    );
    Ok(spec(
        "monotone1d",
        scalar_coeffs(p.get("sigma")),
        LevyMeasure::scalar(&[(p.get("mark"), p.get("weight"))])?,
        driver,
        p.get("horizon"),
        &[1.0],
        3,
    ))
}

fn nonmonotone1d(p: &Params<'_>) -> Result<ProblemSpec> {
    let (r, c) = (p.get("rate"), p.get("coupling"));
    let driver = DriverSpec::scalar(
        move |_, _, y, _, q| -r * y - c * q,
        |x| (x - 1.0).max(0.0),
        WeightFamily::scalar(|_, _, e| e, 1.0),
        r.abs().max(c.abs()),
    );
    Ok(spec(
        "nonmonotone1d",
        scalar_coeffs(p.get("sigma")),
        LevyMeasure::scalar(&[(0.3, 1.0), (-0.25, 0.8)])?,
        driver,
        p.get("horizon"),
        &[1.0],
        3,
    ))
}

fn american1d(p: &Params<'_>) -> Result<ProblemSpec> {
    let (r, strike) = (p.get("rate"), p.get("strike"));
    let driver = DriverSpec::scalar(move |_, _, y, _, _| -r * y, move |x| (strike - x).max(0.0), unit_weights(), r);
    let mut s = spec(
        "american1d",
        scalar_coeffs(p.get("sigma")),
        LevyMeasure::scalar(&[(p.get("mark"), p.get("weight"))])?,
        driver,
        p.get("horizon"),
        &[1.0, 1.1],
        3,
    );
    s.obstacle = Some(ObstacleSpec::new(move |_, x| (strike - x[0]).max(0.0)));
    Ok(s)
}

fn coupled2(p: &Params<'_>) -> Result<ProblemSpec> {
    let (r, k, c) = (p.get("rate"), p.get("cross"), p.get("coupling"));
    let h = |i: usize| -> DriverFn {
        Arc::new(move |a: &DriverArgs<'_>| -r * a.y[i] + k * (a.y[1 - i] - a.y[i]) + c * a.q)
    };
    let g: TerminalFn = Arc::new(|x: &[f64]| (x[0] - 1.0).max(0.0));
    let bound = ((r + k).powi(2) + k * k).sqrt().max(c.abs());
    let driver = DriverSpec::new(
        vec![h(0), h(1)],
        vec![g.clone(), g],
        WeightFamily::uniform(2, Arc::new(|_, _, _| 1.0), 10.0),
        bound,
    )?;
    Ok(spec(
        "coupled2",
        scalar_coeffs(p.get("sigma")),
        LevyMeasure::scalar(&[(p.get("mark"), p.get("weight"))])?,
        driver,
        p.get("horizon"),
        &[1.0],
        3,
    ))
}

/// Which structural conditions a problem satisfies, from sample checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Listing {
    pub name: &'static str,
    pub description: &'static str,
    pub state_dim: usize,
    pub brownian_dim: usize,
    pub components: usize,
    pub atoms: usize,
    pub tags: Vec<&'static str>,
}

pub fn list_problems() -> Result<Vec<Listing>> {
    let mut out = Vec::new();
    for e in ENTRIES {
        let p = e.build(&BTreeMap::new())?;
        let times = [p.t_start, 0.5 * (p.t_start + p.horizon)];
        let points: Vec<Vec<f64>> = (-8..=8).map(|k| vec![1.0 + 0.25 * k as f64]).collect();
        let mut tags = Vec::new();
        let nondecreasing = p.driver.nondecreasing_in_q(p.brownian_dim(), &times, &points);
        let signed = p.driver.weights.nonnegative_on(&p.measure, &times, &points);
        if p.measure.is_empty() {
            tags.push("no-jumps");
        }
        if nondecreasing && signed {
            tags.push("monotone");
        }
        if !nondecreasing {
            tags.push("nonmonotone-in-q");
        }
        if !signed {
            tags.push("sign-changing-gamma");
        }
        if p.obstacle.is_some() {
            tags.push("obstacle");
        }
        if p.components() > 1 {
            tags.push("coupled-system");
        }
        out.push(Listing {
            name: e.name,
            description: e.description,
            state_dim: p.state_dim(),
            brownian_dim: p.brownian_dim(),
            components: p.components(),
            atoms: p.measure.len(),
            tags,
        });
    }
    Ok(out)
}
