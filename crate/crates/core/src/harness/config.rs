//! Experiment configuration in sectioned `key = value` text.
//!
//! ```toml
//! [experiment]
//! problem = "nonmonotone1d"
//! mode = "compare"
//! paths = 100000
//! steps = 100
//! seed = 7
//!
//! [oracle]
//! space_nodes = 1001
//! time_steps = 200
//!
//! [params]
//! coupling = 0.5
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::PathBuf;

use serde::Serialize;
use toml_edit::{ImDocument, Item, Table, Value};

use super::registry;
use crate::measure::{Atom, LevyMeasure};
use crate::oracle::NonlocalArgument;
use crate::reflected::CompatibilityRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Plain,
    Frozen,
    Picard,
    Reflected,
    Oracle,
    Compare,
}

impl Mode {
    const NAMES: [&'static str; 6] = ["plain", "frozen", "picard", "reflected", "oracle", "compare"];

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "plain" => Mode::Plain,
            "frozen" => Mode::Frozen,
            "picard" => Mode::Picard,
            "reflected" => Mode::Reflected,
            "oracle" => Mode::Oracle,
            "compare" => Mode::Compare,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleConfig {
    pub space_nodes: usize,
    pub time_steps: usize,
    pub argument: NonlocalArgument,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            space_nodes: 1001,
            time_steps: 200,
            argument: NonlocalArgument::Solution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectedConfig {
    /// Penalization parameters compared against max-reflection.
    pub penalties: Vec<f64>,
    pub compatibility: CompatibilityRule,
}

impl Default for ReflectedConfig {
    fn default() -> Self {
        ReflectedConfig {
            penalties: vec![1e-1, 1e-2, 1e-3],
            compatibility: CompatibilityRule::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub problem: String,
    pub mode: Mode,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub degree: Option<usize>,
    pub alpha: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Relative tolerance used by compare mode next to the 3 standard-error band.
    pub rel_tol: f64,
    pub probes: Option<Vec<f64>>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub oracle: OracleConfig,
    pub reflected: ReflectedConfig,
    pub params: BTreeMap<String, f64>,
    /// Replaces the problem's jump measure when set.
    pub levy: Option<Vec<Atom>>,
}

impl ExperimentConfig {
    /// Defaults for everything except problem and mode.
    pub fn new(problem: &str, mode: Mode) -> Self {
        ExperimentConfig {
            problem: problem.to_string(),
            mode,
            paths: 10_000,
            steps: 50,
            seed: 0,
            degree: None,
            alpha: None,
            tol: 1e-6,
            max_iter: 30,
            rel_tol: 0.015,
            probes: None,
            out: None,
            oracle: OracleConfig::default(),
            reflected: ReflectedConfig::default(),
            params: BTreeMap::new(),
            levy: None,
        }
    }
}

/// One problem found while validating, anchored at a line when possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, issue) in self.0.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl From<ConfigErrors> for crate::Error {
    fn from(e: ConfigErrors) -> Self {
        crate::Error::Config(e.to_string())
    }
}

const SECTIONS: [&str; 5] = ["experiment", "oracle", "reflected", "params", "levy"];
const EXPERIMENT_KEYS: [&str; 12] = [
    "problem", "mode", "paths", "steps", "seed", "degree", "alpha", "tol", "max_iter", "rel_tol", "probes", "out",
];
const ORACLE_KEYS: [&str; 3] = ["space_nodes", "time_steps", "argument"];
const REFLECTED_KEYS: [&str; 2] = ["penalties", "compatibility"];
const LEVY_KEYS: [&str; 1] = ["atoms"];

/// Closest candidate by normalized Levenshtein similarity.
pub fn nearest<'a>(word: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (c, strsim::normalized_levenshtein(word, c)))
        .filter(|(_, s)| *s > 0.3)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
}

struct Parser<'a> {
    raw: &'a str,
    issues: Vec<ConfigIssue>,
}

impl<'a> Parser<'a> {
    fn line(&self, span: Option<Range<usize>>) -> Option<usize> {
        span.map(|s| self.raw[..s.start.min(self.raw.len())].matches('\n').count() + 1)
    }

    fn push(&mut self, span: Option<Range<usize>>, message: String) {
        let line = self.line(span);
        self.issues.push(ConfigIssue { line, message });
    }

    fn check_keys(&mut self, table: &Table, section: &str, allowed: &[&str]) {
        for (key, _) in table.iter() {
            if !allowed.contains(&key) {
                let span = table.get_key_value(key).and_then(|(k, _)| k.span());
                let hint = nearest(key, allowed.iter().copied())
                    .map(|n| format!("; did you mean `{n}`?"))
                    .unwrap_or_default();
                self.push(span, format!("unknown key `{key}` in [{section}]{hint}"));
            }
        }
    }

    fn value<'t>(&self, table: &'t Table, key: &str) -> Option<(&'t Value, Option<Range<usize>>)> {
        let (_, item) = table.get_key_value(key)?;
        let v = item.as_value()?;
        Some((v, v.span()))
    }

    fn string(&mut self, table: &Table, key: &str) -> Option<String> {
        let (v, span) = self.value(table, key)?;
        match v.as_str() {
            Some(s) => Some(s.to_string()),
            None => {
                self.push(span, format!("`{key}` must be a string"));
                None
            }
        }
    }

    fn integer(&mut self, table: &Table, key: &str, min: i64) -> Option<i64> {
        let (v, span) = self.value(table, key)?;
        match v.as_integer() {
            Some(i) if i >= min => Some(i),
            Some(_) => {
                self.push(span, format!("{key} must be ≥ {min}"));
                None
            }
            None => {
                self.push(span, format!("`{key}` must be an integer"));
                None
            }
        }
    }

    fn float(&mut self, table: &Table, key: &str) -> Option<f64> {
        let (v, span) = self.value(table, key)?;
        match v.as_float().or_else(|| v.as_integer().map(|i| i as f64)) {
            Some(f) if f.is_finite() => Some(f),
            _ => {
                self.push(span, format!("`{key}` must be a finite number"));
                None
            }
        }
    }

    fn positive(&mut self, table: &Table, key: &str) -> Option<f64> {
        let span = self.value(table, key).and_then(|(_, s)| s);
        let f = self.float(table, key)?;
        if f > 0.0 {
            Some(f)
        } else {
            self.push(span, format!("{key} must be > 0"));
            None
        }
    }

    fn floats(&mut self, table: &Table, key: &str) -> Option<Vec<f64>> {
        let (v, span) = self.value(table, key)?;
        let Some(arr) = v.as_array() else {
            self.push(span, format!("`{key}` must be an array of numbers"));
            return None;
        };
        let mut out = Vec::new();
        for item in arr.iter() {
            match item.as_float().or_else(|| item.as_integer().map(|i| i as f64)) {
                Some(f) if f.is_finite() => out.push(f),
                _ => {
                    self.push(item.span(), format!("`{key}` entries must be finite numbers"));
                    return None;
                }
            }
        }
        Some(out)
    }
}

impl Parser<'_> {
    /// `atoms = [[mark..., weight], ...]`.
    fn atoms(&mut self, table: &Table) -> Option<Vec<Atom>> {
        let (v, span) = self.value(table, "atoms")?;
        let shape = "`atoms` must be an array of [mark..., weight] arrays";
        let Some(rows) = v.as_array() else {
            self.push(span, shape.into());
            return None;
        };
        let mut atoms = Vec::new();
        for row in rows.iter() {
            let numbers: Option<Vec<f64>> = row.as_array().map(|r| {
                r.iter()
                    .filter_map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
                    .collect()
            });
            match numbers {
                Some(n) if n.len() >= 2 && Some(n.len()) == row.as_array().map(|r| r.len()) => {
                    let (mark, weight) = n.split_at(n.len() - 1);
                    atoms.push(Atom { mark: mark.to_vec(), weight: weight[0] });
                }
                _ => {
                    self.push(row.span(), shape.into());
                    return None;
                }
            }
        }
        let mark_dim = atoms.first().map_or(1, |a| a.mark.len());
        if let Err(e) = LevyMeasure::new(mark_dim, atoms.clone()) {
            self.push(span, e.to_string());
            return None;
        }
        Some(atoms)
    }
}

/// Parses and checks a configuration, reporting every problem found.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let doc = match ImDocument::parse(raw) {
        Ok(d) => d,
        Err(e) => {
            let line = e.span().map(|s| raw[..s.start.min(raw.len())].matches('\n').count() + 1);
            return Err(ConfigErrors(vec![ConfigIssue {
                line,
                message: e.message().to_string(),
            }]));
        }
    };
    let mut p = Parser { raw, issues: Vec::new() };
    let root = doc.as_table();
    let empty = Table::new();
    let mut sections: BTreeMap<&str, &Table> = BTreeMap::new();
    for (name, item) in root.iter() {
        let span = root.get_key_value(name).and_then(|(k, _)| k.span());
        match (SECTIONS.contains(&name), item) {
            (true, Item::Table(t)) => {
                sections.insert(SECTIONS.iter().find(|s| **s == name).unwrap(), t);
            }
            (true, _) => p.push(span, format!("`{name}` must be a [section]")),
            (false, _) => {
                let hint = nearest(name, SECTIONS)
                    .map(|n| format!("; did you mean `{n}`?"))
                    .unwrap_or_default();
                p.push(span, format!("unknown key `{name}` at top level{hint}"));
            }
        }
    }
    let exp = sections.get("experiment").copied().unwrap_or(&empty);
    if !sections.contains_key("experiment") {
        p.push(None, "missing [experiment] section".into());
    }
    p.check_keys(exp, "experiment", &EXPERIMENT_KEYS);

    let problem = p.string(exp, "problem");
    if problem.is_none() && exp.get("problem").is_none() {
        p.push(None, "missing required key `problem` in [experiment]".into());
    }
    let entry = problem.as_deref().and_then(|name| {
        let found = registry::find(name);
        if found.is_none() {
            let span = p.value(exp, "problem").and_then(|(_, s)| s);
            let hint = nearest(name, registry::names())
                .map(|n| format!("; did you mean `{n}`?"))
                .unwrap_or_default();
            p.push(span, format!("unknown problem `{name}`{hint}"));
        }
        found
    });
    let mode = match p.string(exp, "mode") {
        Some(m) => match Mode::parse(&m) {
            Some(mode) => Some(mode),
            None => {
                let span = p.value(exp, "mode").and_then(|(_, s)| s);
                let hint = nearest(&m, Mode::NAMES).map(|n| format!("; did you mean `{n}`?")).unwrap_or_default();
                p.push(span, format!("unknown mode `{m}`{hint}"));
                None
            }
        },
        None => {
            if exp.get("mode").is_none() {
                p.push(None, "missing required key `mode` in [experiment]".into());
            }
            None
        }
    };

    let mut cfg = ExperimentConfig::new(problem.as_deref().unwrap_or(""), mode.unwrap_or(Mode::Plain));
    if let Some(v) = p.integer(exp, "paths", 1) {
        cfg.paths = v as usize;
    }
    if let Some(v) = p.integer(exp, "steps", 1) {
        cfg.steps = v as usize;
    }
    if let Some(v) = p.integer(exp, "seed", 0) {
        cfg.seed = v as u64;
    }
    if let Some(v) = p.integer(exp, "degree", 0) {
        cfg.degree = Some(v as usize);
    }
    if exp.contains_key("alpha") {
        match p.float(exp, "alpha") {
            Some(a) if a >= 0.0 => cfg.alpha = Some(a),
            Some(_) => {
                let span = p.value(exp, "alpha").and_then(|(_, s)| s);
                p.push(span, "alpha must be ≥ 0".into());
            }
            None => {}
        }
    }
    if let Some(v) = p.positive(exp, "tol") {
        cfg.tol = v;
    }
    if let Some(v) = p.integer(exp, "max_iter", 1) {
        cfg.max_iter = v as usize;
    }
    if let Some(v) = p.positive(exp, "rel_tol") {
        cfg.rel_tol = v;
    }
    if exp.contains_key("probes") {
        cfg.probes = p.floats(exp, "probes");
    }
    if let Some(out) = p.string(exp, "out") {
        cfg.out = Some(PathBuf::from(out));
    }

    if let Some(oracle) = sections.get("oracle").copied() {
        p.check_keys(oracle, "oracle", &ORACLE_KEYS);
        if let Some(v) = p.integer(oracle, "space_nodes", 3) {
            cfg.oracle.space_nodes = v as usize;
        }
        if let Some(v) = p.integer(oracle, "time_steps", 1) {
            cfg.oracle.time_steps = v as usize;
        }
        if let Some(a) = p.string(oracle, "argument") {
            match a.as_str() {
                "solution" => cfg.oracle.argument = NonlocalArgument::Solution,
                "test_function" => cfg.oracle.argument = NonlocalArgument::TestFunction,
                other => {
                    let span = p.value(oracle, "argument").and_then(|(_, s)| s);
                    p.push(span, format!("`argument` must be `solution` or `test_function`, got `{other}`"));
                }
            }
        }
    }
    if let Some(refl) = sections.get("reflected").copied() {
        p.check_keys(refl, "reflected", &REFLECTED_KEYS);
        if let Some(pen) = p.floats(refl, "penalties") {
            if pen.iter().any(|e| *e <= 0.0) {
                let span = p.value(refl, "penalties").and_then(|(_, s)| s);
                p.push(span, "penalties must be > 0".into());
            } else {
                cfg.reflected.penalties = pen;
            }
        }
        if let Some(c) = p.string(refl, "compatibility") {
            match c.as_str() {
                "standard" => cfg.reflected.compatibility = CompatibilityRule::Standard,
                "reversed" => cfg.reflected.compatibility = CompatibilityRule::Reversed,
                other => {
                    let span = p.value(refl, "compatibility").and_then(|(_, s)| s);
                    p.push(span, format!("`compatibility` must be `standard` or `reversed`, got `{other}`"));
                }
            }
        }
    }
    if let Some(levy) = sections.get("levy").copied() {
        p.check_keys(levy, "levy", &LEVY_KEYS);
        cfg.levy = p.atoms(levy);
    }
    if let Some(params) = sections.get("params").copied() {
        let allowed: Vec<&str> = entry.map(|e| e.params.iter().map(|(k, _)| *k).collect()).unwrap_or_default();
        for (key, _) in params.iter() {
            if entry.is_some() && !allowed.contains(&key) {
                let span = params.get_key_value(key).and_then(|(k, _)| k.span());
                let hint = nearest(key, allowed.iter().copied())
                    .map(|n| format!("; did you mean `{n}`?"))
                    .unwrap_or_default();
                p.push(span, format!("unknown parameter `{key}` for problem `{}`{hint}", cfg.problem));
                continue;
            }
            if let Some(v) = p.float(params, key) {
                cfg.params.insert(key.to_string(), v);
            }
        }
    }

    if let (Some(entry), Some(mode)) = (entry, mode) {
        let needs_line = p.value(exp, "mode").and_then(|(_, s)| s);
        if mode == Mode::Reflected && !entry.obstacle {
            p.push(needs_line.clone(), format!("mode `reflected` needs an obstacle problem; `{}` has none", entry.name));
        }
        if matches!(mode, Mode::Oracle | Mode::Compare) && entry.state_dim != 1 {
            p.push(needs_line, format!("mode `{mode:?}` needs a one-dimensional state"));
        }
    }

    if p.issues.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(p.issues))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levy_atoms_are_parsed_and_checked() {
        let cfg = validate_config(
            "[experiment]\nproblem = \"monotone1d\"\nmode = \"picard\"\n[levy]\natoms = [[0.3, 1.0], [-0.1, 2]]\n",
        )
        .unwrap();
        let atoms = cfg.levy.unwrap();
        assert_eq!(atoms.len(), 2);
        assert_eq!(atoms[1].mark, vec![-0.1]);
        assert_eq!(atoms[1].weight, 2.0);
        let err = validate_config(
            "[experiment]\nproblem = \"monotone1d\"\nmode = \"picard\"\n[levy]\natoms = [[0.0, 1.0]]\n",
        )
        .unwrap_err();
        assert_eq!(err.0[0].line, Some(5), "{err}");
        assert!(validate_config("[experiment]\nproblem = \"monotone1d\"\nmode = \"picard\"\n[levy]\natoms = [[1.0]]\n").is_err());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = validate_config("[experiment]\nproblem = \"martingale1d\"\nmode = \"plain\"\n").unwrap();
        assert_eq!(cfg.paths, 10_000);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.tol, 1e-6);
        assert_eq!(cfg.max_iter, 30);
        assert_eq!(cfg.oracle, OracleConfig::default());
        assert!(cfg.degree.is_none());
    }

    #[test]
    fn zero_paths_is_rejected() {
        let err = validate_config("[experiment]\nproblem = \"martingale1d\"\nmode = \"plain\"\npaths = 0\n").unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].message, "paths must be ≥ 1");
        assert_eq!(err.0[0].line, Some(4));
    }

    #[test]
    fn unknown_key_names_nearest() {
        let err = validate_config("[experiment]\nproblem = \"martingale1d\"\nmode = \"plain\"\npahts = 10\n").unwrap_err();
        assert_eq!(err.0[0].line, Some(4));
        assert!(err.0[0].message.contains("`pahts`"));
        assert!(err.0[0].message.contains("did you mean `paths`"));
    }

    #[test]
    fn every_issue_is_reported() {
        let raw = "[experiment]\nproblem = \"martingale\"\nmode = \"picrad\"\nsteps = 0\ntol = -1.0\n[oracel]\n";
        let err = validate_config(raw).unwrap_err();
        let text = err.to_string();
        assert!(err.0.len() >= 5, "{text}");
        assert!(text.contains("did you mean `martingale1d`"));
        assert!(text.contains("did you mean `picard`"));
        assert!(text.contains("steps must be ≥ 1"));
        assert!(text.contains("tol must be > 0"));
        assert!(text.contains("did you mean `oracle`"));
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let err = validate_config("[experiment]\nproblem = \n").unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].line, Some(2));
    }

    #[test]
    fn mode_requirements() {
        let err = validate_config("[experiment]\nproblem = \"martingale1d\"\nmode = \"reflected\"\n").unwrap_err();
        assert!(err.to_string().contains("obstacle"));
        let err = validate_config("[experiment]\nproblem = \"nonmonotone1d\"\nmode = \"plain\"\n[params]\ncoupling = 0.3\nsigam = 1\n")
            .unwrap_err();
        assert!(err.to_string().contains("did you mean `sigma`"));
    }

    #[test]
    fn full_config_round_trip() {
        let raw = r#"
[experiment]
problem = "american1d"
mode = "reflected"
paths = 2000
steps = 20
seed = 9
degree = 4
alpha = 0.5
tol = 1e-8
max_iter = 5
probes = [0.9, 1]

[oracle]
space_nodes = 401
time_steps = 80
argument = "test_function"

[reflected]
penalties = [0.01]
compatibility = "reversed"

[params]
sigma = 0.25
"#;
        let cfg = validate_config(raw).unwrap();
        assert_eq!(cfg.mode, Mode::Reflected);
        assert_eq!(cfg.degree, Some(4));
        assert_eq!(cfg.alpha, Some(0.5));
        assert_eq!(cfg.probes, Some(vec![0.9, 1.0]));
        assert_eq!(cfg.oracle.argument, NonlocalArgument::TestFunction);
        assert_eq!(cfg.reflected.penalties, vec![0.01]);
        assert_eq!(cfg.reflected.compatibility, CompatibilityRule::Reversed);
        assert_eq!(cfg.params["sigma"], 0.25);
    }
}
