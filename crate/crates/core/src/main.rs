use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use jumpflow::harness::{list_problems, run_to_dir, validate_config};
use jumpflow::Error;

#[derive(Parser)]
#[command(name = "jumpflow", version, about = "Monte-Carlo solver for nonlocal equations with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// List registered problems.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Check a configuration file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) | Error::UnknownProblem(_) => "config",
            Error::Io(_) => "io",
            Error::NotConverged { .. } => "not_converged",
            Error::Compatibility { .. } => "compatibility",
            Error::Stability(_) => "stability",
            _ => "numerics",
        };
        let code = if kind == "config" { 2 } else { 1 };
        Failure {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

fn read(path: &PathBuf) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure {
        kind: "io",
        message: format!("{}: {e}", path.display()),
        code: 2,
    })
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            paths,
            steps,
        } => {
            let mut cfg = validate_config(&read(&config)?).map_err(Error::from)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = paths {
                cfg.paths = p;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if cfg.paths == 0 || cfg.steps == 0 {
                return Err(Error::Config("paths and steps must be ≥ 1".into()).into());
            }
            let dir = out.or_else(|| cfg.out.clone()).ok_or_else(|| Failure {
                kind: "config",
                message: "no output directory: pass --out or set `out`".into(),
                code: 2,
            })?;
            let report = run_to_dir(&cfg, &dir)?;
            for probe in &report.probes {
                let values: Vec<String> = probe
                    .values
                    .iter()
                    .map(|v| match v.std_error() {
                        s if s > 0.0 => format!("{:.6} ± {:.2e}", v.value, s),
                        _ => format!("{:.6}", v.value),
                    })
                    .collect();
                println!("x = {:?}: {}", probe.x, values.join(", "));
            }
            println!("digest {}", report.numerics_digest);
            println!("wrote {}", dir.display());
            let failed = report
                .probes
                .iter()
                .flat_map(|p| p.comparison.iter().flatten())
                .filter(|r| !r.pass)
                .count();
            if failed > 0 {
                return Err(Failure {
                    kind: "comparison",
                    message: format!("{failed} probe comparisons outside tolerance"),
                    code: 1,
                });
            }
            Ok(())
        }
        Command::List { json } => {
            let listing = list_problems()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&listing).map_err(Error::from)?);
            } else {
                for l in listing {
                    println!(
                        "{:<14} d={} m={} k={} atoms={:<2} [{}]  {}",
                        l.name,
                        l.state_dim,
                        l.brownian_dim,
                        l.components,
                        l.atoms,
                        l.tags.join(", "),
                        l.description
                    );
                }
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = validate_config(&read(&config)?).map_err(|e| Failure {
                kind: "config",
                message: e.to_string(),
                code: 2,
            })?;
            println!("ok: {} ({:?}), {} paths × {} steps", cfg.problem, cfg.mode, cfg.paths, cfg.steps);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let body = json!({ "error": { "kind": f.kind, "message": f.message } });
            eprintln!("{body}");
            ExitCode::from(f.code)
        }
    }
}
