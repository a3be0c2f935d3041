//! `qstfield`: scenario-driven front end over the field-theory library.
//!
//! Subcommands: `propagator` (kernel values and CSV tables), `verify`
//! (identity suites as JSON reports), `run` (scenario expectations and
//! scans), `graphs` (term dump of the interacting observable series).
//!
//! Exit codes: 0 success, 1 failed verification check, 2 parse/usage error,
//! 3 domain or guard violation, 4 numeric failure. `QSTFIELD_THREADS` caps
//! the integration worker count; outputs are deterministic for a fixed
//! scenario and seed.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qst_field::error::QstError;
use qst_field::perturbation::graph_dump;
use qst_field::propagators::{tabulate, PropagatorCache, PropagatorKind, QuadratureSpec, TableRow};
use qst_field::scenario::{execute, RunMode, RunOutput, ScenarioConfig};
use qst_field::verify;
use qst_field::ModelParams;

#[derive(Parser)]
#[command(
    name = "qstfield",
    version,
    about = "Perturbative scalar field theory on quantum spacetime",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a two-point kernel at a point or over a grid.
    Propagator(PropagatorArgs),
    /// Run an identity suite and emit a JSON report.
    Verify(VerifyArgs),
    /// Execute a scenario file in one of the run modes.
    Run(RunArgs),
    /// Dump the term structure of a scenario's interacting observable.
    Graphs(GraphsArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct PropagatorArgs {
    /// Kernel kind: wightman+, pauli-jordan, feynman, advanced, retarded,
    /// dirac, thermal, thermal-minus-vacuum.
    #[arg(long)]
    kind: String,
    /// Mass m.
    #[arg(long, default_value_t = 1.0)]
    m: f64,
    /// Localization length lambda.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Real time separation t.
    #[arg(long, default_value_t = 0.0)]
    t: f64,
    /// Imaginary time separation u >= 0.
    #[arg(long, default_value_t = 0.0)]
    u: f64,
    /// Spatial separation r >= 0.
    #[arg(long, default_value_t = 0.0)]
    r: f64,
    /// Inverse temperature (thermal kinds only).
    #[arg(long)]
    beta: Option<f64>,
    /// Grid spec `axis=start:stop:count[,axis=...]` with axes t, u, r;
    /// emits a CSV table instead of a single value.
    #[arg(long)]
    table: Option<String>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite name: propagators, algebra, smatrix, states, or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Multiplies every tunable threshold.
    #[arg(long, default_value_t = 1.0)]
    tol_scale: f64,
    /// Seed for the randomized checks.
    #[arg(long, default_value_t = 20260816)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// expect, adiabatic-scan, kms-scan, interacting-kms, or evolve.
    #[arg(long)]
    mode: String,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GraphsArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Write the JSON dump here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Propagator(args) => cmd_propagator(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Run(args) => cmd_run(args),
        Command::Graphs(args) => cmd_graphs(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                QstError::Parse(_) => 2,
                QstError::Domain(_) => 3,
                QstError::Numeric(_) => 4,
            })
        }
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), QstError> {
    match out {
        Some(path) => fs::write(path, text)
            .map_err(|e| QstError::Domain(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Parse `start:stop:count` into an inclusive linear grid.
fn parse_grid(spec: &str) -> Result<Vec<f64>, QstError> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(QstError::Parse(format!(
            "grid spec {spec:?} must be start:stop:count"
        )));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| QstError::Parse(format!("bad grid start {:?}", parts[0])))?;
    let stop: f64 = parts[1]
        .parse()
        .map_err(|_| QstError::Parse(format!("bad grid stop {:?}", parts[1])))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| QstError::Parse(format!("bad grid count {:?}", parts[2])))?;
    if count == 0 {
        return Err(QstError::Parse("grid count must be at least 1".into()));
    }
    if count == 1 {
        return Ok(vec![start]);
    }
    let step = (stop - start) / (count - 1) as f64;
    Ok((0..count).map(|i| start + step * i as f64).collect())
}

/// Parse the full `--table` spec; unmentioned axes stay at their scalar
/// flag values.
fn parse_table_spec(
    spec: &str,
    t: f64,
    u: f64,
    r: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), QstError> {
    let mut ts = vec![t];
    let mut us = vec![u];
    let mut rs = vec![r];
    for part in spec.split(',') {
        let (axis, grid) = part.split_once('=').ok_or_else(|| {
            QstError::Parse(format!("table spec part {part:?} must be axis=start:stop:count"))
        })?;
        let grid = parse_grid(grid)?;
        match axis {
            "t" => ts = grid,
            "u" => us = grid,
            "r" => rs = grid,
            other => {
                return Err(QstError::Parse(format!(
                    "unknown table axis {other:?}; expected t, u, or r"
                )))
            }
        }
    }
    Ok((ts, us, rs))
}

fn csv_table(rows: &[TableRow]) -> String {
    let mut text = String::from("kind,m,lambda,beta,t,u,r,re,im\n");
    for row in rows {
        let beta = row.beta.map(|b| b.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{:e},{:e}\n",
            row.kind, row.m, row.lambda, beta, row.t, row.u, row.r, row.re, row.im
        ));
    }
    text
}

fn cmd_propagator(args: PropagatorArgs) -> Result<ExitCode, QstError> {
    let kind = PropagatorKind::parse(&args.kind, args.beta)?;
    let params = ModelParams::new(args.m, args.lambda)?;
    let cache = PropagatorCache::new(params, QuadratureSpec::default())?;
    let text = match &args.table {
        Some(spec) => {
            let (ts, us, rs) = parse_table_spec(spec, args.t, args.u, args.r)?;
            let rows = tabulate(&cache, kind, &ts, &us, &rs)?;
            csv_table(&rows)
        }
        None => {
            let v = cache.eval(kind, args.t, args.u, args.r)?;
            format!("{:.6e} {:.6e}\n", v.re, v.im)
        }
    };
    emit(&args.out, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, QstError> {
    let report = verify::run(&args.suite, args.tol_scale, args.seed)?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| QstError::Numeric(format!("report serialization failed: {e}")))?;
    text.push('\n');
    emit(&args.out, &text)?;
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_scenario(path: &PathBuf) -> Result<ScenarioConfig, QstError> {
    let text = fs::read_to_string(path)
        .map_err(|e| QstError::Parse(format!("cannot read {}: {e}", path.display())))?;
    let config: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| QstError::Parse(format!("bad scenario {}: {e}", path.display())))?;
    Ok(config)
}

fn scan_csv(scan: &qst_field::states::ScanResult) -> String {
    let mut text = String::from("parameter,re,im,stderr,samples,converged\n");
    for p in &scan.points {
        text.push_str(&format!(
            "{},{:e},{:e},{:e},{},{}\n",
            p.parameter, p.value.re, p.value.im, p.std_err, p.samples, p.converged
        ));
    }
    text
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, QstError> {
    let config = load_scenario(&args.scenario)?;
    let mode = RunMode::parse(&args.mode)?;
    let output = execute(&config, mode)?;
    let scenario_value = serde_json::to_value(&config)
        .map_err(|e| QstError::Numeric(format!("scenario serialization failed: {e}")))?;
    let text = match output {
        RunOutput::Estimate { order, value, std_err, samples } => {
            let report = serde_json::json!({
                "mode": mode.name(),
                "order": order,
                "value": { "re": value.re, "im": value.im },
                "stderr": std_err,
                "samples": samples,
                "seed": config.seed,
                "scenario": scenario_value,
            });
            let mut s = serde_json::to_string_pretty(&report).expect("json");
            s.push('\n');
            s
        }
        RunOutput::Scan(scan) => scan_csv(&scan),
        RunOutput::Kms(kms) => {
            let report = serde_json::json!({
                "mode": mode.name(),
                "order": config.order,
                "value": { "re": kms.value.re, "im": kms.value.im },
                "stderr": kms.std_err,
                "samples": kms.samples,
                "direct": { "re": kms.direct.value.re, "im": kms.direct.value.im },
                "corrections": [
                    { "re": kms.corrections[0].value.re, "im": kms.corrections[0].value.im },
                    { "re": kms.corrections[1].value.re, "im": kms.corrections[1].value.im },
                ],
                "seed": config.seed,
                "scenario": scenario_value,
            });
            let mut s = serde_json::to_string_pretty(&report).expect("json");
            s.push('\n');
            s
        }
    };
    emit(&args.out, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_graphs(args: GraphsArgs) -> Result<ExitCode, QstError> {
    let config = load_scenario(&args.scenario)?;
    config.validate()?;
    let series = config.observable_series()?;
    let dump = graph_dump(&series);
    let mut text = serde_json::to_string_pretty(&dump)
        .map_err(|e| QstError::Numeric(format!("dump serialization failed: {e}")))?;
    text.push('\n');
    emit(&args.out, &text)?;
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_handles_counts() {
        assert_eq!(parse_grid("0:1:1").unwrap(), vec![0.0]);
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn table_spec_defaults_unmentioned_axes() {
        let (ts, us, rs) = parse_table_spec("r=0:2:5", 0.5, 0.0, 9.0).unwrap();
        assert_eq!(ts, vec![0.5]);
        assert_eq!(us, vec![0.0]);
        assert_eq!(rs.len(), 5);
        assert!(parse_table_spec("q=0:1:2", 0.0, 0.0, 0.0).is_err());
    }
}
