//! The `contraction-lab` command line: one experiment per invocation,
//! driven by a TOML config, writing a JSON report, CSV data and a metadata
//! file with the wall-clock timestamp.
//!
//! Exit codes: 0 every check passed, 1 a check failed, 2 configuration or
//! hypothesis error, 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CouplingChoice, Experiment, ExperimentConfig, Overrides};
use crate::coupling::{evolve_ensemble, CouplingSpec, EnsembleOptions, InitialPairs};
use crate::error::{Error, Result};
use crate::models::{validate_hypothesis, ValidationGrid};
use crate::psi::{build_psi, lemma1_residuals};
use crate::rng::derive_seed;
use crate::verify::{
    affine_form, check_contraction, check_gradient, check_harnack, coupling_for, esm_second_moment_checks,
    estimate_esm, CheckReport, ContractionSetup, EsmSetup, GradientSetup, HarnackSetup, TimeCheck,
    VALIDATION_TOLERANCE,
};
use crate::wasserstein::{bootstrap_ci, transport, EmpiricalMeasure};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const REPORT_FILE: &str = "report.json";
pub const METADATA_FILE: &str = "metadata.json";

const WASSERSTEIN_REPLICATES: usize = 200;
const WASSERSTEIN_LEVEL: f64 = 0.9973;
// bootstrap only where one exact solve is cheap
const WASSERSTEIN_BOOTSTRAP_MAX_MULTI_D: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "contraction-lab", version, about = "Coupling and contraction experiments for model diffusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate ψ on its 400-node grid with the contraction constants.
    PsiTable(RunArgs),
    /// Check the index bound of the profile on a grid of point pairs.
    Validate(RunArgs),
    /// Simulate a coupled ensemble and record distance statistics.
    CoupleRun(RunArgs),
    /// Compare coupled-ensemble distances with the contraction bounds.
    ContractCheck(RunArgs),
    /// Finite-difference gradient of the semigroup against its bound.
    GradientCheck(RunArgs),
    /// Harnack inequality and the change-of-measure moments.
    HarnackCheck(RunArgs),
    /// Evolution-system estimate from receding start times.
    EsmRun(RunArgs),
    /// Transport distance between two CSV samples.
    Wasserstein(RunArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed, overriding `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory, overriding `output.dir` (default `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub paths: Option<usize>,
}

impl Command {
    pub fn split(&self) -> (Experiment, &RunArgs) {
        match self {
            Command::PsiTable(a) => (Experiment::PsiTable, a),
            Command::Validate(a) => (Experiment::Validate, a),
            Command::CoupleRun(a) => (Experiment::CoupleRun, a),
            Command::ContractCheck(a) => (Experiment::ContractCheck, a),
            Command::GradientCheck(a) => (Experiment::GradientCheck, a),
            Command::HarnackCheck(a) => (Experiment::HarnackCheck, a),
            Command::EsmRun(a) => (Experiment::EsmRun, a),
            Command::Wasserstein(a) => (Experiment::Wasserstein, a),
        }
    }
}

/// Exit code for an error, looking through per-path wrappers.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Path { source, .. } => exit_code(source),
        Error::Config { .. } | Error::Hypothesis(_) | Error::Domain(_) | Error::UnsupportedModel(..) | Error::Io(_) => {
            EXIT_CONFIG
        }
        Error::Quadrature { .. } | Error::Simulation { .. } | Error::CouplingMissed { .. } => EXIT_NUMERICAL,
    }
}

/// Result of one experiment before anything is written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    /// Experiment-specific report body.
    pub report: Value,
    /// `(file name, contents)` of the CSV artifacts.
    pub csv: Vec<(String, String)>,
}

/// Parses arguments, runs the experiment and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
        }
    };
    let (experiment, args) = cli.command.split();
    match run(experiment, args) {
        Ok(pass) => {
            eprintln!("{}: {}", experiment.name(), if pass { "pass" } else { "FAIL" });
            if pass {
                EXIT_PASS
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("{}: error: {e}", experiment.name());
            exit_code(&e)
        }
    }
}

/// Loads and resolves the config, runs the experiment and writes the
/// artifacts. Returns the overall pass flag.
pub fn run(experiment: Experiment, args: &RunArgs) -> Result<bool> {
    if let Some(threads) = args.threads {
        if threads == 0 {
            return Err(Error::config("--threads", "must be positive"));
        }
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let config = ExperimentConfig::load(&args.config)?.resolve(
        experiment,
        Overrides {
            seed: args.seed,
            dt: args.dt,
            paths: args.paths,
        },
    )?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = args
        .out
        .clone()
        .or_else(|| config.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    eprintln!("{}: seed {}, writing to {}", experiment.name(), config.seed(), out.display());
    let outcome = execute(experiment, &config, &base)?;
    write_artifacts(experiment, &config, &outcome, &out)?;
    Ok(outcome.pass)
}

/// The report body: the resolved config, the master seed and the result.
pub fn report_json(experiment: Experiment, config: &ExperimentConfig, outcome: &Outcome) -> String {
    let body = json!({
        "experiment": experiment.name(),
        "seed": config.seed(),
        "config": config,
        "overall_pass": outcome.pass,
        "report": outcome.report,
    });
    let mut text = serde_json::to_string_pretty(&body).expect("report serializes");
    text.push('\n');
    text
}

fn write_artifacts(experiment: Experiment, config: &ExperimentConfig, outcome: &Outcome, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(REPORT_FILE), report_json(experiment, config, outcome))?;
    if config.output.csv {
        for (name, contents) in &outcome.csv {
            std::fs::write(out.join(name), contents)?;
        }
    }
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let metadata = json!({
        "experiment": experiment.name(),
        "seed": config.seed(),
        "config": config,
        "timestamp_unix": timestamp,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "out_dir": out.display().to_string(),
        "files": std::iter::once(REPORT_FILE.to_string())
            .chain(outcome.csv.iter().filter(|_| config.output.csv).map(|(n, _)| n.clone()))
            .collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&metadata).expect("metadata serializes");
    text.push('\n');
    std::fs::write(out.join(METADATA_FILE), text)?;
    Ok(())
}

/// Runs the experiment without touching the file system, apart from
/// reading sample files relative to `base`.
pub fn execute(experiment: Experiment, config: &ExperimentConfig, base: &Path) -> Result<Outcome> {
    let preamble = json!({ "experiment": experiment.name(), "seed": config.seed(), "config": config });
    match experiment {
        Experiment::PsiTable => psi_table(config, &preamble),
        Experiment::Validate => validate(config),
        Experiment::CoupleRun => couple_run(config, &preamble),
        Experiment::ContractCheck => {
            let model = config.model()?;
            let hypothesis = config.profile()?.hypothesis()?;
            let setup = ContractionSetup {
                x: config.point("x", model.dim())?,
                y: config.point("y", model.dim())?,
                s: config.run.s,
                times: config.times()?,
                p: config.run.p,
                n: config.run.paths,
                dt: config.run.dt,
                seed: config.seed(),
            };
            check_outcome(check_contraction(&model, &hypothesis, &setup)?.to_check_report(), &preamble)
        }
        Experiment::GradientCheck => {
            let model = config.model()?;
            let hypothesis = config.profile()?.hypothesis()?;
            let setup = GradientSetup {
                x: config.point("x", model.dim())?,
                s: config.run.s,
                times: config.times()?,
                h: config.run.fd_step,
                n: config.run.paths,
                dt: config.run.dt,
                seed: config.seed(),
            };
            let report = check_gradient(&model, &hypothesis, config.function()?, &setup)?;
            check_outcome(report.to_check_report(), &preamble)
        }
        Experiment::HarnackCheck => {
            let model = config.model()?;
            let hypothesis = config.profile()?.hypothesis()?;
            let (k1, k2) = affine_form(&hypothesis)
                .ok_or_else(|| Error::config("profile", "the Harnack check needs an affine bound k1 - k2 ρ"))?;
            let setup = HarnackSetup {
                x: config.point("x", model.dim())?,
                y: config.point("y", model.dim())?,
                s: config.run.s,
                horizon: config.run.horizon.ok_or_else(|| Error::config("run.horizon", "is required"))?,
                p: config.run.p,
                n: config.run.paths,
                dt: config.run.dt,
                seed: config.seed(),
            };
            let report = check_harnack(&model, k1, k2, config.function()?, &setup)?;
            check_outcome(report.to_check_report(), &preamble)
        }
        Experiment::EsmRun => esm_run(config, &preamble),
        Experiment::Wasserstein => wasserstein(config, base),
    }
}

/// Reals in the CSV dialect: 17 significant digits.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_real(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}

/// A CSV file: one `#` line with the preamble JSON, the header row, then
/// the rows, all LF-terminated.
pub fn csv_text(preamble: &Value, header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {}", serde_json::to_string(preamble).expect("preamble serializes"));
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn time_check_rows(times: &[TimeCheck]) -> Vec<Vec<String>> {
    times
        .iter()
        .map(|c| {
            vec![
                real(c.t),
                c.quantity.clone(),
                real(c.estimate),
                real(c.ci[0]),
                real(c.ci[1]),
                real(c.bound),
                real(c.margin),
                c.pass.to_string(),
            ]
        })
        .collect()
}

fn check_outcome(report: CheckReport, preamble: &Value) -> Result<Outcome> {
    let header = strings(&["t", "quantity", "estimate", "ci_lower", "ci_upper", "bound", "margin", "pass"]);
    let csv = csv_text(preamble, &header, &time_check_rows(&report.times));
    Ok(Outcome {
        pass: report.overall_pass,
        report: to_value(&report),
        csv: vec![("checks.csv".into(), csv)],
    })
}

fn psi_table(config: &ExperimentConfig, preamble: &Value) -> Result<Outcome> {
    let profile = config.profile()?.curvature()?;
    let table = build_psi(&profile, config.run.p, config.run.tol)?;
    let residuals = lemma1_residuals(&table);
    let report = json!({
        "profile": profile,
        "p": table.p,
        "tolerance": table.tolerance,
        "nodes": table.len(),
        "constants": table.constants,
        "psi_at_r0p": table.psi_at_r0p,
        "residuals": residuals,
    });
    let mut head = preamble.clone();
    head["constants"] = to_value(&table.constants);
    let rows: Vec<Vec<String>> = (0..table.len())
        .map(|i| {
            vec![
                real(table.grid[i]),
                real(table.psi[i]),
                real(table.psi_prime[i]),
                real(table.psi_double_prime[i]),
            ]
        })
        .collect();
    let header = strings(&["r", "psi", "psi_prime", "psi_double_prime"]);
    Ok(Outcome {
        pass: residuals.pass(),
        report,
        csv: vec![("psi_table.csv".into(), csv_text(&head, &header, &rows))],
    })
}

fn validate(config: &ExperimentConfig) -> Result<Outcome> {
    let model = config.model()?;
    let hypothesis = config.profile()?.hypothesis()?;
    let grid = ValidationGrid::standard(&model, hypothesis.radius());
    let report = validate_hypothesis(&model, &hypothesis, &grid, VALIDATION_TOLERANCE)?;
    Ok(Outcome {
        pass: report.pass,
        report: json!({ "hypothesis": hypothesis, "validation": report }),
        csv: Vec::new(),
    })
}

fn couple_run(config: &ExperimentConfig, preamble: &Value) -> Result<Outcome> {
    let model = config.model()?;
    let dim = model.dim();
    let x = config.point("x", dim)?;
    let y = config.point("y", dim)?;
    let times = config.times()?;
    let spec = match config.run.coupling.unwrap_or(CouplingChoice::Reflection) {
        CouplingChoice::Synchronous => CouplingSpec::Synchronous,
        CouplingChoice::Reflection => match &config.profile {
            Some(p) => coupling_for(&p.hypothesis()?),
            None => CouplingSpec::pure_reflection(),
        },
    };
    let s = config.run.s;
    let t = times.iter().copied().fold(s, f64::max);
    if !(t > s) {
        return Err(Error::config("run.times", "need a time after s"));
    }
    let mut powers = vec![1.0];
    if config.run.p != 1.0 {
        powers.push(config.run.p);
    }
    let options = EnsembleOptions {
        checkpoints: times,
        powers,
    };
    let ens = evolve_ensemble(
        &model,
        &spec,
        &InitialPairs::fixed(x.clone(), y.clone()),
        s,
        t,
        config.run.dt,
        config.run.paths,
        config.seed(),
        &options,
    )?;
    let summaries = ens.summaries();
    let report = json!({
        "model": ens.model,
        "coupling": spec,
        "x": x,
        "y": y,
        "s": s,
        "n": ens.n,
        "dt": ens.dt,
        "summaries": summaries,
        "coupled_fraction": summaries.last().map(|s| s.coupled_fraction),
    });

    let p = config.run.p;
    let mut header = strings(&["t", "mean_distance", "mean_distance_se", "coupled_fraction"]);
    if p != 1.0 {
        header.push("moment_p".into());
        header.push("moment_p_se".into());
    }
    let summary_rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            let mut row = vec![
                real(s.t),
                real(s.mean_distance.mean),
                real(s.mean_distance.se),
                real(s.coupled_fraction),
            ];
            if let Some(m) = s.moments.iter().find(|m| m.p == p && p != 1.0) {
                row.push(real(m.estimate.mean));
                row.push(real(m.estimate.se));
            }
            row
        })
        .collect();

    let terminal = ens.terminal();
    let mut header_t = vec!["path_id".to_string()];
    header_t.extend((0..dim).map(|k| format!("x{k}")));
    header_t.extend((0..dim).map(|k| format!("y{k}")));
    header_t.push("coupled_at".into());
    let terminal_rows: Vec<Vec<String>> = (0..ens.n)
        .map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(terminal.x[i * dim..(i + 1) * dim].iter().map(|v| real(*v)));
            row.extend(terminal.y[i * dim..(i + 1) * dim].iter().map(|v| real(*v)));
            row.push(opt_real(ens.coupled_at[i]));
            row
        })
        .collect();
    Ok(Outcome {
        pass: true,
        report,
        csv: vec![
            ("summary.csv".into(), csv_text(preamble, &header, &summary_rows)),
            ("terminal.csv".into(), csv_text(preamble, &header_t, &terminal_rows)),
        ],
    })
}

fn esm_run(config: &ExperimentConfig, preamble: &Value) -> Result<Outcome> {
    let model = config.model()?;
    let r = &config.run;
    if r.starts.is_empty() {
        return Err(Error::config("run.starts", "at least one start is required"));
    }
    let setup = EsmSetup {
        t: r.t,
        starts: r.starts.clone(),
        law_a: r.law_a.ok_or_else(|| Error::config("run.law_a", "is required"))?,
        law_b: r.law_b.ok_or_else(|| Error::config("run.law_b", "is required"))?,
        n: r.paths,
        dt: r.dt,
        seed: config.seed(),
    };
    let esm = estimate_esm(&model, &setup)?;
    let moments = esm_second_moment_checks(&model, &esm)?;
    let mut report = esm.to_check_report();
    let moments_pass = moments.iter().all(|m| m.pass);
    report.times.extend(moments);
    report.overall_pass = report.overall_pass && moments_pass;

    let header = strings(&[
        "s",
        "gap",
        "gap_se",
        "mean_a",
        "mean_a_se",
        "mean_b",
        "mean_b_se",
        "second_moment_a",
        "second_moment_a_se",
    ]);
    let rows: Vec<Vec<String>> = esm
        .rows
        .iter()
        .map(|w| {
            vec![
                real(w.s),
                real(w.gap),
                real(w.gap_se),
                real(w.mean_a.mean),
                real(w.mean_a.se),
                real(w.mean_b.mean),
                real(w.mean_b.se),
                real(w.second_moment_a.mean),
                real(w.second_moment_a.se),
            ]
        })
        .collect();
    let mut outcome = check_outcome(report, preamble)?;
    outcome.csv.push(("esm.csv".into(), csv_text(preamble, &header, &rows)));
    Ok(outcome)
}

/// Reads a sample file: optional `#` lines, a header row, then one point per
/// row.
pub fn read_samples(path: &Path, field: &str) -> Result<(usize, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(field, format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::config(field, "sample file is empty"))?;
    let dim = header.split(',').count();
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != dim {
            return Err(Error::config(field, format!("row {} has {} columns, header has {dim}", i + 1, row.len())));
        }
        for cell in row {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::config(field, format!("row {}: `{cell}` is not a number", i + 1)))?;
            points.push(v);
        }
    }
    if points.is_empty() {
        return Err(Error::config(field, "sample file has no rows"));
    }
    Ok((dim, points))
}

fn wasserstein(config: &ExperimentConfig, base: &Path) -> Result<Outcome> {
    let r = &config.run;
    let file = |name: &Option<String>, field: &str| -> Result<(usize, Vec<f64>)> {
        let name = name.as_ref().ok_or_else(|| Error::config(field, "is required"))?;
        read_samples(&base.join(name), field)
    };
    let (dim_a, a) = file(&r.samples_a, "run.samples_a")?;
    let (dim_b, b) = file(&r.samples_b, "run.samples_b")?;
    if dim_a != dim_b {
        return Err(Error::config("run.samples_b", format!("has {dim_b} columns, samples_a has {dim_a}")));
    }
    let mu = EmpiricalMeasure::uniform(dim_a, a)?;
    let nu = EmpiricalMeasure::uniform(dim_b, b)?;
    let result = transport(&mu, &nu, r.p, r.cost)?;
    let ci = if dim_a == 1 || mu.len().max(nu.len()) <= WASSERSTEIN_BOOTSTRAP_MAX_MULTI_D {
        Some(bootstrap_ci(
            &mu,
            &nu,
            r.p,
            r.cost,
            WASSERSTEIN_REPLICATES,
            WASSERSTEIN_LEVEL,
            derive_seed(config.seed(), "wasserstein-bootstrap"),
        )?)
    } else {
        None
    };
    Ok(Outcome {
        pass: true,
        report: json!({
            "value": result.value,
            "method": result.method,
            "cost": result.cost,
            "p": r.p,
            "n": [mu.len(), nu.len()],
            "dim": dim_a,
            "ci": ci,
        }),
        csv: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_carry_seventeen_digits() {
        assert_eq!(real(0.1), "1.0000000000000001e-1");
        assert_eq!(real(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(real(-2.0), "-2.0000000000000000e0");
        assert_eq!(opt_real(None), "");
    }

    #[test]
    fn csv_layout() {
        let text = csv_text(&json!({"seed": 1}), &strings(&["a", "b"]), &[vec!["1".into(), "2".into()]]);
        assert_eq!(text, "# {\"seed\":1}\na,b\n1,2\n");
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::config("run.dt", "bad")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Hypothesis("no".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::Simulation {
                time: 1.0,
                detail: "nan".into()
            }),
            EXIT_NUMERICAL
        );
        let wrapped = Error::Path {
            index: 3,
            source: Box::new(Error::Quadrature {
                requested: 1e-9,
                achieved: 1e-3,
            }),
        };
        assert_eq!(exit_code(&wrapped), EXIT_NUMERICAL);
    }

    #[test]
    fn sample_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "# note\nx0,x1\n1,2\n3.5,-4e-1\n").unwrap();
        let (dim, pts) = read_samples(&path, "run.samples_a").unwrap();
        assert_eq!((dim, pts), (2, vec![1.0, 2.0, 3.5, -0.4]));
        std::fs::write(&path, "x0,x1\n1\n").unwrap();
        assert!(matches!(read_samples(&path, "run.samples_a"), Err(Error::Config { .. })));
    }
}
