//! Command-line driver: single runs, method comparisons, and parameter
//! studies on the Burgers testbed.

pub mod config;
pub mod report;

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use log::{error, info, warn};
use nalgebra::DVector;
use serde::Serialize;

use crate::auglag::{run_auglag, AuglagOutcome, MajorRecord};
use crate::burgers::make_problem;
use crate::eqpbtr::{EqpBtr, LpDump, Method};
use crate::error::{Error, Result};
use crate::system::{assemble_functionals, solve_primal, Problem, SolveCounters, SolveKind};

use config::RunConfig;
use report::{comparison_csv, fmt_f64, history_csv, report_rows, to_json, trace_jsonl, write_file, ReportRow};

/// Exit code for configuration and usage errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for solver failures.
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "eqptr", version, about = "Augmented Lagrangian trust-region optimization with on-the-fly EQP models")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Concurrent runs for compare and study.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Write every EQP training LP to lp_dumps.jsonl.
    #[arg(long, global = true)]
    pub dump_lp: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one optimization.
    Run { config: PathBuf },
    /// Run several configurations and tabulate cost at common cutoffs.
    Compare {
        #[arg(required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
    },
    /// Parameter study: `penalty` (τ0, a grid) or `snapshots` (inheritance counts).
    Study { kind: String, config: PathBuf },
}

/// Solve counts of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CountSummary {
    pub hdm_primal: usize,
    pub hdm_adjoint: usize,
    pub hdm_sensitivity: usize,
    pub hdm: usize,
    pub rom: usize,
    pub eqp: usize,
    pub lp: usize,
}

impl CountSummary {
    fn from_counters(c: &SolveCounters) -> Self {
        Self {
            hdm_primal: c.count(SolveKind::HdmPrimal),
            hdm_adjoint: c.count(SolveKind::HdmAdjoint),
            hdm_sensitivity: c.count(SolveKind::HdmSensitivity),
            hdm: c.hdm(),
            rom: c.count(SolveKind::Rom),
            eqp: c.count(SolveKind::Eqp),
            lp: c.count(SolveKind::Lp),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dump_lp: bool,
}

/// Everything a finished (or aborted) run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub outcome: AuglagOutcome,
    pub counts: CountSummary,
    pub events: Vec<SolveKind>,
    pub mu0: DVector<f64>,
    /// j(u⋆(μ₀), μ₀).
    pub j_initial: f64,
    pub audit_seconds: f64,
    pub lp_dumps: Vec<LpDump>,
}

impl RunResult {
    pub fn final_major(&self) -> Option<&MajorRecord> {
        self.outcome.majors.last()
    }

    pub fn rows(&self, j_star: Option<f64>) -> Vec<ReportRow> {
        report_rows(&self.outcome.majors, &self.outcome.traces, j_star, self.j_initial)
    }
}

/// Builds the testbed and runs the configured method.
pub fn execute(config: &RunConfig, opts: RunOptions) -> Result<RunResult> {
    config.validate()?;
    let problem = make_problem(&config.testbed)?;
    let mu0 = problem.initial_parameters();
    let u0 = solve_primal(&problem, &mu0, &problem.initial_state())?;
    let j_initial = assemble_functionals(&problem, &u0, &mu0)?.j;
    let counters = SolveCounters::default();
    let mut driver = EqpBtr::new(&problem, &counters, config.method, config.trustregion, config.eqp)?;
    driver.dump_lp = opts.dump_lp;
    let outcome = run_auglag(&mu0, &config.auglag, &mut driver)?;
    let audit_seconds = driver.audit_seconds;
    let lp_dumps = std::mem::take(&mut driver.lp_dumps);
    drop(driver);
    Ok(RunResult {
        config: config.clone(),
        outcome,
        counts: CountSummary::from_counters(&counters),
        events: counters.events(),
        mu0,
        j_initial,
        audit_seconds,
        lp_dumps,
    })
}

/// Objective of the tightly converged full-order reference run.
pub fn reference_objective(config: &RunConfig) -> Result<f64> {
    let r = execute(&config.reference(), RunOptions::default())?;
    if let Some(f) = &r.outcome.failure {
        error!("reference run failed: {f}");
        return Err(Error::SolverFailure { solver: "reference run", residual: f64::NAN });
    }
    if !r.outcome.converged {
        warn!("reference run stopped before convergence; using its last iterate");
    }
    r.final_major().map(|m| m.j).ok_or(Error::SolverFailure { solver: "reference", residual: f64::NAN })
}

/// Reference objectives shared between runs with the same reference setup.
#[derive(Default)]
pub struct ReferenceCache {
    values: Mutex<HashMap<String, Option<f64>>>,
}

impl ReferenceCache {
    pub fn get(&self, config: &RunConfig) -> Option<f64> {
        if !config.report.reference {
            return None;
        }
        let mut key_cfg = config.reference();
        key_cfg.output = None;
        // The full-order reference ignores the EQP settings.
        key_cfg.eqp = Default::default();
        let key = to_json(&key_cfg).unwrap_or_default();
        // Held across the solve so concurrent callers wait for one reference.
        let mut values = self.values.lock().expect("cache lock");
        if let Some(v) = values.get(&key) {
            return *v;
        }
        let v = match reference_objective(config) {
            Ok(v) => Some(v),
            Err(e) => {
                warn!("no reference objective: {e}");
                None
            }
        };
        values.insert(key, v);
        v
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    method: Method,
    status: &'a str,
    failure: Option<&'a str>,
    mu0: Vec<f64>,
    mu: Vec<f64>,
    j: Option<f64>,
    c: Option<&'a [f64]>,
    c_inf: Option<f64>,
    c_norm: Option<f64>,
    chi_inf: Option<f64>,
    theta: Option<&'a [f64]>,
    tau: Option<f64>,
    majors: usize,
    tr_iterations: usize,
    counts: CountSummary,
    j_initial: f64,
    j_star: Option<f64>,
    s_final: Option<f64>,
    wall_seconds: f64,
    audit_seconds: f64,
    cost_seconds: f64,
}

pub fn status(result: &RunResult) -> &'static str {
    if result.outcome.failure.is_some() {
        "failed"
    } else if result.outcome.converged {
        "converged"
    } else {
        "not-converged"
    }
}

/// Writes history.csv, trace.jsonl, summary.json (and lp_dumps.jsonl when
/// LPs were recorded) into `dir`.
pub fn write_run(dir: &Path, result: &RunResult, j_star: Option<f64>) -> Result<()> {
    let rows = result.rows(j_star);
    write_file(&dir.join("history.csv"), &history_csv(&rows))?;
    write_file(&dir.join("trace.jsonl"), &trace_jsonl(&result.outcome.traces)?)?;
    let last = result.final_major();
    let summary = Summary {
        method: result.config.method,
        status: status(result),
        failure: result.outcome.failure.as_deref(),
        mu0: result.mu0.iter().copied().collect(),
        mu: result.outcome.mu.iter().copied().collect(),
        j: last.map(|m| m.j),
        c: last.map(|m| m.c.as_slice()),
        c_inf: last.map(|m| m.c_inf),
        c_norm: last.map(|m| m.c_norm),
        chi_inf: last.map(|m| m.chi_inf),
        theta: last.map(|m| m.theta.as_slice()),
        tau: last.map(|m| m.tau),
        majors: result.outcome.majors.len(),
        tr_iterations: result.outcome.traces.iter().map(Vec::len).sum(),
        counts: result.counts,
        j_initial: result.j_initial,
        j_star,
        s_final: rows.last().and_then(|r| r.s),
        wall_seconds: result.outcome.wall_time,
        audit_seconds: result.audit_seconds,
        cost_seconds: result.outcome.wall_time - result.audit_seconds,
    };
    write_file(&dir.join("summary.json"), &(to_json(&summary)? + "\n"))?;
    if !result.lp_dumps.is_empty() {
        let mut text = String::new();
        for d in &result.lp_dumps {
            text.push_str(&to_json(d)?);
            text.push('\n');
        }
        write_file(&dir.join("lp_dumps.jsonl"), &text)?;
    }
    Ok(())
}

/// Runs jobs on up to `workers` threads; results keep job order.
fn run_pool<T: Send, R: Send>(jobs: Vec<T>, workers: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                let Some((i, job)) = job else { break };
                let r = f(job);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Io(_) => EXIT_CONFIG,
        _ => EXIT_SOLVER,
    }
}

pub fn cmd_run(path: &Path, out: Option<&Path>, opts: RunOptions) -> i32 {
    let config = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return EXIT_CONFIG;
        }
    };
    let dir = out.map(Path::to_path_buf).or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let result = match execute(&config, opts) {
        Ok(r) => r,
        Err(e) => {
            error!("run failed: {e}");
            return exit_code(&e);
        }
    };
    let j_star = ReferenceCache::default().get(&config);
    if let Err(e) = write_run(&dir, &result, j_star) {
        error!("cannot write outputs: {e}");
        return EXIT_CONFIG;
    }
    info!("{} run {}; outputs in {}", config.method.name(), status(&result), dir.display());
    if result.outcome.failure.is_some() {
        EXIT_SOLVER
    } else {
        0
    }
}

fn unique_labels(paths: &[PathBuf]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            let n = seen.entry(stem.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}_{n}")
            }
        })
        .collect()
}

pub fn cmd_compare(paths: &[PathBuf], out: Option<&Path>, workers: usize, opts: RunOptions) -> i32 {
    if paths.len() < 2 {
        error!("compare needs at least two configurations");
        return EXIT_CONFIG;
    }
    let mut configs = Vec::new();
    for p in paths {
        match RunConfig::load(p) {
            Ok(mut c) => {
                c.output = None;
                configs.push(c);
            }
            Err(e) => {
                error!("{e}");
                return EXIT_CONFIG;
            }
        }
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"));
    let labels = unique_labels(paths);
    // Identical configurations share one run.
    let mut unique: Vec<RunConfig> = Vec::new();
    let slot: Vec<usize> = configs
        .iter()
        .map(|c| match unique.iter().position(|u| u == c) {
            Some(i) => i,
            None => {
                unique.push(c.clone());
                unique.len() - 1
            }
        })
        .collect();
    let cache = ReferenceCache::default();
    let results = run_pool(unique.clone(), workers, |c| {
        let r = execute(&c, opts);
        let j_star = cache.get(&c);
        (r, j_star)
    });
    let mut table = Vec::new();
    for (k, label) in labels.iter().enumerate() {
        let (res, j_star) = &results[slot[k]];
        match res {
            Ok(r) => {
                if let Err(e) = write_run(&dir.join(label), r, *j_star) {
                    error!("cannot write outputs for {label}: {e}");
                    return EXIT_CONFIG;
                }
                table.push((label.clone(), r.outcome.majors.clone(), r.rows(*j_star)));
            }
            Err(e) => {
                warn!("{label} failed: {e}");
                table.push((label.clone(), Vec::new(), Vec::new()));
            }
        }
    }
    let baseline = configs.iter().position(|c| c.method == Method::Hdm).unwrap_or(0);
    if let Err(e) = write_file(&dir.join("comparison.csv"), &comparison_csv(&table, baseline)) {
        error!("cannot write comparison: {e}");
        return EXIT_CONFIG;
    }
    0
}

/// One configuration of a parameter study.
#[derive(Debug, Clone)]
pub struct StudyCase {
    pub label: String,
    pub config: RunConfig,
}

/// The penalty grid (τ0, a) ∈ {10, 25, 50} × {10, 50, 100} or the
/// snapshot-inheritance counts {0, 5, 15, 20}.
pub fn study_cases(kind: &str, base: &RunConfig) -> Result<Vec<StudyCase>> {
    let mut cases = Vec::new();
    match kind {
        "penalty" => {
            for tau0 in [10.0, 25.0, 50.0] {
                for a in [10.0, 50.0, 100.0] {
                    let mut c = base.clone();
                    c.auglag.tau0 = tau0;
                    c.auglag.scale_a = a;
                    cases.push(StudyCase { label: format!("tau0_{tau0}_a_{a}"), config: c });
                }
            }
        }
        "snapshots" => {
            for m in [0, 5, 15, 20] {
                let mut c = base.clone();
                c.eqp.inherit_snapshots = m;
                cases.push(StudyCase { label: format!("inherit_{m}"), config: c });
            }
        }
        other => return Err(Error::Config(format!("unknown study kind '{other}' (expected penalty or snapshots)"))),
    }
    Ok(cases)
}

/// One study.csv row.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub label: String,
    pub tau0: f64,
    pub scale_a: f64,
    pub inherit_snapshots: usize,
    pub status: String,
    pub majors: usize,
    /// 1-based major at which ‖c‖∞ ≤ π⋆ first held.
    pub majors_to_feasibility: Option<usize>,
    pub j: Option<f64>,
    pub c_inf: Option<f64>,
    pub chi_inf: Option<f64>,
    pub s_final: Option<f64>,
    pub hdm_solves: usize,
    pub rom_solves: usize,
    pub eqp_solves: usize,
    pub cost_s: f64,
    pub rank: usize,
    pub error: Option<String>,
}

pub const STUDY_COLUMNS: [&str; 17] = [
    "label",
    "tau0",
    "scale_a",
    "inherit_snapshots",
    "status",
    "majors",
    "majors_to_feasibility",
    "j",
    "c_inf",
    "chi_inf",
    "s_final",
    "hdm_solves",
    "rom_solves",
    "eqp_solves",
    "cost_s",
    "rank",
    "error",
];

pub fn study_row(case: &StudyCase, res: &Result<RunResult>, j_star: Option<f64>) -> StudyRow {
    let c = &case.config;
    let mut row = StudyRow {
        label: case.label.clone(),
        tau0: c.auglag.tau0,
        scale_a: c.auglag.scale_a,
        inherit_snapshots: c.eqp.inherit_snapshots,
        status: "failed".into(),
        majors: 0,
        majors_to_feasibility: None,
        j: None,
        c_inf: None,
        chi_inf: None,
        s_final: None,
        hdm_solves: 0,
        rom_solves: 0,
        eqp_solves: 0,
        cost_s: 0.0,
        rank: 0,
        error: None,
    };
    match res {
        Err(e) => row.error = Some(e.to_string()),
        Ok(r) => {
            row.status = status(r).into();
            row.error = r.outcome.failure.clone();
            row.majors = r.outcome.majors.len();
            row.majors_to_feasibility =
                r.outcome.majors.iter().position(|m| m.c_inf <= c.auglag.pi_star).map(|i| i + 1);
            if let Some(m) = r.final_major() {
                row.j = Some(m.j);
                row.c_inf = Some(m.c_inf);
                row.chi_inf = Some(m.chi_inf);
                row.cost_s = m.cost;
            }
            row.s_final = r.rows(j_star).last().and_then(|x| x.s);
            row.hdm_solves = r.counts.hdm;
            row.rom_solves = r.counts.rom;
            row.eqp_solves = r.counts.eqp;
        }
    }
    row
}

/// Ranks rows by majors to feasibility (unreached last), keeping input
/// order among ties.
pub fn rank_rows(rows: &mut [StudyRow]) {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| (rows[i].majors_to_feasibility.unwrap_or(usize::MAX), i));
    for (r, &i) in order.iter().enumerate() {
        rows[i].rank = r + 1;
    }
}

pub fn study_csv(rows: &[StudyRow]) -> String {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut out = STUDY_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            fmt_f64(r.tau0),
            fmt_f64(r.scale_a),
            r.inherit_snapshots,
            r.status,
            r.majors,
            r.majors_to_feasibility.map(|v| v.to_string()).unwrap_or_default(),
            opt(r.j),
            opt(r.c_inf),
            opt(r.chi_inf),
            opt(r.s_final),
            r.hdm_solves,
            r.rom_solves,
            r.eqp_solves,
            fmt_f64(r.cost_s),
            r.rank,
            err
        ));
    }
    out
}

pub fn cmd_study(kind: &str, path: &Path, out: Option<&Path>, workers: usize, opts: RunOptions) -> i32 {
    let base = match RunConfig::load(path) {
        Ok(mut c) => {
            c.output = None;
            c
        }
        Err(e) => {
            error!("{e}");
            return EXIT_CONFIG;
        }
    };
    let cases = match study_cases(kind, &base) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return EXIT_CONFIG;
        }
    };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"));
    let j_star = ReferenceCache::default().get(&base);
    let results = run_pool(cases.clone(), workers, |case| execute(&case.config, opts));
    let mut rows = Vec::new();
    for (case, res) in cases.iter().zip(&results) {
        if let Ok(r) = res {
            if let Err(e) = write_run(&dir.join(&case.label), r, j_star) {
                error!("cannot write outputs for {}: {e}", case.label);
                return EXIT_CONFIG;
            }
        }
        rows.push(study_row(case, res, j_star));
    }
    rank_rows(&mut rows);
    if let Err(e) = write_file(&dir.join("study.csv"), &study_csv(&rows)) {
        error!("cannot write study: {e}");
        return EXIT_CONFIG;
    }
    0
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let opts = RunOptions { dump_lp: cli.dump_lp };
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Run { config } => cmd_run(config, out, opts),
        Command::Compare { configs } => cmd_compare(configs, out, cli.workers, opts),
        Command::Study { kind, config } => cmd_study(kind, config, out, cli.workers, opts),
    }
}
