//! Command implementations behind the `autotune` binary.

pub mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use autotune::closedloop::EpisodeOutcome;
use autotune::control::ControllerParams;
use autotune::dynamics::Context;
use autotune::seed::SeedStream;
use autotune::tuner::{
    export_grid, grid_csv, rebuild_surrogates, run_benchmark_algorithm, stage1_optimize, summarize, validate, Algorithm,
    BenchmarkRow, Counters, Environment, Incumbent, TunerRecord, TuningRun, Validation,
};
use autotune::Error;
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const HISTORY: &str = "history.jsonl";
pub const BO_LOG: &str = "bo_log.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const GRID: &str = "grid.csv";
pub const BENCHMARK: &str = "benchmark.csv";
pub const BENCHMARK_RUNS: &str = "benchmark_runs.jsonl";
pub const TRACE: &str = "trace.csv";

/// Command failure, mapped onto the process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Config(String),
    Infeasible(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Infeasible(m) => write!(f, "infeasible: {m}"),
            Failure::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidParams(_) | Error::InvalidPlant(_) | Error::InvalidDistribution(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("serializable record");
    s.push('\n');
    s
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    write_atomic(&out.join(RESOLVED_CONFIG), cfg.to_json().as_bytes())
}

fn check_params(cfg: &RunConfig, p: &ControllerParams) -> Result<(), Failure> {
    p.validate()?;
    if !cfg.tuner.bounds.contains(p) {
        return Err(Failure::Config(format!(
            "controller parameters {p:?} lie outside tuner.bounds {:?}",
            cfg.tuner.bounds
        )));
    }
    Ok(())
}

/// One episode; writes the per-sample trace when `trace` is set.
pub fn simulate(
    cfg: &RunConfig,
    params: &ControllerParams,
    ctx: &Context,
    trace: Option<&Path>,
) -> Result<EpisodeOutcome, Failure> {
    check_params(cfg, params)?;
    let sim = cfg.simulator()?;
    let seed = SeedStream::new(cfg.seed).child("simulate");
    let (out, tr) = sim.run_traced(params, ctx, seed);
    if let Some(path) = trace {
        write_atomic(path, tr.to_csv().as_bytes())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub evaluations: usize,
    pub best: Option<Incumbent>,
    pub validation: Option<Validation>,
    /// Validation minus predicted objective of the final pick.
    pub gap: Option<f64>,
    pub counters: Counters,
    pub outliers: Vec<usize>,
    pub failures: Vec<usize>,
}

impl TuneSummary {
    fn new(cfg: &RunConfig, run: &TuningRun) -> Self {
        TuneSummary {
            algorithm: run.algorithm,
            seed: cfg.seed,
            evaluations: run.records.len(),
            best: run.best.clone(),
            validation: run.validation.clone(),
            gap: run.gap(),
            counters: run.counters,
            outliers: (0..run.outliers.len()).filter(|&i| run.outliers[i]).collect(),
            failures: run.records.iter().filter(|r| r.failed).map(|r| r.iteration).collect(),
        }
    }
}

#[derive(Serialize)]
struct BoLogLine<'a> {
    iteration: usize,
    x_next: &'a [f64],
    origin: autotune::tuner::Origin,
    ri: Option<f64>,
    p_feas: Option<f64>,
    p_out: Option<f64>,
    p_fail: Option<f64>,
    alpha: Option<f64>,
    hyperparams: &'a [autotune::gp::GpHyperparams],
}

/// Full two-stage tuning run. History lines are appended as records
/// complete and the files are moved into place at the end.
pub fn tune(cfg: &RunConfig, out: &Path) -> Result<TuneSummary, Failure> {
    let sim = cfg.simulator()?;
    let env = Environment {
        evaluator: &sim,
        contexts: cfg.contexts,
        timing: cfg.timing,
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_resolved(cfg, out)?;

    let hist_path = out.join(HISTORY);
    let log_path = out.join(BO_LOG);
    let mut hist = fs::File::create(tmp_path(&hist_path)).map_err(|e| io_err(&hist_path, e))?;
    let mut log = fs::File::create(tmp_path(&log_path)).map_err(|e| io_err(&log_path, e))?;
    let mut io_error: Option<Failure> = None;
    let mut previous: Vec<autotune::gp::GpHyperparams> = Vec::new();
    let run = stage1_optimize(&env, &cfg.tuner, SeedStream::new(cfg.seed), |r: &TunerRecord| {
        let a = r.acquisition;
        let line = BoLogLine {
            iteration: r.iteration,
            x_next: &r.x,
            origin: r.origin,
            ri: a.map(|a| a.ri),
            p_feas: a.map(|a| a.p_feas),
            p_out: a.map(|a| a.p_out),
            p_fail: a.map(|a| a.p_fail),
            alpha: a.map(|a| a.alpha),
            hyperparams: &previous,
        };
        let res = hist
            .write_all(json_line(r).as_bytes())
            .and_then(|_| log.write_all(json_line(&line).as_bytes()));
        if let (Err(e), None) = (res, &io_error) {
            io_error = Some(io_err(&hist_path, e));
        }
        previous = r.hyperparams.clone();
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    drop((hist, log));
    fs::rename(tmp_path(&hist_path), &hist_path).map_err(|e| io_err(&hist_path, e))?;
    fs::rename(tmp_path(&log_path), &log_path).map_err(|e| io_err(&log_path, e))?;

    let summary = TuneSummary::new(cfg, &run);
    write_atomic(&out.join(SUMMARY), (serde_json::to_string_pretty(&summary).unwrap() + "\n").as_bytes())?;
    Ok(summary)
}

/// Validate one controller with the validation stream of `cfg.seed`, the
/// same draws a tuning run with that seed uses.
pub fn validate_params(cfg: &RunConfig, params: &ControllerParams) -> Result<Validation, Failure> {
    check_params(cfg, params)?;
    let sim = cfg.simulator()?;
    Ok(validate(
        &sim,
        params,
        &cfg.contexts,
        &cfg.timing,
        &cfg.tuner.limits,
        cfg.tuner.validation_draws,
        SeedStream::new(cfg.seed).child("validation"),
    ))
}

pub fn read_summary(path: &Path) -> Result<TuneSummary, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("missing summary {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// One benchmark repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub best: Option<Incumbent>,
    pub validation: Option<Validation>,
    pub gap: Option<f64>,
    /// Best validated incumbent objective after each evaluation.
    pub curve: Vec<Option<f64>>,
    pub counters: Counters,
    pub outliers: usize,
    pub failures: usize,
}

impl BenchmarkRun {
    fn new(seed: u64, run: &TuningRun) -> Self {
        BenchmarkRun {
            algorithm: run.algorithm,
            seed,
            best: run.best.clone(),
            validation: run.validation.clone(),
            gap: run.gap(),
            curve: run.curve(),
            counters: run.counters,
            outliers: run.outliers.iter().filter(|&&o| o).count(),
            failures: run.records.iter().filter(|r| r.failed).count(),
        }
    }
}

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = String::from("algorithm,feasibility,obj_validation,obj_gap\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.algorithm, r.feasibility, r.obj_validation, r.obj_gap));
    }
    s
}

/// All configured algorithms over all repetitions, `workers` runs at a
/// time. Output order does not depend on the worker count.
pub fn benchmark(cfg: &RunConfig, out: &Path, workers: usize) -> Result<(Vec<BenchmarkRow>, Vec<BenchmarkRun>), Failure> {
    let sim = cfg.simulator()?;
    let env = Environment {
        evaluator: &sim,
        contexts: cfg.contexts,
        timing: cfg.timing,
    };
    write_resolved(cfg, out)?;
    let jobs: Vec<(Algorithm, u64)> = cfg
        .benchmark
        .algorithms
        .iter()
        .flat_map(|&a| (0..cfg.benchmark.repetitions as u64).map(move |i| (a, cfg.benchmark.first_seed + i)))
        .collect();
    let results: Mutex<Vec<Option<Result<TuningRun, Error>>>> = Mutex::new(jobs.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(alg, seed)) = jobs.get(i) else { break };
                let r = run_benchmark_algorithm(alg, &env, &cfg.tuner, SeedStream::new(seed));
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut runs: Vec<(u64, TuningRun)> = Vec::with_capacity(jobs.len());
    for (r, &(_, seed)) in results.into_inner().unwrap().into_iter().zip(&jobs) {
        runs.push((seed, r.expect("every job ran")?));
    }

    let rows: Vec<BenchmarkRow> = cfg
        .benchmark
        .algorithms
        .iter()
        .map(|&a| {
            let of: Vec<TuningRun> = runs.iter().filter(|(_, r)| r.algorithm == a).map(|(_, r)| r.clone()).collect();
            summarize(a, &of)
        })
        .collect();
    let details: Vec<BenchmarkRun> = runs.iter().map(|(s, r)| BenchmarkRun::new(*s, r)).collect();
    write_atomic(&out.join(BENCHMARK), benchmark_csv(&rows).as_bytes())?;
    let lines: String = details.iter().map(json_line).collect();
    write_atomic(&out.join(BENCHMARK_RUNS), lines.as_bytes())?;
    Ok((rows, details))
}

pub fn read_history(path: &Path) -> Result<Vec<TunerRecord>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("missing run artifact {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Failure::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Surrogate grid from the artifacts of a finished `tune` run in `run_dir`.
pub fn grid(run_dir: &Path, out: &Path, resolution: Option<usize>) -> Result<PathBuf, Failure> {
    let cfg_path = run_dir.join(RESOLVED_CONFIG);
    if !cfg_path.exists() {
        return Err(Failure::Runtime(format!("missing run artifact {}", cfg_path.display())));
    }
    let cfg = RunConfig::load(&cfg_path)?;
    let records = read_history(&run_dir.join(HISTORY))?;
    let summary = read_summary(&run_dir.join(SUMMARY))?;
    let ctx = rebuild_surrogates(&records, &cfg.tuner, SeedStream::new(cfg.seed))?;
    let problem = cfg.tuner.problem();
    let fixed = summary
        .best
        .map(|b| b.x)
        .unwrap_or_else(|| problem.bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect());
    let [a, b] = cfg.grid.dims;
    let rows = export_grid(&ctx, &problem, (a, b), &fixed, resolution.unwrap_or(cfg.grid.resolution))?;
    let path = out.join(GRID);
    write_atomic(&path, grid_csv(&cfg.tuner.space.dim_names(), &rows).as_bytes())?;
    Ok(path)
}
