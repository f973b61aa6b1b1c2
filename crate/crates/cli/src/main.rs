use std::path::PathBuf;
use std::process::ExitCode;

use autotune::closedloop::{SyntheticTiming, TimingMode};
use autotune::control::ControllerParams;
use autotune::dynamics::Context;
use autotune_cli::{Failure, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "autotune", version, about = "Robust two-stage BO tuning of an MPC feed-velocity loop")]
struct Cli {
    /// JSON run configuration (comments allowed); defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel benchmark runs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[arg(long, global = true, value_enum)]
    timing: Option<Timing>,
    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Timing {
    Wallclock,
    Synthetic,
}

#[derive(Args, Clone)]
struct Controller {
    #[arg(long, default_value_t = ControllerParams::HAND_TUNED.control_horizon)]
    hu: usize,
    /// Defaults to `--hu`.
    #[arg(long)]
    hp: Option<usize>,
    #[arg(long, default_value_t = ControllerParams::HAND_TUNED.lambda_mpc, allow_negative_numbers = true)]
    lambda_mpc: f64,
    #[arg(long, default_value_t = ControllerParams::HAND_TUNED.lambda_kf, allow_negative_numbers = true)]
    lambda_kf: f64,
}

impl Controller {
    fn params(&self) -> ControllerParams {
        ControllerParams {
            control_horizon: self.hu,
            prediction_horizon: self.hp.unwrap_or(self.hu),
            lambda_mpc: self.lambda_mpc,
            lambda_kf: self.lambda_kf,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and print its metrics.
    Simulate {
        #[command(flatten)]
        controller: Controller,
        #[arg(long, default_value_t = 1.0)]
        stiffness: f64,
        #[arg(long, default_value_t = 1.0)]
        damping: f64,
        /// Write the per-sample trace CSV to the output directory.
        #[arg(long)]
        trace: bool,
    },
    /// Two-stage tuning run.
    Tune,
    /// Benchmark algorithms over seeded repetitions.
    Benchmark,
    /// Validate a controller on fresh context draws.
    Validate {
        #[command(flatten)]
        controller: Controller,
        /// Take the controller and seed from a tuning summary instead.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Surrogate grid from a finished tuning run.
    Grid {
        /// Directory of the tuning run; defaults to the output directory.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

fn load(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    match (cli.timing, cfg.timing) {
        (Some(Timing::Wallclock), _) => cfg.timing = TimingMode::Wallclock,
        (Some(Timing::Synthetic), TimingMode::Wallclock) => cfg.timing = TimingMode::Synthetic(SyntheticTiming::default()),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable output"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load(&cli)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::Simulate {
            controller,
            stiffness,
            damping,
            trace,
        } => {
            let path = trace.then(|| out.join(autotune_cli::TRACE));
            let outcome = autotune_cli::simulate(&cfg, &controller.params(), &Context::new(stiffness, damping), path.as_deref())?;
            print_json(&outcome);
            if outcome.is_failed() {
                return Err(Failure::Runtime("episode failed".into()));
            }
        }
        Command::Tune => {
            let summary = autotune_cli::tune(&cfg, &out)?;
            print_json(&summary);
        }
        Command::Benchmark => {
            let (rows, _) = autotune_cli::benchmark(&cfg, &out, cli.workers)?;
            print!("{}", autotune_cli::benchmark_csv(&rows));
        }
        Command::Validate { controller, summary } => {
            let params = match summary {
                Some(path) => {
                    let s = autotune_cli::read_summary(&path)?;
                    cfg.seed = s.seed;
                    s.best
                        .map(|b| b.params)
                        .ok_or_else(|| Failure::Runtime(format!("{} holds no final controller", path.display())))?
                }
                None => controller.params(),
            };
            let v = autotune_cli::validate_params(&cfg, &params)?;
            print_json(&v);
            if !v.feasible {
                return Err(Failure::Infeasible("controller failed validation".into()));
            }
        }
        Command::Grid { run, resolution } => {
            let dir = run.unwrap_or_else(|| out.clone());
            let path = autotune_cli::grid(&dir, &out, resolution)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
