//! Run configuration: JSON with `//` and `/* */` comments allowed.

use std::io::Read;
use std::path::{Path, PathBuf};

use autotune::closedloop::{ReferenceTrajectory, Simulator, TimingMode, TrajectorySpec};
use autotune::control::MEASUREMENT_VARIANCE;
use autotune::dynamics::{discretize, PlantParams, TruncatedNormalSpec};
use autotune::tuner::{Algorithm, TunerSettings};
use autotune::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub algorithms: Vec<Algorithm>,
    pub repetitions: usize,
    /// Runs use seeds `first_seed, first_seed + 1, ...`.
    pub first_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            algorithms: Algorithm::ALL.to_vec(),
            repetitions: 10,
            first_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Indices of the two search dimensions spanned by the grid.
    pub dims: [usize; 2],
    pub resolution: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dims: [0, 1],
            resolution: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantParams,
    pub sample_time: f64,
    pub trajectory: TrajectorySpec,
    pub contexts: TruncatedNormalSpec,
    pub measurement_noise_std: f64,
    pub timing: TimingMode,
    pub tuner: TunerSettings,
    pub benchmark: BenchmarkConfig,
    pub grid: GridConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plant: PlantParams::default(),
            sample_time: 0.002,
            trajectory: TrajectorySpec::default(),
            contexts: TruncatedNormalSpec::default(),
            measurement_noise_std: MEASUREMENT_VARIANCE.sqrt(),
            timing: TimingMode::default(),
            tuner: TunerSettings::default(),
            benchmark: BenchmarkConfig::default(),
            grid: GridConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn at(path: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::config(path, other.to_string()),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut stripped = String::new();
        json_comments::StripComments::new(text.as_bytes())
            .read_to_string(&mut stripped)
            .map_err(|e| Error::config("", format!("cannot strip comments: {e}")))?;
        let de = &mut serde_json::Deserializer::from_str(&stripped);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Cross-field checks; errors name the offending field.
    pub fn validate(&self) -> Result<(), Error> {
        self.plant.validate().map_err(|e| at("plant", e))?;
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return Err(Error::config("sample_time", "must be positive"));
        }
        discretize(&self.plant, self.sample_time).map_err(|e| at("plant.delay", e))?;
        self.trajectory.build(self.sample_time).map_err(|e| at("trajectory", e))?;
        self.contexts.validate().map_err(|e| at("contexts", e))?;
        if !(self.measurement_noise_std >= 0.0 && self.measurement_noise_std.is_finite()) {
            return Err(Error::config("measurement_noise_std", "must be non-negative"));
        }
        if let TimingMode::Synthetic(s) = &self.timing {
            if !(s.base >= 0.0 && s.cubic >= 0.0 && s.jitter_std >= 0.0) {
                return Err(Error::config("timing", "synthetic timing coefficients must be non-negative"));
            }
        }
        self.tuner.validate()?;
        if self.benchmark.algorithms.is_empty() {
            return Err(Error::config("benchmark.algorithms", "must not be empty"));
        }
        if self.benchmark.repetitions < 1 {
            return Err(Error::config("benchmark.repetitions", "must be at least 1"));
        }
        let d = self.tuner.space.dim_names().len();
        let [a, b] = self.grid.dims;
        if a >= d || b >= d || a == b {
            return Err(Error::config("grid.dims", format!("need two distinct indices below {d}")));
        }
        if self.grid.resolution < 1 {
            return Err(Error::config("grid.resolution", "must be at least 1"));
        }
        Ok(())
    }

    pub fn simulator(&self) -> Result<Simulator, Error> {
        let traj: ReferenceTrajectory = self.trajectory.build(self.sample_time)?;
        let mut sim = Simulator::new(self.plant, self.sample_time, traj, self.timing)?;
        sim.noise_std = self.measurement_noise_std;
        Ok(sim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_json();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn comments_and_partial_files() {
        let cfg = RunConfig::parse(
            r#"{
                // shorter run
                "seed": 7, /* inline */ "tuner": { "budget": 20 }
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.tuner.budget, Some(20));
        assert_eq!(cfg.plant, PlantParams::default());
    }

    #[test]
    fn errors_carry_field_paths() {
        let path = |text: &str| match RunConfig::parse(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(path(r#"{"tuner": {"budget": 3}}"#), "tuner.budget");
        assert_eq!(path(r#"{"tuner": {"bounds": {"lambda_mpc": [1.0, -1.0]}}}"#), "tuner.bounds.lambda_mpc");
        assert_eq!(path(r#"{"tuner": {"initial_samples": "ten"}}"#), "tuner.initial_samples");
        assert_eq!(path(r#"{"plant": {"delay": 0.003}}"#), "plant.delay");
        assert_eq!(path(r#"{"contexts": {"std_dev": -1.0}}"#), "contexts");
        assert!(path(r#"{"tuner": {"nonsense": 1}}"#).starts_with("tuner"));
    }

    #[test]
    fn timing_modes_parse() {
        let w = RunConfig::parse(r#"{"timing": {"mode": "wallclock"}}"#).unwrap();
        assert_eq!(w.timing, TimingMode::Wallclock);
        let s = RunConfig::parse(r#"{"timing": {"mode": "synthetic", "base": 0.0002, "cubic": 1e-8, "jitter_std": 0.0}}"#)
            .unwrap();
        assert!(matches!(s.timing, TimingMode::Synthetic(t) if t.base == 0.0002));
    }
}
