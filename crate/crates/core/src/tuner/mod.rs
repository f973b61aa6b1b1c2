//! Two-stage min-max tuning. The outer loop searches controller parameters
//! by constrained BO on expected ITE, step time and worst-case overshoot;
//! each outer evaluation runs an inner search over contexts for the largest
//! overshoot.

mod grid;
mod stage2;
mod validation;

pub use grid::{export_grid, grid_csv, GridRow};
pub use stage2::{nominal_only, stage2_worst_context, ContextSample, Stage2Result, Stage2Settings};
pub use validation::{validate, Limits, Validation};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bo::{
    exploration_step, fit_surrogates, maximize_acquisition, AcquisitionContext, AcquisitionValue, BoSettings,
    ConstraintSpec, Dataset, Observation, Problem, VarianceKind,
};
use crate::closedloop::{EpisodeEvaluator, TimingMode};
use crate::control::ControllerParams;
use crate::dynamics::{latin_hypercube, TruncatedNormalSpec};
use crate::error::{Error, Result};
use crate::gp::{detect_outliers, GpHyperparams, Hyperpriors, OutlierSettings};
use crate::seed::SeedStream;

/// Benchmark variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    /// BO against the nominal context only.
    I,
    /// Random outer sampling, full inner search.
    II,
    /// Full pipeline without outlier detection and classifiers.
    III,
    /// Full pipeline.
    IV,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::I, Algorithm::II, Algorithm::III, Algorithm::IV];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Algorithm::I => "I",
            Algorithm::II => "II",
            Algorithm::III => "III",
            Algorithm::IV => "IV",
        };
        f.write_str(s)
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Algorithm::I),
            "II" | "2" => Ok(Algorithm::II),
            "III" | "3" => Ok(Algorithm::III),
            "IV" | "4" => Ok(Algorithm::IV),
            _ => Err(Error::config("algorithm", format!("unknown algorithm `{s}`"))),
        }
    }
}

/// Box for the controller parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerBounds {
    pub control_horizon: [usize; 2],
    pub prediction_horizon: [usize; 2],
    pub lambda_mpc: [f64; 2],
    pub lambda_kf: [f64; 2],
}

impl Default for ControllerBounds {
    fn default() -> Self {
        ControllerBounds {
            control_horizon: [1, 30],
            prediction_horizon: [1, 30],
            lambda_mpc: [-6.0, 1.0],
            lambda_kf: [-4.0, 3.0],
        }
    }
}

impl ControllerBounds {
    pub fn validate(&self) -> Result<()> {
        let h = |name: &str, b: [usize; 2]| {
            if b[0] < 1 || b[0] > b[1] {
                Err(Error::config(format!("tuner.bounds.{name}"), "need 1 <= lower <= upper"))
            } else {
                Ok(())
            }
        };
        let l = |name: &str, b: [f64; 2]| {
            if !(b[0].is_finite() && b[1].is_finite() && b[0] < b[1]) {
                Err(Error::config(format!("tuner.bounds.{name}"), "need finite lower < upper"))
            } else {
                Ok(())
            }
        };
        h("control_horizon", self.control_horizon)?;
        h("prediction_horizon", self.prediction_horizon)?;
        l("lambda_mpc", self.lambda_mpc)?;
        l("lambda_kf", self.lambda_kf)
    }

    pub fn contains(&self, p: &ControllerParams) -> bool {
        let inside = |v: f64, b: [f64; 2]| b[0] <= v && v <= b[1];
        inside(p.control_horizon as f64, self.control_horizon.map(|v| v as f64))
            && inside(p.prediction_horizon as f64, self.prediction_horizon.map(|v| v as f64))
            && inside(p.lambda_mpc, self.lambda_mpc)
            && inside(p.lambda_kf, self.lambda_kf)
    }
}

/// Which controller parameters are searched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SearchSpace {
    /// `[H_u, H_p, lambda_mpc, lambda_kf]`; `H_p` is raised to `H_u` when
    /// smaller.
    Full,
    /// `[H, lambda_mpc]` with `H_u = H_p = H` and a fixed `lambda_kf`.
    Coupled { lambda_kf: f64 },
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace::Coupled { lambda_kf: -1.0 }
    }
}

impl SearchSpace {
    pub fn dim_names(&self) -> Vec<&'static str> {
        match self {
            SearchSpace::Full => vec!["control_horizon", "prediction_horizon", "lambda_mpc", "lambda_kf"],
            SearchSpace::Coupled { .. } => vec!["horizon", "lambda_mpc"],
        }
    }

    pub fn bounds(&self, b: &ControllerBounds) -> Vec<(f64, f64)> {
        let h = |v: [usize; 2]| (v[0] as f64, v[1] as f64);
        let l = |v: [f64; 2]| (v[0], v[1]);
        match self {
            SearchSpace::Full => vec![
                h(b.control_horizon),
                h(b.prediction_horizon),
                l(b.lambda_mpc),
                l(b.lambda_kf),
            ],
            SearchSpace::Coupled { .. } => {
                let lo = b.control_horizon[0].max(b.prediction_horizon[0]);
                let hi = b.control_horizon[1].min(b.prediction_horizon[1]);
                vec![(lo as f64, hi as f64), l(b.lambda_mpc)]
            }
        }
    }

    pub fn integer_mask(&self) -> Vec<bool> {
        match self {
            SearchSpace::Full => vec![true, true, false, false],
            SearchSpace::Coupled { .. } => vec![true, false],
        }
    }

    pub fn to_params(&self, x: &[f64]) -> ControllerParams {
        let h = |v: f64| v.round().max(1.0) as usize;
        match self {
            SearchSpace::Full => {
                let hu = h(x[0]);
                ControllerParams {
                    control_horizon: hu,
                    prediction_horizon: h(x[1]).max(hu),
                    lambda_mpc: x[2],
                    lambda_kf: x[3],
                }
            }
            SearchSpace::Coupled { lambda_kf } => ControllerParams {
                control_horizon: h(x[0]),
                prediction_horizon: h(x[0]),
                lambda_mpc: x[1],
                lambda_kf: *lambda_kf,
            },
        }
    }

    pub fn to_point(&self, p: &ControllerParams) -> Vec<f64> {
        match self {
            SearchSpace::Full => vec![
                p.control_horizon as f64,
                p.prediction_horizon as f64,
                p.lambda_mpc,
                p.lambda_kf,
            ],
            SearchSpace::Coupled { .. } => vec![p.control_horizon as f64, p.lambda_mpc],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerSettings {
    pub algorithm: Algorithm,
    pub space: SearchSpace,
    pub bounds: ControllerBounds,
    pub initial_samples: usize,
    /// Outer evaluations including the initial design; defaults to 60 for
    /// the coupled space and 120 for the full one.
    pub budget: Option<usize>,
    pub limits: Limits,
    pub stage2: Stage2Settings,
    pub bo: BoSettings,
    pub outlier: OutlierSettings,
    pub priors: Hyperpriors,
    /// Lengthscale floor on horizon dimensions, in unit-box coordinates.
    pub horizon_lengthscale_min: f64,
    /// Worst-case overshoot is clipped at this multiple of the limit
    /// before it enters the surrogate.
    pub overshoot_clip: f64,
    pub validation_draws: usize,
    /// Validate every new incumbent to build the progress curve.
    pub track_incumbent: bool,
}

impl Default for TunerSettings {
    fn default() -> Self {
        TunerSettings {
            algorithm: Algorithm::IV,
            space: SearchSpace::default(),
            bounds: ControllerBounds::default(),
            initial_samples: 10,
            budget: None,
            limits: Limits::default(),
            stage2: Stage2Settings::default(),
            bo: BoSettings::default(),
            outlier: OutlierSettings::default(),
            priors: Hyperpriors::default(),
            horizon_lengthscale_min: 0.22,
            overshoot_clip: 3.0,
            validation_draws: 25,
            track_incumbent: true,
        }
    }
}

impl TunerSettings {
    pub fn budget(&self) -> usize {
        self.budget.unwrap_or(match self.space {
            SearchSpace::Full => 120,
            SearchSpace::Coupled { .. } => 60,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.initial_samples < 1 {
            return Err(Error::config("tuner.initial_samples", "must be at least 1"));
        }
        if self.budget() < self.initial_samples {
            return Err(Error::config("tuner.budget", "must not be smaller than tuner.initial_samples"));
        }
        if let SearchSpace::Coupled { lambda_kf } = self.space {
            if !lambda_kf.is_finite() {
                return Err(Error::config("tuner.space.lambda_kf", "must be finite"));
            }
            let b = self.space.bounds(&self.bounds);
            if b[0].0 > b[0].1 {
                return Err(Error::config("tuner.bounds", "horizon ranges do not overlap"));
            }
        }
        if !(self.limits.overshoot > 0.0) {
            return Err(Error::config("tuner.limits.overshoot", "must be positive"));
        }
        if !(self.limits.step_time > 0.0) {
            return Err(Error::config("tuner.limits.step_time", "must be positive"));
        }
        if !(self.limits.z >= 0.0) {
            return Err(Error::config("tuner.limits.z", "must be non-negative"));
        }
        if self.stage2.initial_contexts < 1 || self.stage2.max_evaluations < self.stage2.initial_contexts {
            return Err(Error::config(
                "tuner.stage2",
                "need 1 <= initial_contexts <= max_evaluations",
            ));
        }
        if !(self.outlier.nu > 2.0) {
            return Err(Error::config("tuner.outlier.nu", "must exceed 2"));
        }
        if !(self.overshoot_clip >= 1.0) {
            return Err(Error::config("tuner.overshoot_clip", "must be at least 1"));
        }
        if self.validation_draws < 1 {
            return Err(Error::config("tuner.validation_draws", "must be at least 1"));
        }
        if self.bo.pso.particles < 1 {
            return Err(Error::config("tuner.bo.pso.particles", "must be at least 1"));
        }
        Ok(())
    }

    /// Outer-loop optimisation problem: expected ITE subject to the step
    /// time and worst-case overshoot limits.
    pub fn problem(&self) -> Problem {
        let mask = self.space.integer_mask();
        let mins = mask
            .iter()
            .map(|&int| {
                if int {
                    self.horizon_lengthscale_min
                } else {
                    self.priors.default_lengthscale_min
                }
            })
            .collect();
        Problem {
            bounds: self.space.bounds(&self.bounds),
            integer_mask: mask,
            constraints: vec![
                ConstraintSpec {
                    name: "step_time".into(),
                    limit: self.limits.step_time,
                    z: self.limits.z,
                    variance: VarianceKind::Predictive,
                },
                ConstraintSpec {
                    name: "worst_overshoot".into(),
                    limit: self.limits.overshoot,
                    z: 0.0,
                    variance: VarianceKind::Latent,
                },
            ],
            priors: self.priors.clone().with_lengthscale_min(mins),
        }
    }

    fn outer_bo(&self) -> BoSettings {
        let full = self.algorithm != Algorithm::III;
        BoSettings {
            outlier_classifier: self.bo.outlier_classifier && full,
            failure_classifier: self.bo.failure_classifier && full,
            ..self.bo.clone()
        }
    }

    fn detects_outliers(&self) -> bool {
        self.algorithm != Algorithm::III
    }
}

/// What a tuning run simulates.
#[derive(Clone, Copy)]
pub struct Environment<'a> {
    pub evaluator: &'a dyn EpisodeEvaluator,
    pub contexts: TruncatedNormalSpec,
    pub timing: TimingMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Initial,
    Random,
    Acquisition,
    Exploration,
}

/// Current best guess of the outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub record: usize,
    pub x: Vec<f64>,
    pub params: ControllerParams,
    /// Reinterpolated objective mean at the incumbent.
    pub predicted_objective: f64,
    pub feasible: bool,
    pub p_feas: f64,
    /// Validation objective of this incumbent, when tracked.
    pub validation_objective: Option<f64>,
    /// Lowest validation objective of any validation-feasible incumbent so
    /// far; non-increasing over a run.
    pub best_validation_objective: Option<f64>,
}

/// One outer evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerRecord {
    pub iteration: usize,
    pub origin: Origin,
    pub x: Vec<f64>,
    pub params: ControllerParams,
    pub stage2: Stage2Result,
    /// Outlier label at the time the record was written.
    pub outlier: bool,
    pub failed: bool,
    pub acquisition: Option<AcquisitionValue>,
    /// Episodes consumed so far, validation excluded.
    pub episodes: usize,
    pub incumbent: Option<Incumbent>,
    /// Objective then constraint GP hyperparameters after this record.
    pub hyperparams: Vec<GpHyperparams>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub episodes: usize,
    pub validation_episodes: usize,
    pub acquisition_calls: usize,
}

#[derive(Debug, Clone)]
pub struct TuningRun {
    pub algorithm: Algorithm,
    pub records: Vec<TunerRecord>,
    pub best: Option<Incumbent>,
    pub validation: Option<Validation>,
    pub counters: Counters,
    /// Outlier labels after the last evaluation.
    pub outliers: Vec<bool>,
    pub surrogates: Option<AcquisitionContext>,
}

impl TuningRun {
    /// Validation minus predicted objective of the final pick.
    pub fn gap(&self) -> Option<f64> {
        let b = self.best.as_ref()?;
        Some(self.validation.as_ref()?.objective? - b.predicted_objective)
    }

    /// Best-so-far validation objective after each evaluation.
    pub fn curve(&self) -> Vec<Option<f64>> {
        self.records
            .iter()
            .map(|r| r.incumbent.as_ref().and_then(|i| i.best_validation_objective))
            .collect()
    }
}

fn observation(x: &[f64], s2: &Stage2Result, clip: f64) -> Observation {
    if s2.failed {
        return Observation {
            x: x.to_vec(),
            objective: Vec::new(),
            constraints: vec![Vec::new(), Vec::new()],
            outlier: false,
            failed: true,
        };
    }
    Observation {
        x: x.to_vec(),
        objective: s2.samples.iter().map(|s| s.0).collect(),
        constraints: vec![
            s2.samples.iter().map(|s| s.1).collect(),
            vec![s2.worst_overshoot.min(clip)],
        ],
        outlier: false,
        failed: false,
    }
}

/// Re-run the detector on the per-record mean ITE of all completed
/// records and overwrite their labels.
fn relabel_outliers(data: &mut Dataset, problem: &Problem, settings: &OutlierSettings, seed: SeedStream) {
    let norm = problem.normalizer();
    let idx: Vec<usize> = (0..data.len()).filter(|&i| !data.rows[i].failed).collect();
    let x: Vec<Vec<f64>> = idx.iter().map(|&i| norm.normalize(&data.rows[i].x)).collect();
    let y: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let o = &data.rows[i].objective;
            o.iter().sum::<f64>() / o.len() as f64
        })
        .collect();
    let labels = detect_outliers(&x, &y, settings, &problem.priors, seed);
    for (&i, &f) in idx.iter().zip(&labels.flags) {
        data.rows[i].outlier = f;
    }
}

/// Feasible clean record with the lowest reinterpolated mean; otherwise
/// the clean record with the highest probability of feasibility.
fn select_incumbent(records: &[TunerRecord], data: &Dataset, ctx: &AcquisitionContext, limits: &Limits) -> Option<Incumbent> {
    let mut best_feasible: Option<(usize, f64, f64)> = None;
    let mut best_pfeas: Option<(usize, f64, f64)> = None;
    for (i, row) in data.rows.iter().enumerate() {
        if row.failed || row.outlier {
            continue;
        }
        let u = ctx.normalizer.normalize(&row.x);
        let mean = ctx.reinterpolated.predict(&u).mean;
        let p_feas = ctx.p_feas(&row.x);
        let s2 = &records[i].stage2;
        let time_ok = ctx.constraints[0].1.probability(&ctx.constraints[0].0.predict(&u)) >= 0.5;
        // the smoothed overshoot must agree with the observed one
        let overshoot_ok = ctx.constraints[1].1.probability(&ctx.constraints[1].0.predict(&u)) >= 0.5;
        let feasible = !s2.early_stop && s2.worst_overshoot < limits.overshoot && overshoot_ok && time_ok;
        if feasible && best_feasible.map_or(true, |b| mean < b.1) {
            best_feasible = Some((i, mean, p_feas));
        }
        if best_pfeas.map_or(true, |b| p_feas > b.2) {
            best_pfeas = Some((i, mean, p_feas));
        }
    }
    let (pick, feasible) = match best_feasible {
        Some(b) => (b, true),
        None => (best_pfeas?, false),
    };
    Some(Incumbent {
        record: pick.0,
        x: data.rows[pick.0].x.clone(),
        params: records[pick.0].params,
        predicted_objective: pick.1,
        feasible,
        p_feas: pick.2,
        validation_objective: None,
        best_validation_objective: None,
    })
}

fn param_key(p: &ControllerParams) -> (usize, usize, u64, u64) {
    (p.control_horizon, p.prediction_horizon, p.lambda_mpc.to_bits(), p.lambda_kf.to_bits())
}

/// Outer loop: initial Latin hypercube design, then one proposal per
/// evaluation until the budget is spent. `on_record` sees every record as
/// soon as it is complete.
pub fn stage1_optimize(
    env: &Environment<'_>,
    settings: &TunerSettings,
    seed: SeedStream,
    mut on_record: impl FnMut(&TunerRecord),
) -> Result<TuningRun> {
    settings.validate()?;
    let problem = settings.problem();
    let bo = settings.outer_bo();
    let budget = settings.budget();
    let n_init = settings.initial_samples.min(budget);
    // identical for every algorithm given the run seed
    let design = latin_hypercube(n_init, &problem.bounds, &problem.integer_mask, seed.child("initial-design"));
    let validation_seed = seed.child("validation");
    let clip = settings.overshoot_clip * settings.limits.overshoot;

    let mut data = Dataset::default();
    let mut records: Vec<TunerRecord> = Vec::with_capacity(budget);
    let mut counters = Counters::default();
    let mut ctx: Option<AcquisitionContext> = None;
    let mut validated: BTreeMap<(usize, usize, u64, u64), Validation> = BTreeMap::new();
    let mut best_validation: Option<f64> = None;

    for k in 0..budget {
        let (x, origin, acquisition) = if k < n_init {
            (design[k].clone(), Origin::Initial, None)
        } else if settings.algorithm == Algorithm::II {
            (random_point(&problem, seed.child("random").index(k as u64)), Origin::Random, None)
        } else {
            counters.acquisition_calls += 1;
            let s = seed.child("acquisition").index(k as u64);
            match ctx.as_ref().and_then(|c| maximize_acquisition(c, &problem, &bo, s)) {
                Some(step) => (step.x_next, Origin::Acquisition, step.acquisition),
                None => (exploration_step(&data, &problem, &bo, s)?.x_next, Origin::Exploration, None),
            }
        };
        let params = settings.space.to_params(&x);
        let s2 = match settings.algorithm {
            Algorithm::I => nominal_only(
                env.evaluator,
                &params,
                &env.contexts,
                settings.limits.overshoot,
                seed.child("stage2").index(k as u64),
            ),
            _ => stage2_worst_context(
                env.evaluator,
                &params,
                &env.contexts,
                &settings.stage2,
                settings.limits.overshoot,
                seed.child("stage2").index(k as u64),
            ),
        };
        counters.episodes += s2.evaluations;
        data.push(observation(&x, &s2, clip));
        if settings.detects_outliers() {
            relabel_outliers(&mut data, &problem, &settings.outlier, seed.child("outliers").index(k as u64));
        }
        ctx = fit_surrogates(&data, &problem, &bo, seed.child("fit").index(k as u64)).ok();

        records.push(TunerRecord {
            iteration: k,
            origin,
            x,
            params,
            outlier: false,
            failed: s2.failed,
            stage2: s2,
            acquisition,
            episodes: counters.episodes,
            incumbent: None,
            hyperparams: ctx.as_ref().map(|c| c.hyperparams()).unwrap_or_default(),
        });
        let mut incumbent = ctx.as_ref().and_then(|c| select_incumbent(&records, &data, c, &settings.limits));
        if let (Some(inc), true) = (incumbent.as_mut(), settings.track_incumbent) {
            let v = validated.entry(param_key(&inc.params)).or_insert_with(|| {
                counters.validation_episodes += settings.validation_draws;
                validate(
                    env.evaluator,
                    &inc.params,
                    &env.contexts,
                    &env.timing,
                    &settings.limits,
                    settings.validation_draws,
                    validation_seed,
                )
            });
            inc.validation_objective = v.objective;
            if v.feasible {
                let obj = v.objective.expect("feasible validation has an objective");
                best_validation = Some(best_validation.map_or(obj, |b: f64| b.min(obj)));
            }
        }
        if let Some(inc) = incumbent.as_mut() {
            inc.best_validation_objective = best_validation;
        }
        let rec = records.last_mut().unwrap();
        rec.outlier = data.rows[k].outlier;
        rec.incumbent = incumbent;
        on_record(rec);
    }

    let best = records.last().and_then(|r| r.incumbent.clone());
    let validation = best.as_ref().map(|b| {
        validated.get(&param_key(&b.params)).cloned().unwrap_or_else(|| {
            counters.validation_episodes += settings.validation_draws;
            validate(
                env.evaluator,
                &b.params,
                &env.contexts,
                &env.timing,
                &settings.limits,
                settings.validation_draws,
                validation_seed,
            )
        })
    });
    Ok(TuningRun {
        algorithm: settings.algorithm,
        outliers: data.rows.iter().map(|r| r.outlier).collect(),
        records,
        best,
        validation,
        counters,
        surrogates: ctx,
    })
}

/// Run one benchmark variant; only the algorithm differs from `settings`.
pub fn run_benchmark_algorithm(
    algorithm: Algorithm,
    env: &Environment<'_>,
    settings: &TunerSettings,
    seed: SeedStream,
) -> Result<TuningRun> {
    let s = TunerSettings {
        algorithm,
        ..settings.clone()
    };
    stage1_optimize(env, &s, seed, |_| {})
}

fn random_point(problem: &Problem, seed: SeedStream) -> Vec<f64> {
    let mut rng = seed.rng();
    problem
        .bounds
        .iter()
        .zip(&problem.integer_mask)
        .map(|(&(lo, hi), &int)| {
            if int {
                rng.gen_range(lo as i64..=hi as i64) as f64
            } else {
                rng.gen_range(lo..=hi)
            }
        })
        .collect()
}

/// Rebuild the outer surrogates of a finished run from its records, as
/// they were after the last evaluation.
pub fn rebuild_surrogates(records: &[TunerRecord], settings: &TunerSettings, seed: SeedStream) -> Result<AcquisitionContext> {
    let problem = settings.problem();
    let clip = settings.overshoot_clip * settings.limits.overshoot;
    let mut data = Dataset::default();
    for r in records {
        data.push(observation(&r.x, &r.stage2, clip));
    }
    let Some(last) = records.len().checked_sub(1) else {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    };
    if settings.detects_outliers() {
        relabel_outliers(&mut data, &problem, &settings.outlier, seed.child("outliers").index(last as u64));
    }
    fit_surrogates(&data, &problem, &settings.outer_bo(), seed.child("fit").index(last as u64))
}

/// One line of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub algorithm: Algorithm,
    /// Share of runs whose final pick passed validation.
    pub feasibility: f64,
    /// Mean validation objective over runs that completed validation.
    pub obj_validation: f64,
    /// Mean of validation minus predicted objective.
    pub obj_gap: f64,
    pub runs: usize,
}

pub fn summarize(algorithm: Algorithm, runs: &[TuningRun]) -> BenchmarkRow {
    let n = runs.len();
    let feasible = runs
        .iter()
        .filter(|r| r.validation.as_ref().is_some_and(|v| v.feasible))
        .count();
    let objs: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.validation.as_ref().and_then(|v| v.objective))
        .collect();
    let gaps: Vec<f64> = runs.iter().filter_map(|r| r.gap()).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    BenchmarkRow {
        algorithm,
        feasibility: if n == 0 { f64::NAN } else { feasible as f64 / n as f64 },
        obj_validation: mean(&objs),
        obj_gap: mean(&gaps),
        runs: n,
    }
}
