//! One simulated episode: perturbed plant, noisy velocity measurement, Kalman
//! filter and MPC built on the nominal model.

use std::collections::VecDeque;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::{ControllerParams, KalmanFilter, Mpc, MEASUREMENT_VARIANCE};
use crate::dynamics::{discretize, Context, DiscretePlant, PlantParams};
use crate::error::{Error, Result};
use crate::seed::SeedStream;

/// Sampled reference velocity `v_ref,k`, `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    values: Vec<f64>,
    sample_time: f64,
}

impl ReferenceTrajectory {
    pub fn new(values: Vec<f64>, sample_time: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::config("trajectory", "need at least two samples"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("trajectory", "non-finite reference value"));
        }
        Ok(ReferenceTrajectory { values, sample_time })
    }

    pub fn constant(level: f64, n_steps: usize, sample_time: f64) -> Self {
        ReferenceTrajectory {
            values: vec![level; n_steps + 1],
            sample_time,
        }
    }

    pub fn from_spec(spec: &TrajectorySpec, sample_time: f64) -> Result<Self> {
        spec.build(sample_time)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    /// `N`, the index of the last sample.
    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `len` samples starting at `k + 1`, holding the final value past the end.
    pub fn window(&self, k: usize, len: usize, out: &mut Vec<f64>) {
        out.clear();
        let last = *self.values.last().unwrap();
        out.extend((1..=len).map(|i| self.values.get(k + i).copied().unwrap_or(last)));
    }
}

/// Trapezoidal feed profile: rest, ramp up, hold, ramp down, rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub n_steps: usize,
    pub peak: f64,
    pub rest: f64,
    pub ramp: f64,
    pub hold: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            n_steps: 1500,
            peak: 1.0,
            rest: 0.2,
            ramp: 0.15,
            hold: 1.3,
        }
    }
}

impl TrajectorySpec {
    pub fn build(&self, ts: f64) -> Result<ReferenceTrajectory> {
        if self.n_steps < 1 {
            return Err(Error::config("trajectory.n_steps", "must be at least 1"));
        }
        if self.rest < 0.0 || self.ramp <= 0.0 || self.hold < 0.0 {
            return Err(Error::config("trajectory", "segment durations must be non-negative, ramp positive"));
        }
        let t1 = self.rest;
        let t2 = t1 + self.ramp;
        let t3 = t2 + self.hold;
        let t4 = t3 + self.ramp;
        let values = (0..=self.n_steps)
            .map(|k| {
                let t = k as f64 * ts;
                let shape = if t < t1 {
                    0.0
                } else if t < t2 {
                    (t - t1) / self.ramp
                } else if t < t3 {
                    1.0
                } else if t < t4 {
                    1.0 - (t - t3) / self.ramp
                } else {
                    0.0
                };
                self.peak * shape
            })
            .collect();
        ReferenceTrajectory::new(values, ts)
    }
}

/// Linear-plus-cubic cost model of the per-step solve time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTiming {
    pub base: f64,
    pub cubic: f64,
    pub jitter_std: f64,
}

impl Default for SyntheticTiming {
    fn default() -> Self {
        // T(22) + 3 sigma = 0.94 ms, T(23) = 1.02 ms
        SyntheticTiming {
            base: 1e-4,
            cubic: 7.6e-8,
            jitter_std: 1e-5,
        }
    }
}

impl SyntheticTiming {
    pub fn deterministic(&self, control_horizon: usize) -> f64 {
        self.base + self.cubic * (control_horizon as f64).powi(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum TimingMode {
    Wallclock,
    Synthetic(SyntheticTiming),
}

impl Default for TimingMode {
    fn default() -> Self {
        TimingMode::Synthetic(SyntheticTiming::default())
    }
}

/// Maximum per-step computation time `T`.
///
/// Wallclock mode returns the measured value; synthetic mode ignores it and
/// evaluates the cost model with seeded jitter.
pub fn step_time(mode: &TimingMode, control_horizon: usize, measured: f64, seed: SeedStream) -> f64 {
    match mode {
        TimingMode::Wallclock => measured,
        TimingMode::Synthetic(s) => {
            let z: f64 = StandardNormal.sample(&mut seed.rng());
            s.deterministic(control_horizon) + s.jitter_std * z
        }
    }
}

/// Largest exceedance of the velocity above its reference.
pub fn overshoot(velocity: &[f64], reference: &[f64]) -> f64 {
    velocity
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (v, r)| m.max(v - r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Sum of squared tracking errors.
    pub ite: f64,
    pub overshoot: f64,
    pub step_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    SingularSolve,
    SingularInnovation,
    NonFinite,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeOutcome {
    Completed(EpisodeMetrics),
    Failed(FailureReason),
}

impl EpisodeOutcome {
    pub fn is_failed(&self) -> bool {
        matches!(self, EpisodeOutcome::Failed(_))
    }

    pub fn metrics(&self) -> Option<&EpisodeMetrics> {
        match self {
            EpisodeOutcome::Completed(m) => Some(m),
            EpisodeOutcome::Failed(_) => None,
        }
    }
}

/// Per-sample log of one episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub reference: Vec<f64>,
    pub velocity: Vec<f64>,
    pub input: Vec<f64>,
    pub estimate: Vec<[f64; 2]>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,v_ref,v,u,xhat_v,xhat_dv\n");
        for k in 0..self.velocity.len() {
            s.push_str(&format!(
                "{k},{},{},{},{},{}\n",
                self.reference[k], self.velocity[k], self.input[k], self.estimate[k][0], self.estimate[k][1]
            ));
        }
        s
    }
}

/// Anything that maps `(params, context, seed)` to an episode outcome.
pub trait EpisodeEvaluator: Sync {
    fn evaluate(&self, params: &ControllerParams, ctx: &Context, seed: SeedStream) -> EpisodeOutcome;
}

/// Simulation environment shared by all episodes of a run.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub plant: PlantParams,
    pub nominal: DiscretePlant,
    pub trajectory: ReferenceTrajectory,
    pub noise_std: f64,
    pub timing: TimingMode,
    /// Episode fails once `|v| > divergence_factor * max |v_ref|`.
    pub divergence_factor: f64,
}

impl Simulator {
    pub fn new(plant: PlantParams, sample_time: f64, trajectory: ReferenceTrajectory, timing: TimingMode) -> Result<Self> {
        let nominal = discretize(&plant, sample_time)?;
        Ok(Simulator {
            plant,
            nominal,
            trajectory,
            noise_std: MEASUREMENT_VARIANCE.sqrt(),
            timing,
            divergence_factor: 1e3,
        })
    }

    pub fn sample_time(&self) -> f64 {
        self.nominal.sample_time
    }

    pub fn run(&self, params: &ControllerParams, ctx: &Context, seed: SeedStream) -> EpisodeOutcome {
        self.run_inner(params, ctx, seed, None)
    }

    pub fn run_traced(&self, params: &ControllerParams, ctx: &Context, seed: SeedStream) -> (EpisodeOutcome, Trace) {
        let mut trace = Trace::default();
        let out = self.run_inner(params, ctx, seed, Some(&mut trace));
        (out, trace)
    }

    fn run_inner(
        &self,
        params: &ControllerParams,
        ctx: &Context,
        seed: SeedStream,
        mut trace: Option<&mut Trace>,
    ) -> EpisodeOutcome {
        let fail = EpisodeOutcome::Failed;
        let true_plant = match discretize(&self.plant.perturb(ctx), self.sample_time()) {
            Ok(p) => p,
            Err(_) => return fail(FailureReason::NonFinite),
        };
        let mpc = match Mpc::new(&self.nominal, params) {
            Ok(m) => m,
            Err(_) => return fail(FailureReason::SingularSolve),
        };
        let mut kf = KalmanFilter::new(self.nominal.clone(), params.kf_config());
        let mut noise_rng = seed.child("measurement").rng();
        let reference = self.trajectory.values();
        let n = self.trajectory.n_steps();
        let hp = params.prediction_horizon;
        let limit = self.divergence_factor * self.trajectory.peak().max(f64::MIN_POSITIVE);
        let wallclock = matches!(self.timing, TimingMode::Wallclock);

        let mut state = true_plant.initial_state();
        let mut pipeline: VecDeque<f64> = VecDeque::from(vec![0.0; self.nominal.delay_steps]);
        let mut u_prev = 0.0;
        let mut window = Vec::with_capacity(hp);
        let mut ite = 0.0;
        let mut max_over = 0.0f64;
        let mut max_time = 0.0f64;

        for k in 0..=n {
            let v = true_plant.output(&state);
            if !v.is_finite() {
                return fail(FailureReason::NonFinite);
            }
            if v.abs() > limit {
                return fail(FailureReason::Diverged);
            }
            let e = reference[k] - v;
            ite += e * e;
            max_over = max_over.max(v - reference[k]);

            let noise: f64 = if self.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                self.noise_std * z
            } else {
                0.0
            };
            if kf.update(v + noise).is_err() {
                return fail(FailureReason::SingularInnovation);
            }

            let started = wallclock.then(Instant::now);
            self.trajectory.window(k, hp, &mut window);
            let (flight, _) = pipeline.as_slices();
            let xi = if flight.len() == pipeline.len() {
                mpc.aug.state(&kf.x, flight, u_prev)
            } else {
                let flat: Vec<f64> = pipeline.iter().copied().collect();
                mpc.aug.state(&kf.x, &flat, u_prev)
            };
            let u = match mpc.control(&xi, &window) {
                Ok(u) if u.is_finite() => u,
                Ok(_) => return fail(FailureReason::NonFinite),
                Err(_) => return fail(FailureReason::SingularSolve),
            };
            if let Some(t0) = started {
                max_time = max_time.max(t0.elapsed().as_secs_f64());
            }

            if let Some(t) = trace.as_deref_mut() {
                t.reference.push(reference[k]);
                t.velocity.push(v);
                t.input.push(u);
                t.estimate.push([kf.x[0], kf.x[1]]);
            }

            let applied = if self.nominal.delay_steps == 0 {
                u
            } else {
                pipeline.push_back(u);
                pipeline.pop_front().unwrap_or(0.0)
            };
            true_plant.step(&mut state, u);
            kf.predict(applied);
            u_prev = u;
        }

        let step_time = step_time(&self.timing, params.control_horizon, max_time.max(f64::MIN_POSITIVE), seed.child("timing"));
        EpisodeOutcome::Completed(EpisodeMetrics {
            ite,
            overshoot: max_over,
            step_time,
        })
    }
}

impl EpisodeEvaluator for Simulator {
    fn evaluate(&self, params: &ControllerParams, ctx: &Context, seed: SeedStream) -> EpisodeOutcome {
        self.run(params, ctx, seed)
    }
}

/// Free-function form of [`Simulator::run`].
pub fn run_episode(sim: &Simulator, params: &ControllerParams, ctx: &Context, seed: SeedStream) -> EpisodeOutcome {
    sim.run(params, ctx, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim() -> Simulator {
        let ts = 0.002;
        let traj = TrajectorySpec::default().build(ts).unwrap();
        Simulator::new(PlantParams::default(), ts, traj, TimingMode::default()).unwrap()
    }

    #[test]
    fn overshoot_cases() {
        let r = vec![1.0; 5];
        assert_eq!(overshoot(&r, &r), 0.0);
        assert_eq!(overshoot(&[0.2, 0.5, 0.9, 0.99, 0.0], &r), 0.0);
        let v = [0.5, 1.1, 1.27, 1.05, 1.0];
        assert!((overshoot(&v, &r) - 0.27).abs() < 1e-12);
    }

    #[test]
    fn synthetic_time_is_cubic_in_control_horizon() {
        let mode = TimingMode::Synthetic(SyntheticTiming {
            base: 1e-4,
            cubic: 1e-7,
            jitter_std: 0.0,
        });
        let s = SeedStream::new(0);
        let t1 = step_time(&mode, 1, 0.0, s) - 1e-4;
        let t2 = step_time(&mode, 2, 0.0, s) - 1e-4;
        assert!((t2 / t1 - 8.0).abs() < 1e-9);
    }

    #[test]
    fn synthetic_time_ignores_other_parameters() {
        let s = sim();
        let seed = SeedStream::new(4);
        let mut times = vec![];
        for (hp, lm, lk) in [(10, -3.0, -1.0), (25, 0.5, 2.0), (10, -5.0, -3.5)] {
            let p = ControllerParams {
                control_horizon: 10,
                prediction_horizon: hp,
                lambda_mpc: lm,
                lambda_kf: lk,
            };
            times.push(s.run(&p, &Context::NOMINAL, seed).metrics().unwrap().step_time);
        }
        assert!(times.iter().all(|&t| t == times[0]));
    }

    #[test]
    fn wallclock_time_is_positive() {
        let mut s = sim();
        s.timing = TimingMode::Wallclock;
        let out = s.run(&ControllerParams::HAND_TUNED, &Context::NOMINAL, SeedStream::new(1));
        assert!(out.metrics().unwrap().step_time > 0.0);
    }

    #[test]
    fn episodes_are_deterministic() {
        let s = sim();
        let ctx = Context::new(0.8, 1.2);
        let a = s.run(&ControllerParams::HAND_TUNED, &ctx, SeedStream::new(9));
        let b = s.run(&ControllerParams::HAND_TUNED, &ctx, SeedStream::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn ite_matches_trace() {
        let s = sim();
        let (out, trace) = s.run_traced(&ControllerParams::HAND_TUNED, &Context::new(1.3, 0.7), SeedStream::new(2));
        assert_eq!(trace.velocity.len(), s.trajectory.n_steps() + 1);
        let recomputed: f64 = trace
            .reference
            .iter()
            .zip(&trace.velocity)
            .map(|(r, v)| (r - v).powi(2))
            .sum();
        let m = out.metrics().unwrap();
        assert!((m.ite - recomputed).abs() < 1e-12);
        assert_eq!(m.overshoot, overshoot(&trace.velocity, &trace.reference));
    }

    #[test]
    fn nominal_noise_free_run_is_reproducible_and_feasible() {
        let mut s = sim();
        s.noise_std = 0.0;
        let a = s.run(&ControllerParams::HAND_TUNED, &Context::NOMINAL, SeedStream::new(1));
        let b = s.run(&ControllerParams::HAND_TUNED, &Context::NOMINAL, SeedStream::new(2));
        assert_eq!(a.metrics().unwrap().ite, b.metrics().unwrap().ite);
        assert!(a.metrics().unwrap().overshoot < 0.15);
    }

    #[test]
    fn diverging_loop_is_flagged() {
        let mut s = sim();
        s.divergence_factor = 0.5;
        let out = s.run(&ControllerParams::HAND_TUNED, &Context::NOMINAL, SeedStream::new(0));
        assert_eq!(out, EpisodeOutcome::Failed(FailureReason::Diverged));
    }

    #[test]
    fn window_pads_with_last_value() {
        let t = ReferenceTrajectory::new(vec![0.0, 1.0, 2.0], 0.1).unwrap();
        let mut w = vec![];
        t.window(1, 4, &mut w);
        assert_eq!(w, vec![2.0, 2.0, 2.0, 2.0]);
    }
}
