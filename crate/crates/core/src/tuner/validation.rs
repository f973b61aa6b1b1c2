use serde::{Deserialize, Serialize};

use crate::closedloop::{EpisodeEvaluator, EpisodeOutcome, TimingMode};
use crate::control::ControllerParams;
use crate::dynamics::TruncatedNormalSpec;
use crate::seed::SeedStream;

/// Limits a final controller is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    /// `dh_max`, largest admissible overshoot.
    pub overshoot: f64,
    /// `T_max`, per-step time budget in seconds.
    pub step_time: f64,
    /// Margin on the step time in standard deviations.
    pub z: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            overshoot: 0.15,
            step_time: 1e-3,
            z: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// Mean ITE over the draws; `None` if any episode failed.
    pub objective: Option<f64>,
    pub max_overshoot: f64,
    /// Step time the feasibility verdict was based on.
    pub step_time: f64,
    pub failed_episodes: usize,
    pub draws: usize,
    pub feasible: bool,
}

impl Validation {
    /// Re-judge the same episodes against other limits.
    pub fn verdict(&self, limits: &Limits) -> bool {
        self.failed_episodes == 0 && self.max_overshoot < limits.overshoot && self.step_time < limits.step_time
    }
}

/// Run `draws` episodes with independent contexts and noise.
///
/// In synthetic timing mode the step-time check uses the cost model plus
/// `z` jitter deviations; with wall-clock timing the largest measured step
/// time is used.
pub fn validate(
    eval: &dyn EpisodeEvaluator,
    params: &ControllerParams,
    spec: &TruncatedNormalSpec,
    timing: &TimingMode,
    limits: &Limits,
    draws: usize,
    seed: SeedStream,
) -> Validation {
    let contexts = spec.sample_many(draws, seed.child("contexts"));
    let episode = seed.child("episode");
    let mut ite = 0.0;
    let mut max_overshoot = 0.0f64;
    let mut measured = 0.0f64;
    let mut failed = 0;
    for (i, ctx) in contexts.iter().enumerate() {
        match eval.evaluate(params, ctx, episode.index(i as u64)) {
            EpisodeOutcome::Completed(m) => {
                ite += m.ite;
                max_overshoot = max_overshoot.max(m.overshoot);
                measured = measured.max(m.step_time);
            }
            EpisodeOutcome::Failed(_) => failed += 1,
        }
    }
    let step_time = match timing {
        TimingMode::Synthetic(s) => s.deterministic(params.control_horizon) + limits.z * s.jitter_std,
        TimingMode::Wallclock => measured,
    };
    let mut v = Validation {
        objective: (failed == 0).then(|| ite / draws as f64),
        max_overshoot,
        step_time,
        failed_episodes: failed,
        draws,
        feasible: false,
    };
    v.feasible = v.verdict(limits);
    v
}
