use serde::{Deserialize, Serialize};

use crate::bo::{bo_step, BoSettings, Dataset, Observation, Problem};
use crate::closedloop::{EpisodeEvaluator, EpisodeOutcome};
use crate::control::ControllerParams;
use crate::dynamics::{Context, TruncatedNormalSpec};
use crate::gp::Hyperpriors;
use crate::seed::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Settings {
    pub initial_contexts: usize,
    pub max_evaluations: usize,
    pub bo: BoSettings,
}

impl Default for Stage2Settings {
    fn default() -> Self {
        Stage2Settings {
            initial_contexts: 5,
            max_evaluations: 10,
            bo: BoSettings {
                outlier_classifier: false,
                failure_classifier: false,
                ..BoSettings::default()
            },
        }
    }
}

/// One inner episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextSample {
    pub context: Context,
    pub ite: f64,
    pub overshoot: f64,
    pub step_time: f64,
}

/// Worst-case search over contexts for one controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Result {
    /// Largest observed overshoot.
    pub worst_overshoot: f64,
    /// `(ite, step_time)` of the initial contexts, the values handed back
    /// to the outer loop.
    pub samples: Vec<(f64, f64)>,
    pub evaluations: usize,
    pub early_stop: bool,
    pub failed: bool,
    pub trace: Vec<ContextSample>,
}

impl Stage2Result {
    fn new() -> Self {
        Stage2Result {
            worst_overshoot: 0.0,
            samples: Vec::new(),
            evaluations: 0,
            early_stop: false,
            failed: false,
            trace: Vec::new(),
        }
    }

    /// Record an episode; returns false if it failed.
    fn record(&mut self, ctx: Context, out: EpisodeOutcome) -> bool {
        self.evaluations += 1;
        match out {
            EpisodeOutcome::Completed(m) => {
                self.worst_overshoot = self.worst_overshoot.max(m.overshoot);
                self.trace.push(ContextSample {
                    context: ctx,
                    ite: m.ite,
                    overshoot: m.overshoot,
                    step_time: m.step_time,
                });
                true
            }
            EpisodeOutcome::Failed(_) => {
                self.failed = true;
                false
            }
        }
    }

    pub fn mean_ite(&self) -> f64 {
        self.samples.iter().map(|s| s.0).sum::<f64>() / self.samples.len() as f64
    }
}

/// Draw the initial contexts, then run noisy BO over the context box to
/// maximise overshoot. Stops at the first overshoot above `limit`, at the
/// evaluation budget, or at the first failed episode.
pub fn stage2_worst_context(
    eval: &dyn EpisodeEvaluator,
    params: &ControllerParams,
    spec: &TruncatedNormalSpec,
    settings: &Stage2Settings,
    limit: f64,
    seed: SeedStream,
) -> Stage2Result {
    let mut res = Stage2Result::new();
    let episode_seed = seed.child("episode");
    let contexts = spec.sample_many(settings.initial_contexts, seed.child("contexts"));
    for (i, ctx) in contexts.iter().enumerate() {
        if !res.record(*ctx, eval.evaluate(params, ctx, episode_seed.index(i as u64))) {
            res.samples.clear();
            return res;
        }
    }
    res.samples = res.trace.iter().map(|s| (s.ite, s.step_time)).collect();
    if res.worst_overshoot > limit {
        res.early_stop = true;
        return res;
    }

    let problem = Problem {
        bounds: spec.bounds(),
        integer_mask: vec![false; 2],
        constraints: Vec::new(),
        priors: Hyperpriors::default(),
    };
    let mut data = Dataset::default();
    for s in &res.trace {
        data.push(Observation {
            x: s.context.as_array().to_vec(),
            objective: vec![-s.overshoot],
            constraints: Vec::new(),
            outlier: false,
            failed: false,
        });
    }
    while res.evaluations < settings.max_evaluations {
        let k = res.evaluations as u64;
        let Ok(step) = bo_step(&data, &problem, &settings.bo, seed.child("bo").index(k)) else {
            break;
        };
        let ctx = Context::from_slice(&step.x_next);
        if !res.record(ctx, eval.evaluate(params, &ctx, episode_seed.index(k))) {
            return res;
        }
        let dh = res.trace.last().unwrap().overshoot;
        data.push(Observation {
            x: step.x_next,
            objective: vec![-dh],
            constraints: Vec::new(),
            outlier: false,
            failed: false,
        });
        if dh > limit {
            res.early_stop = true;
            break;
        }
    }
    res
}

/// Single nominal-context episode in place of the worst-case search.
pub fn nominal_only(eval: &dyn EpisodeEvaluator, params: &ControllerParams, spec: &TruncatedNormalSpec, limit: f64, seed: SeedStream) -> Stage2Result {
    let mut res = Stage2Result::new();
    let ctx = spec.mean_context();
    if res.record(ctx, eval.evaluate(params, &ctx, seed.child("episode").index(0))) {
        res.samples = res.trace.iter().map(|s| (s.ite, s.step_time)).collect();
        res.early_stop = res.worst_overshoot > limit;
    }
    res
}
