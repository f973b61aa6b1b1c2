//! Single-stage Bayesian optimisation: reinterpolated expected improvement
//! weighted by probability of feasibility and by knn estimates of the
//! outlier and failure probabilities, maximised by particle swarm.

mod knn;
mod pso;

pub use knn::{KnnClassifier, Metric};
pub use pso::{pso_maximize, PsoSettings};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gp::{gp_fit, GpHyperparams, GpModel, Hyperpriors, Normalizer, Prediction};
use crate::seed::SeedStream;

fn unit_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Expected improvement below `best` for a Gaussian with mean `mu` and
/// standard deviation `s`.
pub fn expected_improvement(mu: f64, s: f64, best: f64) -> f64 {
    let gap = best - mu;
    if !(s > 0.0) {
        return gap.max(0.0);
    }
    let z = gap / s;
    let n = unit_normal();
    (gap * n.cdf(z) + s * n.pdf(z)).max(0.0)
}

/// Interpolating GP through the posterior means of a noisy GP at its
/// distinct training inputs, with the same kernel.
pub fn reinterpolate(model: &GpModel) -> Result<GpModel> {
    let h = model.hyperparams();
    let interp = GpHyperparams {
        noise_var: 0.0,
        ..h.clone()
    };
    GpModel::new(model.inputs(), &model.training_means(), interp)
}

/// Which posterior variance a constraint is judged with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// Latent plus observation noise: the constraint is on the random
    /// response itself.
    Predictive,
    /// Latent only: the constraint is on the underlying function.
    Latent,
}

/// `response < limit`, required with margin `z` standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub name: String,
    pub limit: f64,
    pub z: f64,
    pub variance: VarianceKind,
}

impl ConstraintSpec {
    /// `P(mu + z s < limit)` under the Gaussian posterior, i.e.
    /// `Phi((limit - mu) / s - z)`.
    pub fn probability(&self, p: &Prediction) -> f64 {
        let var = match self.variance {
            VarianceKind::Predictive => p.variance,
            VarianceKind::Latent => p.latent_variance,
        };
        let s = var.sqrt();
        if !(s > 0.0) {
            return if p.mean < self.limit { 1.0 } else { 0.0 };
        }
        unit_normal().cdf((self.limit - p.mean) / s - self.z)
    }
}

/// Product of per-constraint feasibility probabilities.
pub fn prob_feasibility(parts: &[(Prediction, &ConstraintSpec)]) -> f64 {
    parts.iter().map(|(p, c)| c.probability(p)).product()
}

/// One evaluated input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    /// Objective samples (replicates).
    pub objective: Vec<f64>,
    /// Samples of each constrained response, one list per constraint.
    pub constraints: Vec<Vec<f64>>,
    pub outlier: bool,
    pub failed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<Observation>,
}

impl Dataset {
    pub fn push(&mut self, obs: Observation) {
        self.rows.push(obs);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows usable for regression: neither failed nor flagged.
    pub fn clean(&self) -> impl Iterator<Item = &Observation> {
        self.rows.iter().filter(|r| !r.failed && !r.outlier)
    }
}

/// The box, integrality and constraints of one optimisation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub bounds: Vec<(f64, f64)>,
    pub integer_mask: Vec<bool>,
    pub constraints: Vec<ConstraintSpec>,
    /// Hyperpriors with lengthscale bounds in unit-box coordinates.
    pub priors: Hyperpriors,
}

impl Problem {
    pub fn normalizer(&self) -> Normalizer {
        Normalizer::new(&self.bounds)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoSettings {
    pub pso: PsoSettings,
    pub knn_k: usize,
    pub gp_restarts: usize,
    pub outlier_classifier: bool,
    pub failure_classifier: bool,
}

impl Default for BoSettings {
    fn default() -> Self {
        BoSettings {
            pso: PsoSettings::default(),
            knn_k: 5,
            gp_restarts: 8,
            outlier_classifier: true,
            failure_classifier: true,
        }
    }
}

/// Factors of the composite acquisition at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionValue {
    pub ri: f64,
    pub p_feas: f64,
    pub p_out: f64,
    pub p_fail: f64,
    pub alpha: f64,
}

/// Everything needed to evaluate the acquisition.
#[derive(Debug, Clone)]
pub struct AcquisitionContext {
    pub normalizer: Normalizer,
    pub objective: GpModel,
    pub reinterpolated: GpModel,
    pub best: f64,
    pub constraints: Vec<(GpModel, ConstraintSpec)>,
    pub outlier: Option<KnnClassifier>,
    pub failure: Option<KnnClassifier>,
}

impl AcquisitionContext {
    /// Evaluate at a point given in problem coordinates.
    pub fn evaluate(&self, x: &[f64]) -> AcquisitionValue {
        self.evaluate_normalized(&self.normalizer.normalize(x))
    }

    pub fn evaluate_normalized(&self, u: &[f64]) -> AcquisitionValue {
        let r = self.reinterpolated.predict(u);
        let ri = expected_improvement(r.mean, r.latent_std(), self.best);
        let p_feas = self
            .constraints
            .iter()
            .map(|(m, c)| c.probability(&m.predict(u)))
            .product::<f64>();
        let p_out = self.outlier.as_ref().map_or(0.0, |k| k.prob(u));
        let p_fail = self.failure.as_ref().map_or(0.0, |k| k.prob(u));
        AcquisitionValue {
            ri,
            p_feas,
            p_out,
            p_fail,
            alpha: ri * p_feas * (1.0 - p_out) * (1.0 - p_fail),
        }
    }

    /// Probability of feasibility alone.
    pub fn p_feas(&self, x: &[f64]) -> f64 {
        let u = self.normalizer.normalize(x);
        self.constraints
            .iter()
            .map(|(m, c)| c.probability(&m.predict(&u)))
            .product()
    }

    pub fn hyperparams(&self) -> Vec<GpHyperparams> {
        std::iter::once(self.objective.hyperparams().clone())
            .chain(self.constraints.iter().map(|(m, _)| m.hyperparams().clone()))
            .collect()
    }
}

/// Composite acquisition at a point in problem coordinates.
pub fn acquisition(ctx: &AcquisitionContext, x: &[f64]) -> AcquisitionValue {
    ctx.evaluate(x)
}

fn training_set<'a, I>(rows: I, norm: &Normalizer, pick: impl Fn(&Observation) -> &[f64]) -> (Vec<Vec<f64>>, Vec<f64>)
where
    I: Iterator<Item = &'a Observation>,
{
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in rows {
        let u = norm.normalize(&r.x);
        for &v in pick(r) {
            xs.push(u.clone());
            ys.push(v);
        }
    }
    (xs, ys)
}

/// Fit the objective and constraint GPs on the clean rows and build the
/// classifiers on all rows.
pub fn fit_surrogates(
    data: &Dataset,
    problem: &Problem,
    settings: &BoSettings,
    seed: SeedStream,
) -> Result<AcquisitionContext> {
    let norm = problem.normalizer();
    let (xo, yo) = training_set(data.clean(), &norm, |r| &r.objective);
    if yo.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: yo.len() });
    }
    let objective = gp_fit(&xo, &yo, &problem.priors, settings.gp_restarts, seed.child("objective"))?;
    let reinterpolated = reinterpolate(&objective)?;
    let best = reinterpolated
        .input_means()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);

    let mut constraints = Vec::with_capacity(problem.constraints.len());
    for (i, spec) in problem.constraints.iter().enumerate() {
        let (xc, yc) = training_set(data.clean(), &norm, |r| &r.constraints[i]);
        if yc.len() < 2 {
            return Err(Error::TooFewPoints { needed: 2, got: yc.len() });
        }
        let m = gp_fit(&xc, &yc, &problem.priors, settings.gp_restarts, seed.child("constraint").index(i as u64))?;
        constraints.push((m, spec.clone()));
    }

    let h = objective.hyperparams();
    let metric = Metric::SeKernel {
        lengthscales: h.lengthscales.clone(),
    };
    let all_x: Vec<Vec<f64>> = data.rows.iter().map(|r| norm.normalize(&r.x)).collect();
    let outlier = settings.outlier_classifier.then(|| {
        KnnClassifier::new(
            all_x.clone(),
            data.rows.iter().map(|r| r.outlier).collect(),
            settings.knn_k,
            metric.clone(),
        )
    });
    let failure = settings.failure_classifier.then(|| {
        KnnClassifier::new(all_x, data.rows.iter().map(|r| r.failed).collect(), settings.knn_k, metric)
    });

    Ok(AcquisitionContext {
        normalizer: norm,
        objective,
        reinterpolated,
        best,
        constraints,
        outlier,
        failure,
    })
}

/// Outcome of one acquisition step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoStep {
    pub x_next: Vec<f64>,
    pub acquisition: Option<AcquisitionValue>,
    /// Set when the step maximised posterior variance instead.
    pub exploration_fallback: bool,
    pub hyperparams: Vec<GpHyperparams>,
}

/// Choose the next input: refit surrogates on the clean data, rebuild the
/// classifiers and maximise the composite acquisition. Falls back to
/// maximising latent variance when there is not enough clean data or the
/// acquisition vanishes everywhere.
pub fn bo_step(data: &Dataset, problem: &Problem, settings: &BoSettings, seed: SeedStream) -> Result<BoStep> {
    if data.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if let Ok(ctx) = fit_surrogates(data, problem, settings, seed.child("surrogates")) {
        if let Some(step) = maximize_acquisition(&ctx, problem, settings, seed) {
            return Ok(step);
        }
    }
    exploration_step(data, problem, settings, seed)
}

/// Maximise the composite acquisition of already fitted surrogates.
/// `None` when the acquisition is zero everywhere the swarm looked.
pub fn maximize_acquisition(
    ctx: &AcquisitionContext,
    problem: &Problem,
    settings: &BoSettings,
    seed: SeedStream,
) -> Option<BoStep> {
    let (x, alpha) = pso_maximize(
        |x| ctx.evaluate(x).alpha,
        &problem.bounds,
        &problem.integer_mask,
        &settings.pso,
        seed.child("pso"),
    );
    (alpha > 0.0).then(|| BoStep {
        acquisition: Some(ctx.evaluate(&x)),
        x_next: x,
        exploration_fallback: false,
        hyperparams: ctx.hyperparams(),
    })
}

/// Maximise the latent variance of a GP fitted on all non-failed rows.
pub fn exploration_step(data: &Dataset, problem: &Problem, settings: &BoSettings, seed: SeedStream) -> Result<BoStep> {
    let norm = problem.normalizer();
    let (xr, yr) = training_set(data.rows.iter().filter(|r| !r.failed), &norm, |r| &r.objective);
    let model = if yr.len() >= 2 {
        gp_fit(&xr, &yr, &problem.priors, settings.gp_restarts, seed.child("raw"))?
    } else {
        // variance does not depend on targets; use the prior centre
        let xs: Vec<Vec<f64>> = data.rows.iter().map(|r| norm.normalize(&r.x)).collect();
        let zeros = vec![0.0; xs.len()];
        let h = GpHyperparams {
            mean: 0.0,
            signal_var: 1.0,
            lengthscales: (0..problem.dim())
                .map(|d| {
                    let lo = problem.priors.lengthscale_min.get(d).copied().unwrap_or(problem.priors.default_lengthscale_min);
                    problem.priors.lengthscale_center.max(lo)
                })
                .collect(),
            noise_var: 1e-6,
        };
        GpModel::new(&xs, &zeros, h)?
    };
    let (x, _) = pso_maximize(
        |x| model.predict(&norm.normalize(x)).latent_variance,
        &problem.bounds,
        &problem.integer_mask,
        &settings.pso,
        seed.child("pso-explore"),
    );
    Ok(BoStep {
        x_next: x,
        acquisition: None,
        exploration_fallback: true,
        hyperparams: vec![model.hyperparams().clone()],
    })
}
