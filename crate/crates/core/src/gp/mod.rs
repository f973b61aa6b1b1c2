//! Gaussian process regression with a constant mean, squared-exponential ARD
//! kernel and homoscedastic Gaussian noise, plus a Student-t variant used to
//! flag outliers.
//!
//! Repeated observations at one input are grouped: the likelihood of `r`
//! replicates equals that of their mean with noise `sn2 / r` times a factor
//! depending only on the within-group scatter, so the kernel matrix only
//! grows with the number of distinct inputs.

pub mod optim;
mod robust;

pub use robust::{detect_outliers, robust_fit_student_t, OutlierLabels, OutlierSettings, RobustFit};

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dynamics::latin_hypercube;
use crate::error::{Error, Result};
use crate::seed::SeedStream;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Affine map between a parameter box and the unit box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Normalizer {
    pub fn new(bounds: &[(f64, f64)]) -> Self {
        Normalizer {
            lower: bounds.iter().map(|b| b.0).collect(),
            upper: bounds.iter().map(|b| b.1).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.lower[i]) / (self.upper[i] - self.lower[i]))
            .collect()
    }

    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| self.lower[i] + v * (self.upper[i] - self.lower[i]))
            .collect()
    }
}

/// Squared-exponential ARD covariance.
pub fn se_kernel(a: &[f64], b: &[f64], signal_var: f64, lengthscales: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(lengthscales) {
        let d = (x - y) / l;
        s += d * d;
    }
    signal_var * (-0.5 * s).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub mean: f64,
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

/// Log-normal hyperpriors and bounds. Variances are relative to the sample
/// variance of the targets, so the same settings serve responses of any
/// scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperpriors {
    pub lengthscale_center: f64,
    pub lengthscale_log_sd: f64,
    /// Per-dimension lower bounds; dimensions without an entry use
    /// `default_lengthscale_min`.
    pub lengthscale_min: Vec<f64>,
    pub default_lengthscale_min: f64,
    pub lengthscale_max: f64,
    pub signal_log_sd: f64,
    pub noise_ratio: f64,
    pub noise_log_sd: f64,
    pub noise_min_ratio: f64,
    pub noise_max_ratio: f64,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Hyperpriors {
            lengthscale_center: 0.3,
            lengthscale_log_sd: 1.0,
            lengthscale_min: Vec::new(),
            default_lengthscale_min: 0.05,
            lengthscale_max: 10.0,
            signal_log_sd: 1.5,
            noise_ratio: 0.01,
            noise_log_sd: 2.0,
            noise_min_ratio: 1e-8,
            noise_max_ratio: 1.0,
        }
    }
}

impl Hyperpriors {
    pub fn with_lengthscale_min(mut self, mins: Vec<f64>) -> Self {
        self.lengthscale_min = mins;
        self
    }

    fn ls_min(&self, d: usize) -> f64 {
        self.lengthscale_min.get(d).copied().unwrap_or(self.default_lengthscale_min)
    }

    /// Box on the packed parameters `[m, ln sf2, ln l_1.., ln sn2]`, in
    /// standardised target units.
    fn packed_bounds(&self, dim: usize) -> Vec<(f64, f64)> {
        let mut b = vec![(-10.0, 10.0), ((1e-3f64).ln(), (1e3f64).ln())];
        for d in 0..dim {
            b.push((self.ls_min(d).ln(), self.lengthscale_max.ln()));
        }
        b.push((self.noise_min_ratio.ln(), self.noise_max_ratio.ln()));
        b
    }

    fn prior_center(&self, dim: usize) -> Vec<f64> {
        let mut p = vec![0.0, 0.0];
        p.extend(std::iter::repeat(self.lengthscale_center.ln()).take(dim));
        p.push(self.noise_ratio.ln());
        p
    }

    /// Log prior density (up to a constant) and its gradient.
    fn log_prior(&self, p: &[f64], grad: &mut [f64]) -> f64 {
        const MEAN_SD: f64 = 3.0;
        let dim = p.len() - 3;
        let mut lp = -0.5 * (p[0] / MEAN_SD).powi(2);
        grad[0] -= p[0] / (MEAN_SD * MEAN_SD);
        let mut gauss = |i: usize, center: f64, sd: f64, lp: &mut f64| {
            let z = (p[i] - center) / sd;
            *lp -= 0.5 * z * z;
            grad[i] -= z / sd;
        };
        gauss(1, 0.0, self.signal_log_sd, &mut lp);
        for d in 0..dim {
            gauss(2 + d, self.lengthscale_center.ln(), self.lengthscale_log_sd, &mut lp);
        }
        gauss(2 + dim, self.noise_ratio.ln(), self.noise_log_sd, &mut lp);
        lp
    }
}

/// Distinct inputs with replicate statistics.
#[derive(Debug, Clone)]
struct Groups {
    x: Vec<Vec<f64>>,
    count: Vec<f64>,
    mean: Vec<f64>,
    scatter: Vec<f64>,
    n_obs: usize,
}

impl Groups {
    fn new(x: &[Vec<f64>], y: &[f64]) -> Result<Groups> {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        let dim = x.first().map_or(0, Vec::len);
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut members: Vec<Vec<f64>> = Vec::new();
        let mut inputs: Vec<Vec<f64>> = Vec::new();
        for (xi, &yi) in x.iter().zip(y) {
            if xi.len() != dim {
                return Err(Error::Dimension("inputs of differing dimension".into()));
            }
            if !yi.is_finite() || xi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dimension("non-finite training data".into()));
            }
            let key: Vec<u64> = xi.iter().map(|v| (v + 0.0).to_bits()).collect();
            let g = *index.entry(key).or_insert_with(|| {
                inputs.push(xi.clone());
                members.push(Vec::new());
                inputs.len() - 1
            });
            members[g].push(yi);
        }
        let mut count = Vec::with_capacity(members.len());
        let mut mean = Vec::with_capacity(members.len());
        let mut scatter = Vec::with_capacity(members.len());
        for m in &members {
            let mu = m.iter().sum::<f64>() / m.len() as f64;
            count.push(m.len() as f64);
            mean.push(mu);
            scatter.push(m.iter().map(|v| (v - mu) * (v - mu)).sum());
        }
        Ok(Groups {
            x: inputs,
            count,
            mean,
            scatter,
            n_obs: y.len(),
        })
    }

    fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    fn rescaled(&self, shift: f64, scale: f64) -> Groups {
        Groups {
            mean: self.mean.iter().map(|m| (m - shift) / scale).collect(),
            scatter: self.scatter.iter().map(|s| s / (scale * scale)).collect(),
            ..self.clone()
        }
    }
}

fn kernel_matrix(x: &[Vec<f64>], signal_var: f64, ls: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = signal_var;
        for j in 0..i {
            let v = se_kernel(&x[i], &x[j], signal_var, ls);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with the escalating jitter policy: none, then `1e-10 sf2`
/// growing tenfold up to `1e-6 sf2`.
fn factorize(mut ky: DMatrix<f64>, signal_var: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = ky.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let mut added = 0.0;
    let mut jitter = 1e-10 * signal_var;
    while jitter <= 1e-6 * signal_var * (1.0 + 1e-9) {
        for i in 0..ky.nrows() {
            ky[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(c) = ky.clone().cholesky() {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite)
}

fn unpack(p: &[f64]) -> GpHyperparams {
    let dim = p.len() - 3;
    GpHyperparams {
        mean: p[0],
        signal_var: p[1].exp(),
        lengthscales: p[2..2 + dim].iter().map(|v| v.exp()).collect(),
        noise_var: p[2 + dim].exp(),
    }
}

#[cfg(test)]
fn pack(h: &GpHyperparams) -> Vec<f64> {
    let mut p = vec![h.mean, h.signal_var.ln()];
    p.extend(h.lengthscales.iter().map(|l| l.ln()));
    p.push(h.noise_var.ln());
    p
}

/// Log marginal likelihood of grouped data and, optionally, its gradient
/// with respect to `[m, ln sf2, ln l_1.., ln sn2]`.
fn grouped_lml(g: &Groups, h: &GpHyperparams, grad: Option<&mut [f64]>) -> Result<f64> {
    let n = g.x.len();
    let dim = g.dim();
    let kf = kernel_matrix(&g.x, h.signal_var, &h.lengthscales);
    let mut ky = kf.clone();
    for i in 0..n {
        ky[(i, i)] += h.noise_var / g.count[i];
    }
    let (chol, _) = factorize(ky, h.signal_var)?;
    let resid = DVector::from_iterator(n, g.mean.iter().map(|v| v - h.mean));
    let alpha = chol.solve(&resid);
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    let mut lml = -0.5 * resid.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;
    let ln_sn2 = h.noise_var.ln();
    for j in 0..n {
        let r = g.count[j];
        lml += -0.5 * (r - 1.0) * (LN_2PI + ln_sn2) - 0.5 * g.scatter[j] / h.noise_var - 0.5 * r.ln();
    }

    if let Some(grad) = grad {
        let kinv = chol.inverse();
        // W = alpha alpha^T - Ky^-1, dL = 0.5 tr(W dK)
        let w = &alpha * alpha.transpose() - &kinv;
        grad[0] = alpha.sum();
        grad[1] = 0.5 * w.component_mul(&kf).sum();
        for d in 0..dim {
            let l2 = h.lengthscales[d] * h.lengthscales[d];
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..i {
                    let diff = g.x[i][d] - g.x[j][d];
                    acc += 2.0 * w[(i, j)] * kf[(i, j)] * diff * diff / l2;
                }
            }
            grad[2 + d] = 0.5 * acc;
        }
        let mut gn = 0.0;
        for j in 0..n {
            gn += 0.5 * w[(j, j)] * h.noise_var / g.count[j];
            gn += -0.5 * (g.count[j] - 1.0) + 0.5 * g.scatter[j] / h.noise_var;
        }
        grad[2 + dim] = gn;
    }
    Ok(lml)
}

/// Log marginal likelihood of `y` at the given hyperparameters, counting
/// every observation (replicates included).
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], h: &GpHyperparams) -> Result<f64> {
    grouped_lml(&Groups::new(x, y)?, h, None)
}

/// Log marginal likelihood and its gradient with respect to
/// `[m, ln sf2, ln l_1.., ln sn2]`.
pub fn log_marginal_likelihood_grad(
    x: &[Vec<f64>],
    y: &[f64],
    h: &GpHyperparams,
) -> Result<(f64, Vec<f64>)> {
    let g = Groups::new(x, y)?;
    let mut grad = vec![0.0; g.dim() + 3];
    let v = grouped_lml(&g, h, Some(&mut grad))?;
    Ok((v, grad))
}

/// Posterior mean, predictive variance (with observation noise) and latent
/// variance at one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub latent_variance: f64,
}

impl Prediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn latent_std(&self) -> f64 {
        self.latent_variance.sqrt()
    }
}

/// A conditioned GP; immutable after construction.
#[derive(Debug, Clone)]
pub struct GpModel {
    groups: Groups,
    hyper: GpHyperparams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    log_likelihood: f64,
}

impl GpModel {
    /// Condition on data with fixed hyperparameters.
    pub fn new(x: &[Vec<f64>], y: &[f64], hyper: GpHyperparams) -> Result<GpModel> {
        if x.is_empty() {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        let groups = Groups::new(x, y)?;
        if hyper.lengthscales.len() != groups.dim() {
            return Err(Error::Dimension(format!(
                "{} lengthscales for {}-dimensional inputs",
                hyper.lengthscales.len(),
                groups.dim()
            )));
        }
        Self::from_groups(groups, hyper)
    }

    fn from_groups(groups: Groups, hyper: GpHyperparams) -> Result<GpModel> {
        let n = groups.x.len();
        let mut ky = kernel_matrix(&groups.x, hyper.signal_var, &hyper.lengthscales);
        for i in 0..n {
            ky[(i, i)] += hyper.noise_var / groups.count[i];
        }
        let (chol, jitter) = factorize(ky, hyper.signal_var)?;
        let resid = DVector::from_iterator(n, groups.mean.iter().map(|v| v - hyper.mean));
        let alpha = chol.solve(&resid);
        let log_likelihood = if hyper.noise_var > 0.0 {
            grouped_lml(&groups, &hyper, None).unwrap_or(f64::NEG_INFINITY)
        } else {
            f64::NAN
        };
        Ok(GpModel {
            groups,
            hyper,
            chol,
            alpha,
            jitter,
            log_likelihood,
        })
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyper
    }

    pub fn dim(&self) -> usize {
        self.groups.dim()
    }

    /// Distinct training inputs.
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.groups.x
    }

    /// Mean target per distinct input.
    pub fn input_means(&self) -> &[f64] {
        &self.groups.mean
    }

    pub fn n_observations(&self) -> usize {
        self.groups.n_obs
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn predict(&self, xq: &[f64]) -> Prediction {
        let h = &self.hyper;
        let n = self.groups.x.len();
        let ks = DVector::from_iterator(
            n,
            self.groups.x.iter().map(|xi| se_kernel(xi, xq, h.signal_var, &h.lengthscales)),
        );
        let mean = h.mean + ks.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&ks).unwrap_or_else(|| DVector::zeros(n));
        let latent = (h.signal_var - v.norm_squared()).max(0.0);
        Prediction {
            mean,
            variance: latent + h.noise_var,
            latent_variance: latent,
        }
    }

    /// Posterior mean at every distinct training input.
    pub fn training_means(&self) -> Vec<f64> {
        self.groups.x.iter().map(|x| self.predict(x).mean).collect()
    }
}

/// Fit hyperparameters by maximising log marginal likelihood plus log
/// hyperprior from `restarts` starting points (the prior centre plus a
/// Latin hypercube over the log-parameter box).
pub fn gp_fit(
    x: &[Vec<f64>],
    y: &[f64],
    priors: &Hyperpriors,
    restarts: usize,
    seed: SeedStream,
) -> Result<GpModel> {
    if y.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: y.len() });
    }
    let groups = Groups::new(x, y)?;
    let dim = groups.dim();
    let n = y.len() as f64;
    let shift = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - shift) * (v - shift)).sum::<f64>() / n;
    let scale = if var > 1e-300 && var.is_finite() { var.sqrt() } else { 1.0 };
    let std = groups.rescaled(shift, scale);

    let bounds = priors.packed_bounds(dim);
    let objective = |p: &[f64]| -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; p.len()];
        match grouped_lml(&std, &unpack(p), Some(&mut grad)) {
            Ok(lml) => {
                let mut pg = vec![0.0; p.len()];
                let lp = priors.log_prior(p, &mut pg);
                let g = grad.iter().zip(&pg).map(|(a, b)| -(a + b)).collect();
                (-(lml + lp), g)
            }
            Err(_) => (f64::INFINITY, grad),
        }
    };

    let mut starts = vec![priors.prior_center(dim)];
    if restarts > 1 {
        let mut start_box = bounds.clone();
        start_box[0] = (-1.0, 1.0);
        start_box[1] = ((0.1f64).ln(), (10.0f64).ln());
        let last = start_box.len() - 1;
        start_box[last] = (bounds[last].0.max((1e-4f64).ln()), bounds[last].1.min((0.5f64).ln()));
        let mask = vec![false; start_box.len()];
        starts.extend(latin_hypercube(restarts - 1, &start_box, &mask, seed.child("gp-restarts")));
    }

    let mut best: Option<optim::Minimum> = None;
    for s in &starts {
        let m = optim::minimize_box(&objective, s, &bounds, 200);
        if m.value.is_finite() && best.as_ref().map_or(true, |b| m.value < b.value) {
            best = Some(m);
        }
    }
    let best = best.ok_or(Error::NotPositiveDefinite)?;
    let hs = unpack(&best.x);
    let hyper = GpHyperparams {
        mean: shift + scale * hs.mean,
        signal_var: hs.signal_var * scale * scale,
        lengthscales: hs.lengthscales,
        noise_var: hs.noise_var * scale * scale,
    };
    GpModel::from_groups(groups, hyper)
}
