//! Student-t observation model with a Laplace approximation to the latent
//! posterior. Used only to score observations; points the heavy-tailed fit
//! refuses to follow get a low likelihood and are flagged.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{kernel_matrix, optim, Hyperpriors};
use crate::dynamics::latin_hypercube;
use crate::error::{Error, Result};
use crate::seed::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierSettings {
    /// Degrees of freedom of the Student-t likelihood.
    pub nu: f64,
    /// Default threshold: log density of a residual of `z_threshold`
    /// standard deviations under the fitted Student-t.
    pub z_threshold: f64,
    /// Explicit log-likelihood threshold, overriding `z_threshold`.
    pub log_likelihood_threshold: Option<f64>,
    pub restarts: usize,
    /// Upper limit on detect-and-refit passes.
    pub passes: usize,
}

impl Default for OutlierSettings {
    fn default() -> Self {
        OutlierSettings {
            nu: 4.0,
            z_threshold: 3.0,
            log_likelihood_threshold: None,
            restarts: 2,
            passes: 3,
        }
    }
}

/// Outcome of the robust fit, in the units of the targets.
#[derive(Debug, Clone)]
pub struct RobustFit {
    /// Posterior mode of the latent function at each training input.
    pub latent_mean: Vec<f64>,
    /// Log density of each observation under the fitted Student-t.
    pub log_likelihoods: Vec<f64>,
    /// Student-t scale.
    pub scale: f64,
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub nu: f64,
    /// `false` when Newton's method did not settle in 100 steps.
    pub converged: bool,
}

impl RobustFit {
    /// Standard deviation of the fitted noise; the scale itself when the
    /// variance is infinite (`nu <= 2`).
    pub fn noise_std(&self) -> f64 {
        if self.nu > 2.0 {
            self.scale * (self.nu / (self.nu - 2.0)).sqrt()
        } else {
            self.scale
        }
    }

    /// Log density of a residual of `z` standard deviations.
    pub fn log_density_at(&self, z: f64) -> f64 {
        student_t_logpdf(z * self.noise_std(), self.scale * self.scale, self.nu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierLabels {
    pub flags: Vec<bool>,
    pub log_likelihoods: Vec<f64>,
    pub threshold: f64,
    /// Set when the robust fit failed and nothing was flagged.
    pub fallback: bool,
}

impl OutlierLabels {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

fn student_t_logpdf(r: f64, s2: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI * s2).ln()
        - 0.5 * (nu + 1.0) * (r * r / (nu * s2)).ln_1p()
}

struct Mode {
    a: DVector<f64>,
    f: DVector<f64>,
    log_evidence: f64,
    converged: bool,
}

/// Newton iterations for the posterior mode, parametrised by `a` with
/// `f = K a`. Negative curvature of the likelihood is clipped to zero in
/// the Newton system and every step is safeguarded by a line search.
fn laplace_mode(k: &DMatrix<f64>, y: &[f64], nu: f64, s2: f64, a0: &DVector<f64>) -> Option<Mode> {
    let n = y.len();
    let psi = |a: &DVector<f64>, f: &DVector<f64>| -> f64 {
        -0.5 * a.dot(f) + (0..n).map(|i| student_t_logpdf(y[i] - f[i], s2, nu)).sum::<f64>()
    };
    let mut a = a0.clone();
    let mut f = k * &a;
    let mut obj = psi(&a, &f);
    let mut converged = false;
    for _ in 0..100 {
        let mut w = DVector::zeros(n);
        let mut dl = DVector::zeros(n);
        for i in 0..n {
            let r = y[i] - f[i];
            let den = nu * s2 + r * r;
            dl[i] = (nu + 1.0) * r / den;
            w[i] = ((nu + 1.0) * (nu * s2 - r * r) / (den * den)).max(0.0);
        }
        let sw = w.map(f64::sqrt);
        let mut bmat = k.clone();
        for i in 0..n {
            for j in 0..n {
                bmat[(i, j)] *= sw[i] * sw[j];
            }
            bmat[(i, i)] += 1.0;
        }
        let chol = bmat.cholesky()?;
        let b = w.component_mul(&f) + &dl;
        let c = chol.solve(&sw.component_mul(&(k * &b)));
        let a_new = &b - sw.component_mul(&c);
        let step = &a_new - &a;

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let at = &a + &step * t;
            let ft = k * &at;
            let ot = psi(&at, &ft);
            if ot.is_finite() && ot >= obj {
                accepted = Some((at, ft, ot));
                break;
            }
            t *= 0.5;
        }
        let Some((at, ft, ot)) = accepted else {
            converged = true;
            break;
        };
        let gain = ot - obj;
        a = at;
        f = ft;
        obj = ot;
        if gain < 1e-10 * (1.0 + obj.abs()) {
            converged = true;
            break;
        }
    }

    // log |B| at the mode, with the same clipped curvature
    let mut bmat = k.clone();
    let sw: Vec<f64> = (0..n)
        .map(|i| {
            let r = y[i] - f[i];
            let den = nu * s2 + r * r;
            ((nu + 1.0) * (nu * s2 - r * r) / (den * den)).max(0.0).sqrt()
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            bmat[(i, j)] *= sw[i] * sw[j];
        }
        bmat[(i, i)] += 1.0;
    }
    let chol = bmat.cholesky()?;
    let half_logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    Some(Mode {
        a,
        f,
        log_evidence: obj - half_logdet,
        converged,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Fit the Student-t GP. Targets are centred on their median and scaled by
/// the normalised median absolute deviation, so the outliers being hunted
/// do not set the scale.
pub fn robust_fit_student_t(
    x: &[Vec<f64>],
    y: &[f64],
    nu: f64,
    priors: &Hyperpriors,
    restarts: usize,
    seed: SeedStream,
) -> Result<RobustFit> {
    let n = y.len();
    if n < 5 {
        return Err(Error::TooFewPoints { needed: 5, got: n });
    }
    if x.len() != n {
        return Err(Error::Dimension(format!("{} inputs but {} targets", x.len(), n)));
    }
    if !(nu > 0.0) {
        return Err(Error::InvalidParams("Student-t degrees of freedom must be positive".into()));
    }
    let dim = x[0].len();
    let center = median(y);
    let mad = 1.4826 * median(&y.iter().map(|v| (v - center).abs()).collect::<Vec<_>>());
    let scale = if mad > 1e-300 {
        mad
    } else {
        let m = y.iter().sum::<f64>() / n as f64;
        let sd = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        if sd > 1e-300 { sd } else { 1.0 }
    };
    let ys: Vec<f64> = y.iter().map(|v| (v - center) / scale).collect();

    // packed: [ln sf2, ln l_1.., ln s2]
    let mut bounds = vec![((1e-3f64).ln(), (1e2f64).ln())];
    for d in 0..dim {
        bounds.push((priors.ls_min(d).ln(), priors.lengthscale_max.ln()));
    }
    bounds.push(((1e-6f64).ln(), 0.0));
    let mut center_p = vec![0.0];
    center_p.extend(std::iter::repeat(priors.lengthscale_center.ln()).take(dim));
    center_p.push(priors.noise_ratio.ln());

    let log_prior = |p: &[f64]| -> f64 {
        let z0 = p[0] / priors.signal_log_sd;
        let mut lp = -0.5 * z0 * z0;
        for d in 0..dim {
            let z = (p[1 + d] - priors.lengthscale_center.ln()) / priors.lengthscale_log_sd;
            lp -= 0.5 * z * z;
        }
        let zn = (p[1 + dim] - priors.noise_ratio.ln()) / priors.noise_log_sd;
        lp - 0.5 * zn * zn
    };

    let warm = RefCell::new(DVector::zeros(n));
    let neg_post = |p: &[f64]| -> f64 {
        let ls: Vec<f64> = p[1..1 + dim].iter().map(|v| v.exp()).collect();
        let mut k = kernel_matrix(x, p[0].exp(), &ls);
        for i in 0..n {
            k[(i, i)] += 1e-8 * p[0].exp();
        }
        let a0 = warm.borrow().clone();
        match laplace_mode(&k, &ys, nu, p[1 + dim].exp(), &a0) {
            Some(m) if m.log_evidence.is_finite() => {
                *warm.borrow_mut() = m.a;
                -(m.log_evidence + log_prior(p))
            }
            _ => f64::INFINITY,
        }
    };

    let mut starts = vec![center_p];
    if restarts > 1 {
        let mut start_box = bounds.clone();
        start_box[0] = ((0.1f64).ln(), (10.0f64).ln());
        let last = start_box.len() - 1;
        start_box[last] = ((1e-4f64).ln(), (0.3f64).ln());
        let mask = vec![false; start_box.len()];
        starts.extend(latin_hypercube(restarts - 1, &start_box, &mask, seed.child("robust-restarts")));
    }
    let mut best: Option<optim::Minimum> = None;
    for s in &starts {
        *warm.borrow_mut() = DVector::zeros(n);
        let mut f = |p: &[f64]| neg_post(p);
        let m = optim::minimize_box(
            |p: &[f64]| {
                let v = f(p);
                let g = optim::numeric_gradient(&mut f, p, 1e-4);
                (v, g)
            },
            s,
            &bounds,
            60,
        );
        if m.value.is_finite() && best.as_ref().map_or(true, |b| m.value < b.value) {
            best = Some(m);
        }
    }
    let p = best.ok_or(Error::NotPositiveDefinite)?.x;

    let signal_var = p[0].exp();
    let lengthscales: Vec<f64> = p[1..1 + dim].iter().map(|v| v.exp()).collect();
    let s2 = p[1 + dim].exp();
    let mut k = kernel_matrix(x, signal_var, &lengthscales);
    for i in 0..n {
        k[(i, i)] += 1e-8 * signal_var;
    }
    let mode = laplace_mode(&k, &ys, nu, s2, &DVector::zeros(n)).ok_or(Error::NotPositiveDefinite)?;
    let ln_scale = scale.ln();
    Ok(RobustFit {
        latent_mean: mode.f.iter().map(|v| center + scale * v).collect(),
        log_likelihoods: (0..n).map(|i| student_t_logpdf(ys[i] - mode.f[i], s2, nu) - ln_scale).collect(),
        scale: s2.sqrt() * scale,
        signal_var: signal_var * scale * scale,
        lengthscales,
        nu,
        converged: mode.converged,
    })
}

/// Flag observations whose robust log-likelihood falls below the threshold.
///
/// Detection is repeated on the points not yet flagged until a pass adds
/// nothing (at most `settings.passes` passes): heavy contamination inflates
/// the robust scale, and removing the grossest values first lets the next
/// pass see the moderate ones. A failed or non-converged first fit flags
/// nothing and sets `fallback`; a later failure keeps the flags so far.
pub fn detect_outliers(
    x: &[Vec<f64>],
    y: &[f64],
    settings: &OutlierSettings,
    priors: &Hyperpriors,
    seed: SeedStream,
) -> OutlierLabels {
    let n = y.len();
    let mut labels = OutlierLabels {
        flags: vec![false; n],
        log_likelihoods: vec![f64::NAN; n],
        threshold: f64::NAN,
        fallback: true,
    };
    for pass in 0..settings.passes.max(1) {
        let keep: Vec<usize> = (0..n).filter(|&i| !labels.flags[i]).collect();
        let xs: Vec<Vec<f64>> = keep.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
        let fit = match robust_fit_student_t(&xs, &ys, settings.nu, priors, settings.restarts, seed.index(pass as u64)) {
            Ok(fit) if fit.converged => fit,
            _ => break,
        };
        let threshold = settings
            .log_likelihood_threshold
            .unwrap_or_else(|| fit.log_density_at(settings.z_threshold));
        let mut added = false;
        for (j, &i) in keep.iter().enumerate() {
            labels.log_likelihoods[i] = fit.log_likelihoods[j];
            if fit.log_likelihoods[j] < threshold {
                labels.flags[i] = true;
                added = true;
            }
        }
        labels.threshold = threshold;
        labels.fallback = false;
        if !added {
            break;
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logpdf_normalises() {
        // trapezoid over a wide range
        let (s2, nu) = (0.7f64, 4.0);
        let h = 1e-3;
        let total: f64 = (-200_000..=200_000).map(|i| student_t_logpdf(i as f64 * h, s2, nu).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
