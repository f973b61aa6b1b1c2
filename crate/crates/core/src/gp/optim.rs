//! Box-constrained local minimisation: projected BFGS followed by a short
//! compass search to polish coordinates pinned near a bound.

/// Result of a local search.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimise `f` (value and gradient) over a box.
///
/// Non-finite values are treated as `+inf`, so the line search backs away
/// from regions where the objective cannot be evaluated.
pub fn minimize_box<F>(mut f: F, x0: &[f64], bounds: &[(f64, f64)], max_iter: usize) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Minimum { x, value: f64::INFINITY, iterations: 0 };
    }
    // inverse Hessian approximation, row-major
    let mut h = identity(n);
    let mut iterations = 0;
    let mut stalls = 0;

    while iterations < max_iter {
        iterations += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let (lo, hi) = bounds[i];
                !((x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0))
            })
            .collect();
        let pg: f64 = (0..n).filter(|&i| free[i]).map(|i| g[i] * g[i]).sum::<f64>().sqrt();
        if pg < 1e-7 {
            break;
        }

        let mut d = vec![0.0; n];
        for i in 0..n {
            if free[i] {
                d[i] = -(0..n).filter(|&j| free[j]).map(|j| h[i * n + j] * g[j]).sum::<f64>();
            }
        }
        if dot(&d, &g) >= 0.0 {
            h = identity(n);
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
        }

        let mut t = 1.0;
        let slope = dot(&d, &g);
        let mut accepted = None;
        for _ in 0..40 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            project(&mut xt, bounds);
            let (ft, gt) = f(&xt);
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope.min(0.0) {
                accepted = Some((xt, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if h == identity(n) {
                break;
            }
            h = identity(n);
            continue;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            bfgs_update(&mut h, &s, &y, sy);
        }

        let improvement = fx - fnew;
        x = xn;
        g = gn;
        fx = fnew;
        if improvement <= 1e-11 * (1.0 + fx.abs()) {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }

    let polished = compass_polish(|p| f(p).0, x, fx, bounds);
    Minimum {
        x: polished.0,
        value: polished.1,
        iterations,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Coordinate-wise pattern search with shrinking step.
fn compass_polish<F>(mut f: F, mut x: Vec<f64>, mut fx: f64, bounds: &[(f64, f64)]) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let mut step = 0.05;
    while step > 1e-4 {
        let mut improved = false;
        for i in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut xt = x.clone();
                xt[i] = (xt[i] + sign * step).clamp(bounds[i].0, bounds[i].1);
                if xt[i] == x[i] {
                    continue;
                }
                let ft = f(&xt);
                if ft.is_finite() && ft < fx {
                    x = xt;
                    fx = ft;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.25;
        }
    }
    (x, fx)
}

/// Central finite-difference gradient.
pub fn numeric_gradient<F>(f: &mut F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xt = x.to_vec();
    (0..x.len())
        .map(|i| {
            xt[i] = x[i] + h;
            let fp = f(&xt);
            xt[i] = x[i] - h;
            let fm = f(&xt);
            xt[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let f = |x: &[f64]| {
            let v = (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
            let g = vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ];
            (v, g)
        };
        let m = minimize_box(f, &[-1.2, 1.0], &[(-5.0, 5.0), (-5.0, 5.0)], 500);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m);
    }

    #[test]
    fn active_bound_is_respected() {
        // minimum of (x-3)^2 + (y+1)^2 on [0,2]x[0,2] is (2, 0)
        let f = |x: &[f64]| {
            (
                (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2),
                vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)],
            )
        };
        let m = minimize_box(f, &[1.0, 1.0], &[(0.0, 2.0), (0.0, 2.0)], 100);
        assert_eq!(m.x, vec![2.0, 0.0]);
        assert!((m.value - 2.0).abs() < 1e-12);
    }
}
