use serde::{Deserialize, Serialize};

use crate::bo::{AcquisitionContext, Problem};
use crate::error::{Error, Result};

/// Surrogate summary at one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x: Vec<f64>,
    pub objective_mean: f64,
    pub objective_std: f64,
    pub p_feas: f64,
    pub p_out: f64,
    pub p_fail: f64,
    pub step_time_mean: f64,
    pub overshoot_mean: f64,
}

/// Evaluate the surrogates on a `resolution x resolution` grid spanning
/// dimensions `dims` of the problem box, other coordinates taken from
/// `fixed`. A resolution of 1 evaluates `fixed` itself.
pub fn export_grid(
    ctx: &AcquisitionContext,
    problem: &Problem,
    dims: (usize, usize),
    fixed: &[f64],
    resolution: usize,
) -> Result<Vec<GridRow>> {
    let d = problem.dim();
    if dims.0 >= d || dims.1 >= d || dims.0 == dims.1 {
        return Err(Error::Dimension(format!("grid dimensions {dims:?} invalid for a {d}-D problem")));
    }
    if fixed.len() != d {
        return Err(Error::Dimension(format!("fixed point has {} entries, expected {d}", fixed.len())));
    }
    if resolution < 1 {
        return Err(Error::config("resolution", "must be at least 1"));
    }
    let axis = |k: usize| -> Vec<f64> {
        if resolution == 1 {
            return vec![fixed[k]];
        }
        let (lo, hi) = problem.bounds[k];
        (0..resolution)
            .map(|i| {
                let v = lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
                if problem.integer_mask[k] {
                    v.round()
                } else {
                    v
                }
            })
            .collect()
    };
    let (a, b) = (axis(dims.0), axis(dims.1));
    let mut rows = Vec::with_capacity(a.len() * b.len());
    for &va in &a {
        for &vb in &b {
            let mut x = fixed.to_vec();
            x[dims.0] = va;
            x[dims.1] = vb;
            let u = ctx.normalizer.normalize(&x);
            let obj = ctx.objective.predict(&u);
            let acq = ctx.evaluate_normalized(&u);
            let mean_of = |name: &str| {
                ctx.constraints
                    .iter()
                    .find(|(_, c)| c.name == name)
                    .map_or(f64::NAN, |(m, _)| m.predict(&u).mean)
            };
            rows.push(GridRow {
                objective_mean: obj.mean,
                objective_std: obj.latent_std(),
                p_feas: acq.p_feas,
                p_out: acq.p_out,
                p_fail: acq.p_fail,
                step_time_mean: mean_of("step_time"),
                overshoot_mean: mean_of("worst_overshoot"),
                x,
            });
        }
    }
    Ok(rows)
}

pub fn grid_csv(names: &[&str], rows: &[GridRow]) -> String {
    let mut s = names.join(",");
    s.push_str(",objective_mean,objective_std,p_feas,p_out,p_fail,step_time_mean,overshoot_mean\n");
    for r in rows {
        for v in &r.x {
            s.push_str(&format!("{v},"));
        }
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.objective_mean, r.objective_std, r.p_feas, r.p_out, r.p_fail, r.step_time_mean, r.overshoot_mean
        ));
    }
    s
}
