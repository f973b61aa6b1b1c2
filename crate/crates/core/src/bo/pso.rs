use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoSettings {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
}

impl Default for PsoSettings {
    fn default() -> Self {
        PsoSettings {
            particles: 60,
            iterations: 80,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
        }
    }
}

fn snap(x: &[f64], integer: &[bool]) -> Vec<f64> {
    x.iter()
        .zip(integer)
        .map(|(&v, &int)| if int { v.round() } else { v })
        .collect()
}

/// Maximise `f` over a box by particle swarm. Integer coordinates are
/// rounded before every evaluation; the returned point is rounded too.
/// Ties keep the earliest particle.
pub fn pso_maximize<F>(
    mut f: F,
    bounds: &[(f64, f64)],
    integer: &[bool],
    settings: &PsoSettings,
    seed: SeedStream,
) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = bounds.len();
    let n = settings.particles.max(1);
    let mut rng = seed.rng();
    let eval = |f: &mut F, x: &[f64]| {
        let v = f(&snap(x, integer));
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };

    let mut pos: Vec<Vec<f64>> = (0..n)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
        .collect();
    let mut vel: Vec<Vec<f64>> = (0..n)
        .map(|_| bounds.iter().map(|&(lo, hi)| 0.1 * (hi - lo) * rng.gen_range(-1.0..=1.0)).collect())
        .collect();
    let mut best_pos = pos.clone();
    let mut best_val: Vec<f64> = pos.iter().map(|p| eval(&mut f, p)).collect();
    let mut g = 0;
    for i in 1..n {
        if best_val[i] > best_val[g] {
            g = i;
        }
    }

    for _ in 0..settings.iterations {
        for i in 0..n {
            for d in 0..dim {
                let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
                vel[i][d] = settings.inertia * vel[i][d]
                    + settings.cognitive * r1 * (best_pos[i][d] - pos[i][d])
                    + settings.social * r2 * (best_pos[g][d] - pos[i][d]);
                let (lo, hi) = bounds[d];
                let x = pos[i][d] + vel[i][d];
                if x < lo || x > hi {
                    vel[i][d] = 0.0;
                }
                pos[i][d] = x.clamp(lo, hi);
            }
            let v = eval(&mut f, &pos[i]);
            if v > best_val[i] {
                best_val[i] = v;
                best_pos[i] = pos[i].clone();
            }
        }
        for i in 0..n {
            if best_val[i] > best_val[g] {
                g = i;
            }
        }
    }
    (snap(&best_pos[g], integer), best_val[g])
}
