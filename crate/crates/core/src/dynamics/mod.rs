//! Feed-velocity plant: second-order lag with input delay, context
//! perturbation and exact zero-order-hold discretisation.
//!
//! The continuous model is
//!
//! ```text
//! v'' + 2 D w0 v' + w0^2 v = K w0^2 u(t - t_d)
//! ```
//!
//! with state `x = [v, v']`.

mod sampling;

pub use sampling::{latin_hypercube, sample_context, TruncatedNormalSpec};

use std::collections::VecDeque;

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous-time plant constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    /// Static gain `K`.
    pub gain: f64,
    /// Damping ratio `D`.
    pub damping: f64,
    /// Natural frequency `w0` in rad/s.
    pub natural_freq: f64,
    /// Input delay `t_d` in seconds.
    pub delay: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            gain: 1.0,
            damping: 0.28,
            natural_freq: 25.13,
            delay: 0.004,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPlant(m.to_string()));
        if !(self.natural_freq > 0.0 && self.natural_freq.is_finite()) {
            return bad("natural frequency must be positive");
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return bad("damping must be positive");
        }
        if self.gain == 0.0 || !self.gain.is_finite() {
            return bad("gain must be non-zero");
        }
        if !(self.delay >= 0.0 && self.delay.is_finite()) {
            return bad("delay must be non-negative");
        }
        Ok(())
    }

    /// Scale stiffness and damping by the context factors.
    pub fn perturb(&self, ctx: &Context) -> PlantParams {
        PlantParams {
            natural_freq: self.natural_freq * ctx.stiffness,
            damping: self.damping * ctx.damping,
            ..*self
        }
    }

    /// Continuous state matrix and input vector.
    pub fn continuous(&self) -> (Matrix2<f64>, Vector2<f64>) {
        let w = self.natural_freq;
        let a = Matrix2::new(0.0, 1.0, -w * w, -2.0 * self.damping * w);
        let b = Vector2::new(0.0, self.gain * w * w);
        (a, b)
    }
}

/// Environmental perturbation: multipliers on stiffness and damping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub stiffness: f64,
    pub damping: f64,
}

impl Context {
    pub const NOMINAL: Context = Context {
        stiffness: 1.0,
        damping: 1.0,
    };

    pub fn new(stiffness: f64, damping: f64) -> Self {
        Context { stiffness, damping }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.stiffness, self.damping]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Context::new(x[0], x[1])
    }

    pub fn inverse(&self) -> Context {
        Context::new(1.0 / self.stiffness, 1.0 / self.damping)
    }
}

/// Perturbed plant for a given context.
pub fn perturb(plant: &PlantParams, ctx: &Context) -> PlantParams {
    plant.perturb(ctx)
}

/// Sampled plant `x+ = A x + b u_{k-d}`, `y = c x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePlant {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: RowVector2<f64>,
    pub delay_steps: usize,
    pub sample_time: f64,
}

/// `cosh(sqrt(delta) t)` and `sinh(sqrt(delta) t)/sqrt(delta)`, continued
/// analytically to `delta <= 0`.
fn hyperbolic_pair(delta: f64, t: f64) -> (f64, f64) {
    let arg = delta * t * t;
    if arg.abs() < 1e-6 {
        // series in delta*t^2
        let c = 1.0 + arg / 2.0 + arg * arg / 24.0 + arg * arg * arg / 720.0;
        let s = t * (1.0 + arg / 6.0 + arg * arg / 120.0 + arg * arg * arg / 5040.0);
        (c, s)
    } else if delta > 0.0 {
        let r = delta.sqrt();
        ((r * t).cosh(), (r * t).sinh() / r)
    } else {
        let r = (-delta).sqrt();
        ((r * t).cos(), (r * t).sin() / r)
    }
}

/// Exact zero-order-hold discretisation.
///
/// The state transition uses the closed form of the 2x2 matrix exponential;
/// the input vector is `M^-1 (A - I) b_c`, valid because `det M = w0^2 > 0`.
pub fn discretize(plant: &PlantParams, sample_time: f64) -> Result<DiscretePlant> {
    plant.validate()?;
    if !(sample_time > 0.0 && sample_time.is_finite()) {
        return Err(Error::InvalidPlant("sample time must be positive".into()));
    }
    let ratio = plant.delay / sample_time;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::DelayNotMultiple {
            delay: plant.delay,
            sample_time,
        });
    }

    let (m, bc) = plant.continuous();
    let w = plant.natural_freq;
    let shift = -plant.damping * w; // trace / 2
    let delta = w * w * (plant.damping * plant.damping - 1.0);
    let (ch, sh) = hyperbolic_pair(delta, sample_time);
    let centered = m - Matrix2::identity() * shift;
    let a = (Matrix2::identity() * ch + centered * sh) * (shift * sample_time).exp();

    let det = w * w;
    let m_inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
    let b = m_inv * ((a - Matrix2::identity()) * bc);

    Ok(DiscretePlant {
        a,
        b,
        c: RowVector2::new(1.0, 0.0),
        delay_steps: steps as usize,
        sample_time,
    })
}

impl DiscretePlant {
    /// Steady-state output per unit input, `c (I - A)^-1 b`.
    pub fn dc_gain(&self) -> f64 {
        let m = Matrix2::identity() - self.a;
        match m.try_inverse() {
            Some(inv) => (self.c * inv * self.b)[0],
            None => f64::INFINITY,
        }
    }

    pub fn initial_state(&self) -> PlantState {
        PlantState {
            x: Vector2::zeros(),
            pipeline: VecDeque::from(vec![0.0; self.delay_steps]),
        }
    }

    /// Advance one sample: push `u` into the delay line and apply the input
    /// that leaves it.
    pub fn step(&self, state: &mut PlantState, u: f64) {
        let applied = if self.delay_steps == 0 {
            u
        } else {
            state.pipeline.push_back(u);
            state.pipeline.pop_front().unwrap_or(0.0)
        };
        state.x = self.a * state.x + self.b * applied;
    }

    pub fn output(&self, state: &PlantState) -> f64 {
        (self.c * state.x)[0]
    }
}

/// Plant state plus the inputs still travelling through the delay line
/// (oldest first).
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: Vector2<f64>,
    pub pipeline: VecDeque<f64>,
}

/// Functional form of [`DiscretePlant::step`].
pub fn plant_step(plant: &DiscretePlant, state: &PlantState, u: f64) -> PlantState {
    let mut next = state.clone();
    plant.step(&mut next, u);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plant(w: f64, d: f64) -> PlantParams {
        PlantParams {
            gain: 1.0,
            damping: d,
            natural_freq: w,
            delay: 0.0,
        }
    }

    #[test]
    fn perturb_identity_and_scaling() {
        let p = plant(10.0, 0.5);
        assert_eq!(p.perturb(&Context::NOMINAL), p);
        let q = p.perturb(&Context::new(1.2, 0.8));
        assert!((q.natural_freq - 12.0).abs() < 1e-12);
        assert!((q.damping - 0.4).abs() < 1e-12);
        assert_eq!(q.gain, p.gain);
        assert_eq!(q.delay, p.delay);
    }

    proptest! {
        #[test]
        fn perturb_is_invertible(a in 0.2f64..5.0, b in 0.2f64..5.0) {
            let p = PlantParams { delay: 0.004, ..PlantParams::default() };
            let c = Context::new(a, b);
            let back = p.perturb(&c).perturb(&c.inverse());
            prop_assert!((back.natural_freq - p.natural_freq).abs() < 1e-12 * p.natural_freq);
            prop_assert!((back.damping - p.damping).abs() < 1e-12);
        }

        #[test]
        fn perturb_composes(a in 0.2f64..5.0, b in 0.2f64..5.0, c in 0.2f64..5.0, d in 0.2f64..5.0) {
            let p = PlantParams::default();
            let two = p.perturb(&Context::new(a, b)).perturb(&Context::new(c, d));
            let one = p.perturb(&Context::new(a * c, b * d));
            prop_assert!((two.natural_freq - one.natural_freq).abs() < 1e-10);
            prop_assert!((two.damping - one.damping).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_sample_time_is_near_identity() {
        let d = discretize(&plant(5.0, 0.5), 1e-8).unwrap();
        assert!((d.a - Matrix2::identity()).norm() < 1e-6);
        assert!(d.b.norm() < 1e-6);
    }

    #[test]
    fn rejects_fractional_delay() {
        let p = PlantParams {
            delay: 0.003,
            ..PlantParams::default()
        };
        assert!(matches!(
            discretize(&p, 0.002),
            Err(Error::DelayNotMultiple { .. })
        ));
        let ok = PlantParams {
            delay: 0.004,
            ..PlantParams::default()
        };
        assert_eq!(discretize(&ok, 0.002).unwrap().delay_steps, 2);
    }

    #[test]
    fn dc_gain_matches_static_gain() {
        for &(w, d, k) in &[(10.0, 0.5, 1.0), (25.13, 0.28, 1.0), (3.0, 1.0, -2.5), (40.0, 3.0, 0.7)] {
            let p = PlantParams {
                gain: k,
                damping: d,
                natural_freq: w,
                delay: 0.0,
            };
            let dp = discretize(&p, 0.002).unwrap();
            assert!((dp.dc_gain() - k).abs() < 1e-9 * k.abs().max(1.0), "{w} {d} {k}");
        }
    }

    #[test]
    fn zero_input_stays_at_rest() {
        let dp = discretize(&PlantParams::default(), 0.002).unwrap();
        let mut s = dp.initial_state();
        for _ in 0..100 {
            dp.step(&mut s, 0.0);
        }
        assert_eq!(s.x, Vector2::zeros());
    }

    #[test]
    fn delay_holds_back_the_input() {
        let dp = discretize(&PlantParams::default(), 0.002).unwrap();
        assert_eq!(dp.delay_steps, 2);
        let mut s = dp.initial_state();
        dp.step(&mut s, 1.0);
        assert_eq!(dp.output(&s), 0.0);
        dp.step(&mut s, 1.0);
        assert_eq!(s.x, Vector2::zeros());
        dp.step(&mut s, 1.0);
        assert!(s.x.norm() > 0.0);
    }

    #[test]
    fn long_step_settles_at_gain() {
        let p = PlantParams {
            gain: 1.7,
            damping: 0.5,
            ..PlantParams::default()
        };
        let dp = discretize(&p, 0.002).unwrap();
        let mut s = dp.initial_state();
        for _ in 0..1000 {
            s = plant_step(&dp, &s, 1.0);
        }
        assert!((dp.output(&s) - 1.7).abs() < 1e-6);
    }
}
