//! Kinematic bicycle model.
//!
//! State ordering is `(alpha, x, y, v)` everywhere: heading, planar position
//! and forward speed. With heading `alpha` the car moves along
//! `(-sin alpha, cos alpha)`, so `alpha = 0` drives along `+y`.
//!
//! Steering enters through `tan(gamma)`. The rest of the crate works with
//! the affine input `w = tan(gamma) / l`, which makes the model
//! control-affine in `(u0, w, thrust)`; `gamma = atan(l * w)` recovers the
//! physical angle.

use std::f64::consts::FRAC_PI_4;

use nalgebra::{Matrix4x2, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec4 = Vector4<f64>;

/// Wheelbase of the reference 1/8 scale platform, in metres.
pub const DEFAULT_WHEELBASE: f64 = 0.34;
pub const MAX_STEERING: f64 = FRAC_PI_4;
pub const MAX_THRUST: f64 = 4.0;
/// Any state component beyond this magnitude aborts an integration.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InertialState {
    /// Heading (rad), unwrapped.
    pub alpha: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

impl InertialState {
    pub fn new(alpha: f64, x: f64, y: f64, v: f64) -> Self {
        Self { alpha, x, y, v }
    }

    pub fn to_vec(self) -> Vec4 {
        Vec4::new(self.alpha, self.x, self.y, self.v)
    }

    pub fn from_vec(v: &Vec4) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.x.is_finite() && self.y.is_finite() && self.v.is_finite()
    }
}

/// Physical control: timing-law rate, steering angle and thrust.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub u0: f64,
    pub gamma: f64,
    pub thrust: f64,
}

impl ControlInput {
    pub fn new(u0: f64, gamma: f64, thrust: f64) -> Self {
        Self { u0, gamma, thrust }
    }

    pub fn is_finite(&self) -> bool {
        self.u0.is_finite() && self.gamma.is_finite() && self.thrust.is_finite()
    }

    /// `(u0, w, thrust)` with `w = tan(gamma) / l`.
    pub fn to_affine(self, wheelbase: f64) -> Vec3 {
        Vec3::new(self.u0, self.gamma.tan() / wheelbase, self.thrust)
    }

    pub fn from_affine(v: &Vec3, wheelbase: f64) -> Self {
        Self::new(v[0], (wheelbase * v[1]).atan(), v[2])
    }
}

/// Box saturation over the affine inputs `(u0, w, thrust)`.
///
/// A zero-width `u0` interval is allowed; trajectory tracking pins `u0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl InputBox {
    /// Box for the physical limits `|gamma| <= pi/4`, `|thrust| <= 4` and
    /// `u0 in [u0_min, u0_max]`.
    pub fn new(u0_min: f64, u0_max: f64, wheelbase: f64) -> Result<Self> {
        if !(u0_min > 0.0 && u0_min <= 1.0 && 1.0 <= u0_max && u0_max.is_finite()) {
            return Err(Error::Config(format!(
                "timing-law bounds must satisfy 0 < u0_min <= 1 <= u0_max < inf, got [{u0_min}, {u0_max}]"
            )));
        }
        if !(wheelbase > 0.0 && wheelbase.is_finite()) {
            return Err(Error::Config(format!(
                "wheelbase must be positive, got {wheelbase}"
            )));
        }
        let w_max = MAX_STEERING.tan() / wheelbase;
        Ok(Self {
            lower: [u0_min, -w_max, -MAX_THRUST],
            upper: [u0_max, w_max, MAX_THRUST],
        })
    }

    /// The same box with `u0` pinned to 1.
    pub fn with_fixed_timing(mut self) -> Self {
        self.lower[0] = 1.0;
        self.upper[0] = 1.0;
        self
    }

    pub fn lower_vec(&self) -> Vec3 {
        Vec3::from(self.lower)
    }

    pub fn upper_vec(&self) -> Vec3 {
        Vec3::from(self.upper)
    }

    pub fn center(&self) -> Vec3 {
        (self.lower_vec() + self.upper_vec()) * 0.5
    }

    pub fn contains(&self, v: &Vec3) -> bool {
        (0..3).all(|i| v[i] >= self.lower[i] && v[i] <= self.upper[i])
    }

    pub fn clamp(&self, v: &Vec3) -> Vec3 {
        Vec3::from_fn(|i, _| v[i].clamp(self.lower[i], self.upper[i]))
    }

    /// Exact minimum of `a + g . v` over the box, with a minimizing vertex.
    ///
    /// Ties (`g_i == 0`) pick the box center in that coordinate.
    pub fn minimize_affine(&self, a: f64, g: &Vec3) -> (f64, Vec3) {
        let mut value = a;
        let mut arg = self.center();
        for i in 0..3 {
            if g[i] > 0.0 {
                arg[i] = self.lower[i];
            } else if g[i] < 0.0 {
                arg[i] = self.upper[i];
            }
            value += g[i] * arg[i];
        }
        (value, arg)
    }

    pub fn vertices(&self) -> [Vec3; 8] {
        std::array::from_fn(|k| {
            Vec3::from_fn(|i, _| {
                if k >> i & 1 == 1 {
                    self.upper[i]
                } else {
                    self.lower[i]
                }
            })
        })
    }
}

/// Time derivative `(alpha', x', y', v')` of the bicycle model.
pub fn bicycle_vector_field(s: &InertialState, u: &ControlInput, wheelbase: f64) -> Result<Vec4> {
    if !s.is_finite() {
        return Err(Error::NonFinite("vehicle state"));
    }
    if !u.is_finite() {
        return Err(Error::NonFinite("control input"));
    }
    if !(wheelbase > 0.0) {
        return Err(Error::Config(format!(
            "wheelbase must be positive, got {wheelbase}"
        )));
    }
    let w = u.gamma.tan() / wheelbase;
    Ok(field_affine(s, w, u.thrust))
}

#[inline]
pub(crate) fn field_affine(s: &InertialState, w: f64, thrust: f64) -> Vec4 {
    Vec4::new(s.v * w, s.v * (-s.alpha).sin(), s.v * s.alpha.cos(), thrust)
}

/// Drift and input matrix with `x' = f0 + G (w, thrust)`.
pub fn affine_input_form(s: &InertialState) -> (Vec4, Matrix4x2<f64>) {
    let f0 = Vec4::new(0.0, s.v * (-s.alpha).sin(), s.v * s.alpha.cos(), 0.0);
    #[rustfmt::skip]
    let g = Matrix4x2::new(
        s.v, 0.0,
        0.0, 0.0,
        0.0, 0.0,
        0.0, 1.0,
    );
    (f0, g)
}

/// One classical fourth-order Runge-Kutta step for an autonomous field.
#[inline]
pub fn rk4_step<const D: usize, F>(x: &SVector<f64, D>, dt: f64, f: F) -> SVector<f64, D>
where
    F: Fn(&SVector<f64, D>) -> SVector<f64, D>,
{
    let k1 = f(x);
    let k2 = f(&(x + k1 * (dt / 2.0)));
    let k3 = f(&(x + k2 * (dt / 2.0)));
    let k4 = f(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Inputs held constant over consecutive windows of length `period`.
/// The last input is held past the end of the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstant {
    pub period: f64,
    pub inputs: Vec<ControlInput>,
}

impl PiecewiseConstant {
    pub fn constant(u: ControlInput) -> Self {
        Self {
            period: f64::INFINITY,
            inputs: vec![u],
        }
    }

    pub fn at(&self, t: f64) -> ControlInput {
        if self.inputs.is_empty() {
            return ControlInput::default();
        }
        let k = if self.period.is_finite() {
            (t / self.period + 1e-9).floor() as usize
        } else {
            0
        };
        self.inputs[k.min(self.inputs.len() - 1)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<InertialState>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn last(&self) -> &InertialState {
        self.states
            .last()
            .expect("trajectory holds at least the initial state")
    }
}

/// Fixed-step RK4 integration of the open-loop plant.
///
/// The schedule is sampled at the start of each step. The trace stops early,
/// flagged `diverged`, once any state component exceeds `bound` in magnitude.
pub fn integrate(
    s0: &InertialState,
    schedule: &PiecewiseConstant,
    dt: f64,
    horizon: f64,
    wheelbase: f64,
    bound: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !(horizon >= dt) {
        return Err(Error::Config(format!(
            "need dt > 0 and horizon >= dt, got dt={dt}, horizon={horizon}"
        )));
    }
    if !s0.is_finite() {
        return Err(Error::NonFinite("initial state"));
    }
    let steps = (horizon / dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(*s0);
    let mut x = s0.to_vec();
    let mut diverged = false;
    for k in 0..steps {
        let t = k as f64 * dt;
        let u = schedule.at(t);
        if !u.is_finite() {
            return Err(Error::NonFinite("control input"));
        }
        let w = u.gamma.tan() / wheelbase;
        x = rk4_step(&x, dt, |z| {
            field_affine(&InertialState::from_vec(z), w, u.thrust)
        });
        if x.iter().any(|c| !c.is_finite() || c.abs() > bound) {
            diverged = true;
            break;
        }
        times.push((k + 1) as f64 * dt);
        states.push(InertialState::from_vec(&x));
    }
    Ok(Trajectory {
        times,
        states,
        diverged,
    })
}
