//! Feedback and timing laws extracted from a funnel function.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, InertialState, InputBox, Vec3, Vec4};
use crate::error::{Error, Result};
use crate::funnel::FunnelFunction;
use crate::problem::{Mode, SegmentProblem};
use crate::reference::body_from_ref;

pub const DEFAULT_DT_CTRL: f64 = 0.01;
/// Gain of the relaxed decrease requirement below the level band.
pub const DECAY_GAIN: f64 = 1.0;
/// Extra decrease, in multiples of `lambda`, requested first so that the
/// sample-and-hold loop keeps the certified rate between updates.
pub const HOLD_MARGIN: f64 = 3.0;
const G_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SontagClamp,
    #[default]
    MinNormQp,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sontag-clamp" => Ok(Self::SontagClamp),
            "min-norm-qp" => Ok(Self::MinNormQp),
            _ => Err(Error::Config(format!(
                "unknown strategy '{s}' (expected sontag-clamp or min-norm-qp)"
            ))),
        }
    }
}

/// Zero the components of `g` along pinned box coordinates.
fn free_part(g: &Vec3, inputs: &InputBox) -> Vec3 {
    Vec3::from_fn(|i, _| {
        if inputs.upper[i] > inputs.lower[i] {
            g[i]
        } else {
            0.0
        }
    })
}

/// Sontag's expression about the box center, then clamped to the box.
pub fn sontag_clamp(a: f64, g: &Vec3, inputs: &InputBox) -> Vec3 {
    sontag_raw(a, g, inputs).map_or(inputs.center(), |v| inputs.clamp(&v))
}

/// The unclamped Sontag input, or `None` when `g` vanishes on the free
/// coordinates.
pub fn sontag_raw(a: f64, g: &Vec3, inputs: &InputBox) -> Option<Vec3> {
    let vc = inputs.center();
    let gf = free_part(g, inputs);
    let n2 = gf.norm_squared();
    if n2.sqrt() <= G_EPS {
        return None;
    }
    let a_shift = a + g.dot(&vc);
    let k = (a_shift + (a_shift * a_shift + n2 * n2).sqrt()) / n2;
    Some(vc - gf * k)
}

/// `argmin |v - nominal|^2` over the box subject to `a + g . v <= bound`.
///
/// The minimizer is `clamp(nominal - mu g)` for the smallest feasible
/// `mu >= 0`; the constraint value is piecewise linear in `mu`, so the
/// breakpoints where coordinates saturate bracket it exactly. Returns
/// `None` when no box point meets the bound.
pub fn min_norm_qp(
    a: f64,
    g: &Vec3,
    bound: f64,
    nominal: &Vec3,
    inputs: &InputBox,
) -> Option<Vec3> {
    let n = inputs.clamp(nominal);
    let at = |mu: f64| inputs.clamp(&(n - g * mu));
    let h = |mu: f64| a + g.dot(&at(mu));
    if h(0.0) <= bound {
        return Some(n);
    }
    let mut breaks: Vec<f64> = (0..3)
        .filter_map(|i| match g[i] {
            gi if gi > 0.0 => Some((n[i] - inputs.lower[i]) / gi),
            gi if gi < 0.0 => Some((n[i] - inputs.upper[i]) / gi),
            _ => None,
        })
        .filter(|mu| *mu > 0.0)
        .collect();
    breaks.sort_by(f64::total_cmp);
    let (mut mu0, mut h0) = (0.0, h(0.0));
    for mu1 in breaks {
        let h1 = h(mu1);
        if h1 <= bound {
            let mu = if h0 > h1 {
                mu0 + (mu1 - mu0) * (h0 - bound) / (h0 - h1)
            } else {
                mu1
            };
            return Some(at(mu));
        }
        (mu0, h0) = (mu1, h1);
    }
    None
}

/// Decrease bound on `V'` used by the QP: `-lambda` inside the band, relaxed
/// linearly below it.
pub fn decrease_bound(v: &FunnelFunction, value: f64) -> f64 {
    -v.lambda + DECAY_GAIN * (v.beta_lower - value).max(0.0)
}

/// Affine input `(u0, w, thrust)` at body deviation `b` and parameter `th`.
pub fn extract_control(
    v: &FunnelFunction,
    th: f64,
    b: &Vec4,
    problem: &SegmentProblem,
    strategy: Strategy,
) -> Vec3 {
    let th = th.clamp(0.0, problem.t_end());
    let r = problem.reference.point(th);
    let (a, g) = v.lie_affine_at(b, &r);
    match strategy {
        Strategy::SontagClamp => sontag_clamp(a, &g, &problem.inputs),
        Strategy::MinNormQp => {
            let value = v.eval(th, b);
            let bound = decrease_bound(v, value);
            let nominal = r.nominal_input();
            let inputs = &problem.inputs;
            min_norm_qp(a, &g, bound - HOLD_MARGIN * v.lambda, &nominal, inputs)
                .or_else(|| min_norm_qp(a, &g, bound, &nominal, inputs))
                .unwrap_or_else(|| inputs.minimize_affine(a, &g).1)
        }
    }
}

/// Single-segment controller holding the path parameter.
#[derive(Clone, Debug)]
pub struct Controller {
    pub funnel: FunnelFunction,
    pub problem: SegmentProblem,
    pub strategy: Strategy,
    pub dt_ctrl: f64,
    theta: f64,
}

/// One controller update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlStep {
    /// Path parameter used for this update.
    pub theta: f64,
    pub body: Vec4,
    pub value: f64,
    pub input: ControlInput,
}

impl Controller {
    pub fn new(
        funnel: FunnelFunction,
        problem: SegmentProblem,
        strategy: Strategy,
        dt_ctrl: f64,
    ) -> Result<Self> {
        if !(dt_ctrl > 0.0 && dt_ctrl.is_finite()) {
            return Err(Error::Config(format!(
                "controller period must be positive, got {dt_ctrl}"
            )));
        }
        Ok(Self {
            funnel,
            problem,
            strategy,
            dt_ctrl,
            theta: 0.0,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn reset(&mut self) {
        self.theta = 0.0;
    }

    pub fn at_end(&self) -> bool {
        self.theta >= self.problem.t_end()
    }

    pub fn body(&self, s: &InertialState) -> Vec4 {
        body_from_ref(s, &self.problem.reference.point(self.theta))
    }

    /// Compute the input at `s`, then advance the parameter by `dt`:
    /// `u0 dt` in PF mode, `dt` in TT mode, clamped to `T`.
    pub fn step(&mut self, s: &InertialState, dt: f64) -> ControlStep {
        let th = self.theta;
        let b = self.body(s);
        let v = extract_control(&self.funnel, th, &b, &self.problem, self.strategy);
        let rate = match self.problem.mode {
            Mode::Pf => v[0],
            Mode::Tt => 1.0,
        };
        let t_end = self.problem.t_end();
        let next = th + rate * dt;
        // Snap accumulated rounding so the end of the segment is reached exactly.
        self.theta = if next >= t_end - 1e-9 { t_end } else { next };
        ControlStep {
            theta: th,
            body: b,
            value: self.funnel.eval(th, &b),
            input: ControlInput::from_affine(&v, self.problem.wheelbase),
        }
    }
}
