//! Reference segments indexed by the path parameter `theta`, and the
//! body-fixed deviation frame that moves along them.
//!
//! The deviation frame is centred at the reference position and rotated by
//! the reference heading, so `y_R` points along the reference direction of
//! travel and `x_R` is the lateral offset.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix4, Matrix4x3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{field_affine, InertialState, Vec3, Vec4};
use crate::error::{Error, Result};

/// Planar curve families. Headings are derived from the curve tangent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PathShape {
    /// Constant speed along a fixed heading.
    Line {
        start: [f64; 2],
        heading: f64,
        speed: f64,
    },
    /// Counter-clockwise circle; `rate` is the angular rate per unit theta.
    Circle {
        center: [f64; 2],
        radius: f64,
        rate: f64,
        phase: f64,
    },
    /// Counter-clockwise ellipse arc `(a cos phi, b sin phi)`, `phi = phase + rate * theta`.
    EllipseArc {
        center: [f64; 2],
        semi_x: f64,
        semi_y: f64,
        rate: f64,
        phase: f64,
    },
    /// Travel along `+x` at `x_rate` with a raised-cosine lateral excursion
    /// of height `amplitude` spanning `theta in [0, span]`.
    Bump {
        start: [f64; 2],
        x_rate: f64,
        amplitude: f64,
        span: f64,
    },
}

impl PathShape {
    /// Position and its first two theta-derivatives, plus a heading hint
    /// within pi/2 of the true heading (used for unwrapping).
    fn curve(&self, th: f64) -> ([f64; 2], [f64; 2], [f64; 2], f64) {
        match *self {
            PathShape::Line {
                start,
                heading,
                speed,
            } => {
                let d = [-speed * heading.sin(), speed * heading.cos()];
                (
                    [start[0] + d[0] * th, start[1] + d[1] * th],
                    d,
                    [0.0, 0.0],
                    heading,
                )
            }
            PathShape::Circle {
                center,
                radius,
                rate,
                phase,
            } => {
                let phi = phase + rate * th;
                let (s, c) = phi.sin_cos();
                (
                    [center[0] + radius * c, center[1] + radius * s],
                    [-radius * rate * s, radius * rate * c],
                    [-radius * rate * rate * c, -radius * rate * rate * s],
                    phi,
                )
            }
            PathShape::EllipseArc {
                center,
                semi_x,
                semi_y,
                rate,
                phase,
            } => {
                let phi = phase + rate * th;
                let (s, c) = phi.sin_cos();
                (
                    [center[0] + semi_x * c, center[1] + semi_y * s],
                    [-semi_x * rate * s, semi_y * rate * c],
                    [-semi_x * rate * rate * c, -semi_y * rate * rate * s],
                    phi,
                )
            }
            PathShape::Bump {
                start,
                x_rate,
                amplitude,
                span,
            } => {
                if !(0.0..=span).contains(&th) {
                    // Flat continuation on either side of the excursion.
                    return (
                        [start[0] + x_rate * th, start[1]],
                        [x_rate, 0.0],
                        [0.0, 0.0],
                        -PI / 2.0,
                    );
                }
                let k = TAU / span;
                let (s, c) = (k * th).sin_cos();
                (
                    [
                        start[0] + x_rate * th,
                        start[1] + 0.5 * amplitude * (1.0 - c),
                    ],
                    [x_rate, 0.5 * amplitude * k * s],
                    [0.0, 0.5 * amplitude * k * k * c],
                    -PI / 2.0,
                )
            }
        }
    }
}

/// Planar rigid motion applied after evaluating the shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub rotation: f64,
    pub offset: [f64; 2],
}

impl Pose2 {
    fn apply_vec(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.apply_vec(p);
        [r[0] + self.offset[0], r[1] + self.offset[1]]
    }
}

/// Reference state and its theta-derivative at one parameter value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefPoint {
    pub state: InertialState,
    /// `d x_r / d theta` ordered like the state.
    pub deriv: Vec4,
}

impl RefPoint {
    /// Inputs that keep the car exactly on the reference when `theta' = 1`:
    /// `(1, alpha_r' / v_r, v_r')`.
    pub fn nominal_input(&self) -> Vec3 {
        let w = if self.state.v.abs() > 1e-12 {
            self.deriv[0] / self.state.v
        } else {
            0.0
        };
        Vec3::new(1.0, w, self.deriv[3])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSegment {
    pub shape: PathShape,
    /// Domain is `[0, t_end]`.
    pub t_end: f64,
    #[serde(default)]
    pub frame: Pose2,
}

impl ReferenceSegment {
    pub fn new(shape: PathShape, t_end: f64) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::Config(format!(
                "segment length must be positive, got {t_end}"
            )));
        }
        Ok(Self {
            shape,
            t_end,
            frame: Pose2::default(),
        })
    }

    pub fn with_frame(&self, frame: Pose2) -> Self {
        Self {
            frame,
            ..self.clone()
        }
    }

    pub fn check_theta(&self, th: f64) -> Result<()> {
        let slack = 1e-12 * self.t_end.max(1.0);
        if th.is_nan() || th < -slack || th > self.t_end + slack {
            return Err(Error::ThetaOutOfDomain {
                theta: th,
                t_end: self.t_end,
            });
        }
        Ok(())
    }

    /// Evaluate without a domain check; analytic shapes extend past `[0, T]`.
    pub fn point(&self, th: f64) -> RefPoint {
        let (p, dp, ddp, hint) = self.shape.curve(th);
        let speed2 = dp[0] * dp[0] + dp[1] * dp[1];
        let speed = speed2.sqrt();
        let raw = (-dp[0]).atan2(dp[1]);
        let alpha = raw + TAU * ((hint - raw) / TAU).round();
        let dalpha = if speed2 > 0.0 {
            (dp[0] * ddp[1] - dp[1] * ddp[0]) / speed2
        } else {
            0.0
        };
        let dspeed = if speed > 0.0 {
            (dp[0] * ddp[0] + dp[1] * ddp[1]) / speed
        } else {
            0.0
        };
        let pos = self.frame.apply_point(p);
        let dpos = self.frame.apply_vec(dp);
        RefPoint {
            state: InertialState::new(alpha + self.frame.rotation, pos[0], pos[1], speed),
            deriv: Vec4::new(dalpha, dpos[0], dpos[1], dspeed),
        }
    }

    pub fn at(&self, th: f64) -> Result<RefPoint> {
        self.check_theta(th)?;
        Ok(self.point(th))
    }

    pub fn start(&self) -> RefPoint {
        self.point(0.0)
    }

    pub fn end(&self) -> RefPoint {
        self.point(self.t_end)
    }

    /// Rigid motion carrying this segment's start pose onto the given pose.
    pub fn frame_starting_at(&self, pose: &InertialState) -> Pose2 {
        let base = Self {
            frame: Pose2::default(),
            ..self.clone()
        }
        .start()
        .state;
        let rotation = pose.alpha - base.alpha;
        let (s, c) = rotation.sin_cos();
        let rotated = [c * base.x - s * base.y, s * base.x + c * base.y];
        Pose2 {
            rotation,
            offset: [pose.x - rotated[0], pose.y - rotated[1]],
        }
    }

    /// Largest residual of `d x_r/d theta = f(x_r, nominal input)` over
    /// `n` evenly spaced points, with the derivative taken by differences of
    /// `x_r` itself (one-sided at the segment ends).
    pub fn feasibility_residual(&self, n: usize) -> f64 {
        let h = 1e-4 * self.t_end.max(1.0) / 8.0;
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let th = self.t_end * k as f64 / (n.max(2) - 1) as f64;
            let p = self.point(th);
            let x = |dt: f64| self.point(th + dt).state.to_vec();
            let fd = match k {
                0 => (-3.0 * x(0.0) + 4.0 * x(h) - x(2.0 * h)) / (2.0 * h),
                _ if k + 1 == n => (3.0 * x(0.0) - 4.0 * x(-h) + x(-2.0 * h)) / (2.0 * h),
                _ => (x(h) - x(-h)) / (2.0 * h),
            };
            let nominal = p.nominal_input();
            let f = field_affine(&p.state, nominal[1], nominal[2]);
            worst = worst
                .max((fd - f).abs().max())
                .max((fd - p.deriv).abs().max());
        }
        worst
    }

    /// Largest `|tan(gamma)|` the nominal inputs need, sampled at `n` points.
    pub fn max_nominal_steering(&self, n: usize, wheelbase: f64) -> f64 {
        (0..n)
            .map(|k| {
                self.point(self.t_end * k as f64 / (n.max(2) - 1) as f64)
                    .nominal_input()[1]
                    .abs()
                    * wheelbase
            })
            .fold(0.0, f64::max)
    }
}

/// Deviation from the reference, expressed in the body-fixed frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub alpha: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

impl BodyState {
    pub fn new(alpha: f64, x: f64, y: f64, v: f64) -> Self {
        Self { alpha, x, y, v }
    }

    pub fn to_vec(self) -> Vec4 {
        Vec4::new(self.alpha, self.x, self.y, self.v)
    }

    pub fn from_vec(v: &Vec4) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

#[inline]
pub(crate) fn body_from_ref(s: &InertialState, r: &RefPoint) -> Vec4 {
    let (sn, cs) = r.state.alpha.sin_cos();
    let dx = s.x - r.state.x;
    let dy = s.y - r.state.y;
    Vec4::new(
        s.alpha - r.state.alpha,
        cs * dx + sn * dy,
        -sn * dx + cs * dy,
        s.v - r.state.v,
    )
}

#[inline]
pub(crate) fn inertial_from_ref(b: &Vec4, r: &RefPoint) -> InertialState {
    let (sn, cs) = r.state.alpha.sin_cos();
    InertialState::new(
        b[0] + r.state.alpha,
        cs * b[1] - sn * b[2] + r.state.x,
        sn * b[1] + cs * b[2] + r.state.y,
        b[3] + r.state.v,
    )
}

pub fn to_body(s: &InertialState, th: f64, reference: &ReferenceSegment) -> Result<BodyState> {
    let r = reference.at(th)?;
    Ok(BodyState::from_vec(&body_from_ref(s, &r)))
}

pub fn to_inertial(b: &BodyState, th: f64, reference: &ReferenceSegment) -> Result<InertialState> {
    let r = reference.at(th)?;
    Ok(inertial_from_ref(&b.to_vec(), &r))
}

/// Deviation dynamics `b' = drift + B (u0, w, thrust)` at a reference point.
#[inline]
pub(crate) fn body_field_affine_at(b: &Vec4, r: &RefPoint) -> (Vec4, Matrix4x3<f64>) {
    let v = b[3] + r.state.v;
    let (sa, ca) = b[0].sin_cos();
    let drift = Vec4::new(0.0, -v * sa, v * ca, 0.0);
    let (sn, cs) = r.state.alpha.sin_cos();
    // Reference velocity expressed in the body frame.
    let qx = cs * r.deriv[1] + sn * r.deriv[2];
    let qy = -sn * r.deriv[1] + cs * r.deriv[2];
    let da = r.deriv[0];
    #[rustfmt::skip]
    let input = Matrix4x3::new(
        -da,               v,   0.0,
        -qx + da * b[2],   0.0, 0.0,
        -qy - da * b[1],   0.0, 0.0,
        -r.deriv[3],       0.0, 1.0,
    );
    (drift, input)
}

/// Affine form of the deviation dynamics at `theta`.
pub fn body_field_affine(
    b: &BodyState,
    th: f64,
    reference: &ReferenceSegment,
) -> Result<(Vec4, Matrix4x3<f64>)> {
    let r = reference.at(th)?;
    Ok(body_field_affine_at(&b.to_vec(), &r))
}

/// Returns `(theta', b')` under the affine input `(u0, w, thrust)`.
pub fn body_deviation_field(
    b: &BodyState,
    th: f64,
    input: &Vec3,
    reference: &ReferenceSegment,
) -> Result<(f64, BodyState)> {
    let (drift, m) = body_field_affine(b, th, reference)?;
    Ok((input[0], BodyState::from_vec(&(drift + m * input))))
}

/// Closest reference parameter under the weighted norm `|s - x_r(theta)|_P`.
///
/// A uniform grid locates the basin, then golden-section search refines it
/// within one grid cell either side. Used only for reporting metrics.
pub fn project_to_path(
    s: &InertialState,
    reference: &ReferenceSegment,
    weight: &Matrix4<f64>,
) -> f64 {
    const GRID: usize = 2000;
    let cost = |th: f64| {
        let d = s.to_vec() - reference.point(th).state.to_vec();
        (d.transpose() * weight * d)[0]
    };
    let step = reference.t_end / GRID as f64;
    let (mut best, mut best_cost) = (0.0, f64::INFINITY);
    for k in 0..=GRID {
        let th = k as f64 * step;
        let c = cost(th);
        if c < best_cost {
            best = th;
            best_cost = c;
        }
    }
    let (mut lo, mut hi) = ((best - step).max(0.0), (best + step).min(reference.t_end));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if cost(m1) <= cost(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let th = 0.5 * (lo + hi);
    if cost(th) <= best_cost {
        th
    } else {
        best
    }
}
