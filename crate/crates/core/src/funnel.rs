//! Control funnel functions `V(theta, b) = b^T C b + c0 * theta` and the
//! sample-based evaluators for their defining conditions.
//!
//! Segment conditions, with `beta` the funnel level and `beta_lower` the
//! inner edge of the decrease band:
//!
//! * (a) `V(0, b) < beta` on the initial set,
//! * (b) `V(T, b) > beta` outside the interior of the goal set,
//! * (c) `V(theta, b) > beta` outside the interior of `S(theta)`,
//! * (d) on `S(theta)` with `beta_lower <= V <= beta`, some saturated input
//!   gives `V' < -lambda`.
//!
//! Each condition is scored by a margin that is positive exactly when the
//! sample violates it. The derivative is affine in `(u0, w, thrust)`, so the
//! existential in (d) is decided exactly by minimizing over the input box.

use nalgebra::{Matrix4, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Vec3, Vec4};
use crate::error::{Error, Result};
use crate::problem::SegmentProblem;
use crate::reference::{body_field_affine_at, BodyState, RefPoint};

/// Strictness applied to level comparisons in (a)-(c).
pub const LEVEL_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "FunnelRecord", try_from = "FunnelRecord")]
pub struct FunnelFunction {
    pub c: Matrix4<f64>,
    pub c0: f64,
    pub beta: f64,
    pub beta_lower: f64,
    pub lambda: f64,
}

/// Serialized form: `c` row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FunnelRecord {
    c: [[f64; 4]; 4],
    c0: f64,
    beta: f64,
    beta_lower: f64,
    lambda: f64,
}

impl From<FunnelFunction> for FunnelRecord {
    fn from(v: FunnelFunction) -> Self {
        Self {
            c: std::array::from_fn(|i| std::array::from_fn(|j| v.c[(i, j)])),
            c0: v.c0,
            beta: v.beta,
            beta_lower: v.beta_lower,
            lambda: v.lambda,
        }
    }
}

impl TryFrom<FunnelRecord> for FunnelFunction {
    type Error = Error;

    fn try_from(r: FunnelRecord) -> Result<Self> {
        FunnelFunction::new(
            Matrix4::from_fn(|i, j| r.c[i][j]),
            r.c0,
            r.beta,
            r.beta_lower,
            r.lambda,
        )
    }
}

impl FunnelFunction {
    pub fn new(c: Matrix4<f64>, c0: f64, beta: f64, beta_lower: f64, lambda: f64) -> Result<Self> {
        if (c - c.transpose()).abs().max() > 1e-12 * c.abs().max().max(1.0) {
            return Err(Error::Config("funnel matrix must be symmetric".into()));
        }
        if !(beta_lower <= beta) || !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "need beta_lower <= beta and lambda >= 0, got beta_lower={beta_lower}, beta={beta}, lambda={lambda}"
            )));
        }
        Ok(Self {
            c,
            c0,
            beta,
            beta_lower,
            lambda,
        })
    }

    #[inline]
    pub fn quadratic(&self, b: &Vec4) -> f64 {
        b.dot(&(self.c * b))
    }

    #[inline]
    pub fn eval(&self, th: f64, b: &Vec4) -> f64 {
        self.quadratic(b) + self.c0 * th
    }

    /// `(a, g)` with `V' = a + g . (u0, w, thrust)` at a reference point.
    #[inline]
    pub fn lie_affine_at(&self, b: &Vec4, r: &RefPoint) -> (f64, Vec3) {
        let (drift, m) = body_field_affine_at(b, r);
        let grad = self.c * b * 2.0;
        let mut g = m.transpose() * grad;
        g[0] += self.c0;
        (grad.dot(&drift), g)
    }

    pub fn lie_derivative_affine(
        &self,
        th: f64,
        b: &BodyState,
        problem: &SegmentProblem,
    ) -> Result<(f64, Vec3)> {
        let r = problem.reference.at(th)?;
        Ok(self.lie_affine_at(&b.to_vec(), &r))
    }

    pub fn lie_derivative(
        &self,
        th: f64,
        b: &BodyState,
        input: &Vec3,
        problem: &SegmentProblem,
    ) -> Result<f64> {
        let (a, g) = self.lie_derivative_affine(th, b, problem)?;
        Ok(a + g.dot(input))
    }

    /// Exact minimum of `V'` over the saturation box, and a minimizer.
    pub fn min_lie_derivative(&self, th: f64, b: &Vec4, problem: &SegmentProblem) -> (f64, Vec3) {
        let (a, g) = self.lie_affine_at(b, &problem.reference.point(th));
        problem.inputs.minimize_affine(a, &g)
    }

    pub fn in_band(&self, th: f64, b: &Vec4) -> bool {
        let v = self.eval(th, b);
        v >= self.beta_lower && v <= self.beta
    }

    pub fn eigenvalues(&self) -> Vec4 {
        SymmetricEigen::new(self.c).eigenvalues
    }

    pub fn min_eigen(&self) -> (f64, Vec4) {
        let e = SymmetricEigen::new(self.c);
        let k = e.eigenvalues.imin();
        (e.eigenvalues[k], e.eigenvectors.column(k).into_owned())
    }

    pub fn is_positive_definite(&self, eps: f64) -> bool {
        self.min_eigen().0 >= eps
    }

    /// Multiply every parameter (and the levels and margin) by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            c: self.c * s,
            c0: self.c0 * s,
            beta: self.beta * s,
            beta_lower: self.beta_lower * s,
            lambda: self.lambda * s,
        }
    }

    pub fn margin(&self, cond: Condition, th: f64, b: &Vec4, problem: &SegmentProblem) -> f64 {
        match cond {
            Condition::A => self.eval(0.0, b) - (self.beta - LEVEL_MARGIN),
            Condition::B => (self.beta + LEVEL_MARGIN) - self.eval(problem.t_end(), b),
            Condition::C => (self.beta + LEVEL_MARGIN) - self.eval(th, b),
            Condition::D => self.min_lie_derivative(th, b, problem).0 + self.lambda,
        }
    }

    /// Whether `(theta, b)` lies in the domain a condition quantifies over.
    pub fn in_domain(&self, cond: Condition, th: f64, b: &Vec4, problem: &SegmentProblem) -> bool {
        let regions = &problem.regions;
        match cond {
            Condition::A => regions.initial.contains(b),
            Condition::B => !regions.goal.contains_interior(b),
            Condition::C => {
                let level = regions.safe_level(th, b, &problem.reference);
                if regions.safe.is_obstacle() {
                    level >= 1.0
                } else {
                    level >= 1.0 - 1e-12
                }
            }
            Condition::D => self.in_band(th, b) && regions.safe_contains(th, b, &problem.reference),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    A,
    B,
    C,
    D,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::A, Condition::B, Condition::C, Condition::D];

    pub fn label(self) -> &'static str {
        match self {
            Condition::A => "a",
            Condition::B => "b",
            Condition::C => "c",
            Condition::D => "d",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub theta: f64,
    pub body: BodyState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionStatus {
    pub name: String,
    pub samples: usize,
    pub violated: bool,
    /// Largest margin seen; positive means violated.
    pub worst_margin: f64,
    pub witness: Option<Witness>,
}

impl ConditionStatus {
    fn from_margins(name: &str, it: impl Iterator<Item = (f64, Vec4, f64)>) -> Self {
        let mut status = ConditionStatus {
            name: name.into(),
            samples: 0,
            violated: false,
            worst_margin: f64::NEG_INFINITY,
            witness: None,
        };
        for (th, b, m) in it {
            status.samples += 1;
            if m > status.worst_margin || status.witness.is_none() {
                status.worst_margin = m;
                status.witness = Some(Witness {
                    theta: th,
                    body: BodyState::from_vec(&b),
                });
            }
        }
        status.violated = status.worst_margin > 0.0;
        status
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub conditions: Vec<ConditionStatus>,
}

impl ConditionReport {
    pub fn is_clean(&self) -> bool {
        self.conditions.iter().all(|c| !c.violated)
    }

    pub fn first_violation(&self) -> Option<&ConditionStatus> {
        self.conditions.iter().find(|c| c.violated)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionStatus> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Samples per condition; each entry is `(theta, b)`.
#[derive(Clone, Debug, Default)]
pub struct ConditionSamples {
    pub a: Vec<(f64, Vec4)>,
    pub b: Vec<(f64, Vec4)>,
    pub c: Vec<(f64, Vec4)>,
    pub d: Vec<(f64, Vec4)>,
}

impl ConditionSamples {
    pub fn get(&self, cond: Condition) -> &[(f64, Vec4)] {
        match cond {
            Condition::A => &self.a,
            Condition::B => &self.b,
            Condition::C => &self.c,
            Condition::D => &self.d,
        }
    }
}

/// Global path-following CLF check: `C` positive at every nonzero sample,
/// and some saturated input makes `V' < 0` there. `c0` must be zero.
pub fn check_global_clf(
    v: &FunnelFunction,
    problem: &SegmentProblem,
    samples: &[(f64, Vec4)],
) -> Result<ConditionReport> {
    if v.c0 != 0.0 {
        return Err(Error::Config(
            "global CLF check needs a theta-independent function (c0 = 0)".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Config(
            "global CLF check needs at least one sample".into(),
        ));
    }
    let nonzero = || samples.iter().filter(|(_, b)| b.norm() > 0.0);
    let positive = ConditionStatus::from_margins(
        "positive",
        nonzero().map(|(th, b)| (*th, *b, -v.quadratic(b))),
    );
    let decrease = ConditionStatus::from_margins(
        "decrease",
        nonzero().map(|(th, b)| (*th, *b, v.min_lie_derivative(*th, b, problem).0)),
    );
    Ok(ConditionReport {
        conditions: vec![positive, decrease],
    })
}

/// Evaluate conditions (a)-(d) on the given samples. Samples outside a
/// condition's domain are skipped; an empty sample list is a configuration
/// error.
pub fn check_funnel_conditions(
    v: &FunnelFunction,
    problem: &SegmentProblem,
    samples: &ConditionSamples,
) -> Result<ConditionReport> {
    let mut conditions = Vec::with_capacity(4);
    for cond in Condition::ALL {
        let set = samples.get(cond);
        if set.is_empty() {
            return Err(Error::Config(format!(
                "no samples supplied for condition ({})",
                cond.label()
            )));
        }
        let status = ConditionStatus::from_margins(
            cond.label(),
            set.iter()
                .filter(|(th, b)| v.in_domain(cond, *th, b, problem))
                .map(|(th, b)| (*th, *b, v.margin(cond, *th, b, problem))),
        );
        conditions.push(status);
    }
    Ok(ConditionReport { conditions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Mode;
    use crate::reference::{PathShape, ReferenceSegment};
    use crate::region::{Region, RegionSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn straight(mode: Mode) -> SegmentProblem {
        let reference = ReferenceSegment::new(
            PathShape::Line {
                start: [-2.0, 0.0],
                heading: -FRAC_PI_2,
                speed: 2.0,
            },
            2.0,
        )
        .unwrap();
        let regions = RegionSpec {
            initial: Region::ball(0.5),
            goal: Region::ball(0.5),
            safe: Region::Box {
                lower: [-1.0, -1.0, -1.0, -3.0],
                upper: [1.0, 1.0, 1.0, 3.0],
            },
        };
        SegmentProblem::new(reference, regions, (0.2, 2.0), 0.34, mode).unwrap()
    }

    fn random_funnel(rng: &mut ChaCha8Rng) -> FunnelFunction {
        let m = Matrix4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        FunnelFunction::new(
            m * m.transpose() + Matrix4::identity(),
            rng.gen_range(0.0..0.3),
            1.0,
            0.3,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn eval_examples() {
        let v = FunnelFunction::new(Matrix4::identity(), 0.0, 1.0, 0.1, 0.05).unwrap();
        assert_eq!(v.eval(0.7, &Vec4::new(0.5, 0.0, 0.0, 0.0)), 0.25);
        let v = FunnelFunction::new(Matrix4::identity(), 0.4, 1.0, 0.1, 0.05).unwrap();
        assert_eq!(v.eval(1.5, &Vec4::zeros()), 0.4 * 1.5);
    }

    #[test]
    fn eval_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = random_funnel(&mut rng);
            let b = Vec4::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let th = rng.gen_range(0.0..2.0);
            let mut naive = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    naive += b[i] * v.c[(i, j)] * b[j];
                }
            }
            naive += v.c0 * th;
            assert!((v.eval(th, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn lie_derivative_on_reference_is_c0() {
        let p = straight(Mode::Pf);
        let v = FunnelFunction::new(Matrix4::identity() * 3.0, 0.3, 1.0, 0.1, 0.05).unwrap();
        let nominal = p.reference.at(1.0).unwrap().nominal_input();
        let d = v
            .lie_derivative(1.0, &BodyState::default(), &nominal, &p)
            .unwrap();
        assert!((d - 0.3).abs() < 1e-12);
        let v0 = FunnelFunction { c0: 0.0, ..v };
        assert_eq!(
            v0.lie_derivative(1.0, &BodyState::default(), &nominal, &p)
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn affine_form_is_consistent() {
        let p = straight(Mode::Pf);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let v = random_funnel(&mut rng);
            let b = BodyState::from_vec(&Vec4::from_fn(|_, _| rng.gen_range(-0.5..0.5)));
            let th = rng.gen_range(0.0..2.0);
            let (a, g) = v.lie_derivative_affine(th, &b, &p).unwrap();
            for _ in 0..20 {
                let u = Vec3::from_fn(|i, _| rng.gen_range(p.inputs.lower[i]..=p.inputs.upper[i]));
                let direct = v.lie_derivative(th, &b, &u, &p).unwrap();
                assert!((direct - (a + g.dot(&u))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lie_derivative_matches_time_difference() {
        use crate::dynamics::{field_affine, rk4_step, InertialState};
        use crate::reference::{to_body, to_inertial};
        let p = straight(Mode::Pf);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = random_funnel(&mut rng);
            let th = rng.gen_range(0.2..1.8);
            let b = BodyState::from_vec(&Vec4::from_fn(|_, _| rng.gen_range(-0.5..0.5)));
            let u = Vec3::from_fn(|i, _| rng.gen_range(p.inputs.lower[i]..=p.inputs.upper[i]));
            let s0 = to_inertial(&b, th, &p.reference).unwrap();
            let value_at = |h: f64| {
                let x = rk4_step(&s0.to_vec(), h, |z| {
                    field_affine(&InertialState::from_vec(z), u[1], u[2])
                });
                let t = th + u[0] * h;
                v.eval(
                    t,
                    &to_body(&InertialState::from_vec(&x), t, &p.reference)
                        .unwrap()
                        .to_vec(),
                )
            };
            let h = 1e-4;
            let fd = (value_at(h) - value_at(-h)) / (2.0 * h);
            let exact = v.lie_derivative(th, &b, &u, &p).unwrap();
            assert!((fd - exact).abs() < 1e-5, "{fd} vs {exact}");
        }
    }

    #[test]
    fn box_minimum_equals_vertex_enumeration() {
        let p = straight(Mode::Pf);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_funnel(&mut rng);
        for _ in 0..2000 {
            let th = rng.gen_range(0.0..2.0);
            let b = Vec4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let (m, _) = v.min_lie_derivative(th, &b, &p);
            let (a, g) = v.lie_affine_at(&b, &p.reference.point(th));
            let brute = p
                .inputs
                .vertices()
                .iter()
                .map(|u| a + g.dot(u))
                .fold(f64::INFINITY, f64::min);
            assert!((m - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_form_is_positive_on_straight_path() {
        let p = straight(Mode::Pf);
        let v = FunnelFunction::new(Matrix4::identity(), 0.0, 1.0, 0.1, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = (0..500)
            .map(|_| {
                (
                    rng.gen_range(0.0..2.0),
                    Vec4::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let report = check_global_clf(&v, &p, &samples).unwrap();
        assert!(!report.get("positive").unwrap().violated);
    }

    #[test]
    fn positive_minimum_derivative_is_a_violation() {
        // Pure lateral offset on the straight path: steering has no effect on
        // an identity form, so the best derivative is c-independent drift.
        let p = straight(Mode::Tt);
        let v = FunnelFunction::new(Matrix4::identity(), 0.0, 1.0, 0.1, 0.0).unwrap();
        let b = Vec4::new(0.3, 0.0, 0.0, 0.0);
        let report = check_global_clf(&v, &p, &[(1.0, b)]).unwrap();
        let dec = report.get("decrease").unwrap();
        let expected = v.min_lie_derivative(1.0, &b, &p).0;
        assert_eq!(dec.worst_margin, expected);
        assert_eq!(dec.violated, expected > 0.0);

        // A hand-made instance where the minimum is exactly +0.3.
        let inputs = p.inputs;
        let (m, _) = inputs.minimize_affine(0.3, &Vec3::zeros());
        assert_eq!(m, 0.3);
    }

    #[test]
    fn huge_funnel_violates_initial_condition() {
        let p = straight(Mode::Pf);
        let v = FunnelFunction::new(Matrix4::identity() * 1e6, 0.0, 1.0, 0.1, 0.05).unwrap();
        let samples = ConditionSamples {
            a: vec![(0.0, Vec4::new(0.5, 0.0, 0.0, 0.0))],
            b: vec![(2.0, Vec4::new(0.5, 0.0, 0.0, 0.0))],
            c: vec![(1.0, Vec4::new(1.0, 0.0, 0.0, 0.0))],
            d: vec![(1.0, Vec4::new(1e-3, 0.0, 0.0, 0.0))],
        };
        let report = check_funnel_conditions(&v, &p, &samples).unwrap();
        let a = report.get("a").unwrap();
        assert!(a.violated);
        assert!((a.worst_margin - (2.5e5 - 1.0 + LEVEL_MARGIN)).abs() < 1e-6);
        assert!(a.witness.is_some());
    }

    #[test]
    fn input_independent_decrease_has_margin_lambda() {
        // With C = 0 the derivative is c0 * u0 only; in TT mode u0 = 1.
        let p = straight(Mode::Tt);
        let lambda = 0.05;
        let v = FunnelFunction::new(Matrix4::zeros(), -2.0 * lambda, 1.0, -10.0, lambda).unwrap();
        let m = v.margin(Condition::D, 1.0, &Vec4::new(0.2, 0.1, 0.0, 0.0), &p);
        assert!((m + lambda).abs() < 1e-15);
    }

    #[test]
    fn empty_sample_set_is_a_configuration_error() {
        let p = straight(Mode::Pf);
        let v = FunnelFunction::new(Matrix4::identity(), 0.0, 1.0, 0.1, 0.05).unwrap();
        assert!(matches!(
            check_funnel_conditions(&v, &p, &ConditionSamples::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scaling_preserves_condition_status() {
        let p = straight(Mode::Pf);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = ConditionSamples {
            a: (0..200)
                .map(|_| {
                    (
                        0.0,
                        Region::ball(0.5).interior_point(&[
                            rng.gen(),
                            rng.gen(),
                            rng.gen(),
                            rng.gen(),
                        ]),
                    )
                })
                .collect(),
            b: (0..200)
                .map(|_| (2.0, Vec4::from_fn(|_, _| rng.gen_range(-1.0..1.0))))
                .collect(),
            c: (0..200)
                .map(|_| {
                    (
                        rng.gen_range(0.0..2.0),
                        Vec4::from_fn(|i, _| {
                            if i == 0 {
                                1.0
                            } else {
                                rng.gen_range(-1.0..1.0)
                            }
                        }),
                    )
                })
                .collect(),
            d: (0..400)
                .map(|_| {
                    (
                        rng.gen_range(0.0..2.0),
                        Vec4::from_fn(|_, _| rng.gen_range(-0.6..0.6)),
                    )
                })
                .collect(),
        };
        for _ in 0..5 {
            let v = random_funnel(&mut rng);
            let base = check_funnel_conditions(&v, &p, &samples).unwrap();
            for s in [0.1, 3.0, 250.0] {
                let scaled = check_funnel_conditions(&v.scaled(s), &p, &samples).unwrap();
                for (x, y) in base.conditions.iter().zip(&scaled.conditions) {
                    assert_eq!(x.violated, y.violated, "condition {} at scale {s}", x.name);
                    assert_eq!(x.samples, y.samples);
                }
            }
        }
    }

    #[test]
    fn lambda_monotonicity() {
        let p = straight(Mode::Pf);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random_funnel(&mut rng);
        for _ in 0..500 {
            let th = rng.gen_range(0.0..2.0);
            let b = Vec4::from_fn(|_, _| rng.gen_range(-0.6..0.6));
            let hi = FunnelFunction { lambda: 0.2, ..v };
            let lo = FunnelFunction { lambda: 0.05, ..v };
            if hi.margin(Condition::D, th, &b, &p) <= 0.0 {
                assert!(lo.margin(Condition::D, th, &b, &p) <= 0.0);
            }
        }
    }
}
