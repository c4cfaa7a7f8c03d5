//! Falsifier for the segment funnel conditions.
//!
//! Each condition gets its own low-discrepancy sample stream over its domain,
//! topped up with analytic extremal candidates (eigen-directions of `C` on
//! ball and ellipsoid sets, face-constrained minimizers on boxes). The worst
//! samples are then pushed further by derivative-free coordinate ascent on
//! the violation margin. A clean result means "no violation found at this
//! budget", not a proof.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix4, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Vec4;
use crate::error::{Error, Result};
use crate::funnel::{Condition, FunnelFunction, Witness};
use crate::problem::SegmentProblem;
use crate::reference::{body_from_ref, BodyState};
use crate::region::Region;
use crate::sampling::{unit_sphere4, Halton};

pub const MIN_BUDGET: usize = 1000;
/// Share of the budget spent on (a), (b), (c), (d).
pub const BUDGET_SPLIT: [f64; 4] = [0.2, 0.2, 0.2, 0.4];
const BAND_ACCEPTANCE_FLOOR: f64 = 1e-4;

/// What the falsifier needs to know about a certificate candidate. The
/// state is at most four-dimensional; `dims` limits refinement to the
/// leading coordinates.
pub trait ConditionOracle: Sync {
    fn t_end(&self) -> f64;
    fn dims(&self) -> usize {
        4
    }
    fn margin(&self, cond: Condition, th: f64, b: &Vec4) -> f64;
    fn in_domain(&self, cond: Condition, th: f64, b: &Vec4) -> bool;
    /// Number of unit-interval coordinates `sample` consumes.
    fn sample_dim(&self, cond: Condition) -> usize;
    fn sample(&self, cond: Condition, u: &[f64]) -> Option<(f64, Vec4)>;
    fn candidates(&self, _cond: Condition) -> Vec<(f64, Vec4)> {
        Vec::new()
    }
    /// Typical coordinate scale, used for refinement step sizes.
    fn scale(&self) -> Vec4 {
        Vec4::repeat(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub condition: Condition,
    pub witness: Witness,
    pub margin: f64,
}

impl Counterexample {
    pub fn body(&self) -> Vec4 {
        self.witness.body.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    /// Samples that fell inside the condition's domain.
    pub samples: usize,
    pub worst_margin: f64,
    pub witness: Option<Witness>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsifyReport {
    pub budget: usize,
    pub seed: u64,
    pub conditions: Vec<ConditionSummary>,
    /// Refined violations, strongest first within each condition.
    pub counterexamples: Vec<Counterexample>,
    pub warnings: Vec<String>,
}

impl FalsifyReport {
    pub fn is_clean(&self) -> bool {
        self.counterexamples.is_empty()
    }

    pub fn strongest(&self) -> Option<&Counterexample> {
        self.counterexamples
            .iter()
            .max_by(|a, b| a.margin.total_cmp(&b.margin))
    }

    pub fn status_line(&self) -> String {
        match self.strongest() {
            None => format!(
                "falsification-clean at {} samples (seed {})",
                self.budget, self.seed
            ),
            Some(cx) => format!(
                "violated: condition ({}) margin {:.3e} at theta={:.4}",
                cx.condition.label(),
                cx.margin,
                cx.witness.theta
            ),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FalsifyOptions {
    pub budget: usize,
    pub seed: u64,
    /// Worst samples refined per condition.
    pub refine_top: usize,
    pub refine_steps: usize,
    /// Counterexamples kept per condition.
    pub keep: usize,
}

impl FalsifyOptions {
    pub fn new(budget: usize, seed: u64) -> Self {
        Self {
            budget,
            seed,
            refine_top: 8,
            refine_steps: 50,
            keep: 1,
        }
    }
}

/// Search for a violation of the funnel conditions of `v` on `problem`.
pub fn falsify(
    v: &FunnelFunction,
    problem: &SegmentProblem,
    budget: usize,
    seed: u64,
) -> Result<FalsifyReport> {
    falsify_with(
        &FunnelOracle::new(v, problem),
        &FalsifyOptions::new(budget, seed),
    )
}

pub fn falsify_with(oracle: &impl ConditionOracle, opts: &FalsifyOptions) -> Result<FalsifyReport> {
    if opts.budget < MIN_BUDGET {
        return Err(Error::Config(format!(
            "falsifier budget must be at least {MIN_BUDGET}, got {}",
            opts.budget
        )));
    }
    if !(oracle.t_end() > 0.0) {
        return Err(Error::Config("segment has an empty theta domain".into()));
    }
    let mut conditions = Vec::with_capacity(4);
    let mut counterexamples = Vec::new();
    let mut warnings = Vec::new();
    for (k, cond) in Condition::ALL.into_iter().enumerate() {
        let n = ((opts.budget as f64) * BUDGET_SPLIT[k]).round() as usize;
        let halton = Halton::new(
            oracle.sample_dim(cond),
            opts.seed.wrapping_mul(31).wrapping_add(k as u64),
        );
        let mut scored: Vec<(f64, usize, f64, Vec4)> = (0..n)
            .into_par_iter()
            .map_init(
                || vec![0.0; halton.dim()],
                |u, i| {
                    halton.fill(i as u64, u);
                    let (th, b) = oracle.sample(cond, u)?;
                    if !oracle.in_domain(cond, th, &b) {
                        return None;
                    }
                    Some((oracle.margin(cond, th, &b), i, th, b))
                },
            )
            .flatten()
            .collect();
        let drawn = scored.len();
        if cond == Condition::D && n > 0 && (drawn as f64) < BAND_ACCEPTANCE_FLOOR * n as f64 {
            warnings.push(format!(
                "decrease band empty at this resolution ({drawn} of {n} samples); condition (d) passes vacuously"
            ));
        }
        for (j, (th, b)) in oracle.candidates(cond).into_iter().enumerate() {
            if oracle.in_domain(cond, th, &b) {
                scored.push((oracle.margin(cond, th, &b), n + j, th, b));
            }
        }
        // Worst first; ties broken by sample index for determinism.
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let top = &scored[..scored.len().min(opts.refine_top)];
        let mut refined: Vec<(f64, f64, Vec4)> = top
            .par_iter()
            .map(|&(m, _, th, b)| refine(oracle, cond, th, b, m, opts.refine_steps))
            .collect();
        refined.sort_by(|x, y| y.0.total_cmp(&x.0));
        let worst = refined.first().copied();
        conditions.push(ConditionSummary {
            condition: cond,
            samples: scored.len(),
            worst_margin: worst.map_or(f64::NEG_INFINITY, |w| w.0),
            witness: worst.map(|(_, th, b)| Witness {
                theta: th,
                body: BodyState::from_vec(&b),
            }),
        });
        let mut kept: Vec<(f64, f64, Vec4)> = Vec::new();
        for r in refined.into_iter().filter(|r| r.0 > 0.0) {
            if kept.len() >= opts.keep {
                break;
            }
            if kept
                .iter()
                .all(|k| (k.2 - r.2).norm() + (k.1 - r.1).abs() > 1e-3)
            {
                kept.push(r);
            }
        }
        counterexamples.extend(kept.into_iter().map(|(m, th, b)| Counterexample {
            condition: cond,
            witness: Witness {
                theta: th,
                body: BodyState::from_vec(&b),
            },
            margin: m,
        }));
    }
    Ok(FalsifyReport {
        budget: opts.budget,
        seed: opts.seed,
        conditions,
        counterexamples,
        warnings,
    })
}

/// Adaptive coordinate ascent on the margin over `(theta, b)`, staying in the
/// condition's domain. Theta is frozen for (a) and (b).
fn refine(
    oracle: &impl ConditionOracle,
    cond: Condition,
    mut th: f64,
    mut b: Vec4,
    mut best: f64,
    steps: usize,
) -> (f64, f64, Vec4) {
    let t_end = oracle.t_end();
    let scale = oracle.scale();
    let moves_theta = matches!(cond, Condition::C | Condition::D);
    let mut step = 0.05;
    for _ in 0..steps {
        let mut improved = false;
        for coord in 0..=oracle.dims() {
            if coord == 0 && !moves_theta {
                continue;
            }
            for sign in [1.0, -1.0] {
                let (mut th2, mut b2) = (th, b);
                if coord == 0 {
                    th2 = (th + sign * step * t_end).clamp(0.0, t_end);
                } else {
                    b2[coord - 1] += sign * step * scale[coord - 1];
                }
                if !oracle.in_domain(cond, th2, &b2) {
                    continue;
                }
                let m = oracle.margin(cond, th2, &b2);
                if m > best {
                    (best, th, b, improved) = (m, th2, b2, true);
                    break;
                }
            }
        }
        step = if improved {
            (step * 1.5).min(0.5)
        } else {
            step * 0.5
        };
        if step < 1e-9 {
            break;
        }
    }
    (best, th, b)
}

/// Minimize `b^T C b` with some coordinates fixed; `None` if the free block
/// is not positive definite.
pub(crate) fn constrained_min(c: &Matrix4<f64>, fixed: &[(usize, f64)]) -> Option<Vec4> {
    let free: Vec<usize> = (0..4).filter(|i| fixed.iter().all(|f| f.0 != *i)).collect();
    let mut b = Vec4::zeros();
    for &(i, x) in fixed {
        b[i] = x;
    }
    if free.is_empty() {
        return Some(b);
    }
    let cff = DMatrix::from_fn(free.len(), free.len(), |i, j| c[(free[i], free[j])]);
    let rhs = DVector::from_fn(free.len(), |i, _| {
        -fixed.iter().map(|&(j, x)| c[(free[i], j)] * x).sum::<f64>()
    });
    let sol = Cholesky::new(cff)?.solve(&rhs);
    for (k, &i) in free.iter().enumerate() {
        b[i] = sol[k];
    }
    Some(b)
}

/// Points of a body-frame region's boundary where `b^T C b` is extremal
/// (or, for boxes, a superset of the candidates for both extremes).
fn extremal_points(region: &Region, c: &Matrix4<f64>) -> Vec<Vec4> {
    let mut out = Vec::new();
    match region {
        Region::Ball { center, radius } if center.iter().all(|x| *x == 0.0) => {
            let e = SymmetricEigen::new(*c);
            for k in 0..4 {
                let d = e.eigenvectors.column(k).into_owned() * *radius;
                out.push(d);
                out.push(-d);
            }
        }
        Region::Ellipsoid { q, level } => {
            let m = Matrix4::from_fn(|i, j| q[i][j]);
            if let Some(ch) = m.cholesky() {
                let l = ch.l();
                if let Some(li) = l.try_inverse() {
                    let e = SymmetricEigen::new(li * c * li.transpose());
                    for k in 0..4 {
                        let z = e.eigenvectors.column(k).into_owned() * level.sqrt();
                        let b = li.transpose() * z;
                        out.push(b);
                        out.push(-b);
                    }
                }
            }
        }
        Region::Box { lower, upper } => {
            for mask in 0..16 {
                out.push(Vec4::from_fn(|i, _| {
                    if mask & (1 << i) != 0 {
                        upper[i]
                    } else {
                        lower[i]
                    }
                }));
            }
            for i in 0..4 {
                for bound in [lower[i], upper[i]] {
                    if let Some(b) = constrained_min(c, &[(i, bound)]) {
                        out.push(b);
                    }
                }
            }
        }
        _ => {}
    }
    out
}

/// The funnel conditions of one candidate on one segment.
pub struct FunnelOracle<'a> {
    pub v: &'a FunnelFunction,
    pub problem: &'a SegmentProblem,
    chol_inv_t: Option<Matrix4<f64>>,
}

impl<'a> FunnelOracle<'a> {
    pub fn new(v: &'a FunnelFunction, problem: &'a SegmentProblem) -> Self {
        let chol_inv_t =
            v.c.cholesky()
                .and_then(|ch| ch.l().try_inverse())
                .map(|li| li.transpose());
        Self {
            v,
            problem,
            chol_inv_t,
        }
    }

    /// Band state at level `q` of the quadratic part in direction `dir`.
    fn band_point(&self, q: f64, dir: &Vec4) -> Option<Vec4> {
        Some(self.chol_inv_t? * dir * q.sqrt())
    }

    fn safe_bounds(&self) -> ([f64; 4], [f64; 4]) {
        self.problem
            .regions
            .safe
            .bounding_box()
            .unwrap_or(([-3.0; 4], [3.0; 4]))
    }
}

fn shell(region: &Region, u: &[f64], s: f64) -> Vec4 {
    region.scale_about_center(&region.boundary_point(u), s)
}

impl ConditionOracle for FunnelOracle<'_> {
    fn t_end(&self) -> f64 {
        self.problem.t_end()
    }

    fn margin(&self, cond: Condition, th: f64, b: &Vec4) -> f64 {
        self.v.margin(cond, th, b, self.problem)
    }

    fn in_domain(&self, cond: Condition, th: f64, b: &Vec4) -> bool {
        self.v.in_domain(cond, th, b, self.problem)
    }

    fn sample_dim(&self, cond: Condition) -> usize {
        match cond {
            Condition::A | Condition::B => 5,
            Condition::C => 6,
            Condition::D => 6,
        }
    }

    fn sample(&self, cond: Condition, u: &[f64]) -> Option<(f64, Vec4)> {
        let regions = &self.problem.regions;
        let t_end = self.t_end();
        match cond {
            // Half on the boundary, half in the interior.
            Condition::A => {
                let b = if u[4] < 0.5 {
                    regions.initial.boundary_point(&u[..4])
                } else {
                    regions.initial.interior_point(&u[..4])
                };
                Some((0.0, b))
            }
            // Boundary and an annulus out to twice the goal set.
            Condition::B => {
                let s = if u[4] < 0.5 {
                    1.0
                } else {
                    1.0 + 2.0 * (u[4] - 0.5)
                };
                Some((t_end, shell(&regions.goal, &u[..4], s)))
            }
            Condition::C => {
                let th = u[5] * t_end;
                if let Region::ObstacleComplement { .. } = &regions.safe {
                    let p = regions.safe.boundary_point(&u[..1]);
                    let r = self.problem.reference.point(th);
                    let s =
                        crate::dynamics::InertialState::new(r.state.alpha, p[1], p[2], r.state.v);
                    let pos = body_from_ref(&s, &r);
                    // Heading and speed deviations are free; the minimizer of the
                    // quadratic over them is the worst case when it exists.
                    let worst = if u[4] < 0.75 {
                        constrained_min(&self.v.c, &[(1, pos[1]), (2, pos[2])])
                    } else {
                        None
                    };
                    let b = worst.unwrap_or_else(|| {
                        Vec4::new(-3.0 + 6.0 * u[1], pos[1], pos[2], -3.0 + 6.0 * u[2])
                    });
                    Some((th, b))
                } else {
                    Some((th, regions.safe.boundary_point(&u[..4])))
                }
            }
            Condition::D => {
                let th = u[5] * t_end;
                let hi = self.v.beta - self.v.c0 * th;
                let lo = (self.v.beta_lower - self.v.c0 * th).max(0.0);
                if hi < lo {
                    return None;
                }
                if self.chol_inv_t.is_some() {
                    let q = lo + u[0] * (hi - lo);
                    Some((th, self.band_point(q, &unit_sphere4(&u[1..4]))?))
                } else {
                    let (lower, upper) = self.safe_bounds();
                    let w = [u[0], u[1], u[2], u[3]];
                    Some((
                        th,
                        Vec4::from_fn(|i, _| lower[i] + w[i] * (upper[i] - lower[i])),
                    ))
                }
            }
        }
    }

    fn candidates(&self, cond: Condition) -> Vec<(f64, Vec4)> {
        let regions = &self.problem.regions;
        let t_end = self.t_end();
        match cond {
            Condition::A => extremal_points(&regions.initial, &self.v.c)
                .into_iter()
                .map(|b| (0.0, b))
                .collect(),
            Condition::B => extremal_points(&regions.goal, &self.v.c)
                .into_iter()
                .map(|b| (t_end, b))
                .collect(),
            Condition::C if !regions.safe.is_obstacle() => {
                let pts = extremal_points(&regions.safe, &self.v.c);
                (0..=8)
                    .flat_map(|k| {
                        let th = t_end * k as f64 / 8.0;
                        pts.iter().map(move |b| (th, *b))
                    })
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    fn scale(&self) -> Vec4 {
        let (lower, upper) = self.safe_bounds();
        Vec4::from_fn(|i, _| 0.5 * (upper[i] - lower[i]).min(2.0))
    }
}

/// Per-theta worst decrease margin: for each grid point, the minimum over
/// sampled band states in `S(theta)` of `-(min over inputs of V')`.
/// `None` where no band state was sampled.
pub fn certify_margin_profile(
    v: &FunnelFunction,
    problem: &SegmentProblem,
    grid: usize,
    samples_per_theta: usize,
    seed: u64,
) -> Result<Vec<(f64, Option<f64>)>> {
    if grid < 10 {
        return Err(Error::Config(format!(
            "margin profile needs at least 10 theta points, got {grid}"
        )));
    }
    let oracle = FunnelOracle::new(v, problem);
    let halton = Halton::new(6, seed);
    let t_end = problem.t_end();
    Ok((0..grid)
        .into_par_iter()
        .map(|k| {
            let th = t_end * k as f64 / (grid - 1) as f64;
            let mut u = vec![0.0; 6];
            let mut worst: Option<f64> = None;
            for i in 0..samples_per_theta {
                halton.fill(i as u64, &mut u);
                u[5] = th / t_end;
                let Some((_, b)) = oracle.sample(Condition::D, &u) else {
                    continue;
                };
                if !oracle.in_domain(Condition::D, th, &b) {
                    continue;
                }
                let m = -v.min_lie_derivative(th, &b, problem).0;
                worst = Some(worst.map_or(m, |w| w.min(m)));
            }
            (th, worst)
        })
        .collect())
}

pub fn write_margin_profile_csv(profile: &[(f64, Option<f64>)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["theta", "margin"])?;
    for (th, m) in profile {
        w.write_record([th.to_string(), m.map_or(String::new(), |m| m.to_string())])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(report: &FalsifyReport, mut out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, report)?;
    writeln!(out)?;
    Ok(())
}
