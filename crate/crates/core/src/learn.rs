//! Counterexample-guided synthesis of funnel parameters.
//!
//! The parameters are the upper triangle of `C` (row by row) followed by
//! `c0`; `beta` is fixed. Every funnel condition evaluated at a concrete
//! state (and, for the decrease condition, a concrete input) is linear in
//! these parameters, so counterexamples become half-spaces. Candidates are
//! Chebyshev centres of the accumulated polytope.

use std::time::Instant;

use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demo::{demonstrate, MpcConfig};
use crate::dynamics::{Vec3, Vec4};
use crate::error::{Error, Result};
use crate::funnel::{Condition, FunnelFunction, Witness};
use crate::lp::{chebyshev_center, Center};
use crate::problem::SegmentProblem;
use crate::reference::{body_field_affine_at, BodyState};
use crate::sampling::Halton;
use crate::verify::{
    falsify_with, ConditionOracle, Counterexample, FalsifyOptions, FalsifyReport, FunnelOracle,
};

pub const N_PARAMS: usize = 11;

/// Upper-triangle index pairs in parameter order.
pub const TRIANGLE: [(usize, usize); 10] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 1),
    (1, 2),
    (1, 3),
    (2, 2),
    (2, 3),
    (3, 3),
];

pub type Params = [f64; N_PARAMS];

pub fn funnel_from_params(p: &Params, beta: f64, beta_lower: f64, lambda: f64) -> FunnelFunction {
    let mut c = Matrix4::zeros();
    for (k, &(i, j)) in TRIANGLE.iter().enumerate() {
        c[(i, j)] = p[k];
        c[(j, i)] = p[k];
    }
    FunnelFunction {
        c,
        c0: p[10],
        beta,
        beta_lower,
        lambda,
    }
}

pub fn params_from_funnel(v: &FunnelFunction) -> Params {
    let mut p = [0.0; N_PARAMS];
    for (k, &(i, j)) in TRIANGLE.iter().enumerate() {
        p[k] = v.c[(i, j)];
    }
    p[10] = v.c0;
    p
}

/// Coefficients with `V(theta, b) = value_features . p`.
pub fn value_features(th: f64, b: &Vec4) -> Params {
    let mut f = [0.0; N_PARAMS];
    for (k, &(i, j)) in TRIANGLE.iter().enumerate() {
        f[k] = if i == j {
            b[i] * b[i]
        } else {
            2.0 * b[i] * b[j]
        };
    }
    f[10] = th;
    f
}

/// Coefficients with `V'(theta, b, v) = derivative_features . p` at the
/// reference point of `theta`.
pub fn derivative_features(problem: &SegmentProblem, th: f64, b: &Vec4, input: &Vec3) -> Params {
    let (drift, m) = body_field_affine_at(b, &problem.reference.point(th));
    let db = drift + m * input;
    let mut f = [0.0; N_PARAMS];
    for (k, &(i, j)) in TRIANGLE.iter().enumerate() {
        f[k] = if i == j {
            2.0 * b[i] * db[i]
        } else {
            2.0 * (b[i] * db[j] + b[j] * db[i])
        };
    }
    f[10] = input[0];
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSource {
    Seed,
    Counterexample,
    PdCut,
    /// `c0 T <= beta_lower - band_floor`: the reference itself must sit
    /// below the decrease band at the end of the segment, since `V' = c0 u0 > 0`
    /// there.
    OriginBelowBand,
}

/// `a . p <= b`, with where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub a: Params,
    pub b: f64,
    pub source: RowSource,
    pub condition: Option<Condition>,
    pub witness: Option<Witness>,
    pub input: Option<[f64; 3]>,
}

impl Row {
    pub fn slack(&self, p: &Params) -> f64 {
        self.b - dot(&self.a, p)
    }
}

fn dot(a: &Params, p: &Params) -> f64 {
    a.iter().zip(p).map(|(x, y)| x * y).sum()
}

fn neg(a: Params) -> Params {
    a.map(|x| -x)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub rows: Vec<Row>,
    pub p_max: f64,
}

impl ConstraintSet {
    pub fn new(p_max: f64) -> Self {
        Self {
            rows: Vec::new(),
            p_max,
        }
    }

    pub fn push(&mut self, row: Row) -> Result<()> {
        if !row.b.is_finite() || row.a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("non-finite constraint row".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn contains(&self, p: &Params) -> bool {
        p.iter().all(|x| x.abs() <= self.p_max) && self.rows.iter().all(|r| r.slack(p) >= 0.0)
    }

    pub fn chebyshev_center(&self) -> Result<Center> {
        let rows: Vec<(Vec<f64>, f64)> = self.rows.iter().map(|r| (r.a.to_vec(), r.b)).collect();
        chebyshev_center(&rows, N_PARAMS, self.p_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub max_iterations: usize,
    pub loop_budget: usize,
    pub final_budget: usize,
    pub beta: f64,
    pub beta_lower: f64,
    pub lambda: f64,
    /// Strictness of learned rows.
    pub delta: f64,
    pub p_max: f64,
    pub eps_pd: f64,
    /// Smallest quadratic level the decrease band may reach, enforced through
    /// `c0 T <= beta_lower - band_floor`.
    pub band_floor: f64,
    pub seed_boundary_rows: usize,
    pub seed_demonstrations: usize,
    /// Decrease counterexamples turned into rows per iteration.
    pub counterexamples_per_iteration: usize,
    pub mpc: MpcConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            loop_budget: 10_000,
            final_budget: 100_000,
            beta: 1.0,
            beta_lower: 0.7,
            lambda: 0.05,
            delta: 1e-3,
            p_max: 1e3,
            eps_pd: 1e-3,
            band_floor: 0.3,
            seed_boundary_rows: 200,
            seed_demonstrations: 50,
            counterexamples_per_iteration: 4,
            mpc: MpcConfig::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta_lower <= self.beta && self.lambda >= 0.0) {
            return Err(Error::Config(
                "need beta > 0, beta_lower <= beta and lambda >= 0".into(),
            ));
        }
        if !(self.delta > 0.0 && self.p_max > 0.0 && self.eps_pd > 0.0) {
            return Err(Error::Config(
                "delta, p_max and eps_pd must be positive".into(),
            ));
        }
        if !(self.band_floor >= self.delta
            && self.band_floor < self.beta_lower.max(self.delta + 1e-12))
        {
            return Err(Error::Config(
                "band_floor must lie in [delta, beta_lower)".into(),
            ));
        }
        if self.counterexamples_per_iteration == 0 {
            return Err(Error::Config(
                "counterexamples_per_iteration must be at least 1".into(),
            ));
        }
        self.mpc.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Found,
    Infeasible,
    BudgetExhausted,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Found => 0,
            Outcome::Infeasible => 2,
            Outcome::BudgetExhausted => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub candidate: Params,
    pub radius: f64,
    pub pd_cuts: usize,
    pub counterexamples: Vec<Counterexample>,
    pub rows_added: usize,
    /// Whether the candidate survived the loop budget and went to the final check.
    pub final_check: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub outcome: Outcome,
    pub iterations: usize,
    pub funnel: Option<FunnelFunction>,
    pub seed_rows: usize,
    pub total_rows: usize,
    pub log: Vec<IterationLog>,
    pub final_report: Option<FalsifyReport>,
    pub notes: Vec<String>,
    /// Wall-clock seconds; excluded from reproducibility comparisons.
    pub elapsed_seconds: f64,
}

impl SynthesisReport {
    /// The report with wall-clock data removed.
    pub fn without_timing(&self) -> Self {
        Self {
            elapsed_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Linear rows encoding a counterexample. Decrease counterexamples need the
/// demonstrated input (affine coordinates).
pub fn constraints_from_counterexample(
    cx: &Counterexample,
    demo_input: Option<&Vec3>,
    problem: &SegmentProblem,
    cfg: &SynthesisConfig,
) -> Result<Vec<Row>> {
    let th = cx.witness.theta;
    let b = cx.body();
    let witness = Some(cx.witness);
    let condition = Some(cx.condition);
    let source = RowSource::Counterexample;
    let row = match cx.condition {
        Condition::A => Row {
            a: value_features(0.0, &b),
            b: cfg.beta - cfg.delta,
            source,
            condition,
            witness,
            input: None,
        },
        Condition::B => Row {
            a: neg(value_features(problem.t_end(), &b)),
            b: -(cfg.beta + cfg.delta),
            source,
            condition,
            witness,
            input: None,
        },
        Condition::C => Row {
            a: neg(value_features(th, &b)),
            b: -(cfg.beta + cfg.delta),
            source,
            condition,
            witness,
            input: None,
        },
        Condition::D => {
            let v = demo_input.ok_or(Error::MissingDemonstration)?;
            Row {
                a: derivative_features(problem, th, &b, v),
                b: -cfg.lambda - cfg.delta,
                source,
                condition,
                witness,
                input: Some([v[0], v[1], v[2]]),
            }
        }
    };
    Ok(vec![row])
}

pub(crate) fn seed_rows(problem: &SegmentProblem, cfg: &SynthesisConfig, seed: u64) -> Vec<Row> {
    let regions = &problem.regions;
    let n = cfg.seed_boundary_rows;
    let t_end = problem.t_end();
    let mut rows = Vec::new();
    let witness = |th: f64, b: &Vec4| {
        Some(Witness {
            theta: th,
            body: BodyState::from_vec(b),
        })
    };
    for b in regions.initial.boundary_samples(n, seed) {
        rows.push(Row {
            a: value_features(0.0, &b),
            b: cfg.beta - cfg.delta,
            source: RowSource::Seed,
            condition: Some(Condition::A),
            witness: witness(0.0, &b),
            input: None,
        });
    }
    for b in regions.goal.boundary_samples(n, seed + 1) {
        rows.push(Row {
            a: neg(value_features(t_end, &b)),
            b: -(cfg.beta + cfg.delta),
            source: RowSource::Seed,
            condition: Some(Condition::B),
            witness: witness(t_end, &b),
            input: None,
        });
    }
    let halton = Halton::new(5, seed + 2);
    for i in 0..n as u64 {
        let u = halton.point(i);
        let th = u[4] * t_end;
        let mut b = regions.safe.boundary_point(&u[..4]);
        if regions.safe.is_obstacle() {
            let r = problem.reference.point(th);
            let s = crate::dynamics::InertialState::new(r.state.alpha, b[1], b[2], r.state.v);
            b = crate::reference::body_from_ref(&s, &r);
        }
        rows.push(Row {
            a: neg(value_features(th, &b)),
            b: -(cfg.beta + cfg.delta),
            source: RowSource::Seed,
            condition: Some(Condition::C),
            witness: witness(th, &b),
            input: None,
        });
    }
    let mut a = [0.0; N_PARAMS];
    a[10] = t_end;
    rows.push(Row {
        a,
        b: cfg.beta_lower - cfg.band_floor,
        source: RowSource::OriginBelowBand,
        condition: Some(Condition::D),
        witness: witness(t_end, &Vec4::zeros()),
        input: None,
    });
    rows
}

enum Proposal {
    Candidate { p: Params, radius: f64, cuts: usize },
    Infeasible,
}

/// Chebyshev centre with lazy positive-definiteness cuts `e^T C e >= eps`.
fn propose(cs: &mut ConstraintSet, cfg: &SynthesisConfig) -> Result<Proposal> {
    let mut cuts = 0;
    loop {
        let (point, radius) = match cs.chebyshev_center()? {
            Center::Found { point, radius } => (point, radius),
            Center::Infeasible { .. } => return Ok(Proposal::Infeasible),
        };
        let p: Params = point.try_into().expect("parameter dimension");
        let v = funnel_from_params(&p, cfg.beta, cfg.beta_lower, cfg.lambda);
        let (lmin, e) = v.min_eigen();
        if lmin >= cfg.eps_pd {
            return Ok(Proposal::Candidate { p, radius, cuts });
        }
        if cuts >= 200 {
            return Err(Error::Lp(
                "positive-definiteness cuts did not converge".into(),
            ));
        }
        cs.push(Row {
            a: neg(value_features(0.0, &e)),
            b: -cfg.eps_pd,
            source: RowSource::PdCut,
            condition: None,
            witness: None,
            input: None,
        })?;
        cuts += 1;
    }
}

/// Turn counterexamples into rows, querying the demonstrator for decrease
/// violations. Returns the rows and the counterexamples that produced them.
pub(crate) fn rows_for(
    cxs: &[Counterexample],
    problem: &SegmentProblem,
    cfg: &SynthesisConfig,
    seed: u64,
    notes: &mut Vec<String>,
) -> Result<Vec<Row>> {
    let demos: Vec<Option<Vec3>> = cxs
        .par_iter()
        .enumerate()
        .map(|(k, cx)| {
            (cx.condition == Condition::D)
                .then(|| {
                    demonstrate(
                        problem,
                        cx.witness.theta,
                        &cx.body(),
                        &cfg.mpc,
                        seed.wrapping_add(k as u64),
                    )
                    .ok()
                })
                .flatten()
                .map(|d| d.input)
        })
        .collect();
    let mut rows = Vec::new();
    for (cx, demo) in cxs.iter().zip(&demos) {
        if cx.condition == Condition::D && demo.is_none() {
            notes.push(format!(
                "demonstrator failed at theta={:.4}; counterexample skipped",
                cx.witness.theta
            ));
            continue;
        }
        rows.extend(constraints_from_counterexample(
            cx,
            demo.as_ref(),
            problem,
            cfg,
        )?);
    }
    Ok(rows)
}

/// Run the learner on one segment. The segment's input box already encodes
/// the mode (trajectory tracking pins `u0 = 1`).
pub fn synthesize(
    problem: &SegmentProblem,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<SynthesisReport> {
    synthesize_with_progress(problem, cfg, seed, |_| {})
}

pub fn synthesize_with_progress(
    problem: &SegmentProblem,
    cfg: &SynthesisConfig,
    seed: u64,
    mut progress: impl FnMut(&IterationLog),
) -> Result<SynthesisReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut cs = ConstraintSet::new(cfg.p_max);
    for row in seed_rows(problem, cfg, seed) {
        cs.push(row)?;
    }

    // Demonstrations at band states of the first candidate.
    if cfg.seed_demonstrations > 0 {
        if let Proposal::Candidate { p, .. } = propose(&mut cs, cfg)? {
            let v = funnel_from_params(&p, cfg.beta, cfg.beta_lower, cfg.lambda);
            let oracle = FunnelOracle::new(&v, problem);
            let halton = Halton::new(oracle.sample_dim(Condition::D), seed + 3);
            let mut states = Vec::new();
            let mut i = 0;
            while states.len() < cfg.seed_demonstrations && i < 100 * cfg.seed_demonstrations as u64
            {
                if let Some((th, b)) = oracle.sample(Condition::D, &halton.point(i)) {
                    if oracle.in_domain(Condition::D, th, &b) {
                        states.push(Counterexample {
                            condition: Condition::D,
                            witness: Witness {
                                theta: th,
                                body: BodyState::from_vec(&b),
                            },
                            margin: oracle.margin(Condition::D, th, &b),
                        });
                    }
                }
                i += 1;
            }
            for mut row in rows_for(&states, problem, cfg, seed + 4, &mut notes)? {
                row.source = RowSource::Seed;
                cs.push(row)?;
            }
        }
    }
    let seed_count = cs.rows.len();

    let mut log = Vec::new();
    for iteration in 1..=cfg.max_iterations {
        let (p, radius, cuts) = match propose(&mut cs, cfg)? {
            Proposal::Candidate { p, radius, cuts } => (p, radius, cuts),
            Proposal::Infeasible => {
                return Ok(SynthesisReport {
                    outcome: Outcome::Infeasible,
                    iterations: iteration - 1,
                    funnel: None,
                    seed_rows: seed_count,
                    total_rows: cs.rows.len(),
                    log,
                    final_report: None,
                    notes,
                    elapsed_seconds: start.elapsed().as_secs_f64(),
                })
            }
        };
        let v = funnel_from_params(&p, cfg.beta, cfg.beta_lower, cfg.lambda);
        let oracle = FunnelOracle::new(&v, problem);
        let iter_seed = seed.wrapping_add(1000 * iteration as u64);
        let opts = FalsifyOptions {
            keep: cfg.counterexamples_per_iteration,
            ..FalsifyOptions::new(cfg.loop_budget, iter_seed)
        };
        let mut report = falsify_with(&oracle, &opts)?;
        let mut final_check = false;
        if report.is_clean() {
            final_check = true;
            let final_opts = FalsifyOptions {
                keep: cfg.counterexamples_per_iteration,
                ..FalsifyOptions::new(cfg.final_budget, iter_seed + 1)
            };
            let final_report = falsify_with(&oracle, &final_opts)?;
            if final_report.is_clean() {
                let entry = IterationLog {
                    iteration,
                    candidate: p,
                    radius,
                    pd_cuts: cuts,
                    counterexamples: Vec::new(),
                    rows_added: 0,
                    final_check,
                };
                progress(&entry);
                log.push(entry);
                return Ok(SynthesisReport {
                    outcome: Outcome::Found,
                    iterations: iteration,
                    funnel: Some(v),
                    seed_rows: seed_count,
                    total_rows: cs.rows.len(),
                    log,
                    final_report: Some(final_report),
                    notes,
                    elapsed_seconds: start.elapsed().as_secs_f64(),
                });
            }
            report = final_report;
        }
        let rows = rows_for(
            &report.counterexamples,
            problem,
            cfg,
            iter_seed + 2,
            &mut notes,
        )?;
        let added = rows.len();
        for row in rows {
            debug_assert!(row.slack(&p) < 0.0, "row must cut off its candidate");
            cs.push(row)?;
        }
        let entry = IterationLog {
            iteration,
            candidate: p,
            radius,
            pd_cuts: cuts,
            counterexamples: report.counterexamples.clone(),
            rows_added: added,
            final_check,
        };
        progress(&entry);
        log.push(entry);
        if added == 0 {
            notes.push(format!(
                "iteration {iteration}: no usable counterexample rows"
            ));
        }
    }
    Ok(SynthesisReport {
        outcome: Outcome::BudgetExhausted,
        iterations: cfg.max_iterations,
        funnel: None,
        seed_rows: seed_count,
        total_rows: cs.rows.len(),
        log,
        final_report: None,
        notes,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
