//! Closed-loop simulation of the plant with a funnel controller, chained
//! over consecutive segments.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{Controller, Strategy, DEFAULT_DT_CTRL};
use crate::dynamics::{field_affine, rk4_step, ControlInput, InertialState, Vec4};
use crate::error::{Error, Result};
use crate::funnel::FunnelFunction;
use crate::problem::{Mode, SegmentProblem};
use crate::reference::inertial_from_ref;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Disturbance {
    #[default]
    None,
    /// Offset added to the inertial state `(alpha, x, y, v)` once, at `time`.
    StateImpulse { time: f64, offset: [f64; 4] },
    /// Gaussian noise on `(gamma, thrust)` at every controller update.
    InputNoise { std: [f64; 2], seed: u64 },
    /// The plant runs with `multiplier` times the nominal wheelbase.
    ParameterError { multiplier: f64 },
}

impl Disturbance {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let ok = match self {
            Disturbance::None => true,
            Disturbance::StateImpulse { time, offset } => {
                (0.0..=horizon).contains(time) && offset.iter().all(|x| x.is_finite())
            }
            Disturbance::InputNoise { std, .. } => std.iter().all(|s| *s >= 0.0 && s.is_finite()),
            Disturbance::ParameterError { multiplier } => {
                *multiplier > 0.0 && multiplier.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid disturbance {self:?} for horizon {horizon}"
            )))
        }
    }

    /// Same disturbance with the noise stream re-seeded for one run.
    fn for_run(&self, seed: u64) -> Self {
        match self {
            Disturbance::InputNoise { std, seed: s } => Disturbance::InputNoise {
                std: *std,
                seed: s ^ seed,
            },
            d => d.clone(),
        }
    }
}

/// One certified segment of a course.
#[derive(Clone, Debug)]
pub struct Leg {
    pub funnel: FunnelFunction,
    pub problem: SegmentProblem,
}

/// Legs driven in order, `laps` times, each leg's reference moved so it
/// starts where the previous reference ended.
#[derive(Clone, Debug)]
pub struct Course {
    pub legs: Vec<Leg>,
    pub laps: usize,
    /// Stop once the car has advanced this far in `x` from its start.
    pub stop_after_x: Option<f64>,
}

impl Course {
    pub fn single(leg: Leg) -> Self {
        Self {
            legs: vec![leg],
            laps: 1,
            stop_after_x: None,
        }
    }

    pub fn total_legs(&self) -> usize {
        self.legs.len() * self.laps
    }

    pub fn mode(&self) -> Mode {
        self.legs[0].problem.mode
    }

    fn validate(&self) -> Result<()> {
        if self.legs.is_empty() || self.laps == 0 {
            return Err(Error::Config(
                "a course needs at least one leg and one lap".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Plant integration step.
    pub dt: f64,
    /// Controller update period, a multiple of `dt`.
    pub dt_ctrl: f64,
    pub horizon: f64,
    pub strategy: Strategy,
    /// Body deviation norm treated as divergence.
    pub divergence_bound: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            dt_ctrl: DEFAULT_DT_CTRL,
            horizon: 60.0,
            strategy: Strategy::MinNormQp,
            divergence_bound: 1e3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let ratio = self.dt_ctrl / self.dt;
        if !(self.dt > 0.0
            && self.horizon > self.dt
            && ratio >= 1.0 - 1e-9
            && (ratio - ratio.round()).abs() < 1e-9)
        {
            return Err(Error::Config(format!(
                "need dt > 0, horizon > dt and dt_ctrl a multiple of dt, got dt={}, dt_ctrl={}, horizon={}",
                self.dt, self.dt_ctrl, self.horizon
            )));
        }
        if !(self.divergence_bound > 0.0) {
            return Err(Error::Config("divergence bound must be positive".into()));
        }
        Ok(())
    }

    fn substeps(&self) -> usize {
        (self.dt_ctrl / self.dt).round() as usize
    }
}

/// One row of a trace, taken at every plant step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub leg: usize,
    pub theta: f64,
    pub alpha: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub b_alpha: f64,
    pub b_x: f64,
    pub b_y: f64,
    pub b_v: f64,
    pub u0: f64,
    pub gamma: f64,
    pub thrust: f64,
    pub value: f64,
    pub safe: bool,
    /// Final leg finished: `theta = T` and the deviation is in the goal set.
    pub goal: bool,
    pub clearance: Option<f64>,
}

impl Sample {
    pub fn body(&self) -> Vec4 {
        Vec4::new(self.b_alpha, self.b_x, self.b_y, self.b_v)
    }

    pub fn state(&self) -> InertialState {
        InertialState::new(self.alpha, self.x, self.y, self.v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EndReason {
    Goal,
    Distance,
    Unsafe,
    Diverged,
    Horizon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub reached_goal: bool,
    pub t_star: Option<f64>,
    pub stayed_safe: bool,
    pub min_obstacle_clearance: Option<f64>,
    /// Largest cross-track deviation `|b_x|`.
    pub max_y_deviation: f64,
    /// Fraction of samples with `V <= beta`.
    pub funnel_containment: f64,
    pub legs_completed: usize,
    pub end: EndReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub scenario: String,
    pub mode: Mode,
    pub run: usize,
    pub seed: u64,
    pub beta: f64,
    pub total_legs: usize,
    pub stop_x: Option<f64>,
    pub divergence_bound: f64,
    pub initial_body: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub meta: TraceMeta,
    pub verdicts: Verdicts,
    pub samples: Vec<Sample>,
}

/// Verdicts derived from a stored series.
pub fn recompute_verdicts(meta: &TraceMeta, samples: &[Sample]) -> Verdicts {
    let last = samples.last().expect("traces hold at least one sample");
    let distance = meta.stop_x.is_some_and(|x| last.x >= x);
    let reached_goal = last.goal || distance;
    let stayed_safe = samples.iter().all(|s| s.safe);
    let diverged =
        !last.body().iter().all(|x| x.is_finite()) || last.body().norm() > meta.divergence_bound;
    let end = if last.goal {
        EndReason::Goal
    } else if distance {
        EndReason::Distance
    } else if !last.safe {
        EndReason::Unsafe
    } else if diverged {
        EndReason::Diverged
    } else {
        EndReason::Horizon
    };
    let legs_completed = last.leg + usize::from(last.goal);
    Verdicts {
        reached_goal,
        t_star: reached_goal.then_some(last.t),
        stayed_safe,
        min_obstacle_clearance: samples.iter().filter_map(|s| s.clearance).reduce(f64::min),
        max_y_deviation: samples.iter().map(|s| s.b_x.abs()).fold(0.0, f64::max),
        funnel_containment: samples.iter().filter(|s| s.value <= meta.beta).count() as f64
            / samples.len() as f64,
        legs_completed,
        end,
    }
}

fn controller_for(
    course: &Course,
    k: usize,
    prev_end: Option<&InertialState>,
    cfg: &SimConfig,
) -> Result<Controller> {
    let leg = &course.legs[k % course.legs.len()];
    let mut problem = leg.problem.clone();
    if let Some(end) = prev_end {
        problem.reference = problem
            .reference
            .with_frame(problem.reference.frame_starting_at(end));
    }
    Controller::new(leg.funnel, problem, cfg.strategy, cfg.dt_ctrl)
}

/// Drive `course` from `x0`. Failures are reported as verdicts.
pub fn run_closed_loop(
    course: &Course,
    x0: &InertialState,
    disturbance: &Disturbance,
    cfg: &SimConfig,
    meta: TraceMeta,
) -> Result<TraceRecord> {
    course.validate()?;
    cfg.validate()?;
    disturbance.validate(cfg.horizon)?;
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial state"));
    }
    let total = course.total_legs();
    let mut leg = 0;
    let mut ctrl = controller_for(course, 0, None, cfg)?;
    let mut wheelbase = ctrl.problem.wheelbase;
    if let Disturbance::ParameterError { multiplier } = disturbance {
        wheelbase *= multiplier;
    }
    let mut noise = match disturbance {
        Disturbance::InputNoise { std, seed } => Some((
            ChaCha8Rng::seed_from_u64(*seed),
            Normal::new(0.0, std[0]).map_err(|e| Error::Config(e.to_string()))?,
            Normal::new(0.0, std[1]).map_err(|e| Error::Config(e.to_string()))?,
        )),
        _ => None,
    };
    let mut impulse = match disturbance {
        Disturbance::StateImpulse { time, offset } => Some((*time, Vec4::from(*offset))),
        _ => None,
    };
    let stop_x = course.stop_after_x.map(|d| x0.x + d);
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let sub = cfg.substeps();
    let mut s = x0.to_vec();
    let mut u = ControlInput::default();
    let mut samples = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let state = InertialState::from_vec(&s);
        let mut b = ctrl.body(&state);
        let mut goal = false;
        if ctrl.at_end() && ctrl.problem.regions.goal.contains(&b) {
            if leg + 1 == total {
                goal = true;
            } else {
                let end = ctrl.problem.reference.end().state;
                leg += 1;
                ctrl = controller_for(course, leg, Some(&end), cfg)?;
                b = ctrl.body(&state);
            }
        }
        let th = ctrl.theta();
        let diverged = !state.is_finite() || !(b.norm() <= cfg.divergence_bound);
        if k % sub == 0 && !goal && !diverged {
            u = ctrl.step(&state, cfg.dt_ctrl).input;
            if let Some((rng, ng, nt)) = noise.as_mut() {
                u.gamma += ng.sample(rng);
                u.thrust += nt.sample(rng);
            }
        }
        let regions = &ctrl.problem.regions;
        let sample = Sample {
            t,
            leg,
            theta: th,
            alpha: state.alpha,
            x: state.x,
            y: state.y,
            v: state.v,
            b_alpha: b[0],
            b_x: b[1],
            b_y: b[2],
            b_v: b[3],
            u0: u.u0,
            gamma: u.gamma,
            thrust: u.thrust,
            value: ctrl.funnel.eval(th, &b),
            safe: regions.safe_contains(th, &b, &ctrl.problem.reference),
            goal,
            clearance: regions.clearance(state.x, state.y),
        };
        samples.push(sample);
        if goal || diverged || !sample.safe || stop_x.is_some_and(|x| state.x >= x) {
            break;
        }
        let w = u.gamma.tan() / wheelbase;
        s = rk4_step(&s, cfg.dt, |z| {
            field_affine(&InertialState::from_vec(z), w, u.thrust)
        });
        if let Some((ti, off)) = impulse {
            if t + cfg.dt >= ti - 1e-12 {
                s += off;
                impulse = None;
            }
        }
    }
    let verdicts = recompute_verdicts(&meta, &samples);
    Ok(TraceRecord {
        meta,
        verdicts,
        samples,
    })
}

/// How initial deviations at the start of the first leg are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSampler {
    /// Uniform in the initial set.
    InitialSet,
    /// Uniform in the ball of `radius` about the reference start, restricted
    /// to `V(0, b) > beta`.
    OutsideHead {
        radius: f64,
    },
    Fixed {
        states: Vec<[f64; 4]>,
    },
}

impl InitialSampler {
    pub fn draw(&self, leg: &Leg, index: usize, rng: &mut ChaCha8Rng) -> Result<Vec4> {
        let region = &leg.problem.regions.initial;
        match self {
            InitialSampler::InitialSet => {
                let u: [f64; 4] = std::array::from_fn(|_| rng.gen::<f64>());
                Ok(region.interior_point(&u))
            }
            InitialSampler::OutsideHead { radius } => {
                for _ in 0..100_000 {
                    let b = Vec4::from_fn(|_, _| rng.gen_range(-radius..*radius));
                    if b.norm() <= *radius && leg.funnel.eval(0.0, &b) > leg.funnel.beta {
                        return Ok(b);
                    }
                }
                Err(Error::Config(format!(
                    "no states outside the funnel head within radius {radius}"
                )))
            }
            InitialSampler::Fixed { states } => states
                .get(index % states.len().max(1))
                .map(|s| Vec4::from(*s))
                .ok_or_else(|| Error::Config("fixed sampler needs at least one state".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Spread {
    fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        Some(Self {
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub runs: usize,
    pub success_rate: f64,
    pub safe_rate: f64,
    pub t_star: Option<Spread>,
    pub max_y_deviation: Option<Spread>,
    pub min_obstacle_clearance: Option<f64>,
}

impl BatchSummary {
    pub fn of(traces: &[TraceRecord]) -> Self {
        let n = traces.len().max(1) as f64;
        let t: Vec<f64> = traces.iter().filter_map(|r| r.verdicts.t_star).collect();
        let dev: Vec<f64> = traces.iter().map(|r| r.verdicts.max_y_deviation).collect();
        Self {
            runs: traces.len(),
            success_rate: traces.iter().filter(|r| r.verdicts.reached_goal).count() as f64 / n,
            safe_rate: traces.iter().filter(|r| r.verdicts.stayed_safe).count() as f64 / n,
            t_star: Spread::of(&t),
            max_y_deviation: Spread::of(&dev),
            min_obstacle_clearance: traces
                .iter()
                .filter_map(|r| r.verdicts.min_obstacle_clearance)
                .reduce(f64::min),
        }
    }
}

/// Per-run seed derived from the batch seed.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(run as u64)
        .rotate_left(17)
}

/// `n` independent runs, in parallel, from sampled initial deviations.
pub fn batch_experiment(
    scenario: &str,
    course: &Course,
    sampler: &InitialSampler,
    n: usize,
    seed: u64,
    disturbance: &Disturbance,
    cfg: &SimConfig,
) -> Result<(Vec<TraceRecord>, BatchSummary)> {
    if n == 0 {
        return Err(Error::Config("a batch needs at least one run".into()));
    }
    course.validate()?;
    let first = &course.legs[0];
    let traces = (0..n)
        .into_par_iter()
        .map(|run| {
            let rs = run_seed(seed, run);
            let mut rng = ChaCha8Rng::seed_from_u64(rs);
            let b0 = sampler.draw(first, run, &mut rng)?;
            let x0 = inertial_from_ref(&b0, &first.problem.reference.start());
            let meta = TraceMeta {
                scenario: scenario.to_string(),
                mode: course.mode(),
                run,
                seed: rs,
                beta: first.funnel.beta,
                total_legs: course.total_legs(),
                stop_x: course.stop_after_x.map(|d| x0.x + d),
                divergence_bound: cfg.divergence_bound,
                initial_body: b0.into(),
            };
            run_closed_loop(course, &x0, &disturbance.for_run(rs), cfg, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = BatchSummary::of(&traces);
    Ok((traces, summary))
}

pub fn write_trace_csv(trace: &TraceRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in &trace.samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .collect::<std::result::Result<Vec<Sample>, _>>()
        .map_err(Error::from)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub meta: TraceMeta,
    pub verdicts: Verdicts,
    pub samples: usize,
}

/// Verdicts and metadata of every trace, without the series.
pub fn write_summary_json(
    traces: &[TraceRecord],
    summary: &BatchSummary,
    path: &Path,
) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        summary: &'a BatchSummary,
        traces: Vec<TraceSummary>,
    }
    let out = Out {
        summary,
        traces: traces
            .iter()
            .map(|t| TraceSummary {
                meta: t.meta.clone(),
                verdicts: t.verdicts.clone(),
                samples: t.samples.len(),
            })
            .collect(),
    };
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &out)?;
    writeln!(f)?;
    Ok(())
}
