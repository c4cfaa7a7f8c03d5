//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits non-zero only with `ACCEPTANCE_STRICT=1`, so honest failures are
//! reported without breaking the workspace test run.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::Vector3;
use pathfunnel::control::{extract_control, Strategy};
use pathfunnel::dynamics::{
    integrate, ControlInput, InertialState, PiecewiseConstant, Vec3, Vec4, DEFAULT_WHEELBASE,
};
use pathfunnel::funnel::{Condition, FunnelFunction};
use pathfunnel::learn::{synthesize, Outcome, SynthesisConfig, SynthesisReport};
use pathfunnel::lp::{chebyshev_center, max_min_slack_ellipsoid, Center};
use pathfunnel::problem::{Mode, SegmentProblem};
use pathfunnel::reference::{to_body, to_inertial, PathShape, ReferenceSegment};
use pathfunnel::sampling::Halton;
use pathfunnel::scenario::{builtin, concatenation_failures, Scenario};
use pathfunnel::sim::{
    batch_experiment, Course, Disturbance, InitialSampler, Leg, SimConfig, TraceRecord,
};
use pathfunnel::verify::{falsify, ConditionOracle, FunnelOracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;
const FRESH_SEED: u64 = 1001;

struct Run {
    scenario: Scenario,
    problem: SegmentProblem,
    report: SynthesisReport,
    seconds: f64,
}

impl Run {
    fn funnel(&self) -> Option<&FunnelFunction> {
        self.report.funnel.as_ref()
    }

    fn leg(&self) -> Option<Leg> {
        self.funnel().map(|v| Leg {
            funnel: *v,
            problem: self.problem.clone(),
        })
    }
}

struct Runs(BTreeMap<(String, Mode), Run>);

impl Runs {
    fn get(&mut self, scenario: Scenario, mode: Mode) -> &Run {
        let key = (scenario.id.clone(), mode);
        self.0.entry(key).or_insert_with(|| {
            let problem = scenario.default_problem(mode).expect("catalog problem");
            let start = Instant::now();
            let report =
                synthesize(&problem, &SynthesisConfig::default(), SEED).expect("synthesis runs");
            let seconds = start.elapsed().as_secs_f64();
            println!(
                "  synthesized {} {}: {:?}, {} iterations, {:.1} s",
                scenario.id,
                mode.label(),
                report.outcome,
                report.iterations,
                seconds
            );
            Run {
                scenario,
                problem,
                report,
                seconds,
            }
        })
    }

    fn id(&mut self, id: &str, mode: Mode) -> &Run {
        self.get(builtin(id).expect("catalog id"), mode)
    }
}

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn line(&mut self, n: usize, ok: bool, detail: String) {
        if !ok {
            self.failed.push(n);
        }
        println!(
            "criterion {n:>2}: {} - {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
}

fn found(run: &Run) -> bool {
    run.report.outcome == Outcome::Found
}

fn sim() -> SimConfig {
    SimConfig::default()
}

fn batch(
    name: &str,
    course: &Course,
    sampler: &InitialSampler,
    n: usize,
    seed: u64,
) -> Vec<TraceRecord> {
    batch_experiment(name, course, sampler, n, seed, &Disturbance::None, &sim())
        .expect("batch runs")
        .0
}

/// Reach-while-stay and the timing envelope over 100 runs from the initial set.
fn closed_loop_ok(run: &Run) -> (bool, String) {
    let Some(leg) = run.leg() else {
        return (false, format!("{} has no certificate", run.scenario.id));
    };
    let t = run.problem.t_end();
    let (lo, hi) = (
        t / run.problem.inputs.upper[0],
        t / run.problem.inputs.lower[0],
    );
    let traces = batch(
        &run.scenario.id,
        &Course::single(leg),
        &InitialSampler::InitialSet,
        100,
        11,
    );
    let good = traces
        .iter()
        .filter(|r| {
            r.verdicts.reached_goal
                && r.verdicts.stayed_safe
                && r.verdicts
                    .t_star
                    .is_some_and(|ts| ts >= lo - 1e-9 && ts <= hi + 1e-9)
        })
        .count();
    (
        good == 100,
        format!(
            "{} {} {good}/100",
            run.scenario.id,
            run.problem.mode.label()
        ),
    )
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut runs = Runs(BTreeMap::new());
    let mut tally = Tally { failed: Vec::new() };

    // 1. Straight-path PF synthesis and fresh-seed re-verification.
    {
        let mut ok = true;
        let mut detail = Vec::new();
        for id in ["straight-4m", "straight-8m"] {
            let r = runs.id(id, Mode::Pf);
            let mut this = found(r) && r.report.iterations <= 300 && r.seconds <= 900.0;
            if let Some(v) = r.funnel() {
                let rep = falsify(v, &r.problem, 100_000, FRESH_SEED).expect("falsifier runs");
                this &= rep.is_clean();
                detail.push(format!(
                    "{id}: {:?} in {} it, {:.0} s, {}",
                    r.report.outcome,
                    r.report.iterations,
                    r.seconds,
                    rep.status_line()
                ));
            } else {
                detail.push(format!("{id}: {:?}", r.report.outcome));
            }
            ok &= this;
        }
        tally.line(1, ok, detail.join("; "));
    }

    // 2. TT asymmetry: TT must end budget-exhausted while PF succeeds.
    {
        let mut ok = true;
        let mut detail = Vec::new();
        for id in ["straight-4m", "straight-restricted"] {
            let pf = runs.id(id, Mode::Pf).report.outcome;
            let tt = runs.id(id, Mode::Tt).report.outcome;
            ok &= pf == Outcome::Found && tt == Outcome::BudgetExhausted;
            detail.push(format!("{id}: PF {pf:?}, TT {tt:?}"));
        }
        tally.line(2, ok, detail.join("; "));
    }

    // Certificates used by the later criteria.
    let plan: [(&str, Mode); 10] = [
        ("straight-4m", Mode::Pf),
        ("straight-8m", Mode::Pf),
        ("straight-8m", Mode::Tt),
        ("straight-restricted", Mode::Pf),
        ("circular", Mode::Pf),
        ("circular", Mode::Tt),
        ("circular-fast", Mode::Pf),
        ("oval-half-1", Mode::Pf),
        ("oval-half-2", Mode::Pf),
        ("obstacle", Mode::Pf),
    ];
    for (id, mode) in plan {
        runs.id(id, mode);
    }

    // 3. Closed-loop reach-while-stay for every found certificate.
    {
        let keys: Vec<(String, Mode)> = runs
            .0
            .iter()
            .filter(|(_, r)| found(r))
            .map(|(k, _)| k.clone())
            .collect();
        let mut ok = !keys.is_empty();
        let mut detail = Vec::new();
        for k in keys {
            let (this, d) = closed_loop_ok(&runs.0[&k]);
            ok &= this;
            detail.push(d);
        }
        tally.line(3, ok, detail.join(", "));
    }

    // 4. Straight-8m: 12 m of x in 6 s +- 15 %.
    let pf8 = runs.id("straight-8m", Mode::Pf).leg();
    let tt8 = runs.id("straight-8m", Mode::Tt).leg();
    {
        let (ok, detail) = match &pf8 {
            Some(leg) => {
                let course = Course {
                    legs: vec![leg.clone()],
                    laps: 3,
                    stop_after_x: Some(12.0),
                };
                let traces = batch("straight-8m", &course, &InitialSampler::InitialSet, 100, 4);
                let times: Vec<f64> = traces.iter().filter_map(|r| r.verdicts.t_star).collect();
                let speeds: Vec<f64> = times.iter().map(|t| 12.0 / t).collect();
                let within = times.len() == 100 && times.iter().all(|t| (t - 6.0).abs() <= 0.9);
                let (tmin, tmax) = times
                    .iter()
                    .fold((f64::INFINITY, 0.0f64), |(a, b), t| (a.min(*t), b.max(*t)));
                let vmean = speeds.iter().sum::<f64>() / speeds.len().max(1) as f64;
                (
                    within,
                    format!(
                        "{} runs, t in [{tmin:.2}, {tmax:.2}] s, mean speed {vmean:.2} m/s",
                        times.len()
                    ),
                )
            }
            None => (false, "no straight-8m PF certificate".into()),
        };
        tally.line(4, ok, detail);
    }

    // 5. PF vs TT from matched far-from-goal starts: behind the reference and
    // no faster than it.
    {
        let (ok, detail) = match (&pf8, &tt8) {
            (Some(pf), Some(tt)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let states: Vec<[f64; 4]> = (0..20)
                    .map(|_| {
                        [
                            rng.gen_range(-0.05..0.05),
                            rng.gen_range(-0.05..0.05),
                            rng.gen_range(-0.45..-0.35),
                            rng.gen_range(-0.05..0.0),
                        ]
                    })
                    .collect();
                let sampler = InitialSampler::Fixed { states };
                let course = |l: &Leg| Course {
                    legs: vec![l.clone()],
                    laps: 3,
                    stop_after_x: Some(12.0),
                };
                let a = batch("straight-8m", &course(pf), &sampler, 20, 5);
                let b = batch("straight-8m", &course(tt), &sampler, 20, 5);
                let dv = |r: &TraceRecord| {
                    r.samples
                        .windows(2)
                        .map(|w| (w[1].v - w[0].v).abs())
                        .fold(0.0, f64::max)
                };
                let slower = a.iter().zip(&b).filter(|(p, t)| {
                    matches!((p.verdicts.t_star, t.verdicts.t_star), (Some(x), Some(y)) if x > y)
                });
                let smoother = a.iter().zip(&b).filter(|(p, t)| dv(p) < dv(t)).count();
                let slower = slower.count();
                (
                    slower == 20 && smoother == 20,
                    format!("PF slower in {slower}/20, PF smoother in {smoother}/20"),
                )
            }
            _ => (false, "straight-8m PF or TT certificate missing".into()),
        };
        tally.line(5, ok, detail);
    }

    // 6. Circle: PF at pi/2, five safe laps, PF at 2 pi; 10 pi attempted.
    {
        let slow = runs.id("circular", Mode::Pf).leg();
        let fast_found = found(runs.id("circular-fast", Mode::Pf));
        let laps_ok = slow.as_ref().is_some_and(|leg| {
            let course = Course {
                legs: vec![leg.clone()],
                laps: 5,
                stop_after_x: None,
            };
            let traces = batch("circular", &course, &InitialSampler::InitialSet, 20, 6);
            traces.iter().all(|r| {
                r.verdicts.stayed_safe && r.verdicts.reached_goal && r.verdicts.legs_completed == 5
            })
        });
        let mut very_fast = builtin("circular-fast").expect("catalog id");
        very_fast.id = "circular-10pi".into();
        very_fast.reference = ReferenceSegment::new(
            PathShape::Circle {
                center: [0.0, 0.0],
                radius: 1.5,
                rate: 20.0 * PI / 3.0,
                phase: 0.0,
            },
            0.3,
        )
        .expect("valid circle");
        let vf = runs.get(very_fast, Mode::Pf).report.outcome;
        tally.line(
            6,
            slow.is_some() && laps_ok && fast_found,
            format!(
                "pi/2 found={}, 5 laps safe={laps_ok}, 2 pi found={fast_found}; 10 pi (not gated): {vf:?}",
                slow.is_some()
            ),
        );
    }

    // 7. Oval halves chain in both directions and drive two safe laps.
    {
        let h1 = runs.id("oval-half-1", Mode::Pf).leg();
        let h2 = runs.id("oval-half-2", Mode::Pf).leg();
        let s1 = builtin("oval-half-1").expect("catalog id");
        let s2 = builtin("oval-half-2").expect("catalog id");
        let moved = |a: &Scenario, b: &Scenario| {
            b.reference
                .with_frame(b.reference.frame_starting_at(&a.reference.end().state))
        };
        let f12 = concatenation_failures(&s1, &moved(&s1, &s2), &s2.regions.initial, 1000);
        let f21 = concatenation_failures(&s2, &moved(&s2, &s1), &s1.regions.initial, 1000);
        let (ok, detail) = match (h1, h2) {
            (Some(a), Some(b)) => {
                let course = Course {
                    legs: vec![a, b],
                    laps: 2,
                    stop_after_x: None,
                };
                let traces = batch("oval", &course, &InitialSampler::InitialSet, 20, 7);
                let safe = traces
                    .iter()
                    .filter(|r| r.verdicts.stayed_safe && r.verdicts.reached_goal)
                    .count();
                (
                    f12 == 0 && f21 == 0 && safe == 20,
                    format!("chain failures {f12}+{f21} of 2000, 2-lap runs safe {safe}/20"),
                )
            }
            _ => (false, "an oval half has no certificate".into()),
        };
        tally.line(7, ok, detail);
    }

    // 8. Obstacle: PF found, clearance kept from the funnel head.
    {
        let (ok, detail) = match runs.id("obstacle", Mode::Pf).leg() {
            Some(leg) => {
                let course = Course::single(leg);
                let inside = batch("obstacle", &course, &InitialSampler::InitialSet, 50, 8);
                let clear = inside
                    .iter()
                    .filter(|r| r.verdicts.min_obstacle_clearance.is_some_and(|c| c > 0.0))
                    .count();
                let outside = batch(
                    "obstacle",
                    &course,
                    &InitialSampler::OutsideHead { radius: 0.8 },
                    50,
                    8,
                );
                let out_clear = outside
                    .iter()
                    .filter(|r| r.verdicts.min_obstacle_clearance.is_some_and(|c| c > 0.0))
                    .count();
                let out_goal = outside.iter().filter(|r| r.verdicts.reached_goal).count();
                (
                    clear == 50,
                    format!("inside head clear {clear}/50; outside head (reported only) clear {out_clear}/50, goal {out_goal}/50"),
                )
            }
            None => (false, "no obstacle PF certificate".into()),
        };
        tally.line(8, ok, detail);
    }

    // 9. Oracle equivalences.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let problem = builtin("straight-4m")
            .expect("catalog id")
            .default_problem(Mode::Pf)
            .expect("problem");
        let boxes = [problem.inputs, problem.inputs.with_fixed_timing()];
        let mismatches = (0..10_000)
            .filter(|k| {
                let bx = &boxes[k % 2];
                let a: f64 = rng.gen_range(-5.0..5.0);
                let g = Vec3::from_fn(|_, _| rng.gen_range(-5.0..5.0));
                let exact = bx.minimize_affine(a, &g).0;
                let enumerated = bx
                    .vertices()
                    .iter()
                    .map(|v| a + g.dot(v))
                    .fold(f64::INFINITY, f64::min);
                (exact - enumerated).abs() > 1e-12 * (1.0 + enumerated.abs())
            })
            .count();

        let mut lp_worst: f64 = 0.0;
        for _ in 0..100 {
            let rows: Vec<(Vec<f64>, f64)> = (0..33)
                .map(|_| {
                    (
                        (0..11).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        rng.gen_range(0.05..1.0),
                    )
                })
                .collect();
            let lp = match chebyshev_center(&rows, 11, 1.0).expect("LP solves") {
                Center::Found { radius, .. } => radius,
                Center::Infeasible { radius } => radius,
            };
            let (_, ell) = max_min_slack_ellipsoid(&rows, 11, 1.0, 6000);
            lp_worst = lp_worst.max((lp - ell).abs());
        }

        let mut rk_worst: f64 = 0.0;
        for _ in 0..4 {
            let s0 = InertialState::new(
                rng.gen_range(-PI..PI),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..3.0),
            );
            let u = ControlInput::new(1.0, rng.gen_range(-0.7..0.7), rng.gen_range(-4.0..4.0));
            let sched = PiecewiseConstant::constant(u);
            let rk = integrate(&s0, &sched, 0.01, 1.0, DEFAULT_WHEELBASE, 1e6).expect("integrates");
            let h: f64 = 2e-7;
            let w = u.gamma.tan() / DEFAULT_WHEELBASE;
            let mut x = s0.to_vec();
            for _ in 0..(1.0 / h).round() as usize {
                let d = Vec4::new(x[3] * w, -x[3] * x[0].sin(), x[3] * x[0].cos(), u.thrust);
                x += d * h;
            }
            rk_worst = rk_worst.max((rk.last().to_vec() - x).abs().max());
        }

        let circle = builtin("circular").expect("catalog id").reference;
        let mut frame_worst: f64 = 0.0;
        for _ in 0..10_000 {
            let th = rng.gen_range(0.0..circle.t_end);
            let s = InertialState::new(
                rng.gen_range(-PI..PI),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let back = to_inertial(&to_body(&s, th, &circle).expect("in domain"), th, &circle)
                .expect("in domain");
            frame_worst = frame_worst.max((back.to_vec() - s.to_vec()).abs().max());
        }
        let ok = mismatches == 0 && lp_worst <= 1e-3 && rk_worst < 1e-5 && frame_worst <= 1e-12;
        tally.line(
            9,
            ok,
            format!(
                "(i) {mismatches} mismatches of 10^4, (ii) LP vs ellipsoid {lp_worst:.1e}, (iii) RK4 vs Euler {rk_worst:.1e}, (iv) frame round trip {frame_worst:.1e}"
            ),
        );
    }

    // 10. Min-norm QP control decreases V at sampled band states.
    {
        let mut ok = true;
        let mut total = 0;
        let mut violations = 0;
        let mut detail = Vec::new();
        for r in runs.0.values().filter(|r| found(r)) {
            let v = r.funnel().expect("found");
            let oracle = FunnelOracle::new(v, &r.problem);
            let halton = Halton::new(oracle.sample_dim(Condition::D), 10);
            let mut n = 0;
            let mut bad = 0;
            let mut i = 0u64;
            while n < 1000 && i < 200_000 {
                i += 1;
                let Some((th, b)) = oracle.sample(Condition::D, &halton.point(i)) else {
                    continue;
                };
                if !v.in_domain(Condition::D, th, &b, &r.problem) {
                    continue;
                }
                n += 1;
                let u = extract_control(v, th, &b, &r.problem, Strategy::MinNormQp);
                let (a, g) = v.lie_affine_at(&b, &r.problem.reference.point(th));
                if a + g.dot(&Vector3::from(u)) > -v.lambda + 1e-9 {
                    bad += 1;
                }
            }
            ok &= n == 1000 && bad == 0;
            total += n;
            violations += bad;
            if n < 1000 {
                detail.push(format!(
                    "{} {} only {n} band states",
                    r.scenario.id,
                    r.problem.mode.label()
                ));
            }
        }
        detail.insert(
            0,
            format!("{violations} violations over {total} band states"),
        );
        tally.line(10, ok && total > 0, detail.join("; "));
    }

    if tally.failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {:?}", tally.failed);
    }
    if strict && !tally.failed.is_empty() {
        std::process::exit(1);
    }
}
