use std::sync::OnceLock;

use pathfunnel::control::{extract_control, Strategy};
use pathfunnel::dynamics::{bicycle_vector_field, rk4_step, ControlInput, InertialState, Vec4};
use pathfunnel::funnel::FunnelFunction;
use pathfunnel::learn::{synthesize, Outcome, SynthesisConfig};
use pathfunnel::problem::{Mode, SegmentProblem};
use pathfunnel::reference::{to_body, to_inertial, BodyState};
use pathfunnel::scenario::builtin;
use pathfunnel::sim::{
    batch_experiment, read_trace_csv, recompute_verdicts, write_trace_csv, Course, Disturbance,
    InitialSampler, Leg, SimConfig,
};
use pathfunnel::verify::falsify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn found() -> &'static (SegmentProblem, FunnelFunction) {
    static CELL: OnceLock<(SegmentProblem, FunnelFunction)> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = builtin("straight-8m")
            .unwrap()
            .default_problem(Mode::Pf)
            .unwrap();
        let r = synthesize(&p, &SynthesisConfig::default(), 1).unwrap();
        assert_eq!(r.outcome, Outcome::Found);
        (p, r.funnel.unwrap())
    })
}

#[test]
fn synthesis_is_reproducible() {
    let p = builtin("circular")
        .unwrap()
        .default_problem(Mode::Pf)
        .unwrap();
    let a = synthesize(&p, &SynthesisConfig::default(), 4).unwrap();
    let b = synthesize(&p, &SynthesisConfig::default(), 4).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
}

#[test]
fn falsifier_finds_a_zeroed_coordinate() {
    let (p, v) = found();
    for k in 0..4 {
        let mut c = v.c;
        for j in 0..4 {
            c[(k, j)] = 0.0;
            c[(j, k)] = 0.0;
        }
        let broken = FunnelFunction { c, ..*v };
        for seed in 0..20 {
            let r = falsify(&broken, p, 10_000, seed).unwrap();
            assert!(!r.is_clean(), "coordinate {k} seed {seed}");
        }
    }
}

#[test]
fn one_controller_step_decreases_value_in_band() {
    let (p, v) = found();
    let dt = 0.01;
    let t_end = p.t_end();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 500 {
        let th = rng.gen_range(0.0..t_end - 0.05);
        let b = Vec4::from_fn(|_, _| rng.gen_range(-0.8..0.8));
        if !v.in_band(th, &b) || !p.regions.safe.contains(&b) {
            continue;
        }
        let u = extract_control(v, th, &b, p, Strategy::MinNormQp);
        let input = ControlInput::from_affine(&u, p.wheelbase);
        let s = to_inertial(&BodyState::from_vec(&b), th, &p.reference).unwrap();
        let next = rk4_step(&s.to_vec(), dt, |z| {
            bicycle_vector_field(&InertialState::from_vec(z), &input, p.wheelbase).unwrap()
        });
        let th_next = th + u[0] * dt;
        let b_next = to_body(&InertialState::from_vec(&next), th_next, &p.reference)
            .unwrap()
            .to_vec();
        let dv = v.eval(th_next, &b_next) - v.eval(th, &b);
        assert!(dv <= -0.5 * v.lambda * dt, "theta {th} b {b:?} dV {dv}");
        checked += 1;
    }
}

#[test]
fn batches_are_deterministic_and_verdicts_recompute_from_csv() {
    let (p, v) = found();
    let course = Course::single(Leg {
        funnel: *v,
        problem: p.clone(),
    });
    let cfg = SimConfig::default();
    let run = || {
        batch_experiment(
            "straight-8m",
            &course,
            &InitialSampler::InitialSet,
            8,
            3,
            &Disturbance::None,
            &cfg,
        )
        .unwrap()
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let dir = tempfile::tempdir().unwrap();
    for t in &a {
        let path = dir.path().join(format!("{}.csv", t.meta.run));
        write_trace_csv(t, &path).unwrap();
        let samples = read_trace_csv(&path).unwrap();
        assert_eq!(recompute_verdicts(&t.meta, &samples), t.verdicts);
        assert!(t.verdicts.reached_goal && t.verdicts.stayed_safe);
    }
}
