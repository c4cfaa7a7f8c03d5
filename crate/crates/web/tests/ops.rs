use pathfunnel_web::{certificate, certificate_ids, compare_modes, funnel_slice, simulate_run};

#[test]
fn bundled_certificates_load() {
    for id in certificate_ids() {
        let c = certificate(id).unwrap();
        c.problem().unwrap();
    }
    assert!(certificate("nope").is_err());
}

#[test]
fn simulate_reaches_goal_from_initial_set() {
    let r = simulate_run("straight-8m-pf", [0.0, 0.1, -0.1, 0.0], 1).unwrap();
    assert!(r.verdicts.reached_goal && r.verdicts.stayed_safe);
    assert_eq!(r.x.len(), r.t.len());
    let o = simulate_run("obstacle-pf", [0.0, 0.0, 0.0, 0.0], 1).unwrap();
    assert_eq!(o.obstacle.len(), 4);
    assert!(o.verdicts.min_obstacle_clearance.unwrap() > 0.0);
}

#[test]
fn slice_has_sublevel_set_at_center() {
    let s = funnel_slice("circular-pf", 0.0, 1.0, 21).unwrap();
    assert_eq!(s.value.len(), 21 * 21);
    assert!(s.value[10 * 21 + 10] < s.beta);
    assert!(funnel_slice("circular-pf", 99.0, 1.0, 21).is_err());
    assert!(funnel_slice("circular-pf", 0.0, 1.0, 1).is_err());
}

#[test]
fn pf_waits_where_tt_catches_up() {
    let c = compare_modes([0.0, 0.0, -0.4, -0.02]).unwrap();
    assert!(c.pf.verdicts.reached_goal && c.tt.verdicts.reached_goal);
    let dv = |v: &[f64]| {
        v.windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max)
    };
    assert!(dv(&c.pf.v) < dv(&c.tt.v));
}

#[test]
fn bad_inputs_are_errors() {
    assert!(simulate_run("straight-8m-pf", [f64::NAN, 0.0, 0.0, 0.0], 1).is_err());
    assert!(simulate_run("straight-8m-pf", [0.0; 4], 0).is_err());
}
