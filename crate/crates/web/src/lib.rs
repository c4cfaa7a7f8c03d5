//! Browser demo: closed-loop runs on bundled certificates, funnel slices and a
//! path-following versus trajectory-tracking comparison.

use pathfunnel::config::Certificate;
use pathfunnel::dynamics::{InertialState, Vec4};
use pathfunnel::problem::Mode;
use pathfunnel::reference::{to_inertial, BodyState};
use pathfunnel::region::Region;
use pathfunnel::sim::{run_closed_loop, Course, Disturbance, Leg, SimConfig, TraceMeta, Verdicts};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const BUNDLED: [(&str, &str); 4] = [
    (
        "straight-8m-pf",
        include_str!("../certificates/straight-8m-pf.cert.json"),
    ),
    (
        "straight-8m-tt",
        include_str!("../certificates/straight-8m-tt.cert.json"),
    ),
    (
        "circular-pf",
        include_str!("../certificates/circular-pf.cert.json"),
    ),
    (
        "obstacle-pf",
        include_str!("../certificates/obstacle-pf.cert.json"),
    ),
];

/// Horizon for browser runs.
const HORIZON: f64 = 30.0;
const MAX_LAPS: usize = 10;
const MAX_RESOLUTION: usize = 200;

pub fn certificate(id: &str) -> Result<Certificate, String> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(k, _)| *k == id)
        .ok_or_else(|| format!("unknown certificate '{id}'"))?;
    serde_json::from_str(text).map_err(|e| format!("{id}: {e}"))
}

pub fn certificate_ids() -> Vec<&'static str> {
    BUNDLED.iter().map(|(k, _)| *k).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Run {
    pub id: String,
    pub mode: Mode,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub value: Vec<f64>,
    /// Reference path of the first leg, for drawing.
    pub ref_x: Vec<f64>,
    pub ref_y: Vec<f64>,
    /// Obstacle outline, if any.
    pub obstacle: Vec<[f64; 2]>,
    pub verdicts: Verdicts,
}

fn leg(cert: &Certificate) -> Result<Leg, String> {
    Ok(Leg {
        funnel: cert.funnel,
        problem: cert.problem().map_err(|e| e.to_string())?,
    })
}

/// One closed-loop run from body deviation `b0` at the start of the segment.
pub fn simulate_run(id: &str, b0: [f64; 4], laps: usize) -> Result<Run, String> {
    if !(1..=MAX_LAPS).contains(&laps) {
        return Err(format!("laps must be in 1..={MAX_LAPS}"));
    }
    if !b0.iter().all(|x| x.is_finite()) {
        return Err("initial deviation must be finite".into());
    }
    let cert = certificate(id)?;
    let leg = leg(&cert)?;
    let reference = leg.problem.reference.clone();
    let x0 = to_inertial(&BodyState::from_vec(&Vec4::from(b0)), 0.0, &reference)
        .map_err(|e| e.to_string())?;
    let course = Course {
        legs: vec![leg.clone()],
        laps,
        stop_after_x: None,
    };
    let cfg = SimConfig {
        horizon: HORIZON,
        ..SimConfig::default()
    };
    let meta = TraceMeta {
        scenario: id.into(),
        mode: cert.mode,
        run: 0,
        seed: 0,
        beta: leg.funnel.beta,
        total_legs: laps,
        stop_x: None,
        divergence_bound: cfg.divergence_bound,
        initial_body: b0,
    };
    let trace =
        run_closed_loop(&course, &x0, &Disturbance::None, &cfg, meta).map_err(|e| e.to_string())?;
    let n = 200;
    let (ref_x, ref_y) = (0..=n)
        .map(|k| {
            let s: InertialState = reference.point(reference.t_end * k as f64 / n as f64).state;
            (s.x, s.y)
        })
        .unzip();
    let obstacle = match &leg.problem.regions.safe {
        Region::ObstacleComplement { polygon, .. } => polygon.vertices.clone(),
        _ => Vec::new(),
    };
    let s = &trace.samples;
    Ok(Run {
        id: id.into(),
        mode: cert.mode,
        t: s.iter().map(|r| r.t).collect(),
        x: s.iter().map(|r| r.x).collect(),
        y: s.iter().map(|r| r.y).collect(),
        v: s.iter().map(|r| r.v).collect(),
        value: s.iter().map(|r| r.value).collect(),
        ref_x,
        ref_y,
        obstacle,
        verdicts: trace.verdicts,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Slice {
    pub theta: f64,
    pub beta: f64,
    pub beta_lower: f64,
    /// Cross-track axis (`b_x`) samples.
    pub lateral: Vec<f64>,
    /// Along-track axis (`b_y`) samples.
    pub along: Vec<f64>,
    /// Row-major `V`, rows over `along`.
    pub value: Vec<f64>,
}

/// `V(theta, b)` on the position plane with heading and speed deviation zero.
pub fn funnel_slice(
    id: &str,
    theta: f64,
    half_width: f64,
    resolution: usize,
) -> Result<Slice, String> {
    if !(2..=MAX_RESOLUTION).contains(&resolution) {
        return Err(format!("resolution must be in 2..={MAX_RESOLUTION}"));
    }
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err("half width must be positive".into());
    }
    let cert = certificate(id)?;
    let t_end = cert.scenario.reference.t_end;
    if !(0.0..=t_end).contains(&theta) {
        return Err(format!("theta must be in [0, {t_end}]"));
    }
    let axis: Vec<f64> = (0..resolution)
        .map(|k| -half_width + 2.0 * half_width * k as f64 / (resolution - 1) as f64)
        .collect();
    let mut value = Vec::with_capacity(resolution * resolution);
    for &by in &axis {
        for &bx in &axis {
            value.push(cert.funnel.eval(theta, &Vec4::new(0.0, bx, by, 0.0)));
        }
    }
    Ok(Slice {
        theta,
        beta: cert.funnel.beta,
        beta_lower: cert.funnel.beta_lower,
        lateral: axis.clone(),
        along: axis,
        value,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub pf: Run,
    pub tt: Run,
}

/// The same start on the straight segment under both timing modes.
pub fn compare_modes(b0: [f64; 4]) -> Result<Comparison, String> {
    Ok(Comparison {
        pf: simulate_run("straight-8m-pf", b0, 1)?,
        tt: simulate_run("straight-8m-tt", b0, 1)?,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<JsValue, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e))?;
    serde_wasm_bindgen::to_value(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

fn body(b: &[f64]) -> Result<[f64; 4], String> {
    b.try_into()
        .map_err(|_| format!("expected 4 deviation components, got {}", b.len()))
}

#[wasm_bindgen(js_name = certificates)]
pub fn js_certificates() -> Result<JsValue, JsValue> {
    to_js(Ok(certificate_ids()))
}

#[wasm_bindgen(js_name = simulate)]
pub fn js_simulate(id: &str, b0: &[f64], laps: usize) -> Result<JsValue, JsValue> {
    to_js(body(b0).and_then(|b| simulate_run(id, b, laps)))
}

#[wasm_bindgen(js_name = funnelSlice)]
pub fn js_funnel_slice(
    id: &str,
    theta: f64,
    half_width: f64,
    resolution: usize,
) -> Result<JsValue, JsValue> {
    to_js(funnel_slice(id, theta, half_width, resolution))
}

#[wasm_bindgen(js_name = compareModes)]
pub fn js_compare_modes(b0: &[f64]) -> Result<JsValue, JsValue> {
    to_js(body(b0).and_then(compare_modes))
}
