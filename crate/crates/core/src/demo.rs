//! Finite-horizon MPC demonstrator.
//!
//! Given a deviation state `(theta, b)`, optimise a piecewise-constant input
//! sequence over the deviation dynamics and return its first action. The
//! solver is multi-start projected gradient descent in box-normalised input
//! coordinates, with forward-difference gradients and Armijo backtracking.
//!
//! Rollouts that run past the end of the segment follow the analytic
//! continuation of the reference, so states near the end still see a full
//! horizon.

use nalgebra::SVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_step, InputBox, Vec3, Vec4};
use crate::error::{Error, Result};
use crate::problem::SegmentProblem;
use crate::reference::{body_field_affine_at, ReferenceSegment};

type Vec5 = SVector<f64, 5>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of the stage cost on `b`.
    pub q_b: [f64; 4],
    /// Diagonal of the input cost on `(u0, gamma, thrust)` offsets from the
    /// reference inputs.
    pub r: [f64; 3],
    /// Terminal cost is `terminal_scale * q_b`.
    pub terminal_scale: f64,
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.05,
            q_b: [1.0, 1.0, 1.0, 0.5],
            r: [0.1, 0.1, 0.01],
            terminal_scale: 10.0,
            restarts: 4,
            max_iters: 40,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let psd = self
            .q_b
            .iter()
            .chain(&self.r)
            .all(|x| *x >= 0.0 && x.is_finite());
        if self.horizon < 2
            || !(self.dt > 0.0)
            || !psd
            || !(self.terminal_scale >= 0.0)
            || self.restarts == 0
        {
            return Err(Error::Config(
                "MPC needs horizon >= 2, dt > 0, non-negative weights and at least one restart"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    /// First action in affine coordinates `(u0, w, thrust)`.
    pub input: Vec3,
    pub cost: f64,
    /// Cost of the restart seeded with the reference inputs, before optimisation.
    pub reference_cost: f64,
    pub sequence: Vec<Vec3>,
}

struct Rollout<'a> {
    reference: &'a ReferenceSegment,
    wheelbase: f64,
    inputs: &'a InputBox,
    cfg: &'a MpcConfig,
    z0: Vec5,
}

impl Rollout<'_> {
    fn nominal(&self, th: f64) -> Vec3 {
        let mut v = self.reference.point(th).nominal_input();
        if self.inputs.lower[0] == self.inputs.upper[0] {
            v[0] = self.inputs.lower[0];
        }
        v
    }

    fn stage(&self, b: &Vec4) -> f64 {
        (0..4).map(|i| self.cfg.q_b[i] * b[i] * b[i]).sum()
    }

    fn input_cost(&self, v: &Vec3, nom: &Vec3) -> f64 {
        let l = self.wheelbase;
        self.cfg.r[0] * (v[0] - nom[0]).powi(2)
            + self.cfg.r[1] * ((l * v[1]).atan() - (l * nom[1]).atan()).powi(2)
            + self.cfg.r[2] * (v[2] - nom[2]).powi(2)
    }

    /// Total cost and visited states.
    fn run(&self, seq: &[Vec3]) -> Option<(f64, Vec<Vec5>)> {
        let mut z = self.z0;
        let mut states = vec![z];
        let mut cost = 0.0;
        for v in seq {
            let b = z.fixed_rows::<4>(1).into_owned();
            cost += self.stage(&b) + self.input_cost(v, &self.nominal(z[0]));
            z = rk4_step(&z, self.cfg.dt, |s| {
                let r = self.reference.point(s[0]);
                let b = s.fixed_rows::<4>(1).into_owned();
                let (drift, m) = body_field_affine_at(&b, &r);
                let db = drift + m * v;
                Vec5::new(v[0], db[0], db[1], db[2], db[3])
            });
            if !z.iter().all(|x| x.is_finite()) {
                return None;
            }
            states.push(z);
        }
        let b = z.fixed_rows::<4>(1).into_owned();
        cost += self.cfg.terminal_scale * self.stage(&b);
        cost.is_finite().then_some((cost, states))
    }

    fn decode(&self, x: &[f64]) -> Vec<Vec3> {
        let (lo, hi) = (self.inputs.lower, self.inputs.upper);
        x.chunks(3)
            .map(|c| Vec3::from_fn(|i, _| lo[i] + c[i] * (hi[i] - lo[i])))
            .collect()
    }

    fn encode(&self, seq: &[Vec3]) -> Vec<f64> {
        let (lo, hi) = (self.inputs.lower, self.inputs.upper);
        seq.iter()
            .flat_map(|v| {
                (0..3).map(move |i| {
                    if hi[i] > lo[i] {
                        ((v[i] - lo[i]) / (hi[i] - lo[i])).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }

    fn cost_of(&self, x: &[f64]) -> Option<f64> {
        self.run(&self.decode(x)).map(|r| r.0)
    }

    /// Projected gradient descent; returns `(cost, x)` or `None` on a
    /// non-finite rollout.
    fn optimise(&self, mut x: Vec<f64>) -> Option<(f64, Vec<f64>)> {
        let (lo, hi) = (self.inputs.lower, self.inputs.upper);
        let active: Vec<bool> = (0..x.len()).map(|k| hi[k % 3] > lo[k % 3]).collect();
        let mut f = self.cost_of(&x)?;
        let mut step = 0.5;
        let h = 1e-6;
        for _ in 0..self.cfg.max_iters {
            let mut g = vec![0.0; x.len()];
            for k in 0..x.len() {
                if !active[k] {
                    continue;
                }
                let mut xp = x.clone();
                // Difference inward at the upper face so the probe stays feasible.
                let d = if x[k] + h <= 1.0 { h } else { -h };
                xp[k] += d;
                g[k] = (self.cost_of(&xp)? - f) / d;
            }
            let mut accepted = false;
            while step > 1e-8 {
                let xn: Vec<f64> = x
                    .iter()
                    .zip(&g)
                    .map(|(xi, gi)| (xi - step * gi).clamp(0.0, 1.0))
                    .collect();
                let decrease: f64 = g
                    .iter()
                    .zip(x.iter().zip(&xn))
                    .map(|(gi, (a, b))| gi * (a - b))
                    .sum();
                if let Some(fn_) = self.cost_of(&xn) {
                    if decrease > 0.0 && fn_ <= f - 1e-4 * decrease {
                        x = xn;
                        f = fn_;
                        accepted = true;
                        step *= 2.0;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Some((f, x))
    }
}

/// Demonstrate a control at deviation state `(theta, b)`.
pub fn demonstrate(
    problem: &SegmentProblem,
    th: f64,
    b: &Vec4,
    cfg: &MpcConfig,
    seed: u64,
) -> Result<Demonstration> {
    cfg.validate()?;
    problem.reference.check_theta(th)?;
    let ro = Rollout {
        reference: &problem.reference,
        wheelbase: problem.wheelbase,
        inputs: &problem.inputs,
        cfg,
        z0: Vec5::new(th, b[0], b[1], b[2], b[3]),
    };
    // Reference inputs along the nominal theta progression.
    let nominal_seq: Vec<Vec3> = (0..cfg.horizon)
        .map(|k| problem.inputs.clamp(&ro.nominal(th + k as f64 * cfg.dt)))
        .collect();
    let reference_cost = ro.run(&nominal_seq).map_or(f64::INFINITY, |r| r.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![ro.encode(&nominal_seq)];
    for _ in 1..cfg.restarts {
        starts.push((0..3 * cfg.horizon).map(|_| rng.gen::<f64>()).collect());
    }
    let results: Vec<Option<(f64, Vec<f64>)>> =
        starts.into_par_iter().map(|x| ro.optimise(x)).collect();
    let best = results
        .into_iter()
        .flatten()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .ok_or(Error::DemonstratorFailed)?;
    let sequence: Vec<Vec3> = ro
        .decode(&best.1)
        .iter()
        .map(|v| problem.inputs.clamp(v))
        .collect();
    Ok(Demonstration {
        input: sequence[0],
        cost: best.0,
        reference_cost,
        sequence,
    })
}

/// Roll out an input sequence from `(theta, b)`; returns the visited
/// `(theta, b)` pairs and the total cost.
pub fn rollout(
    problem: &SegmentProblem,
    th: f64,
    b: &Vec4,
    seq: &[Vec3],
    cfg: &MpcConfig,
) -> Option<(f64, Vec<(f64, Vec4)>)> {
    let ro = Rollout {
        reference: &problem.reference,
        wheelbase: problem.wheelbase,
        inputs: &problem.inputs,
        cfg,
        z0: Vec5::new(th, b[0], b[1], b[2], b[3]),
    };
    let (cost, states) = ro.run(seq)?;
    Some((
        cost,
        states
            .iter()
            .map(|z| (z[0], z.fixed_rows::<4>(1).into_owned()))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Mode;
    use crate::reference::{PathShape, ReferenceSegment};
    use crate::region::{Region, RegionSpec};
    use std::f64::consts::FRAC_PI_2;

    fn straight(mode: Mode) -> SegmentProblem {
        let reference = ReferenceSegment::new(
            PathShape::Line {
                start: [-2.0, 0.0],
                heading: -FRAC_PI_2,
                speed: 2.0,
            },
            4.0,
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

    #[test]
    fn zero_deviation_is_maintained() {
        let p = straight(Mode::Pf);
        let cfg = MpcConfig::default();
        let d = demonstrate(&p, 1.0, &Vec4::zeros(), &cfg, 3).unwrap();
        assert!(d.input[0] >= 0.2 && d.input[0] <= 2.0);
        let (_, states) = rollout(&p, 1.0, &Vec4::zeros(), &d.sequence, &cfg).unwrap();
        assert!(states.iter().all(|(_, b)| b.norm() <= 1e-3));
    }

    #[test]
    fn lateral_offset_shrinks_and_beats_coarse_grid() {
        let p = straight(Mode::Pf);
        let cfg = MpcConfig {
            horizon: 3,
            dt: 0.1,
            ..MpcConfig::default()
        };
        let b0 = Vec4::new(0.0, 0.3, 0.0, 0.0);
        let d = demonstrate(&p, 0.5, &b0, &cfg, 1).unwrap();
        let (_, states) = rollout(&p, 0.5, &b0, &d.sequence, &cfg).unwrap();
        assert!(states.last().unwrap().1.norm() < b0.norm());

        // Exhaustive search over five levels per input channel per step.
        let levels = |i: usize| {
            (0..5).map(move |k| {
                p.inputs.lower[i] + k as f64 * (p.inputs.upper[i] - p.inputs.lower[i]) / 4.0
            })
        };
        let grid: Vec<Vec3> = levels(0)
            .flat_map(|a| levels(1).flat_map(move |w| levels(2).map(move |t| Vec3::new(a, w, t))))
            .collect();
        let mut best = f64::INFINITY;
        for v0 in &grid {
            for v1 in &grid {
                for v2 in &grid {
                    if let Some((c, _)) = rollout(&p, 0.5, &b0, &[*v0, *v1, *v2], &cfg) {
                        best = best.min(c);
                    }
                }
            }
        }
        assert!(d.cost <= best + 1e-9, "mpc {} grid {best}", d.cost);
    }

    #[test]
    fn never_worse_than_reference_inputs() {
        let p = straight(Mode::Tt);
        let cfg = MpcConfig::default();
        for (k, b) in [
            Vec4::new(0.2, -0.3, 0.1, 0.4),
            Vec4::new(-0.4, 0.0, 0.3, -0.2),
        ]
        .iter()
        .enumerate()
        {
            let d = demonstrate(&p, 0.3 * k as f64, b, &cfg, k as u64).unwrap();
            assert!(d.cost <= d.reference_cost);
            assert_eq!(d.input[0], 1.0);
            assert!(p.inputs.contains(&d.input));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let p = straight(Mode::Pf);
        let cfg = MpcConfig::default();
        let b = Vec4::new(0.1, 0.2, -0.1, 0.3);
        assert_eq!(
            demonstrate(&p, 2.0, &b, &cfg, 9).unwrap(),
            demonstrate(&p, 2.0, &b, &cfg, 9).unwrap()
        );
    }

    #[test]
    fn rollout_continues_past_segment_end() {
        let p = straight(Mode::Pf);
        let cfg = MpcConfig::default();
        let seq = vec![Vec3::new(2.0, 0.0, 0.0); cfg.horizon];
        let (_, states) = rollout(&p, 3.9, &Vec4::zeros(), &seq, &cfg).unwrap();
        assert_eq!(states.len(), cfg.horizon + 1);
        assert!(states.last().unwrap().0 > 4.0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let p = straight(Mode::Pf);
        let cfg = MpcConfig {
            horizon: 1,
            ..MpcConfig::default()
        };
        assert!(matches!(
            demonstrate(&p, 0.0, &Vec4::zeros(), &cfg, 0),
            Err(Error::Config(_))
        ));
    }
}
