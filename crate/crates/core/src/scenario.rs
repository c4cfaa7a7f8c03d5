//! Built-in segments: straight lines, a circle, the two halves of an oval and
//! an obstacle bypass.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::dynamics::{Vec4, DEFAULT_WHEELBASE};
use crate::error::{Error, Result};
use crate::problem::{Mode, SegmentProblem};
use crate::reference::{body_from_ref, inertial_from_ref, PathShape, ReferenceSegment};
use crate::region::{Polygon, Region, RegionSpec};

pub const DEFAULT_U0_BOUNDS: (f64, f64) = (0.2, 2.0);
/// Footprint radius of the car.
pub const FOOTPRINT_RADIUS: f64 = 0.25;
/// Distance before the obstacle at which the bypass segment starts.
pub const ENGAGE_OFFSET: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub reference: ReferenceSegment,
    pub regions: RegionSpec,
}

impl Scenario {
    pub fn problem(
        &self,
        u0_bounds: (f64, f64),
        wheelbase: f64,
        mode: Mode,
    ) -> Result<SegmentProblem> {
        SegmentProblem::new(
            self.reference.clone(),
            self.regions.clone(),
            u0_bounds,
            wheelbase,
            mode,
        )
    }

    pub fn default_problem(&self, mode: Mode) -> Result<SegmentProblem> {
        self.problem(DEFAULT_U0_BOUNDS, DEFAULT_WHEELBASE, mode)
    }
}

fn tube(lower: [f64; 4], upper: [f64; 4]) -> Region {
    Region::Box { lower, upper }
}

fn straight_tube() -> Region {
    tube([-1.0, -1.0, -1.0, -3.0], [1.0, 1.0, 1.0, 3.0])
}

/// Heading deviation in `[-1, 1]`, lateral offset in `[-3, 3]`, the other
/// coordinates padded to `[-3, 3]`.
fn curved_tube() -> Region {
    tube([-1.0, -3.0, -3.0, -3.0], [1.0, 3.0, 3.0, 3.0])
}

fn line(start_x: f64, t_end: f64) -> ReferenceSegment {
    ReferenceSegment::new(
        PathShape::Line {
            start: [start_x, 0.0],
            heading: -FRAC_PI_2,
            speed: 2.0,
        },
        t_end,
    )
    .expect("valid line")
}

fn restricted_set() -> Region {
    let mut q = [[0.0; 4]; 4];
    for (i, w) in [4.0, 4.0, 4.0, 16.0].into_iter().enumerate() {
        q[i][i] = w;
    }
    Region::Ellipsoid { q, level: 1.0 }
}

/// Square obstacle centred on the bypass midpoint.
pub fn obstacle_polygon() -> Polygon {
    Polygon::rectangle([0.0, 0.0], [0.15, 0.15])
}

pub fn catalog() -> Vec<Scenario> {
    let oval = |phase: f64| {
        ReferenceSegment::new(
            PathShape::EllipseArc {
                center: [0.0, 0.0],
                semi_x: 2.0,
                semi_y: 1.0,
                rate: PI / 3.0,
                phase,
            },
            3.0,
        )
        .expect("valid arc")
    };
    vec![
        Scenario {
            id: "straight-4m".into(),
            description: "4 m straight line at 2 m/s from x = -2".into(),
            reference: line(-2.0, 2.0),
            regions: RegionSpec {
                initial: Region::ball(0.5),
                goal: Region::ball(0.5),
                safe: straight_tube(),
            },
        },
        Scenario {
            id: "straight-8m".into(),
            description: "8 m straight line at 2 m/s from x = -4".into(),
            reference: line(-4.0, 4.0),
            regions: RegionSpec {
                initial: Region::ball(0.5),
                goal: Region::ball(0.5),
                safe: straight_tube(),
            },
        },
        Scenario {
            id: "straight-restricted".into(),
            description: "8 m straight line with a narrow speed tube and ellipsoidal end sets"
                .into(),
            reference: line(-4.0, 4.0),
            regions: RegionSpec {
                initial: restricted_set(),
                goal: restricted_set(),
                safe: tube([-1.0, -1.0, -1.0, -0.5], [1.0, 1.0, 1.0, 0.5]),
            },
        },
        Scenario {
            id: "circular".into(),
            description: "one lap of a 1.5 m circle at pi/2 m/s".into(),
            reference: ReferenceSegment::new(
                PathShape::Circle {
                    center: [0.0, 0.0],
                    radius: 1.5,
                    rate: PI / 3.0,
                    phase: 0.0,
                },
                6.0,
            )
            .expect("valid circle"),
            regions: RegionSpec {
                initial: Region::ball(0.5),
                goal: Region::ball(0.5),
                safe: curved_tube(),
            },
        },
        Scenario {
            id: "circular-fast".into(),
            description: "one lap of a 1.5 m circle at 2 pi m/s".into(),
            reference: ReferenceSegment::new(
                PathShape::Circle {
                    center: [0.0, 0.0],
                    radius: 1.5,
                    rate: 4.0 * PI / 3.0,
                    phase: 0.0,
                },
                1.5,
            )
            .expect("valid circle"),
            regions: RegionSpec {
                initial: Region::ball(0.5),
                goal: Region::ball(0.5),
                safe: curved_tube(),
            },
        },
        Scenario {
            id: "oval-half-1".into(),
            description: "upper half of the oval x^2/4 + y^2 = 1, from (2, 0) to (-2, 0)".into(),
            reference: oval(0.0),
            regions: RegionSpec {
                initial: Region::ball(0.5),
                goal: Region::ball(0.5),
                safe: curved_tube(),
            },
        },
        Scenario {
            id: "oval-half-2".into(),
            description: "lower half of the oval x^2/4 + y^2 = 1, from (-2, 0) to (2, 0)".into(),
            reference: oval(PI),
            regions: RegionSpec {
                initial: Region::ball(0.5),
                goal: Region::ball(0.5),
                safe: curved_tube(),
            },
        },
        Scenario {
            id: "obstacle".into(),
            description: "bypass of a square obstacle at the origin, footprint radius 0.25 m"
                .into(),
            reference: ReferenceSegment::new(
                PathShape::Bump {
                    start: [-ENGAGE_OFFSET, 0.0],
                    x_rate: 2.0,
                    amplitude: 0.9,
                    span: 1.5,
                },
                1.5,
            )
            .expect("valid bump"),
            regions: RegionSpec {
                initial: Region::ball(0.25),
                goal: Region::ball(0.5),
                safe: Region::ObstacleComplement {
                    polygon: obstacle_polygon(),
                    inflation: FOOTPRINT_RADIUS,
                },
            },
        },
    ]
}

pub fn builtin(id: &str) -> Result<Scenario> {
    catalog().into_iter().find(|s| s.id == id).ok_or_else(|| {
        let ids: Vec<String> = catalog().into_iter().map(|s| s.id).collect();
        Error::Config(format!(
            "unknown scenario '{id}' (known: {})",
            ids.join(", ")
        ))
    })
}

/// Check `G_1 ⊆ I_2` for consecutive segments by mapping `n` boundary
/// points of the first goal set through the inertial frame. Returns the
/// number of boundary points that fall outside the next initial set.
pub fn concatenation_failures(
    first: &Scenario,
    second: &ReferenceSegment,
    next_initial: &Region,
    n: usize,
) -> usize {
    let end = first.reference.end();
    let start = second.start();
    first
        .regions
        .goal
        .boundary_samples(n, 17)
        .iter()
        .filter(|b| {
            let s = inertial_from_ref(b, &end);
            let b2: Vec4 = body_from_ref(&s, &start);
            // Boundary-to-boundary maps may land exactly on the boundary.
            next_initial.level(&b2) > 1.0 + 1e-9
        })
        .count()
}
