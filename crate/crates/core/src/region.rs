//! Initial, goal and safe sets.
//!
//! Ball, box and ellipsoid regions live in body-frame deviation coordinates
//! `(alpha_R, x_R, y_R, v_R)`. The inflated-obstacle complement lives in the
//! inertial plane and only constrains position; as a safe set it is mapped
//! through the reference at each `theta`.

use std::f64::consts::TAU;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::dynamics::Vec4;
use crate::error::{Error, Result};
use crate::reference::{inertial_from_ref, ReferenceSegment};
use crate::sampling::{unit_sphere4, Halton};

/// Convex polygon, counter-clockwise after validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(mut vertices: Vec<[f64; 2]>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidRegion(
                "polygon needs at least three vertices".into(),
            ));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidRegion("polygon vertex is not finite".into()));
        }
        let area = signed_area(&vertices);
        if area.abs() < 1e-12 {
            return Err(Error::InvalidRegion("polygon has zero area".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        for i in 0..n {
            let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross < -1e-12 {
                return Err(Error::InvalidRegion(
                    "obstacle polygon must be convex".into(),
                ));
            }
        }
        Ok(Self { vertices })
    }

    pub fn rectangle(center: [f64; 2], half: [f64; 2]) -> Self {
        let [cx, cy] = center;
        let [hx, hy] = half;
        Self {
            vertices: vec![
                [cx - hx, cy - hy],
                [cx + hx, cy - hy],
                [cx + hx, cy + hy],
                [cx - hx, cy + hy],
            ],
        }
    }

    fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.edges()
            .all(|(a, b)| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0)
    }

    /// Euclidean distance to the polygon (zero inside).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        self.edges()
            .map(|(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    fn perimeter(&self) -> f64 {
        self.edges()
            .map(|(a, b)| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt())
            .sum()
    }

    /// Point on the boundary of the polygon grown by `rho`, at fraction `u`
    /// of the offset curve's length (straight runs, then vertex arcs).
    pub fn offset_point(&self, rho: f64, u: f64) -> [f64; 2] {
        let total = self.perimeter() + TAU * rho;
        let mut s = u.clamp(0.0, 1.0) * total;
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = (dx * dx + dy * dy).sqrt();
            let normal = [dy / len, -dx / len];
            if s <= len {
                let t = s / len;
                return [
                    a[0] + t * dx + rho * normal[0],
                    a[1] + t * dy + rho * normal[1],
                ];
            }
            s -= len;
            // Arc around vertex b from this edge's normal to the next edge's.
            let c = self.vertices[(i + 2) % n];
            let (ex, ey) = (c[0] - b[0], c[1] - b[1]);
            let elen = (ex * ex + ey * ey).sqrt();
            let next = [ey / elen, -ex / elen];
            let a0 = normal[1].atan2(normal[0]);
            let mut sweep = next[1].atan2(next[0]) - a0;
            while sweep < 0.0 {
                sweep += TAU;
            }
            let arc = rho * sweep;
            if s <= arc || i == n - 1 {
                let ang = a0
                    + if arc > 0.0 {
                        (s / arc).min(1.0) * sweep
                    } else {
                        0.0
                    };
                return [b[0] + rho * ang.cos(), b[1] + rho * ang.sin()];
            }
            s -= arc;
        }
        unreachable!("offset curve parameter exhausted")
    }
}

fn signed_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    0.5 * (0..n)
        .map(|i| v[i][0] * v[(i + 1) % n][1] - v[(i + 1) % n][0] * v[i][1])
        .sum::<f64>()
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Region {
    Ball {
        #[serde(default)]
        center: [f64; 4],
        radius: f64,
    },
    Box {
        lower: [f64; 4],
        upper: [f64; 4],
    },
    /// `{ b : b^T Q b <= level }`, `Q` given row-major.
    Ellipsoid {
        q: [[f64; 4]; 4],
        level: f64,
    },
    /// Positions whose distance to the polygon exceeds `inflation`.
    ObstacleComplement {
        polygon: Polygon,
        inflation: f64,
    },
}

impl Region {
    pub fn ball(radius: f64) -> Self {
        Region::Ball {
            center: [0.0; 4],
            radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Region::Ball { radius, center } => {
                if !(*radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidRegion(format!(
                        "ball radius must be positive, got {radius}"
                    )));
                }
            }
            Region::Box { lower, upper } => {
                if (0..4).any(|i| !(lower[i] < upper[i])) {
                    return Err(Error::InvalidRegion(
                        "box needs lower < upper in every coordinate".into(),
                    ));
                }
            }
            Region::Ellipsoid { q, level } => {
                if !(*level > 0.0) {
                    return Err(Error::InvalidRegion(format!(
                        "ellipsoid level must be positive, got {level}"
                    )));
                }
                let m = Matrix4::from_fn(|i, j| q[i][j]);
                if (m - m.transpose()).abs().max() > 1e-12 || m.cholesky().is_none() {
                    return Err(Error::InvalidRegion(
                        "ellipsoid form must be symmetric positive definite".into(),
                    ));
                }
            }
            Region::ObstacleComplement { polygon, inflation } => {
                Polygon::new(polygon.vertices.clone())?;
                if !(*inflation >= 0.0) {
                    return Err(Error::InvalidRegion(format!(
                        "inflation must be non-negative, got {inflation}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_obstacle(&self) -> bool {
        matches!(self, Region::ObstacleComplement { .. })
    }

    /// Membership. Ball, box and ellipsoid are closed; the obstacle
    /// complement is open and reads the position from components 1 and 2.
    pub fn contains(&self, p: &Vec4) -> bool {
        let level = self.level(p);
        if self.is_obstacle() {
            level < 1.0
        } else {
            level <= 1.0
        }
    }

    pub fn contains_interior(&self, p: &Vec4) -> bool {
        self.level(p) < 1.0
    }

    /// Gauge-like value: `< 1` interior, `== 1` boundary, `> 1` outside.
    /// For the obstacle complement this is `1 - clearance`.
    pub fn level(&self, p: &Vec4) -> f64 {
        match self {
            Region::Ball { center, radius } => (p - Vec4::from(*center)).norm() / radius,
            Region::Box { lower, upper } => (0..4)
                .map(|i| {
                    let mid = 0.5 * (lower[i] + upper[i]);
                    let half = 0.5 * (upper[i] - lower[i]);
                    (p[i] - mid).abs() / half
                })
                .fold(0.0, f64::max),
            Region::Ellipsoid { q, level } => {
                let m = Matrix4::from_fn(|i, j| q[i][j]);
                ((p.transpose() * m * p)[0] / level).sqrt()
            }
            Region::ObstacleComplement { polygon, inflation } => {
                1.0 + inflation - polygon.distance([p[1], p[2]])
            }
        }
    }

    /// Map a unit-cube point to the region boundary (body regions), or to
    /// the inflated obstacle boundary in the plane (obstacle complement;
    /// heading and speed components are zero).
    pub fn boundary_point(&self, u: &[f64]) -> Vec4 {
        match self {
            Region::Ball { center, radius } => {
                Vec4::from(*center) + unit_sphere4(&u[1..4]) * *radius
            }
            Region::Box { lower, upper } => {
                let face = ((u[0] * 8.0) as usize).min(7);
                let (axis, high) = (face / 2, face % 2 == 1);
                let mut k = 1;
                Vec4::from_fn(|i, _| {
                    if i == axis {
                        if high {
                            upper[i]
                        } else {
                            lower[i]
                        }
                    } else {
                        let x = lower[i] + u[k] * (upper[i] - lower[i]);
                        k += 1;
                        x
                    }
                })
            }
            Region::Ellipsoid { q, level } => {
                let m = Matrix4::from_fn(|i, j| q[i][j]);
                let l = m.cholesky().expect("validated ellipsoid").l();
                let dir = unit_sphere4(&u[1..4]);
                let x = l
                    .transpose()
                    .solve_upper_triangular(&dir)
                    .expect("nonsingular factor");
                x * level.sqrt()
            }
            Region::ObstacleComplement { polygon, inflation } => {
                let p = polygon.offset_point(*inflation, u[0]);
                Vec4::new(0.0, p[0], p[1], 0.0)
            }
        }
    }

    /// Map a unit-cube point into the region interior (body regions only).
    pub fn interior_point(&self, u: &[f64]) -> Vec4 {
        match self {
            Region::Box { lower, upper } => {
                Vec4::from_fn(|i, _| lower[i] + u[i] * (upper[i] - lower[i]))
            }
            _ => {
                let radial = u[0].powf(0.25);
                let b = self.boundary_point(u);
                self.scale_about_center(&b, radial)
            }
        }
    }

    pub fn center(&self) -> Vec4 {
        match self {
            Region::Ball { center, .. } => Vec4::from(*center),
            Region::Box { lower, upper } => (Vec4::from(*lower) + Vec4::from(*upper)) * 0.5,
            _ => Vec4::zeros(),
        }
    }

    pub fn scale_about_center(&self, p: &Vec4, s: f64) -> Vec4 {
        let c = self.center();
        c + (p - c) * s
    }

    /// `n` deterministic boundary samples.
    pub fn boundary_samples(&self, n: usize, seed: u64) -> Vec<Vec4> {
        let h = Halton::new(4, seed);
        (0..n as u64)
            .map(|i| self.boundary_point(&h.point(i)))
            .collect()
    }

    /// Axis-aligned bounding box (body regions).
    pub fn bounding_box(&self) -> Option<([f64; 4], [f64; 4])> {
        match self {
            Region::Ball { center, radius } => Some((
                std::array::from_fn(|i| center[i] - radius),
                std::array::from_fn(|i| center[i] + radius),
            )),
            Region::Box { lower, upper } => Some((*lower, *upper)),
            Region::Ellipsoid { q, level } => {
                let m = Matrix4::from_fn(|i, j| q[i][j]);
                let inv = m.try_inverse()?;
                let h: [f64; 4] = std::array::from_fn(|i| (level * inv[(i, i)]).sqrt());
                Some((h.map(|x| -x), h))
            }
            Region::ObstacleComplement { .. } => None,
        }
    }
}

/// Initial set, goal set and safe tube of one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub initial: Region,
    pub goal: Region,
    pub safe: Region,
}

impl RegionSpec {
    /// Membership in `S(theta)`; obstacle complements are checked on the
    /// inertial position the body state maps to.
    pub fn safe_contains(&self, th: f64, b: &Vec4, reference: &ReferenceSegment) -> bool {
        let level = self.safe_level(th, b, reference);
        if self.safe.is_obstacle() {
            level < 1.0
        } else {
            level <= 1.0
        }
    }

    pub fn safe_level(&self, th: f64, b: &Vec4, reference: &ReferenceSegment) -> f64 {
        match &self.safe {
            Region::ObstacleComplement { .. } => {
                let s = inertial_from_ref(b, &reference.point(th));
                self.safe.level(&s.to_vec())
            }
            r => r.level(b),
        }
    }

    /// Inflated-footprint clearance of an inertial position, when the safe
    /// set is an obstacle complement.
    pub fn clearance(&self, x: f64, y: f64) -> Option<f64> {
        match &self.safe {
            Region::ObstacleComplement { polygon, inflation } => {
                Some(polygon.distance([x, y]) - inflation)
            }
            _ => None,
        }
    }

    pub fn validate(&self, reference: &ReferenceSegment) -> Result<()> {
        for (name, r) in [
            ("initial", &self.initial),
            ("goal", &self.goal),
            ("safe", &self.safe),
        ] {
            r.validate()
                .map_err(|e| Error::InvalidRegion(format!("{name} set: {e}")))?;
        }
        if self.initial.is_obstacle() || self.goal.is_obstacle() {
            return Err(Error::InvalidRegion(
                "initial and goal sets must be body-frame regions".into(),
            ));
        }
        let origin = Vec4::zeros();
        if !self.initial.contains(&origin) || !self.goal.contains(&origin) {
            return Err(Error::InvalidRegion(
                "initial and goal sets must contain zero deviation".into(),
            ));
        }
        for k in 0..=8 {
            let th = reference.t_end * k as f64 / 8.0;
            if !self.safe_contains(th, &origin, reference) {
                return Err(Error::InvalidRegion(format!(
                    "safe set excludes the reference at theta = {th}"
                )));
            }
        }
        for b in self.initial.boundary_samples(200, 1) {
            if !self.safe_contains(0.0, &b, reference) {
                return Err(Error::InvalidRegion(
                    "S(0) does not contain the initial set".into(),
                ));
            }
        }
        for b in self.goal.boundary_samples(200, 2) {
            if !self.safe_contains(reference.t_end, &b, reference) {
                return Err(Error::InvalidRegion(
                    "S(T) does not contain the goal set".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_contains_origin() {
        assert!(Region::ball(0.5).contains(&Vec4::zeros()));
        assert!(!Region::ball(0.5).contains(&Vec4::new(0.3, 0.3, 0.3, 0.0)));
    }

    #[test]
    fn point_at_inflation_distance_is_not_safe() {
        let r = Region::ObstacleComplement {
            polygon: Polygon::rectangle([0.0, 0.0], [0.5, 0.5]),
            inflation: 0.25,
        };
        assert!(!r.contains(&Vec4::new(0.0, 0.75, 0.0, 0.0)));
        assert!(r.contains(&Vec4::new(0.0, 0.7500001, 0.0, 0.0)));
        assert!(!r.contains(&Vec4::new(0.0, 0.1, 0.0, 0.0)));
    }

    #[test]
    fn box_boundary_samples_touch_a_face() {
        let r = Region::Box {
            lower: [-1.0, -1.0, -1.0, -3.0],
            upper: [1.0, 1.0, 1.0, 3.0],
        };
        let samples = r.boundary_samples(1000, 4);
        for p in &samples {
            let active = (0..4).filter(|&i| {
                (p[i] - [-1.0, -1.0, -1.0, -3.0][i]).abs() < 1e-9
                    || (p[i] - [1.0, 1.0, 1.0, 3.0][i]).abs() < 1e-9
            });
            assert!(active.count() >= 1);
        }
    }

    #[test]
    fn boundary_samples_lie_on_boundary() {
        let q = [
            [4.0, 0.0, 0.0, 0.0],
            [0.0, 4.0, 0.0, 0.0],
            [0.0, 0.0, 4.0, 0.0],
            [0.0, 0.0, 0.0, 16.0],
        ];
        for r in [Region::ball(0.5), Region::Ellipsoid { q, level: 1.0 }] {
            for p in r.boundary_samples(500, 3) {
                assert!((r.level(&p) - 1.0).abs() < 1e-9);
            }
        }
        let poly = Polygon::rectangle([1.0, 2.0], [0.3, 0.2]);
        let r = Region::ObstacleComplement {
            polygon: poly.clone(),
            inflation: 0.25,
        };
        for p in r.boundary_samples(500, 3) {
            assert!((poly.distance([p[1], p[2]]) - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_polygons_rejected() {
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 1.0]]).is_err());
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
        assert!(Polygon::new(vec![
            [0.0, 0.0],
            [2.0, 0.0],
            [1.0, 0.2],
            [2.0, 2.0],
            [0.0, 2.0]
        ])
        .is_err());
        let cw = Polygon::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!(signed_area(&cw.vertices) > 0.0);
    }

    #[test]
    fn invalid_regions_rejected() {
        assert!(Region::ball(0.0).validate().is_err());
        assert!(Region::Box {
            lower: [0.0; 4],
            upper: [1.0, 1.0, 0.0, 1.0]
        }
        .validate()
        .is_err());
        let q = [
            [1.0, 2.0, 0.0, 0.0],
            [2.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert!(Region::Ellipsoid { q, level: 1.0 }.validate().is_err());
    }

    #[test]
    fn interior_points_are_inside() {
        let r = Region::ball(0.5);
        let h = Halton::new(4, 9);
        for i in 0..200 {
            assert!(r.contains(&r.interior_point(&h.point(i))));
        }
    }
}
