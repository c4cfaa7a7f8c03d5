//! Low-discrepancy point sets.
//!
//! Halton sequences with a seeded Cranley-Patterson shift: deterministic for
//! a seed, well spread for every prefix, and any point can be generated from
//! its index alone (so parallel evaluation needs no shared state).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::Vec4;

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    r
}

#[derive(Clone, Debug)]
pub struct Halton {
    shift: Vec<f64>,
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(
            dim <= PRIMES.len(),
            "Halton dimension {dim} exceeds {}",
            PRIMES.len()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            shift: (0..dim).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Point `i` of the shifted sequence, in `[0, 1)^dim`.
    pub fn point(&self, i: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.fill(i, &mut out);
        out
    }

    pub fn fill(&self, i: u64, out: &mut [f64]) {
        // Skip the origin-heavy first few indices.
        let idx = i + 17;
        for (d, o) in out.iter_mut().enumerate() {
            let x = radical_inverse(idx, PRIMES[d]) + self.shift[d];
            *o = x - x.floor();
        }
    }
}

/// Uniform point on the unit 3-sphere in R^4 from three unit-interval
/// coordinates (the quaternion construction of Shoemake).
pub fn unit_sphere4(u: &[f64]) -> Vec4 {
    let (a, b) = ((1.0 - u[0]).sqrt(), u[0].sqrt());
    let (s1, c1) = (std::f64::consts::TAU * u[1]).sin_cos();
    let (s2, c2) = (std::f64::consts::TAU * u[2]).sin_cos();
    Vec4::new(a * s1, a * c1, b * s2, b * c2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_stay_in_unit_cube_and_are_deterministic() {
        let h = Halton::new(6, 42);
        let g = Halton::new(6, 42);
        for i in 0..1000 {
            let p = h.point(i);
            assert!(p.iter().all(|x| (0.0..1.0).contains(x)));
            assert_eq!(p, g.point(i));
        }
        assert_ne!(Halton::new(6, 1).point(0), Halton::new(6, 2).point(0));
    }

    #[test]
    fn base_two_radical_inverse() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
        assert!((radical_inverse(5, 3) - (2.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
    }

    #[test]
    fn sphere_points_are_unit_and_balanced() {
        let h = Halton::new(3, 0);
        let mut mean = Vec4::zeros();
        let n = 4000;
        for i in 0..n {
            let p = unit_sphere4(&h.point(i));
            assert!((p.norm() - 1.0).abs() < 1e-12);
            mean += p;
        }
        assert!((mean / n as f64).norm() < 0.02);
    }
}
