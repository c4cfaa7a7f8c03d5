//! Chebyshev centre of a polytope `{p : a_i . p <= b_i}` intersected with
//! the box `|p_j| <= p_max`.
//!
//! Solved as the linear program `max r` subject to
//! `a_i . p + r |a_i| <= b_i`, with rows pre-normalised so every
//! coefficient on `r` is one.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Radius below which the polytope counts as empty.
pub const MIN_RADIUS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Center {
    Found { point: Vec<f64>, radius: f64 },
    Infeasible { radius: f64 },
}

/// Normalise `a . p <= b` to unit `|a|`; zero rows are dropped when
/// satisfied and make the set empty otherwise.
fn normalise(a: &[f64], b: f64) -> Option<(Vec<f64>, f64)> {
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return if b >= 0.0 {
            None
        } else {
            Some((vec![0.0; a.len()], -1.0))
        };
    }
    Some((a.iter().map(|x| x / n).collect(), b / n))
}

pub fn chebyshev_center(rows: &[(Vec<f64>, f64)], dim: usize, p_max: f64) -> Result<Center> {
    if rows
        .iter()
        .any(|(a, b)| a.len() != dim || !b.is_finite() || a.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Lp(
            "constraint row has the wrong length or a non-finite entry".into(),
        ));
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let p: Vec<_> = (0..dim).map(|_| lp.add_var(0.0, (-p_max, p_max))).collect();
    let r = lp.add_var(1.0, (f64::NEG_INFINITY, p_max));
    for &pj in &p {
        lp.add_constraint([(pj, 1.0), (r, 1.0)], ComparisonOp::Le, p_max);
        lp.add_constraint([(pj, -1.0), (r, 1.0)], ComparisonOp::Le, p_max);
    }
    let mut empty = false;
    for (a, b) in rows {
        match normalise(a, *b) {
            None => {}
            Some((a, _)) if a.iter().all(|x| *x == 0.0) => empty = true,
            Some((a, b)) => {
                let mut expr: Vec<_> = a
                    .iter()
                    .zip(&p)
                    .filter(|(c, _)| **c != 0.0)
                    .map(|(c, v)| (*v, *c))
                    .collect();
                expr.push((r, 1.0));
                lp.add_constraint(expr.as_slice(), ComparisonOp::Le, b);
            }
        }
    }
    let sol = lp.solve().map_err(|e| Error::Lp(e.to_string()))?;
    let radius = *sol.var_value(r);
    if empty || radius < MIN_RADIUS {
        return Ok(Center::Infeasible { radius });
    }
    Ok(Center::Found {
        point: p.iter().map(|v| *sol.var_value(*v)).collect(),
        radius,
    })
}

/// Smallest normalised slack of `point` over the rows and the box.
pub fn min_slack(rows: &[(Vec<f64>, f64)], point: &[f64], p_max: f64) -> f64 {
    let mut s = point
        .iter()
        .map(|x| p_max - x.abs())
        .fold(f64::INFINITY, f64::min);
    for (a, b) in rows {
        if let Some((a, b)) = normalise(a, *b) {
            s = s.min(b - a.iter().zip(point).map(|(x, y)| x * y).sum::<f64>());
        }
    }
    s
}

/// Maximise [`min_slack`] by the central-cut ellipsoid method, starting from
/// the ball circumscribing the box. Independent of the simplex route; used
/// to cross-check [`chebyshev_center`]. Returns the best point and slack.
pub fn max_min_slack_ellipsoid(
    rows: &[(Vec<f64>, f64)],
    dim: usize,
    p_max: f64,
    iterations: usize,
) -> (Vec<f64>, f64) {
    let rows: Vec<(DVector<f64>, f64)> = rows
        .iter()
        .filter_map(|(a, b)| normalise(a, *b))
        .map(|(a, b)| (DVector::from_vec(a), b))
        .collect();
    let n = dim as f64;
    let mut c = DVector::<f64>::zeros(dim);
    let mut p = DMatrix::<f64>::identity(dim, dim) * (n * p_max * p_max);
    let (mut best, mut best_val) = (c.clone(), f64::NEG_INFINITY);
    for _ in 0..iterations {
        // The most violated row gives a subgradient of -min_slack.
        let mut val = f64::INFINITY;
        let mut normal = DVector::<f64>::zeros(dim);
        for j in 0..dim {
            let s = p_max - c[j].abs();
            if s < val {
                val = s;
                normal.fill(0.0);
                normal[j] = c[j].signum();
            }
        }
        for (a, b) in &rows {
            let s = b - a.dot(&c);
            if s < val {
                val = s;
                normal.copy_from(a);
            }
        }
        if val > best_val {
            best_val = val;
            best.copy_from(&c);
        }
        if normal.iter().all(|x| *x == 0.0) {
            normal[0] = 1.0;
        }
        let pg = &p * &normal;
        let gpg = normal.dot(&pg);
        if !(gpg > 1e-300) {
            break;
        }
        let step = &pg / gpg.sqrt();
        c -= &step / (n + 1.0);
        p = (&p - (&step * step.transpose()) * (2.0 / (n + 1.0))) * (n * n / (n * n - 1.0));
        p = (&p + p.transpose()) * 0.5;
    }
    (best.iter().copied().collect(), best_val)
}
