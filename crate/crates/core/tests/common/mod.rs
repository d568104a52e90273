//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use g2t_core::error_model::error_rate;
use g2t_core::{PathError, PathSample, QpProblem, VehicleParams};
use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::rngs::StdRng;
use rand::Rng;

/// Row state in an enumerated active set.
#[derive(Clone, Copy, PartialEq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Best feasible equality-constrained minimizer over every active-set choice.
pub fn enumerate(prob: &QpProblem) -> Option<(f64, DVector<f64>)> {
    let n = prob.num_vars();
    let m = prob.num_rows();
    let choices: Vec<Vec<Bound>> = (0..m)
        .map(|i| {
            let mut c = vec![Bound::Free];
            if prob.l[i].is_finite() {
                c.push(Bound::Lower);
            }
            if prob.u[i].is_finite() && prob.u[i] != prob.l[i] {
                c.push(Bound::Upper);
            }
            c
        })
        .collect();
    let mut pick = vec![0usize; m];
    let mut best: Option<(f64, DVector<f64>)> = None;
    loop {
        let active: Vec<(usize, f64)> = (0..m)
            .filter_map(|i| match choices[i][pick[i]] {
                Bound::Free => None,
                Bound::Lower => Some((i, prob.l[i])),
                Bound::Upper => Some((i, prob.u[i])),
            })
            .collect();
        if active.len() <= n {
            let k = active.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
            let mut rhs = DVector::zeros(n + k);
            rhs.rows_mut(0, n).copy_from(&(-&prob.q));
            for (r, &(i, b)) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = prob.a[(i, j)];
                    kkt[(j, n + r)] = prob.a[(i, j)];
                }
                rhs[n + r] = b;
            }
            if let Some(sol) = kkt.lu().solve(&rhs) {
                let y = sol.rows(0, n).into_owned();
                let ay = &prob.a * &y;
                let feasible = (0..m).all(|i| ay[i] >= prob.l[i] - 1e-9 && ay[i] <= prob.u[i] + 1e-9);
                if feasible {
                    let f = prob.objective(&y);
                    if best.as_ref().is_none_or(|(b, _)| f < *b) {
                        best = Some((f, y));
                    }
                }
            }
        }
        let mut i = 0;
        loop {
            if i == m {
                return best;
            }
            pick[i] += 1;
            if pick[i] < choices[i].len() {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
    }
}

pub fn random_problem(rng: &mut StdRng, n: usize, m: usize, two_sided: bool) -> QpProblem {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = g.transpose() * &g + DMatrix::identity(n, n) * 0.1;
    let q = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let y_feas = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let ay = &a * &y_feas;
    let u = DVector::from_fn(m, |i, _| ay[i] + rng.random_range(0.0..0.5));
    let l = DVector::from_fn(m, |i, _| {
        if two_sided && rng.random_bool(0.7) {
            ay[i] - rng.random_range(0.0..0.5)
        } else {
            f64::NEG_INFINITY
        }
    });
    QpProblem::new(p, q, a, l, u)
}

/// Central differences of the error dynamics at zero error.
pub fn fd_jacobians(p: &VehicleParams, sample: &PathSample) -> (Matrix4<f64>, Vector4<f64>) {
    let h = 1e-6;
    let f = |x: Vector4<f64>, u: f64| error_rate(p, sample, &PathError::from_vector(&x), u).unwrap();
    let mut a = Matrix4::zeros();
    for j in 0..4 {
        let mut dx = Vector4::zeros();
        dx[j] = h;
        a.set_column(j, &((f(dx, 0.0) - f(-dx, 0.0)) / (2.0 * h)));
    }
    let b = (f(Vector4::zeros(), h) - f(Vector4::zeros(), -h)) / (2.0 * h);
    (a, b)
}

/// Max relative error, with entries small against the largest one compared
/// absolutely.
pub fn rel_error_max(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic.iter().zip(numeric).map(|(x, y)| (x - y).abs() / y.abs().max(1e-3 * scale).max(1e-12)).fold(0.0, f64::max)
}
