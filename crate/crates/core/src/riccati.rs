//! Discrete-time algebraic Riccati equation for single-input 4-state models.

use nalgebra::{Matrix4, RowVector4, Vector4};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareSolution {
    pub p: Matrix4<f64>,
    /// Gain of the control law `u = -k x`.
    pub k: RowVector4<f64>,
    pub iterations: usize,
}

/// Gain `(r + G'PG)^-1 G'PF`.
pub fn lq_gain(f: &Matrix4<f64>, g: &Vector4<f64>, p: &Matrix4<f64>, r: f64) -> RowVector4<f64> {
    let pg = p * g;
    (pg.transpose() * f) / (r + g.dot(&pg))
}

/// Max-abs residual of `F'PF - P - F'PG K + Q`.
pub fn dare_residual(f: &Matrix4<f64>, g: &Vector4<f64>, q: &Matrix4<f64>, r: f64, p: &Matrix4<f64>) -> f64 {
    let k = lq_gain(f, g, p, r);
    (f.transpose() * p * f - p - f.transpose() * p * g * k + q).amax()
}

/// Fixed-point (value) iteration started from `Q`.
pub fn solve_dare(f: &Matrix4<f64>, g: &Vector4<f64>, q: &Matrix4<f64>, r: f64) -> Result<DareSolution> {
    let mut p = *q;
    for it in 1..=MAX_ITERATIONS {
        let k = lq_gain(f, g, &p, r);
        let mut next = f.transpose() * p * (f - g * k) + q;
        next = (next + next.transpose()) * 0.5;
        let change = (next - p).amax();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
        if change <= 1e-13 * p.amax().max(1.0) {
            return Ok(DareSolution { p, k: lq_gain(f, g, &p, r), iterations: it });
        }
    }
    Err(Error::RiccatiDiverged { iterations: MAX_ITERATIONS })
}

pub fn spectral_radius(m: &Matrix4<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_like_system_matches_closed_form() {
        // decoupled integrators: each diagonal entry solves p = a^2 p - (a b p)^2/(1 + b^2 p) + q
        let f = Matrix4::from_diagonal(&Vector4::new(1.1, 0.0, 0.0, 0.0));
        let g = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let q = Matrix4::identity();
        let sol = solve_dare(&f, &g, &q, 1.0).unwrap();
        // p^2 - 1.21 p - 1 = 0  →  positive root
        let expected = (1.21 + (1.21f64 * 1.21 + 4.0).sqrt()) / 2.0;
        assert_relative_eq!(sol.p[(0, 0)], expected, epsilon = 1e-10);
        assert_relative_eq!(sol.p[(1, 1)], 1.0, epsilon = 1e-12);
        assert!(dare_residual(&f, &g, &q, 1.0, &sol.p) < 1e-12);
        assert!(spectral_radius(&(f - g * sol.k)) < 1.0);
    }

    #[test]
    fn unstabilizable_system_diverges() {
        let f = Matrix4::identity() * 1.5;
        let g = Vector4::new(1.0, 0.0, 0.0, 0.0);
        assert!(matches!(solve_dare(&f, &g, &Matrix4::identity(), 1.0), Err(Error::RiccatiDiverged { .. })));
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let mut m = Matrix4::zeros();
        m[(0, 1)] = -0.5;
        m[(1, 0)] = 0.5;
        m[(2, 2)] = 0.25;
        assert_relative_eq!(spectral_radius(&m), 0.5, epsilon = 1e-12);
    }
}
