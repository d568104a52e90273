//! Frenet-frame path-following error model.
//!
//! The error state is `(z3, theta3, beta3, beta2)`: the signed lateral offset
//! of the semitrailer axle (positive to the left of the nominal semitrailer
//! heading), the heading error and the two joint-angle errors. The model is
//! written per unit station `s` so the speed drops out; its linearization at
//! the origin is computed analytically.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{NominalPath, PathSample};
use crate::vehicle::{VehicleParams, VehicleState, SINGULAR_C1};

/// Tightening applied to the Frenet validity conditions.
pub const VALIDITY_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathError {
    pub z3: f64,
    pub theta3: f64,
    pub beta3: f64,
    pub beta2: f64,
}

impl PathError {
    pub fn new(z3: f64, theta3: f64, beta3: f64, beta2: f64) -> Self {
        Self { z3, theta3, beta3, beta2 }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.z3, self.theta3, self.beta3, self.beta2)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn inf_norm(&self) -> f64 {
        self.z3.abs().max(self.theta3.abs()).max(self.beta3.abs()).max(self.beta2.abs())
    }

    /// Global configuration that has this error relative to `sample`.
    pub fn to_state(&self, sample: &PathSample) -> VehicleState {
        let th = sample.xr.theta3;
        VehicleState::new(
            sample.xr.x3 - self.z3 * th.sin(),
            sample.xr.y3 + self.z3 * th.cos(),
            th + self.theta3,
            sample.xr.beta3 + self.beta3,
            sample.xr.beta2 + self.beta2,
        )
    }
}

/// Wraps to `(-pi, pi]`; values already in range are returned unchanged.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = a.sin().atan2(a.cos());
    if w <= -PI {
        PI
    } else {
        w
    }
}

/// Affine linearization `dx/ds = A x + B u` at the origin and its
/// forward-Euler discretization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedModel {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub f: Matrix4<f64>,
    pub g: Vector4<f64>,
    pub delta_s: f64,
}

impl LinearizedModel {
    pub fn new(a: Matrix4<f64>, b: Vector4<f64>, delta_s: f64) -> Self {
        Self { a, b, f: Matrix4::identity() + a * delta_s, g: b * delta_s, delta_s }
    }
}

/// Nominal semitrailer curvature, `tan(beta3r) / L3`.
pub fn nominal_curvature(params: &VehicleParams, sample: &PathSample) -> f64 {
    sample.xr.beta3.tan() / params.l3
}

pub fn check_validity(params: &VehicleParams, sample: &PathSample, e: &PathError) -> Result<()> {
    let margin = 1.0 - nominal_curvature(params, sample) * e.z3;
    if !(margin > VALIDITY_MARGIN && e.theta3.abs() < FRAC_PI_2 - VALIDITY_MARGIN) {
        return Err(Error::ValidityViolated { margin, heading: e.theta3.abs() });
    }
    Ok(())
}

/// Projects `state` onto `path` and returns the station with the error.
pub fn compute_error(
    params: &VehicleParams,
    state: &VehicleState,
    path: &NominalPath,
    s_prev: f64,
) -> Result<(f64, PathError)> {
    let s = path.project((state.x3, state.y3), s_prev)?;
    let sample = path.interpolate(s)?;
    let e = error_at(state, &sample);
    check_validity(params, &sample, &e)?;
    Ok((s, e))
}

/// Error of `state` relative to a given nominal sample (no projection).
pub fn error_at(state: &VehicleState, sample: &PathSample) -> PathError {
    let th = sample.xr.theta3;
    let (dx, dy) = (state.x3 - sample.xr.x3, state.y3 - sample.xr.y3);
    PathError {
        z3: -th.sin() * dx + th.cos() * dy,
        theta3: wrap_angle(state.theta3 - th),
        beta3: state.beta3 - sample.xr.beta3,
        beta2: state.beta2 - sample.xr.beta2,
    }
}

fn check_configuration(params: &VehicleParams, beta2: f64, beta3: f64, u: f64) -> Result<()> {
    if !(beta3.abs() < FRAC_PI_2) {
        return Err(Error::InvalidState(format!("|beta3| = {} >= pi/2", beta3.abs())));
    }
    let c1 = params.c1(beta2, beta3, u);
    if !(c1 > SINGULAR_C1) {
        return Err(Error::SingularConfiguration { c1 });
    }
    Ok(())
}

/// `d(error)/ds` at a nominal sample.
pub fn error_rate(params: &VehicleParams, sample: &PathSample, e: &PathError, u_tilde: f64) -> Result<Vector4<f64>> {
    check_validity(params, sample, e)?;
    let r = &sample.xr;
    let (b3, b2, u) = (r.beta3 + e.beta3, r.beta2 + e.beta2, sample.ur + u_tilde);
    check_configuration(params, b2, b3, u)?;
    check_configuration(params, r.beta2, r.beta3, sample.ur)?;
    let dir = sample.v3r_sign;
    let kappa = nominal_curvature(params, sample);
    let along = 1.0 - kappa * e.z3;
    let scale = along / e.theta3.cos();
    let trailer = b3.tan() / params.l3;
    let dolly = params.dolly_turn_rate(b2, b3, u);
    let dolly_r = params.dolly_turn_rate(r.beta2, r.beta3, sample.ur);
    let hitch = params.hitch_turn_rate(b2, b3, u);
    let hitch_r = params.hitch_turn_rate(r.beta2, r.beta3, sample.ur);
    Ok(Vector4::new(
        dir * along * e.theta3.tan(),
        dir * (scale * trailer - kappa),
        dir * (scale * (dolly - trailer) - (dolly_r - kappa)),
        dir * (scale * hitch - hitch_r),
    ))
}

/// Error dynamics in `s`, with the nominal sample interpolated from `path`.
pub fn error_dynamics_s(
    params: &VehicleParams,
    path: &NominalPath,
    s: f64,
    e: &PathError,
    u_tilde: f64,
) -> Result<Vector4<f64>> {
    error_rate(params, &path.interpolate(s)?, e, u_tilde)
}

/// Time-domain error dynamics for tractor direction `v`: returns the
/// station rate `ds/dt` and `d(error)/dt`.
pub fn error_rate_time(
    params: &VehicleParams,
    sample: &PathSample,
    e: &PathError,
    u_tilde: f64,
    v: f64,
) -> Result<(f64, Vector4<f64>)> {
    check_validity(params, sample, e)?;
    let r = &sample.xr;
    let (b3, b2, u) = (r.beta3 + e.beta3, r.beta2 + e.beta2, sample.ur + u_tilde);
    check_configuration(params, b2, b3, u)?;
    check_configuration(params, r.beta2, r.beta3, sample.ur)?;
    let (l2, l3, m1) = (params.l2, params.l3, params.m1);
    let kappa = nominal_curvature(params, sample);
    let v3 = v * params.c1(b2, b3, u);
    let ratio = e.theta3.cos() / (1.0 - kappa * e.z3);
    let c1 = params.c1(b2, b3, u);
    let c1r = params.c1(r.beta2, r.beta3, sample.ur);
    let s_dot = v3 * sample.v3r_sign * ratio;
    let z_dot = v3 * e.theta3.sin();
    let theta_dot = v3 * (b3.tan() / l3 - kappa * ratio);
    let beta3_dot = v3
        * ((b2.sin() - m1 * b2.cos() * u) / (l2 * c1)
            - b3.tan() / l3
            - ratio * ((r.beta2.sin() - m1 * r.beta2.cos() * sample.ur) / (l2 * c1r) - kappa));
    let beta2_dot = v3
        * ((u - b2.sin() / l2 + m1 / l2 * b2.cos() * u) / c1
            - ratio * ((sample.ur - r.beta2.sin() / l2 + m1 / l2 * r.beta2.cos() * sample.ur) / c1r));
    Ok((s_dot, Vector4::new(z_dot, theta_dot, beta3_dot, beta2_dot)))
}

/// Analytic Jacobians of [`error_rate`] at `(error, u_tilde) = (0, 0)`.
pub fn linearize_sample(params: &VehicleParams, sample: &PathSample, delta_s: f64) -> Result<LinearizedModel> {
    let r = &sample.xr;
    let (beta2, beta3, u) = (r.beta2, r.beta3, sample.ur);
    check_configuration(params, beta2, beta3, u)?;
    let (l2, l3, m1) = (params.l2, params.l3, params.m1);
    let dir = sample.v3r_sign;
    let kappa = nominal_curvature(params, sample);
    let (sb2, cb2) = beta2.sin_cos();
    let cb3 = beta3.cos();
    let tb3 = beta3.tan();
    let sec2 = 1.0 + tb3 * tb3;

    let d = cb2 + m1 * u * sb2;
    let n3 = sb2 - m1 * u * cb2;
    let den = l2 * cb3 * d * d;
    let dolly = n3 / (l2 * cb3 * d);
    let dolly_b2 = (d * d + n3 * n3) / den;
    let dolly_u = -m1 / den;
    let dolly_b3 = dolly * tb3;
    let hitch = (l2 * u - n3) / (l2 * cb3 * d);
    let hitch_b2 = (-d * d + n3 * (l2 * u - n3)) / den;
    let hitch_u = ((l2 + m1 * cb2) * d - (l2 * u - n3) * m1 * sb2) / den;
    let hitch_b3 = hitch * tb3;

    #[rustfmt::skip]
    let a = Matrix4::new(
        0.0,                          dir, 0.0,                               0.0,
        -dir * kappa * kappa,         0.0, dir * sec2 / l3,                   0.0,
        -dir * kappa * (dolly - kappa), 0.0, dir * (dolly_b3 - sec2 / l3),    dir * dolly_b2,
        -dir * kappa * hitch,         0.0, dir * hitch_b3,                    dir * hitch_b2,
    );
    let b = Vector4::new(0.0, 0.0, dir * dolly_u, dir * hitch_u);
    Ok(LinearizedModel::new(a, b, delta_s))
}

pub fn linearize(params: &VehicleParams, path: &NominalPath, s: f64, delta_s: f64) -> Result<LinearizedModel> {
    linearize_sample(params, &path.interpolate(s)?, delta_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{generate_figure_eight, generate_straight};
    use approx::assert_relative_eq;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn wrap_is_identity_in_range() {
        assert_eq!(wrap_angle(0.1), 0.1);
        assert_eq!(wrap_angle(-0.1), -0.1);
        assert_eq!(wrap_angle(PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(2.0 * PI + 0.3), 0.3, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-5.0 * PI / 4.0), 3.0 * PI / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn compute_error_examples() {
        let p = params();
        let path = generate_straight(20.0, 1.0, 0.2).unwrap();
        let (s, e) = compute_error(&p, &VehicleState::new(5.0, 3.0, 0.0, 0.0, 0.0), &path, 4.0).unwrap();
        assert_relative_eq!(s, 5.0, epsilon = 1e-12);
        assert_eq!(e, PathError::new(3.0, 0.0, 0.0, 0.0));
        let (_, e) = compute_error(&p, &VehicleState::new(5.0, 3.0, -0.3, 0.1, 0.05), &path, 4.0).unwrap();
        assert_eq!(e, PathError::new(3.0, -0.3, 0.1, 0.05));

        let backward = generate_straight(20.0, -1.0, 0.2).unwrap();
        let (s, e) = compute_error(&p, &VehicleState::new(-5.0, 3.0, 0.0, 0.0, 0.0), &backward, 4.0).unwrap();
        assert_relative_eq!(s, 5.0, epsilon = 1e-12);
        assert_eq!(e.z3, 3.0);
    }

    #[test]
    fn on_path_state_has_zero_error() {
        let p = params();
        let path = generate_figure_eight(&p, 20.0, -1.0, 0.2).unwrap();
        for &s in &[0.0, 13.7, 55.5, 120.1] {
            let sample = path.interpolate(s).unwrap();
            let (s_hat, e) = compute_error(&p, &sample.xr, &path, (s - 0.5).max(0.0)).unwrap();
            assert_relative_eq!(s_hat, s, epsilon = 1e-9);
            assert!(e.inf_norm() < 1e-9, "{e:?}");
        }
    }

    #[test]
    fn validity_violation_detected() {
        let p = params();
        let path = generate_straight(20.0, -1.0, 0.2).unwrap();
        let sample = path.interpolate(2.0).unwrap();
        let e = PathError::new(0.0, FRAC_PI_2 - 0.01, 0.0, 0.0);
        assert!(matches!(error_rate(&p, &sample, &e, 0.0), Err(Error::ValidityViolated { .. })));
    }

    #[test]
    fn straight_path_rates() {
        let p = params();
        let path = generate_straight(20.0, -1.0, 0.2).unwrap();
        let d = error_dynamics_s(&p, &path, 3.0, &PathError::new(0.0, 0.1, 0.0, 0.0), 0.0).unwrap();
        assert_relative_eq!(d[0], -(0.1f64.tan()), epsilon = 1e-15);
        // pure curvature deviation on a straight path, hand-evaluated
        let d = error_dynamics_s(&p, &path, 3.0, &PathError::default(), 0.05).unwrap();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.0);
        assert_relative_eq!(d[2], 1.66 * 0.05 / 3.87, epsilon = 1e-15);
        assert_relative_eq!(d[3], -0.05 * (1.0 + 1.66 / 3.87), epsilon = 1e-15);
    }

    #[test]
    fn straight_linearization_is_constant_and_matches_hand_derivation() {
        let p = params();
        let path = generate_straight(20.0, -1.0, 0.2).unwrap();
        let lin = linearize(&p, &path, 1.0, 0.2).unwrap();
        let other = linearize(&p, &path, 17.3, 0.2).unwrap();
        assert_eq!(lin, other);
        #[rustfmt::skip]
        let expected_a = -Matrix4::new(
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0 / 8.0, 0.0,
            0.0, 0.0, -1.0 / 8.0, 1.0 / 3.87,
            0.0, 0.0, 0.0, -1.0 / 3.87,
        );
        let expected_b = -Vector4::new(0.0, 0.0, -1.66 / 3.87, (3.87 + 1.66) / 3.87);
        assert_relative_eq!(lin.a, expected_a, epsilon = 1e-15);
        assert_relative_eq!(lin.b, expected_b, epsilon = 1e-15);
        assert_eq!(lin.f, Matrix4::identity() + lin.a * 0.2);
        assert_eq!(lin.g, lin.b * 0.2);
    }

    #[test]
    fn to_state_inverts_error_at() {
        let p = params();
        let path = generate_figure_eight(&p, 20.0, -1.0, 0.2).unwrap();
        let sample = path.interpolate(101.3).unwrap();
        let e = PathError::new(0.7, -0.2, 0.05, -0.04);
        let back = error_at(&e.to_state(&sample), &sample);
        assert_relative_eq!(back.to_vector(), e.to_vector(), epsilon = 1e-12);
    }
}
