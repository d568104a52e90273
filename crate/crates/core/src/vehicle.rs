//! Kinematic model of a general 2-trailer with a car-like tractor.
//!
//! The chain is tractor -> (positive off-axle hitch) -> dolly -> (on-axle
//! hitch) -> semitrailer. The configuration is described at the semitrailer
//! axle: `(x3, y3, theta3, beta3, beta2)` with `beta3 = theta2 - theta3` and
//! `beta2 = theta1 - theta2`. The input is the tractor curvature `u` and the
//! direction `v` of the tractor rear axle.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector5;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C1` at or below this value is treated as singular.
pub const SINGULAR_C1: f64 = 1e-6;

/// Longest RK4 sub-step used by [`VehicleParams::integrate_step`] [s].
pub const MAX_SUBSTEP: f64 = 0.005;

/// Geometry, actuator limits and rear LIDAR field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Tractor wheelbase [m].
    #[serde(alias = "L1")]
    pub l1: f64,
    /// Dolly axle to off-axle hitch [m].
    #[serde(alias = "L2")]
    pub l2: f64,
    /// Semitrailer axle to dolly axle [m].
    #[serde(alias = "L3")]
    pub l3: f64,
    /// Off-axle hitch offset behind the tractor rear axle [m].
    #[serde(alias = "M1")]
    pub m1: f64,
    /// Maximum tractor curvature [1/m].
    pub u_max: f64,
    /// Maximum tractor curvature rate [1/(m s)].
    pub udot_max: f64,
    /// Semitrailer front overhang ahead of the kingpin [m].
    #[serde(alias = "La")]
    pub la: f64,
    /// Width of the semitrailer front [m].
    pub b: f64,
    /// Horizontal field of view of the rear LIDAR [rad].
    pub phi: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            l1: 4.62,
            l2: 3.87,
            l3: 8.00,
            m1: 1.66,
            u_max: 0.18,
            udot_max: 0.13,
            la: 1.73,
            b: 2.45,
            phi: 140.0 * PI / 180.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("m1", self.m1),
            ("u_max", self.u_max),
            ("udot_max", self.udot_max),
            ("la", self.la),
            ("b", self.b),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.phi > 0.0 && self.phi < 2.0 * PI) {
            return Err(Error::InvalidParameter(format!("phi must lie in (0, 2pi), got {}", self.phi)));
        }
        Ok(())
    }

    /// Parses parameters from TOML (`key = value` lines); missing keys keep
    /// their default value.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let params: VehicleParams = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Ratio `v3 / v` between semitrailer-axle and tractor-rear-axle speed.
    pub fn c1(&self, beta2: f64, beta3: f64, u: f64) -> f64 {
        beta3.cos() * (beta2.cos() + self.m1 * beta2.sin() * u)
    }

    /// Dolly yaw rate per unit semitrailer speed, `dtheta2/ds`.
    pub(crate) fn dolly_turn_rate(&self, beta2: f64, beta3: f64, u: f64) -> f64 {
        (beta2.sin() - self.m1 * beta2.cos() * u) / (self.l2 * self.c1(beta2, beta3, u))
    }

    /// Rate of `beta2` per unit semitrailer speed.
    pub(crate) fn hitch_turn_rate(&self, beta2: f64, beta3: f64, u: f64) -> f64 {
        (u - beta2.sin() / self.l2 + self.m1 / self.l2 * beta2.cos() * u) / self.c1(beta2, beta3, u)
    }

    /// Vector field `f(x, u)` with `dx/dt = v3 f(x, u)`; also the path
    /// equation `dx_r/ds = v3r_sign f(x_r, u_r)`.
    pub fn unit_rates(&self, state: &VehicleState, u: f64) -> Result<Vector5<f64>> {
        self.check(state, u)?;
        let k3 = state.beta3.tan() / self.l3;
        Ok(Vector5::new(
            state.theta3.cos(),
            state.theta3.sin(),
            k3,
            self.dolly_turn_rate(state.beta2, state.beta3, u) - k3,
            self.hitch_turn_rate(state.beta2, state.beta3, u),
        ))
    }

    /// Time derivatives of the configuration.
    pub fn derivatives(&self, state: &VehicleState, input: ControlInput) -> Result<Vector5<f64>> {
        let v3 = input.v * self.c1(state.beta2, state.beta3, input.u);
        Ok(self.unit_rates(state, input.u)? * v3)
    }

    fn check(&self, state: &VehicleState, u: f64) -> Result<()> {
        if !(state.beta3.abs() < PI / 2.0) {
            return Err(Error::InvalidState(format!("|beta3| = {} >= pi/2", state.beta3.abs())));
        }
        let c1 = self.c1(state.beta2, state.beta3, u);
        if !(c1 > SINGULAR_C1) {
            return Err(Error::SingularConfiguration { c1 });
        }
        Ok(())
    }

    /// Poses of all three segments reconstructed from the holonomic chain.
    pub fn segment_poses(&self, state: &VehicleState) -> SegmentPoses {
        let theta3 = state.theta3;
        let theta2 = theta3 + state.beta3;
        let theta1 = theta2 + state.beta2;
        let dolly = Pose { x: state.x3 + self.l3 * theta3.cos(), y: state.y3 + self.l3 * theta3.sin(), theta: theta2 };
        let hitch = self.hitch_point_from_dolly(&dolly);
        let tractor = Pose { x: hitch.0 + self.m1 * theta1.cos(), y: hitch.1 + self.m1 * theta1.sin(), theta: theta1 };
        SegmentPoses { tractor, dolly, semitrailer: Pose { x: state.x3, y: state.y3, theta: theta3 } }
    }

    /// Off-axle hitch point, `L2` ahead of the dolly axle.
    pub fn hitch_point_from_dolly(&self, dolly: &Pose) -> (f64, f64) {
        (dolly.x + self.l2 * dolly.theta.cos(), dolly.y + self.l2 * dolly.theta.sin())
    }

    /// One RK4 step of length `dt` with the input held constant.
    pub fn rk4_step(&self, state: &VehicleState, input: ControlInput, dt: f64) -> Result<VehicleState> {
        if dt == 0.0 {
            return Ok(*state);
        }
        let x0 = state.to_vector();
        let k1 = self.derivatives(state, input)?;
        let k2 = self.derivatives(&VehicleState::from_vector(&(x0 + k1 * (0.5 * dt))), input)?;
        let k3 = self.derivatives(&VehicleState::from_vector(&(x0 + k2 * (0.5 * dt))), input)?;
        let k4 = self.derivatives(&VehicleState::from_vector(&(x0 + k3 * dt)), input)?;
        let x1 = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        Ok(VehicleState::from_vector(&x1))
    }

    /// Propagates over `dt` using `substeps` equal RK4 steps.
    pub fn integrate(
        &self,
        state: &VehicleState,
        input: ControlInput,
        dt: f64,
        substeps: usize,
    ) -> Result<VehicleState> {
        if dt < 0.0 {
            return Err(Error::InvalidParameter(format!("negative time step {dt}")));
        }
        let h = dt / substeps.max(1) as f64;
        let mut x = *state;
        for _ in 0..substeps.max(1) {
            x = self.rk4_step(&x, input, h)?;
        }
        Ok(x)
    }

    /// Propagates over `dt` with RK4 sub-steps no longer than
    /// [`MAX_SUBSTEP`] (ten sub-steps per 50 ms control period).
    pub fn integrate_step(&self, state: &VehicleState, input: ControlInput, dt: f64) -> Result<VehicleState> {
        let substeps = (dt / MAX_SUBSTEP).ceil().max(1.0) as usize;
        self.integrate(state, input, dt, substeps)
    }
}

/// Configuration of the vehicle at the semitrailer axle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x3: f64,
    pub y3: f64,
    pub theta3: f64,
    pub beta3: f64,
    pub beta2: f64,
}

impl VehicleState {
    pub fn new(x3: f64, y3: f64, theta3: f64, beta3: f64, beta2: f64) -> Self {
        Self { x3, y3, theta3, beta3, beta2 }
    }

    pub fn to_vector(&self) -> Vector5<f64> {
        Vector5::new(self.x3, self.y3, self.theta3, self.beta3, self.beta2)
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }
}

/// Tractor curvature and motion direction of the tractor rear axle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub u: f64,
    pub v: f64,
}

impl ControlInput {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn from_steering_angle(alpha: f64, wheelbase: f64, v: f64) -> Self {
        Self { u: alpha.tan() / wheelbase, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Axle poses of tractor (rear axle), dolly and semitrailer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentPoses {
    pub tractor: Pose,
    pub dolly: Pose,
    pub semitrailer: Pose,
}
