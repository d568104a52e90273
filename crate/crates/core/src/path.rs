//! Nominal paths sampled at uniform arc-length spacing of the semitrailer
//! axle, carrying full state and control information.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::{VehicleParams, VehicleState};

/// Half-width of the local projection window [m].
pub const PROJECTION_WINDOW: f64 = 2.0;

/// Nominal state, control and curvature at station `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub s: f64,
    pub xr: VehicleState,
    pub ur: f64,
    pub v3r_sign: f64,
    pub kappa3r: f64,
}

impl PathSample {
    fn lerp(&self, other: &PathSample, t: f64) -> PathSample {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        PathSample {
            s: mix(self.s, other.s),
            xr: VehicleState::new(
                mix(self.xr.x3, other.xr.x3),
                mix(self.xr.y3, other.xr.y3),
                mix(self.xr.theta3, other.xr.theta3),
                mix(self.xr.beta3, other.xr.beta3),
                mix(self.xr.beta2, other.xr.beta2),
            ),
            ur: mix(self.ur, other.ur),
            v3r_sign: self.v3r_sign,
            kappa3r: mix(self.kappa3r, other.kappa3r),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PathRow {
    s: f64,
    x3r: f64,
    y3r: f64,
    theta3r: f64,
    beta3r: f64,
    beta2r: f64,
    ur: f64,
    v3r_sign: f64,
    kappa3r: f64,
}

/// Uniformly sampled nominal path.
///
/// Samples may extend beyond [`NominalPath::s_end`] when the path has been
/// padded with a straight continuation for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalPath {
    samples: Vec<PathSample>,
    delta_s: f64,
    direction: f64,
    s_end: f64,
}

impl NominalPath {
    pub fn from_samples(samples: Vec<PathSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InfeasiblePath("a path needs at least two samples".into()));
        }
        let delta_s = samples[1].s - samples[0].s;
        if !(delta_s > 0.0) {
            return Err(Error::InfeasiblePath("stations must be strictly increasing".into()));
        }
        let direction = samples[0].v3r_sign;
        if direction != 1.0 && direction != -1.0 {
            return Err(Error::InfeasiblePath(format!("v3r_sign must be +1 or -1, got {direction}")));
        }
        for (k, w) in samples.windows(2).enumerate() {
            let ds = w[1].s - w[0].s;
            if (ds - delta_s).abs() > 1e-6 * delta_s.max(1.0) {
                return Err(Error::InfeasiblePath(format!("non-uniform spacing at sample {}", k + 1)));
            }
            if w[1].v3r_sign != direction {
                return Err(Error::InfeasiblePath("motion direction changes along the path".into()));
            }
        }
        let s_end = samples[samples.len() - 1].s;
        Ok(Self { samples, delta_s, direction, s_end })
    }

    pub fn samples(&self) -> &[PathSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn delta_s(&self) -> f64 {
        self.delta_s
    }

    /// Nominal motion direction `v3r_sign`.
    pub fn direction(&self) -> f64 {
        self.direction
    }

    pub fn s_start(&self) -> f64 {
        self.samples[0].s
    }

    /// End of the nominal data (excluding any straight padding).
    pub fn s_end(&self) -> f64 {
        self.s_end
    }

    /// Last station available for queries, padding included.
    pub fn s_last(&self) -> f64 {
        self.samples[self.samples.len() - 1].s
    }

    /// Copy of the path padded with `extra` metres of straight continuation
    /// along the final heading; `s_end` is unchanged.
    pub fn extended_straight(&self, extra: f64) -> NominalPath {
        let mut samples = self.samples.clone();
        let last = samples[samples.len() - 1];
        let n = (extra / self.delta_s).ceil() as usize;
        let (c, s) = (last.xr.theta3.cos(), last.xr.theta3.sin());
        for k in 1..=n {
            let d = k as f64 * self.delta_s;
            samples.push(PathSample {
                s: last.s + d,
                xr: VehicleState::new(
                    last.xr.x3 + self.direction * d * c,
                    last.xr.y3 + self.direction * d * s,
                    last.xr.theta3,
                    0.0,
                    0.0,
                ),
                ur: 0.0,
                v3r_sign: self.direction,
                kappa3r: 0.0,
            });
        }
        NominalPath { samples, delta_s: self.delta_s, direction: self.direction, s_end: self.s_end }
    }

    /// Linear interpolation of all sample fields at station `s`.
    pub fn interpolate(&self, s: f64) -> Result<PathSample> {
        let s0 = self.s_start();
        let tol = 1e-9 * self.delta_s;
        if !(s >= s0 - tol && s <= self.s_last() + tol) {
            return Err(Error::OutOfDomain { s, start: s0, end: self.s_last() });
        }
        let pos = ((s - s0) / self.delta_s).max(0.0);
        let idx = (pos.floor() as usize).min(self.samples.len() - 2);
        let t = (pos - idx as f64).clamp(0.0, 1.0);
        if t == 0.0 {
            return Ok(self.samples[idx]);
        }
        if t == 1.0 {
            return Ok(self.samples[idx + 1]);
        }
        let mut sample = self.samples[idx].lerp(&self.samples[idx + 1], t);
        sample.s = s;
        Ok(sample)
    }

    /// Station of the local orthogonal projection of `p` onto the
    /// semitrailer-axle path, searched in `[s_prev, s_prev + window]`.
    pub fn project(&self, p: (f64, f64), s_prev: f64) -> Result<f64> {
        self.project_in_window(p, s_prev, PROJECTION_WINDOW)
    }

    pub fn project_in_window(&self, p: (f64, f64), s_prev: f64, window: f64) -> Result<f64> {
        let s0 = self.s_start();
        let lo = s_prev.max(s0);
        let hi = (s_prev + window).min(self.s_last());
        if !(lo <= hi) {
            return Err(Error::ProjectionLost { s_prev });
        }
        let first = (((lo - s0) / self.delta_s).floor() as usize).min(self.samples.len() - 2);
        let mut best = (f64::INFINITY, lo);
        for k in first..self.samples.len() - 1 {
            let a = &self.samples[k];
            let b = &self.samples[k + 1];
            if a.s > hi {
                break;
            }
            let (dx, dy) = (b.xr.x3 - a.xr.x3, b.xr.y3 - a.xr.y3);
            let len2 = dx * dx + dy * dy;
            let mut t = if len2 > 0.0 { ((p.0 - a.xr.x3) * dx + (p.1 - a.xr.y3) * dy) / len2 } else { 0.0 };
            // restrict to the part of the segment inside the window
            let t_lo = ((lo - a.s) / (b.s - a.s)).max(0.0);
            let t_hi = ((hi - a.s) / (b.s - a.s)).min(1.0);
            if t_lo > t_hi {
                continue;
            }
            t = t.clamp(t_lo, t_hi);
            let (qx, qy) = (a.xr.x3 + t * dx, a.xr.y3 + t * dy);
            let d2 = (p.0 - qx).powi(2) + (p.1 - qy).powi(2);
            if d2 < best.0 {
                best = (d2, a.s + t * (b.s - a.s));
            }
        }
        let s = best.1;
        // a minimum pinned to the far edge of the window is not a local projection
        if hi < self.s_last() && s >= hi - 1e-9 {
            return Err(Error::ProjectionLost { s_prev });
        }
        Ok(s.max(s_prev.max(s0)))
    }

    /// Largest one-step residual of `dx_r/ds = v3r_sign f(x_r, u_r)` using the
    /// trapezoidal rule between adjacent samples (infinity norm).
    pub fn max_model_residual(&self, params: &VehicleParams) -> Result<f64> {
        let mut worst: f64 = 0.0;
        let rates = self.samples.iter().map(|smp| params.unit_rates(&smp.xr, smp.ur)).collect::<Result<Vec<_>>>()?;
        for k in 0..self.samples.len() - 1 {
            let a = &self.samples[k];
            let b = &self.samples[k + 1];
            let h = b.s - a.s;
            let step = b.xr.to_vector() - a.xr.to_vector();
            let predicted = (rates[k] + rates[k + 1]) * (0.5 * h * a.v3r_sign);
            worst = worst.max((step - predicted).abs().max());
        }
        Ok(worst)
    }

    /// Checks that `kappa3r = tan(beta3r)/L3` holds on every sample.
    pub fn max_curvature_mismatch(&self, params: &VehicleParams) -> f64 {
        self.samples.iter().map(|smp| (smp.kappa3r - smp.xr.beta3.tan() / params.l3).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for smp in self.samples.iter().filter(|smp| smp.s <= self.s_end + 1e-9) {
            w.serialize(PathRow {
                s: smp.s,
                x3r: smp.xr.x3,
                y3r: smp.xr.y3,
                theta3r: smp.xr.theta3,
                beta3r: smp.xr.beta3,
                beta2r: smp.xr.beta2,
                ur: smp.ur,
                v3r_sign: smp.v3r_sign,
                kappa3r: smp.kappa3r,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut samples = Vec::new();
        for row in r.deserialize() {
            let row: PathRow = row?;
            samples.push(PathSample {
                s: row.s,
                xr: VehicleState::new(row.x3r, row.y3r, row.theta3r, row.beta3r, row.beta2r),
                ur: row.ur,
                v3r_sign: row.v3r_sign,
                kappa3r: row.kappa3r,
            });
        }
        Self::from_samples(samples)
    }
}

fn check_direction(direction: f64) -> Result<()> {
    if direction == 1.0 || direction == -1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("direction must be +1 or -1, got {direction}")))
    }
}

/// Straight path along the x-axis with the semitrailer heading `+x`. For a
/// backward path the axle travels towards `-x` as `s` increases.
pub fn generate_straight(length: f64, direction: f64, delta_s: f64) -> Result<NominalPath> {
    check_direction(direction)?;
    if !(length > 0.0 && delta_s > 0.0) {
        return Err(Error::InvalidParameter("length and delta_s must be positive".into()));
    }
    let n = (length / delta_s + 1e-9).floor() as usize;
    let samples = (0..=n)
        .map(|k| {
            let s = k as f64 * delta_s;
            PathSample {
                s,
                xr: VehicleState::new(direction * s, 0.0, 0.0, 0.0, 0.0),
                ur: 0.0,
                v3r_sign: direction,
                kappa3r: 0.0,
            }
        })
        .collect();
    NominalPath::from_samples(samples)
}

/// One piece of a curvature profile: constant, or a raised-cosine blend.
#[derive(Debug, Clone, Copy)]
struct CurvaturePiece {
    len: f64,
    from: f64,
    to: f64,
}

impl CurvaturePiece {
    fn kappa(&self, tau: f64) -> f64 {
        self.from + (self.to - self.from) * 0.5 * (1.0 - (PI * tau / self.len).cos())
    }

    fn dkappa(&self, tau: f64) -> f64 {
        (self.to - self.from) * 0.5 * PI / self.len * (PI * tau / self.len).sin()
    }

    fn turned(&self, tau: f64) -> f64 {
        self.from * tau + (self.to - self.from) * 0.5 * (tau - self.len / PI * (PI * tau / self.len).sin())
    }
}

/// Semitrailer curvature as a function of arc length in the heading
/// direction, with closed-form heading.
#[derive(Debug, Clone)]
struct CurvatureProfile {
    heading0: f64,
    pieces: Vec<CurvaturePiece>,
}

impl CurvatureProfile {
    fn length(&self) -> f64 {
        self.pieces.iter().map(|p| p.len).sum()
    }

    fn locate(&self, sigma: f64) -> (usize, f64, f64) {
        let mut start = 0.0;
        let mut heading = self.heading0;
        for (i, p) in self.pieces.iter().enumerate() {
            if sigma <= start + p.len || i == self.pieces.len() - 1 {
                return (i, (sigma - start).clamp(0.0, p.len), heading);
            }
            start += p.len;
            heading += p.turned(p.len);
        }
        unreachable!("profile has at least one piece")
    }

    fn kappa(&self, sigma: f64) -> f64 {
        let (i, tau, _) = self.locate(sigma);
        self.pieces[i].kappa(tau)
    }

    fn dkappa(&self, sigma: f64) -> f64 {
        let (i, tau, _) = self.locate(sigma);
        self.pieces[i].dkappa(tau)
    }

    fn heading(&self, sigma: f64) -> f64 {
        let (i, tau, h) = self.locate(sigma);
        h + self.pieces[i].turned(tau)
    }
}

/// Simpson integration of (cos, sin) of the heading over `[a, b]`.
fn integrate_direction(profile: &CurvatureProfile, a: f64, b: f64, steps: usize) -> (f64, f64) {
    let n = steps + steps % 2;
    let h = (b - a) / n as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..=n {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let th = profile.heading(a + i as f64 * h);
        sx += w * th.cos();
        sy += w * th.sin();
    }
    (sx * h / 3.0, sy * h / 3.0)
}

/// Figure-eight traced by the semitrailer axle: two mirrored lobes of
/// radius `radius`, joined at a right-angle crossing by straight legs, with
/// raised-cosine curvature blends of length `radius`. Joint angles follow
/// from `beta3r = atan(L3 kappa3r)` and the off-axle hitch dynamics, which
/// are stable in the reverse direction of travel and are integrated that way.
pub fn generate_figure_eight(params: &VehicleParams, radius: f64, direction: f64, delta_s: f64) -> Result<NominalPath> {
    generate_figure_eight_laps(params, radius, direction, delta_s, 1)
}

/// [`generate_figure_eight`] traversed `laps` times.
pub fn generate_figure_eight_laps(
    params: &VehicleParams,
    radius: f64,
    direction: f64,
    delta_s: f64,
    laps: usize,
) -> Result<NominalPath> {
    check_direction(direction)?;
    if laps == 0 {
        return Err(Error::InvalidParameter("laps must be at least 1".into()));
    }
    if !(radius > 0.0 && delta_s > 0.0) {
        return Err(Error::InvalidParameter("radius and delta_s must be positive".into()));
    }
    let k = 1.0 / radius;
    let gamma = FRAC_PI_4;
    let blend = radius;
    // half a lobe turns by pi/2 + gamma
    let arc = 2.0 * (FRAC_PI_2 + gamma) / k - blend;
    if arc <= 0.0 {
        return Err(Error::InfeasiblePath("curvature blends longer than the lobe".into()));
    }
    // leg length so that each lobe returns to the crossing point
    let half_curve = CurvatureProfile {
        heading0: gamma,
        pieces: vec![
            CurvaturePiece { len: blend, from: 0.0, to: -k },
            CurvaturePiece { len: arc / 2.0, from: -k, to: -k },
        ],
    };
    let (_, dy) = integrate_direction(&half_curve, 0.0, half_curve.length(), 40_000);
    let leg = -dy / gamma.sin();
    if leg < 0.0 {
        return Err(Error::InfeasiblePath("lobes overlap the crossing".into()));
    }
    let lobe = |sign: f64| {
        [
            CurvaturePiece { len: leg, from: 0.0, to: 0.0 },
            CurvaturePiece { len: blend, from: 0.0, to: sign * k },
            CurvaturePiece { len: arc, from: sign * k, to: sign * k },
            CurvaturePiece { len: blend, from: sign * k, to: 0.0 },
            CurvaturePiece { len: leg, from: 0.0, to: 0.0 },
        ]
    };
    let mut pieces = Vec::with_capacity(10 * laps);
    for _ in 0..laps {
        pieces.extend_from_slice(&lobe(-1.0));
        pieces.extend_from_slice(&lobe(1.0));
    }
    let profile = CurvatureProfile { heading0: gamma, pieces };
    let total = profile.length();
    generate_from_profile(params, &profile, total, direction, delta_s)
}

fn generate_from_profile(
    params: &VehicleParams,
    profile: &CurvatureProfile,
    total: f64,
    direction: f64,
    delta_s: f64,
) -> Result<NominalPath> {
    let n = (total / delta_s + 1e-9).floor() as usize;
    // stations in the heading direction; for a backward path s runs from the far end
    let sigma_of = |j: usize| {
        if direction > 0.0 {
            j as f64 * delta_s
        } else {
            total - j as f64 * delta_s
        }
    };

    let l3 = params.l3;
    let beta3_of = |sigma: f64| (l3 * profile.kappa(sigma)).atan();
    // dtheta2/dsigma demanded by the geometry
    let dolly_rate = |sigma: f64| {
        let kap = profile.kappa(sigma);
        kap + l3 * profile.dkappa(sigma) / (1.0 + (l3 * kap).powi(2))
    };
    // tractor curvature that realises the demanded dolly rate at hitch angle beta2
    let curvature_for = |beta2: f64, sigma: f64| {
        let c = dolly_rate(sigma) * params.l2 * beta3_of(sigma).cos();
        (beta2.sin() - c * beta2.cos()) / (params.m1 * (beta2.cos() + c * beta2.sin()))
    };
    let beta2_rate = |beta2: f64, sigma: f64| {
        let u = curvature_for(beta2, sigma);
        params.hitch_turn_rate(beta2, beta3_of(sigma), u)
    };

    // integrate the hitch dynamics from sigma = total down to 0 (stable
    // direction), twice so the closed loop reaches its periodic solution
    let sub = 4usize;
    let grid = (total / delta_s).ceil() as usize * sub;
    let h = total / grid as f64;
    let mut beta2_grid = vec![0.0; grid + 1];
    let mut b2 = 0.0;
    for _pass in 0..2 {
        beta2_grid[grid] = b2;
        for i in (0..grid).rev() {
            let sig = (i + 1) as f64 * h;
            let k1 = beta2_rate(b2, sig);
            let k2 = beta2_rate(b2 - 0.5 * h * k1, sig - 0.5 * h);
            let k3 = beta2_rate(b2 - 0.5 * h * k2, sig - 0.5 * h);
            let k4 = beta2_rate(b2 - h * k3, sig - h);
            b2 -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !b2.is_finite() || b2.abs() >= FRAC_PI_2 {
                return Err(Error::InfeasiblePath(format!("hitch angle diverges at sigma = {sig:.2} m")));
            }
            beta2_grid[i] = b2;
        }
    }
    // cubic Hermite interpolation of beta2 on the fine grid
    let beta2_at = |sigma: f64| {
        let pos = (sigma / h).clamp(0.0, grid as f64);
        let i = (pos.floor() as usize).min(grid - 1);
        let t = pos - i as f64;
        let (y0, y1) = (beta2_grid[i], beta2_grid[i + 1]);
        let (d0, d1) = (beta2_rate(y0, i as f64 * h) * h, beta2_rate(y1, (i + 1) as f64 * h) * h);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * d1
    };

    // positions by Simpson integration between consecutive samples
    let mut samples = Vec::with_capacity(n + 1);
    let (mut x, mut y) = (0.0, 0.0);
    let mut prev_sigma = 0.0;
    let mut sigma_order: Vec<usize> = (0..=n).collect();
    if direction < 0.0 {
        sigma_order.reverse();
    }
    // accumulate positions in increasing sigma, then assign by station
    let mut positions = vec![(0.0, 0.0); n + 1];
    for &j in &sigma_order {
        let sig = sigma_of(j);
        let (dx, dy) = integrate_direction(profile, prev_sigma, sig, 64);
        x += dx;
        y += dy;
        prev_sigma = sig;
        positions[j] = (x, y);
    }
    for j in 0..=n {
        let sig = sigma_of(j);
        let beta3 = beta3_of(sig);
        let beta2 = beta2_at(sig);
        let ur = curvature_for(beta2, sig);
        let state = VehicleState::new(positions[j].0, positions[j].1, profile.heading(sig), beta3, beta2);
        if ur.abs() > params.u_max {
            return Err(Error::InfeasiblePath(format!(
                "nominal tractor curvature {ur:.4} exceeds u_max = {} at s = {:.2} m",
                params.u_max,
                j as f64 * delta_s
            )));
        }
        let c1 = params.c1(beta2, beta3, ur);
        if c1 <= crate::vehicle::SINGULAR_C1 {
            return Err(Error::InfeasiblePath(format!(
                "singular nominal configuration at s = {:.2} m",
                j as f64 * delta_s
            )));
        }
        samples.push(PathSample {
            s: j as f64 * delta_s,
            xr: state,
            ur,
            v3r_sign: direction,
            kappa3r: beta3.tan() / l3,
        });
    }
    NominalPath::from_samples(samples)
}
