//! Receding-horizon path-following MPC and the saturated LQ baseline.
//!
//! Each cycle the error model is linearized at the horizon stations
//! `s0 + k ds`, the predicted errors are eliminated, and the resulting dense
//! QP over `(u~_0..u~_{N-1}, xi_1..xi_N)` is solved. Rows, in order: curvature
//! box (N), curvature slew (N), joint-angle polytope (N m, soft, one slack per
//! stage shared by the stage's rows) and slack sign (N).

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix4, RowVector4, SMatrix, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_model::{compute_error, linearize_sample, LinearizedModel, PathError};
use crate::path::{NominalPath, PathSample};
use crate::qp::{ActiveBound, QpProblem, QpSettings, QpSolver, QpStatus};
use crate::riccati::{dare_residual, solve_dare, spectral_radius};
use crate::vehicle::{VehicleParams, VehicleState, SINGULAR_C1};

/// Jacobian of the auxiliary segment errors, 8 x 4.
pub type OutputMatrix = SMatrix<f64, 8, 4>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Prediction horizon in steps.
    #[serde(alias = "N")]
    pub horizon: usize,
    /// Prediction grid spacing [m].
    pub delta_s: f64,
    /// Diagonal weights on `(z1, th1, z2, th2, b2, z3, th3, b3)`.
    pub q_bar: [f64; 8],
    /// Control frequency [Hz].
    pub f_s: f64,
    pub slack_linear_weight: f64,
    pub slack_quadratic_weight: f64,
    pub u_max: f64,
    pub udot_max: f64,
    /// Include the soft joint-angle polytope rows.
    pub joint_constraints: bool,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let w = 1.0 / 35.0;
        Self {
            horizon: 50,
            delta_s: 0.2,
            q_bar: [0.5 * w, w, 0.5 * w, w, 4.0 * w, 0.5 * w, w, 4.0 * w],
            f_s: 20.0,
            slack_linear_weight: 1e3,
            slack_quadratic_weight: 1e4,
            u_max: 0.18,
            udot_max: 0.13,
            joint_constraints: true,
            qp_tol: 1e-6,
            qp_max_iter: 4000,
        }
    }
}

impl MpcConfig {
    /// Defaults with the actuator limits taken from `params`.
    pub fn for_vehicle(params: &VehicleParams) -> Self {
        Self { u_max: params.u_max, udot_max: params.udot_max, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.delta_s > 0.0 && self.f_s > 0.0 && self.u_max > 0.0 && self.udot_max > 0.0) {
            return bad("delta_s, f_s, u_max and udot_max must be positive");
        }
        if !self.q_bar.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            return bad("q_bar weights must be finite and nonnegative");
        }
        if !(self.slack_linear_weight >= 0.0 && self.slack_quadratic_weight > 0.0) {
            return bad("slack weights: linear >= 0, quadratic > 0");
        }
        if !(self.qp_tol > 0.0 && self.qp_max_iter > 0) {
            return bad("qp_tol and qp_max_iter must be positive");
        }
        Ok(())
    }

    /// Largest curvature change between consecutive control cycles.
    pub fn cycle_slew(&self) -> f64 {
        self.udot_max / self.f_s
    }
}

/// Convex polytope `H (beta3, beta2)' <= h` in joint-angle space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAnglePolytope {
    rows: Vec<[f64; 2]>,
    h: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolytopeRow {
    h_beta3: f64,
    h_beta2: f64,
    h: f64,
}

/// Octagon normals used by [`JointAnglePolytope::symmetric_octagon`].
pub const OCTAGON_NORMALS: [[f64; 2]; 4] = [
    [1.0, 0.0],
    [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
    [0.0, 1.0],
    [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2],
];

/// Supports of the default joint-angle octagon: the stable and visible
/// region on a 2 degree grid for the default vehicle, fitted with a 0.05 rad
/// margin (the diagonal facet is inactive).
pub const DEFAULT_OCTAGON_SUPPORTS: [f64; 4] = [0.68, 0.838, 0.505, 0.515];

impl JointAnglePolytope {
    pub fn new(rows: Vec<[f64; 2]>, h: Vec<f64>) -> Result<Self> {
        if rows.len() != h.len() || rows.len() < 3 {
            return Err(Error::InvalidParameter("polytope needs at least 3 rows and matching h".into()));
        }
        if !rows.iter().flatten().chain(&h).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("polytope entries must be finite".into()));
        }
        if !h.iter().all(|&v| v > 0.0) {
            return Err(Error::InvalidParameter("polytope must contain the origin strictly (h > 0)".into()));
        }
        let mut angles: Vec<f64> =
            rows.iter().filter(|r| r[0] != 0.0 || r[1] != 0.0).map(|r| r[1].atan2(r[0])).collect();
        angles.sort_by(f64::total_cmp);
        let gap = angles
            .windows(2)
            .map(|w| w[1] - w[0])
            .chain(angles.first().zip(angles.last()).map(|(a, b)| a + 2.0 * std::f64::consts::PI - b))
            .fold(0.0, f64::max);
        if angles.len() < 3 || gap >= std::f64::consts::PI {
            return Err(Error::InvalidParameter("polytope is unbounded".into()));
        }
        Ok(Self { rows, h })
    }

    /// `|beta3| <= b3_max`, `|beta2| <= b2_max`.
    pub fn box_limits(b3_max: f64, b2_max: f64) -> Result<Self> {
        Self::new(vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], vec![b3_max, b3_max, b2_max, b2_max])
    }

    /// Octagon symmetric under `beta -> -beta` with support `a[i]` along
    /// `+-OCTAGON_NORMALS[i]`.
    pub fn symmetric_octagon(a: [f64; 4]) -> Result<Self> {
        let mut rows = Vec::with_capacity(8);
        let mut h = Vec::with_capacity(8);
        for (n, &s) in OCTAGON_NORMALS.iter().zip(&a) {
            rows.push(*n);
            h.push(s);
            rows.push([-n[0], -n[1]]);
            h.push(s);
        }
        Self::new(rows, h)
    }

    /// Symmetric octagon with [`DEFAULT_OCTAGON_SUPPORTS`].
    pub fn fitted_default() -> Self {
        Self::symmetric_octagon(DEFAULT_OCTAGON_SUPPORTS).expect("default supports are valid")
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.rows
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `max_i (H_i beta - h_i)`; nonpositive inside.
    pub fn max_violation(&self, beta3: f64, beta2: f64) -> f64 {
        self.rows.iter().zip(&self.h).map(|(r, h)| r[0] * beta3 + r[1] * beta2 - h).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, beta3: f64, beta2: f64) -> bool {
        self.max_violation(beta3, beta2) <= 0.0
    }

    /// Vertices in counter-clockwise order.
    pub fn vertices(&self) -> Vec<(f64, f64)> {
        let m = self.rows.len();
        let mut pts = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                let (a, b) = (self.rows[i], self.rows[j]);
                let det = a[0] * b[1] - a[1] * b[0];
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (self.h[i] * b[1] - a[1] * self.h[j]) / det;
                let y = (a[0] * self.h[j] - self.h[i] * b[0]) / det;
                if self.max_violation(x, y) <= 1e-9 {
                    pts.push((x, y));
                }
            }
        }
        pts.sort_by(|p, q| p.1.atan2(p.0).total_cmp(&q.1.atan2(q.0)));
        pts.dedup_by(|p, q| (p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
        pts
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (r, &h) in self.rows.iter().zip(&self.h) {
            w.serialize(PolytopeRow { h_beta3: r[0], h_beta2: r[1], h })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        let mut h = Vec::new();
        for row in r.deserialize() {
            let row: PolytopeRow = row?;
            rows.push([row.h_beta3, row.h_beta2]);
            h.push(row.h);
        }
        Self::new(rows, h)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// `h - H (beta3r, beta2r)'`, which must be strictly positive.
pub fn shift_joint_polytope(poly: &JointAnglePolytope, sample: &PathSample) -> Result<Vec<f64>> {
    let (b3, b2) = (sample.xr.beta3, sample.xr.beta2);
    let mut out = Vec::with_capacity(poly.len());
    for (i, (r, h)) in poly.rows.iter().zip(&poly.h).enumerate() {
        let v = h - (r[0] * b3 + r[1] * b2);
        if !(v > 0.0) {
            return Err(Error::NominalOutsidePolytope { row: i, slack: v });
        }
        out.push(v);
    }
    Ok(out)
}

/// Largest `|du/ds|` compatible with the curvature-rate limit at `sample`.
pub fn slew_bound(sample: &PathSample, params: &VehicleParams, v_abs: f64) -> Result<f64> {
    let c1 = params.c1(sample.xr.beta2, sample.xr.beta3, sample.ur);
    if !(c1 > SINGULAR_C1) {
        return Err(Error::SingularConfiguration { c1 });
    }
    Ok(params.udot_max / (v_abs * c1))
}

/// Rows `(z1, th1, z2, th2, b2, z3, th3, b3)` against `(z3, th3, b3, b2)`.
pub fn build_m(params: &VehicleParams) -> OutputMatrix {
    let (l2, l3, m1) = (params.l2, params.l3, params.m1);
    #[rustfmt::skip]
    let m = OutputMatrix::from_row_slice(&[
        1.0, l3 + l2 + m1, l2 + m1, m1,
        0.0, 1.0, 1.0, 1.0,
        1.0, l3, 0.0, 0.0,
        0.0, 1.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
    ]);
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostMatrices {
    pub m: OutputMatrix,
    pub q: Matrix4<f64>,
    pub p_n: Matrix4<f64>,
    /// LQ gain: `u~ = -k x~`.
    pub k: RowVector4<f64>,
    pub spectral_radius: f64,
    pub dare_residual: f64,
    pub dare_iterations: usize,
}

/// Linearization of the error model about a straight nominal path.
pub fn straight_model(params: &VehicleParams, delta_s: f64, direction: f64) -> Result<LinearizedModel> {
    let sample = PathSample { s: 0.0, xr: VehicleState::default(), ur: 0.0, v3r_sign: direction, kappa3r: 0.0 };
    linearize_sample(params, &sample, delta_s)
}

pub fn design_cost(params: &VehicleParams, cfg: &MpcConfig, model: &LinearizedModel) -> Result<CostMatrices> {
    let m = build_m(params);
    let q_bar = SMatrix::<f64, 8, 8>::from_diagonal(&SMatrix::<f64, 8, 1>::from_column_slice(&cfg.q_bar));
    let q = m.transpose() * q_bar * m;
    let q = (q + q.transpose()) * 0.5;
    let sol = solve_dare(&model.f, &model.g, &q, 1.0)?;
    let closed = model.f - model.g * sol.k;
    Ok(CostMatrices {
        m,
        q,
        p_n: sol.p,
        k: sol.k,
        spectral_radius: spectral_radius(&closed),
        dare_residual: dare_residual(&model.f, &model.g, &q, 1.0, &sol.p),
        dare_iterations: sol.iterations,
    })
}

/// Cost design about the backward straight path.
pub fn design_default(params: &VehicleParams, cfg: &MpcConfig) -> Result<CostMatrices> {
    design_cost(params, cfg, &straight_model(params, cfg.delta_s, -1.0)?)
}

/// Condensed prediction `x_k = phi_k x0 + gamma_k u` and the quadratic cost
/// `sum_{k<N} |x_k|_Q^2 + u_k^2 + |x_N|_PN^2 = 0.5 u'Hu + x0'G'u + x0'C x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    pub phi: Vec<Matrix4<f64>>,
    /// Block row `k` (rows `4k..4k+4`) is `gamma_k`, for `k = 0..=N`.
    pub gamma: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    /// `N x 4`; the gradient is `gradient_map * x0`.
    pub gradient_map: DMatrix<f64>,
    pub constant_map: Matrix4<f64>,
}

pub fn condense(models: &[LinearizedModel], q: &Matrix4<f64>, p_n: &Matrix4<f64>) -> Condensed {
    let n = models.len();
    let mut phi = Vec::with_capacity(n + 1);
    phi.push(Matrix4::identity());
    let mut gamma = DMatrix::zeros(4 * (n + 1), n);
    for (k, model) in models.iter().enumerate() {
        phi.push(model.f * phi[k]);
        let prev = gamma.view((4 * k, 0), (4, k)).clone_owned();
        let next = DMatrix::from_fn(4, 4, |i, j| model.f[(i, j)]) * prev;
        gamma.view_mut((4 * (k + 1), 0), (4, k)).copy_from(&next);
        for i in 0..4 {
            gamma[(4 * (k + 1) + i, k)] = model.g[i];
        }
    }
    let mut hessian = DMatrix::identity(n, n);
    let mut gradient_map = DMatrix::zeros(n, 4);
    let mut constant_map = *q;
    for k in 1..=n {
        let w = if k == n { p_n } else { q };
        let wd = DMatrix::from_fn(4, 4, |i, j| w[(i, j)]);
        let g = gamma.view((4 * k, 0), (4, k));
        let wg = &wd * g;
        let mut hk = hessian.view_mut((0, 0), (k, k));
        hk += g.transpose() * &wg;
        let phik = DMatrix::from_fn(4, 4, |i, j| phi[k][(i, j)]);
        let mut gm = gradient_map.view_mut((0, 0), (k, 4));
        gm += wg.transpose() * phik;
        constant_map += phi[k].transpose() * w * phi[k];
    }
    hessian *= 2.0;
    hessian = (&hessian + hessian.transpose()) * 0.5;
    gradient_map *= 2.0;
    Condensed { phi, gamma, hessian, gradient_map, constant_map }
}

/// Last commanded curvature and projection seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub u_prev: f64,
    pub s_prev: f64,
}

/// A condensed MPC QP together with the data needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcQp {
    pub problem: QpProblem,
    /// Objective offset so that `objective(y) + constant` is the MPC cost.
    pub constant: f64,
    pub horizon: usize,
    pub slacks: usize,
    pub polytope_rows: usize,
}

#[derive(Debug, Clone)]
struct StructureCache {
    models: Vec<LinearizedModel>,
    polytope: Option<JointAnglePolytope>,
    condensed: Condensed,
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    /// Joint-angle rows in terms of `x0`.
    poly_phi: DMatrix<f64>,
}

/// Builds MPC QPs, reusing the condensed structure while the linearized
/// models are unchanged.
#[derive(Debug, Clone, Default)]
pub struct QpBuilder {
    cache: Option<StructureCache>,
}

impl QpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        &mut self,
        e0: &PathError,
        s0: f64,
        path: &NominalPath,
        params: &VehicleParams,
        cfg: &MpcConfig,
        cost: &CostMatrices,
        polytope: Option<&JointAnglePolytope>,
        ctrl: &ControllerState,
    ) -> Result<MpcQp> {
        let n = cfg.horizon;
        let ds = cfg.delta_s;
        let s_far = s0 + n as f64 * ds;
        if s_far > path.s_last() + 1e-9 * ds {
            return Err(Error::PathExhausted { s: s_far });
        }
        let samples = (0..=n).map(|k| path.interpolate(s0 + k as f64 * ds)).collect::<Result<Vec<_>>>()?;
        let models = samples[..n].iter().map(|smp| linearize_sample(params, smp, ds)).collect::<Result<Vec<_>>>()?;
        let poly = if cfg.joint_constraints { polytope } else { None };
        let reuse = self.cache.as_ref().is_some_and(|c| c.models == models && c.polytope.as_ref() == poly);
        if !reuse {
            self.cache = Some(build_structure(models, poly, cost, cfg));
        }
        let cache = self.cache.as_ref().expect("cache populated above");
        let x0 = e0.to_vector();
        let x0d = DVector::from_column_slice(x0.as_slice());
        let m_poly = poly.map_or(0, JointAnglePolytope::len);
        let slacks = if poly.is_some() { n } else { 0 };
        let nv = n + slacks;
        let rows = cache.a.nrows();

        let mut q = DVector::zeros(nv);
        q.rows_mut(0, n).copy_from(&(&cache.condensed.gradient_map * &x0d));
        for k in 0..slacks {
            q[n + k] = cfg.slack_linear_weight;
        }
        let constant = x0.dot(&(cache.condensed.constant_map * x0));

        let mut l = DVector::from_element(rows, f64::NEG_INFINITY);
        let mut u = DVector::from_element(rows, f64::INFINITY);
        for k in 0..n {
            l[k] = -cfg.u_max - samples[k].ur;
            u[k] = cfg.u_max - samples[k].ur;
        }
        let cycle = cfg.cycle_slew();
        l[n] = ctrl.u_prev - cycle - samples[0].ur;
        u[n] = ctrl.u_prev + cycle - samples[0].ur;
        for k in 1..n {
            let bound = slew_bound(&samples[k], params, 1.0)? * ds;
            let dur = samples[k].ur - samples[k - 1].ur;
            l[n + k] = -bound - dur;
            u[n + k] = bound - dur;
        }
        if let Some(poly) = poly {
            let shift = &cache.poly_phi * &x0d;
            for k in 1..=n {
                let hbar = shift_joint_polytope(poly, &samples[k])?;
                for (i, hb) in hbar.iter().enumerate() {
                    let r = (k - 1) * m_poly + i;
                    u[2 * n + r] = hb - shift[r];
                }
            }
            for k in 0..n {
                l[2 * n + n * m_poly + k] = 0.0;
            }
        }
        let problem = QpProblem::new(cache.p.clone(), q, cache.a.clone(), l, u);
        Ok(MpcQp { problem, constant, horizon: n, slacks, polytope_rows: n * m_poly })
    }
}

fn build_structure(
    models: Vec<LinearizedModel>,
    poly: Option<&JointAnglePolytope>,
    cost: &CostMatrices,
    cfg: &MpcConfig,
) -> StructureCache {
    let n = models.len();
    let condensed = condense(&models, &cost.q, &cost.p_n);
    let m_poly = poly.map_or(0, JointAnglePolytope::len);
    let slacks = if poly.is_some() { n } else { 0 };
    let nv = n + slacks;
    let mut p = DMatrix::zeros(nv, nv);
    p.view_mut((0, 0), (n, n)).copy_from(&condensed.hessian);
    for k in 0..slacks {
        p[(n + k, n + k)] = 2.0 * cfg.slack_quadratic_weight;
    }
    let rows = 2 * n + n * m_poly + slacks;
    let mut a = DMatrix::zeros(rows, nv);
    for k in 0..n {
        a[(k, k)] = 1.0;
        a[(n + k, k)] = 1.0;
        if k > 0 {
            a[(n + k, k - 1)] = -1.0;
        }
    }
    let mut poly_phi = DMatrix::zeros(n * m_poly, 4);
    if let Some(poly) = poly {
        for k in 1..=n {
            let g = &condensed.gamma;
            for (i, hrow) in poly.rows().iter().enumerate() {
                let r = (k - 1) * m_poly + i;
                for j in 0..k {
                    a[(2 * n + r, j)] = hrow[0] * g[(4 * k + 2, j)] + hrow[1] * g[(4 * k + 3, j)];
                }
                a[(2 * n + r, n + k - 1)] = -1.0;
                for c in 0..4 {
                    poly_phi[(r, c)] = hrow[0] * condensed.phi[k][(2, c)] + hrow[1] * condensed.phi[k][(3, c)];
                }
            }
        }
        for k in 0..n {
            a[(2 * n + n * m_poly + k, n + k)] = 1.0;
        }
    }
    StructureCache { models, polytope: poly.cloned(), condensed, p, a, poly_phi }
}

/// One-shot QP construction (no structure reuse).
#[allow(clippy::too_many_arguments)]
pub fn build_qp(
    e0: &PathError,
    s0: f64,
    path: &NominalPath,
    params: &VehicleParams,
    cfg: &MpcConfig,
    cost: &CostMatrices,
    polytope: Option<&JointAnglePolytope>,
    ctrl: &ControllerState,
) -> Result<MpcQp> {
    QpBuilder::new().build(e0, s0, path, params, cfg, cost, polytope, ctrl)
}

/// Per-cycle controller output.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub s: f64,
    pub error: PathError,
    pub u_cmd: f64,
    pub qp_status: Option<QpStatus>,
    pub qp_objective: f64,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub slack_max: f64,
    pub solve_ms: f64,
    /// The QP failed and the saturated LQ action was applied instead.
    pub fallback: bool,
}

/// Common interface of the path-following controllers.
pub trait Controller {
    fn name(&self) -> &'static str;
    fn control_step(&mut self, state: &VehicleState) -> Result<StepDiagnostics>;
    fn state(&self) -> &ControllerState;
    fn path(&self) -> &NominalPath;
}

fn padded(path: &NominalPath, cfg: &MpcConfig) -> NominalPath {
    path.extended_straight(1.2 * cfg.horizon as f64 * cfg.delta_s)
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

type ActiveSet = Vec<(usize, ActiveBound)>;

pub struct MpcController {
    params: VehicleParams,
    cfg: MpcConfig,
    cost: CostMatrices,
    polytope: Option<JointAnglePolytope>,
    path: NominalPath,
    state: ControllerState,
    builder: QpBuilder,
    solver: QpSolver,
    warm: Option<WarmStart>,
}

impl MpcController {
    pub fn new(
        params: VehicleParams,
        cfg: MpcConfig,
        cost: CostMatrices,
        polytope: Option<JointAnglePolytope>,
        path: &NominalPath,
        s0: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let path = padded(path, &cfg);
        let u_prev = clamp(path.interpolate(s0)?.ur, -cfg.u_max, cfg.u_max);
        let solver = QpSolver::new(QpSettings { tol: cfg.qp_tol, max_iter: cfg.qp_max_iter });
        Ok(Self {
            params,
            cfg,
            cost,
            polytope,
            path,
            state: ControllerState { u_prev, s_prev: s0 },
            builder: QpBuilder::new(),
            solver,
            warm: None,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn cost(&self) -> &CostMatrices {
        &self.cost
    }

    pub fn polytope(&self) -> Option<&JointAnglePolytope> {
        self.polytope.as_ref()
    }

    /// Previous solution and active set shifted to the current station.
    fn warm_start(&self, s0: f64, qp: &MpcQp) -> Option<(DVector<f64>, ActiveSet)> {
        let warm = self.warm.as_ref()?;
        let nv = qp.problem.num_vars();
        if warm.y.len() != nv || warm.rows != qp.problem.num_rows() {
            return None;
        }
        let n = qp.horizon;
        let shift = (((s0 - warm.s) / self.cfg.delta_s).round().max(0.0) as usize).min(n);
        let mut y = warm.y.clone();
        for (offset, len) in [(0, n), (n, qp.slacks)] {
            for k in 0..len {
                y[offset + k] = warm.y[offset + (k + shift).min(len - 1)];
            }
        }
        let m_poly = if qp.slacks > 0 { qp.polytope_rows / n } else { 0 };
        let poly_end = 2 * n + qp.polytope_rows;
        let active = warm
            .active
            .iter()
            .filter_map(|&(row, side)| {
                // (block start, stage, offset within stage)
                let (start, stage, within, width) = if row < 2 * n {
                    (row / n * n, row % n, 0, 1)
                } else if row < poly_end {
                    let r = row - 2 * n;
                    (2 * n, r / m_poly, r % m_poly, m_poly)
                } else {
                    (poly_end, row - poly_end, 0, 1)
                };
                let stage = stage.checked_sub(shift)?;
                Some((start + stage * width + within, side))
            })
            .collect();
        Some((y, active))
    }
}

#[derive(Debug, Clone)]
struct WarmStart {
    s: f64,
    rows: usize,
    y: DVector<f64>,
    active: Vec<(usize, ActiveBound)>,
}

impl Controller for MpcController {
    fn name(&self) -> &'static str {
        "mpc"
    }

    fn control_step(&mut self, state: &VehicleState) -> Result<StepDiagnostics> {
        let start = Instant::now();
        let (s, e) = compute_error(&self.params, state, &self.path, self.state.s_prev)?;
        let mut qp = self.builder.build(
            &e,
            s,
            &self.path,
            &self.params,
            &self.cfg,
            &self.cost,
            self.polytope.as_ref(),
            &self.state,
        )?;
        if let Some((y0, active0)) = self.warm_start(s, &qp) {
            qp.problem.y0 = Some(y0);
            qp.problem.active0 = Some(active0);
        }
        let ur = self.path.interpolate(s)?.ur;
        let solved = self.solver.solve(&qp.problem);
        let (u_tilde, status, objective, iterations, kkt, slack_max, fallback) = match &solved {
            Ok(sol) if sol.status == QpStatus::Optimal => {
                let slack_max = sol.y.rows(qp.horizon, qp.slacks).iter().fold(0.0f64, |m, v| m.max(*v));
                self.warm =
                    Some(WarmStart { s, rows: qp.problem.num_rows(), y: sol.y.clone(), active: sol.active.clone() });
                (
                    sol.y[0],
                    Some(sol.status),
                    sol.objective + qp.constant,
                    sol.iterations,
                    sol.kkt_residual(),
                    slack_max,
                    false,
                )
            }
            other => {
                self.warm = None;
                let status = other.as_ref().ok().map(|sol| sol.status);
                let lq = -(self.cost.k * e.to_vector())[0];
                (lq, status, f64::NAN, other.as_ref().map_or(0, |sol| sol.iterations), f64::NAN, f64::NAN, true)
            }
        };
        let cycle = self.cfg.cycle_slew();
        let u_cmd = clamp(
            ur + u_tilde,
            (-self.cfg.u_max).max(self.state.u_prev - cycle),
            self.cfg.u_max.min(self.state.u_prev + cycle),
        );
        self.state = ControllerState { u_prev: u_cmd, s_prev: s };
        Ok(StepDiagnostics {
            s,
            error: e,
            u_cmd,
            qp_status: status,
            qp_objective: objective,
            qp_iterations: iterations,
            kkt_residual: kkt,
            slack_max,
            solve_ms: start.elapsed().as_secs_f64() * 1e3,
            fallback,
        })
    }

    fn state(&self) -> &ControllerState {
        &self.state
    }

    fn path(&self) -> &NominalPath {
        &self.path
    }
}

/// `u = sat(u_r - K x~)`, ignoring slew and joint-angle limits.
pub struct LqController {
    params: VehicleParams,
    k: RowVector4<f64>,
    u_max: f64,
    path: NominalPath,
    state: ControllerState,
}

impl LqController {
    pub fn new(
        params: VehicleParams,
        cfg: &MpcConfig,
        cost: &CostMatrices,
        path: &NominalPath,
        s0: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let path = padded(path, cfg);
        let u_prev = clamp(path.interpolate(s0)?.ur, -cfg.u_max, cfg.u_max);
        Ok(Self { params, k: cost.k, u_max: cfg.u_max, path, state: ControllerState { u_prev, s_prev: s0 } })
    }
}

/// Saturated LQ law at a given error.
pub fn lq_command(k: &RowVector4<f64>, e: &PathError, ur: f64, u_max: f64) -> f64 {
    clamp(ur - (k * e.to_vector())[0], -u_max, u_max)
}

impl Controller for LqController {
    fn name(&self) -> &'static str {
        "lq"
    }

    fn control_step(&mut self, state: &VehicleState) -> Result<StepDiagnostics> {
        let start = Instant::now();
        let (s, e) = compute_error(&self.params, state, &self.path, self.state.s_prev)?;
        let ur = self.path.interpolate(s)?.ur;
        let u_cmd = lq_command(&self.k, &e, ur, self.u_max);
        self.state = ControllerState { u_prev: u_cmd, s_prev: s };
        Ok(StepDiagnostics {
            s,
            error: e,
            u_cmd,
            qp_status: None,
            qp_objective: f64::NAN,
            qp_iterations: 0,
            kkt_residual: f64::NAN,
            slack_max: f64::NAN,
            solve_ms: start.elapsed().as_secs_f64() * 1e3,
            fallback: false,
        })
    }

    fn state(&self) -> &ControllerState {
        &self.state
    }

    fn path(&self) -> &NominalPath {
        &self.path
    }
}

/// Forward-simulated condensed cost, for checking [`condense`].
pub fn rollout_cost(
    models: &[LinearizedModel],
    q: &Matrix4<f64>,
    p_n: &Matrix4<f64>,
    x0: &Vector4<f64>,
    u: &[f64],
) -> f64 {
    let mut x = *x0;
    let mut total = 0.0;
    for (model, &uk) in models.iter().zip(u) {
        total += x.dot(&(q * x)) + uk * uk;
        x = model.f * x + model.g * uk;
    }
    total + x.dot(&(p_n * x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::generate_straight;
    use approx::assert_relative_eq;

    #[test]
    fn m_matrix_rows() {
        let m = build_m(&VehicleParams::default());
        let row0: Vec<f64> = m.row(0).iter().copied().collect();
        assert_relative_eq!(row0.as_slice(), [1.0, 13.53, 5.53, 1.66].as_slice(), epsilon = 1e-12);
        assert_eq!(m * Vector4::zeros(), SMatrix::<f64, 8, 1>::zeros());
        let col: Vec<f64> = (m * Vector4::new(1.0, 0.0, 0.0, 0.0)).iter().copied().collect();
        assert_eq!(col, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn box_polytope_shift() {
        let poly = JointAnglePolytope::box_limits(0.5, 0.6).unwrap();
        let mut sample = generate_straight(1.0, -1.0, 0.2).unwrap().samples()[0];
        assert_eq!(shift_joint_polytope(&poly, &sample).unwrap(), vec![0.5, 0.5, 0.6, 0.6]);
        sample.xr.beta3 = 0.1;
        sample.xr.beta2 = -0.2;
        let hbar = shift_joint_polytope(&poly, &sample).unwrap();
        let expected = [0.4, 0.6, 0.8, 0.4];
        for (a, b) in hbar.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        sample.xr.beta3 = 0.7;
        assert!(matches!(shift_joint_polytope(&poly, &sample), Err(Error::NominalOutsidePolytope { row: 0, .. })));
    }

    #[test]
    fn polytope_validation_and_vertices() {
        assert!(JointAnglePolytope::new(vec![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![1.0, 1.0, 1.0]).is_err());
        assert!(JointAnglePolytope::box_limits(-0.1, 1.0).is_err());
        let oct = JointAnglePolytope::symmetric_octagon([1.0, 10.0, 1.0, 10.0]).unwrap();
        // diagonal facets are redundant: the octagon is the unit box
        let v = oct.vertices();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|(a, b)| (a.abs() - 1.0).abs() < 1e-12 && (b.abs() - 1.0).abs() < 1e-12));
        assert!(oct.contains(0.0, 0.0) && !oct.contains(1.1, 0.0));
    }

    #[test]
    fn polytope_csv_round_trip() {
        let poly = JointAnglePolytope::fitted_default();
        let mut buf = Vec::new();
        poly.write_csv(&mut buf).unwrap();
        assert_eq!(JointAnglePolytope::read_csv(buf.as_slice()).unwrap(), poly);
    }

    #[test]
    fn slew_bound_examples() {
        let p = VehicleParams::default();
        let path = generate_straight(1.0, -1.0, 0.2).unwrap();
        assert_relative_eq!(slew_bound(&path.samples()[0], &p, 1.0).unwrap(), 0.13, epsilon = 1e-15);
        // beta3 = pi/3 gives C1 = 0.5 at beta2 = u = 0
        let mut s = path.samples()[0];
        s.xr.beta3 = std::f64::consts::FRAC_PI_3;
        assert_relative_eq!(slew_bound(&s, &p, 1.0).unwrap(), 0.26, epsilon = 1e-12);
    }

    #[test]
    fn default_config_matches_design_table() {
        let cfg = MpcConfig::default();
        assert_eq!(cfg.horizon, 50);
        assert_eq!(cfg.delta_s, 0.2);
        assert_eq!(cfg.f_s, 20.0);
        assert_relative_eq!(cfg.q_bar[4] * 35.0, 4.0, epsilon = 1e-14);
        assert_relative_eq!(cfg.cycle_slew(), 0.0065, epsilon = 1e-15);
    }
}
