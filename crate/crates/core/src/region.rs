//! Joint-angle regions: closed-loop stability sweep, rear LIDAR sensing
//! region, and the inner octagon used as the MPC joint-angle constraint.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_model::PathError;
use crate::mpc::{design_default, JointAnglePolytope, MpcConfig, OCTAGON_NORMALS};
use crate::path::generate_straight;
use crate::sim::{run_on_path, ControllerKind, ExperimentSpec, PathSpec, RunStatus, SimContext};
use crate::vehicle::{VehicleParams, VehicleState};

/// Travel allowed for a sweep cell to converge [m].
pub const SWEEP_DISTANCE: f64 = 150.0;
/// Default shrink applied to the stable and visible region before fitting [rad].
pub const DEFAULT_FIT_MARGIN: f64 = 0.05;
/// Support increment used by [`fit_inner_polytope`] [rad].
pub const FIT_STEP: f64 = 0.005;

/// Square grid `i * step` for `|i * step| <= limit`, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub step_deg: f64,
    pub limit_deg: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { step_deg: 2.0, limit_deg: 90.0 }
    }
}

impl GridSpec {
    pub fn with_step(step_deg: f64) -> Self {
        Self { step_deg, ..Self::default() }
    }

    /// Axis values in radians, symmetric about zero.
    pub fn axis(&self) -> Result<Vec<f64>> {
        if !(self.step_deg > 0.0 && self.limit_deg >= self.step_deg && self.limit_deg.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid step {} deg and limit {} deg must satisfy 0 < step <= limit",
                self.step_deg, self.limit_deg
            )));
        }
        let n = (self.limit_deg / self.step_deg - 1e-9).ceil() as i64;
        Ok((-n..=n).map(|i| (i as f64 * self.step_deg).to_radians()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub beta3_axis: Vec<f64>,
    pub beta2_axis: Vec<f64>,
    /// Row-major over `beta3_axis` then `beta2_axis`; `None` if not computed.
    pub stable: Option<Vec<bool>>,
    pub visible: Option<Vec<bool>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridRow {
    beta3: f64,
    beta2: f64,
    stable: Option<bool>,
    visible: Option<bool>,
}

impl RegionGrid {
    fn empty(spec: &GridSpec) -> Result<Self> {
        let axis = spec.axis()?;
        Ok(Self { beta3_axis: axis.clone(), beta2_axis: axis, stable: None, visible: None })
    }

    pub fn len(&self) -> usize {
        self.beta3_axis.len() * self.beta2_axis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i3: usize, i2: usize) -> usize {
        i3 * self.beta2_axis.len() + i2
    }

    pub fn cells(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.beta3_axis.iter().flat_map(move |&b3| self.beta2_axis.iter().map(move |&b2| (b3, b2)))
    }

    /// Nearest grid cell to `(beta3, beta2)`, or `None` outside the grid.
    pub fn nearest(&self, beta3: f64, beta2: f64) -> Option<usize> {
        let near = |axis: &[f64], v: f64| -> Option<usize> {
            let (first, last) = (axis[0], axis[axis.len() - 1]);
            let half = if axis.len() > 1 { 0.5 * (axis[1] - axis[0]) } else { 0.0 };
            if v < first - half || v > last + half {
                return None;
            }
            axis.iter().enumerate().min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs())).map(|(i, _)| i)
        };
        Some(self.index(near(&self.beta3_axis, beta3)?, near(&self.beta2_axis, beta2)?))
    }

    /// Cells that are both stable and visible.
    pub fn admissible(&self) -> Result<Vec<bool>> {
        match (&self.stable, &self.visible) {
            (Some(s), Some(v)) => Ok(s.iter().zip(v).map(|(a, b)| *a && *b).collect()),
            _ => Err(Error::InvalidParameter("grid needs both stability and sensing labels".into())),
        }
    }

    /// Combines the labels of two grids over the same axes.
    pub fn merge(self, other: RegionGrid) -> Result<RegionGrid> {
        if self.beta3_axis != other.beta3_axis || self.beta2_axis != other.beta2_axis {
            return Err(Error::InvalidParameter("grids have different axes".into()));
        }
        Ok(RegionGrid { stable: self.stable.or(other.stable), visible: self.visible.or(other.visible), ..self })
    }

    /// Whether every computed label satisfies `label(b) == label(-b)`.
    pub fn is_mirror_symmetric(&self) -> bool {
        let (n3, n2) = (self.beta3_axis.len(), self.beta2_axis.len());
        let axes_symmetric = |a: &[f64]| a.iter().zip(a.iter().rev()).all(|(x, y)| *x == -*y);
        if !axes_symmetric(&self.beta3_axis) || !axes_symmetric(&self.beta2_axis) {
            return false;
        }
        [&self.stable, &self.visible].into_iter().flatten().all(|labels| {
            (0..n3).all(|i| (0..n2).all(|j| labels[self.index(i, j)] == labels[self.index(n3 - 1 - i, n2 - 1 - j)]))
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (k, (b3, b2)) in self.cells().enumerate() {
            w.serialize(GridRow {
                beta3: b3,
                beta2: b2,
                stable: self.stable.as_ref().map(|s| s[k]),
                visible: self.visible.as_ref().map(|v| v[k]),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a grid written by [`RegionGrid::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let rows: Vec<GridRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let mut b3: Vec<f64> = Vec::new();
        let mut b2: Vec<f64> = Vec::new();
        for row in &rows {
            if b3.last() != Some(&row.beta3) {
                b3.push(row.beta3);
            }
            if b3.len() == 1 {
                b2.push(row.beta2);
            }
        }
        if b3.len() * b2.len() != rows.len()
            || b3.windows(2).any(|w| w[1] <= w[0])
            || b2.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Parse("grid rows must form a full, increasing beta3 x beta2 lattice".into()));
        }
        let column = |f: fn(&GridRow) -> Option<bool>| -> Result<Option<Vec<bool>>> {
            let vals: Vec<Option<bool>> = rows.iter().map(f).collect();
            if vals.iter().all(Option::is_none) {
                Ok(None)
            } else {
                vals.into_iter()
                    .collect::<Option<Vec<bool>>>()
                    .map(Some)
                    .ok_or_else(|| Error::Parse("label column is partially empty".into()))
            }
        };
        let stable = column(|r| r.stable)?;
        let visible = column(|r| r.visible)?;
        Ok(Self { beta3_axis: b3, beta2_axis: b2, stable, visible })
    }
}

/// Rear LIDAR and semitrailer front geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensingGeometry {
    /// LIDAR position behind the tractor rear axle [m].
    pub lidar_offset: f64,
    /// Horizontal field of view [rad].
    pub phi: f64,
    /// Front edge center ahead of the dolly axle [m].
    pub front_offset: f64,
    /// Front edge width [m].
    pub width: f64,
}

impl SensingGeometry {
    /// LIDAR at the off-axle hitch, front edge `La` ahead of the kingpin.
    pub fn from_params(params: &VehicleParams) -> Self {
        Self { lidar_offset: params.m1, phi: params.phi, front_offset: params.la, width: params.b }
    }

    /// LIDAR pose `(x, y, heading)` and the front edge endpoints, with the
    /// semitrailer axle at the origin heading along +x.
    pub fn layout(&self, params: &VehicleParams, beta3: f64, beta2: f64) -> ((f64, f64, f64), [(f64, f64); 2]) {
        let poses = params.segment_poses(&VehicleState::new(0.0, 0.0, 0.0, beta3, beta2));
        let t = poses.tractor;
        let lidar = (t.x - self.lidar_offset * t.theta.cos(), t.y - self.lidar_offset * t.theta.sin(), t.theta + PI);
        let d = poses.dolly;
        let theta3 = poses.semitrailer.theta;
        let (cx, cy) = (d.x + self.front_offset * theta3.cos(), d.y + self.front_offset * theta3.sin());
        let (nx, ny) = (-theta3.sin() * 0.5 * self.width, theta3.cos() * 0.5 * self.width);
        (lidar, [(cx + nx, cy + ny), (cx - nx, cy - ny)])
    }

    fn in_cone(&self, lidar: (f64, f64, f64), p: (f64, f64)) -> bool {
        let (vx, vy) = (p.0 - lidar.0, p.1 - lidar.1);
        let (ax, ay) = (lidar.2.cos(), lidar.2.sin());
        let along = ax * vx + ay * vy;
        let across = ax * vy - ay * vx;
        (along != 0.0 || across != 0.0) && across.abs().atan2(along) <= 0.5 * self.phi
    }

    /// Whether the whole front edge lies inside the field of view.
    pub fn visible(&self, params: &VehicleParams, beta3: f64, beta2: f64) -> bool {
        let (lidar, [p, q]) = self.layout(params, beta3, beta2);
        if !(self.in_cone(lidar, p) && self.in_cone(lidar, q)) {
            return false;
        }
        if self.phi <= PI {
            // convex cone
            return true;
        }
        (1..64).all(|k| {
            let t = k as f64 / 64.0;
            self.in_cone(lidar, (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)))
        })
    }
}

/// Labels every cell Visible or Hidden.
pub fn sensing_region(params: &VehicleParams, grid: &GridSpec) -> Result<RegionGrid> {
    params.validate()?;
    sensing_region_with(params, &SensingGeometry::from_params(params), grid)
}

pub fn sensing_region_with(params: &VehicleParams, geometry: &SensingGeometry, grid: &GridSpec) -> Result<RegionGrid> {
    let mut out = RegionGrid::empty(grid)?;
    out.visible = Some(out.cells().map(|(b3, b2)| geometry.visible(params, b3, b2)).collect());
    Ok(out)
}

/// Closed-loop MPC (joint-angle rows removed) from each cell's joint angles
/// on a straight backward path; Stable iff the error drops below
/// [`crate::sim::CONVERGENCE_TOL`] within [`SWEEP_DISTANCE`].
pub fn stability_sweep(params: &VehicleParams, cfg: &MpcConfig, grid: &GridSpec, jobs: usize) -> Result<RegionGrid> {
    params.validate()?;
    let cfg = MpcConfig { joint_constraints: false, ..cfg.clone() };
    cfg.validate()?;
    let cost = design_default(params, &cfg)?;
    let ctx = SimContext { params: *params, cfg: cfg.clone(), cost, polytope: None };
    let length = SWEEP_DISTANCE + 2.0 * cfg.delta_s;
    let path = generate_straight(length, -1.0, cfg.delta_s)?;
    let mut out = RegionGrid::empty(grid)?;
    let cells: Vec<(f64, f64)> = out.cells().collect();
    let cell_stable = |&(b3, b2): &(f64, f64)| -> Result<bool> {
        let mut spec = ExperimentSpec::new(
            "sweep",
            PathSpec::Straight { length },
            ControllerKind::Mpc,
            PathError::new(0.0, 0.0, b3, b2),
        );
        spec.distance_budget = Some(SWEEP_DISTANCE);
        spec.stop_on_converge = true;
        spec.convergence_hold = 0.0;
        match run_on_path(&spec, &ctx, &path) {
            Ok(log) => Ok(log.status == RunStatus::Converged),
            Err(Error::InvalidState(_) | Error::SingularConfiguration { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let stable = pool.install(|| cells.par_iter().map(cell_stable).collect::<Result<Vec<bool>>>())?;
    out.stable = Some(stable);
    Ok(out)
}

/// Cells whose whole `margin` neighbourhood is admissible.
fn eroded(grid: &RegionGrid, admissible: &[bool], margin: f64) -> Vec<bool> {
    let (n3, n2) = (grid.beta3_axis.len(), grid.beta2_axis.len());
    let mut out = vec![false; grid.len()];
    for i in 0..n3 {
        for j in 0..n2 {
            let (b3, b2) = (grid.beta3_axis[i], grid.beta2_axis[j]);
            let mut ok = admissible[grid.index(i, j)];
            // cells near the grid border would need neighbours outside it
            let covered = b3 - margin >= grid.beta3_axis[0] - 1e-12
                && b3 + margin <= grid.beta3_axis[n3 - 1] + 1e-12
                && b2 - margin >= grid.beta2_axis[0] - 1e-12
                && b2 + margin <= grid.beta2_axis[n2 - 1] + 1e-12;
            ok &= covered;
            if ok {
                'scan: for (p, &c3) in grid.beta3_axis.iter().enumerate() {
                    if (c3 - b3).abs() > margin {
                        continue;
                    }
                    for (q, &c2) in grid.beta2_axis.iter().enumerate() {
                        if (c3 - b3).hypot(c2 - b2) <= margin && !admissible[grid.index(p, q)] {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
            out[grid.index(i, j)] = ok;
        }
    }
    out
}

/// Grid-level containment: every grid point inside `poly` is admissible and
/// every vertex falls in an admissible cell.
pub fn polytope_inside(grid: &RegionGrid, admissible: &[bool], poly: &JointAnglePolytope) -> bool {
    let points_ok = grid.cells().enumerate().all(|(k, (b3, b2))| admissible[k] || !poly.contains(b3, b2));
    points_ok && poly.vertices().iter().all(|&(b3, b2)| grid.nearest(b3, b2).is_some_and(|k| admissible[k]))
}

/// Largest symmetric octagon (greedy round-robin growth of its four
/// supports) inside the stable and visible cells shrunk by `margin`.
pub fn fit_inner_polytope(grid: &RegionGrid, margin: f64) -> Result<JointAnglePolytope> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::InvalidParameter(format!("margin {margin} must be nonnegative")));
    }
    let admissible = grid.admissible()?;
    let inner = eroded(grid, &admissible, margin);
    let fits = |a: [f64; 4]| JointAnglePolytope::symmetric_octagon(a).is_ok_and(|p| polytope_inside(grid, &inner, &p));
    let mut a = [FIT_STEP; 4];
    if grid.nearest(0.0, 0.0).is_none_or(|k| !inner[k]) || !fits(a) {
        return Err(Error::EmptyRegion { margin });
    }
    let cap = grid.beta3_axis.iter().chain(&grid.beta2_axis).fold(0.0f64, |m, v| m.max(v.abs())) * 2.0;
    loop {
        let mut grew = false;
        for i in 0..4 {
            let mut next = a;
            next[i] += FIT_STEP;
            if next[i] <= cap && fits(next) {
                a = next;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    // pull facets that touch no vertex back onto the polygon
    let poly = JointAnglePolytope::symmetric_octagon(a)?;
    let verts = poly.vertices();
    for (i, n) in OCTAGON_NORMALS.iter().enumerate() {
        let reach = verts.iter().map(|v| (n[0] * v.0 + n[1] * v.1).abs()).fold(0.0, f64::max);
        a[i] = a[i].min(reach);
    }
    JointAnglePolytope::symmetric_octagon(a)
}

/// Sweep, sensing and fit in one call.
pub fn analyze(
    params: &VehicleParams,
    cfg: &MpcConfig,
    grid: &GridSpec,
    margin: f64,
    jobs: usize,
) -> Result<(RegionGrid, JointAnglePolytope)> {
    let stability = stability_sweep(params, cfg, grid, jobs)?;
    let combined = stability.merge(sensing_region(params, grid)?)?;
    let poly = fit_inner_polytope(&combined, margin)?;
    Ok((combined, poly))
}
