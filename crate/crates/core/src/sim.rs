//! Closed-loop simulation: plant, controller, logging and experiment suites.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::PathBuf;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_model::PathError;
use crate::mpc::{
    Controller, CostMatrices, JointAnglePolytope, LqController, MpcConfig, MpcController, StepDiagnostics,
};
use crate::path::{generate_figure_eight_laps, generate_straight, NominalPath};
use crate::vehicle::{ControlInput, VehicleParams, VehicleState, SINGULAR_C1};

/// Joint angles beyond `pi/2 - JACKKNIFE_MARGIN` count as jackknifed.
pub const JACKKNIFE_MARGIN: f64 = 0.05;
/// Error infinity-norm below which the vehicle is considered on the path.
pub const CONVERGENCE_TOL: f64 = 0.02;
/// Distance the error must stay below [`CONVERGENCE_TOL`].
pub const CONVERGENCE_HOLD: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Mpc,
    Lq,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Mpc => "mpc",
            ControllerKind::Lq => "lq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Straight {
        length: f64,
    },
    FigureEight {
        radius: f64,
        #[serde(default = "one")]
        laps: usize,
    },
    /// Path CSV; its own `v3r_sign` is used.
    File {
        file: PathBuf,
    },
}

fn one() -> usize {
    1
}

impl PathSpec {
    pub fn build(&self, params: &VehicleParams, direction: f64, delta_s: f64) -> Result<NominalPath> {
        match self {
            PathSpec::Straight { length } => generate_straight(*length, direction, delta_s),
            PathSpec::FigureEight { radius, laps } => {
                generate_figure_eight_laps(params, *radius, direction, delta_s, *laps)
            }
            PathSpec::File { file } => NominalPath::read_csv(std::fs::File::open(file)?),
        }
    }
}

/// Additive Gaussian noise on the measured `(x3, y3, theta3, beta3, beta2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub std: [f64; 5],
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub path: PathSpec,
    pub controller: ControllerKind,
    /// Tractor direction, +1 or -1.
    #[serde(default = "reverse")]
    pub v: f64,
    /// Initial error at `start_station`.
    #[serde(default)]
    pub initial: PathError,
    #[serde(default)]
    pub start_station: f64,
    /// Maximum station travel; the path end otherwise.
    #[serde(default)]
    pub distance_budget: Option<f64>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    /// End the run as soon as convergence is declared.
    #[serde(default)]
    pub stop_on_converge: bool,
    #[serde(default = "default_hold")]
    pub convergence_hold: f64,
}

fn reverse() -> f64 {
    -1.0
}

fn default_hold() -> f64 {
    CONVERGENCE_HOLD
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, path: PathSpec, controller: ControllerKind, initial: PathError) -> Self {
        Self {
            name: name.into(),
            path,
            controller,
            v: -1.0,
            initial,
            start_station: 0.0,
            distance_budget: None,
            noise: None,
            stop_on_converge: false,
            convergence_hold: CONVERGENCE_HOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v != 1.0 && self.v != -1.0 {
            return Err(Error::InvalidParameter(format!("{}: v must be +1 or -1", self.name)));
        }
        if self.distance_budget.is_some_and(|d| !(d > 0.0)) || !(self.convergence_hold >= 0.0) {
            return Err(Error::InvalidParameter(format!("{}: budgets must be positive", self.name)));
        }
        if let Some(noise) = &self.noise {
            if !noise.std.iter().all(|s| *s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!("{}: noise std must be nonnegative", self.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    Jackknifed,
    ValidityLost,
    Timeout,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::Jackknifed => "jackknifed",
            RunStatus::ValidityLost => "validity_lost",
            RunStatus::Timeout => "timeout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "converged" => Some(RunStatus::Converged),
            "jackknifed" => Some(RunStatus::Jackknifed),
            "validity_lost" => Some(RunStatus::ValidityLost),
            "timeout" => Some(RunStatus::Timeout),
            _ => None,
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t_s: f64,
    pub s_m: f64,
    pub x3: f64,
    pub y3: f64,
    pub theta3: f64,
    pub beta3: f64,
    pub beta2: f64,
    pub z3t: f64,
    pub theta3t: f64,
    pub beta3t: f64,
    pub beta2t: f64,
    pub u_cmd: f64,
    pub qp_status: String,
    pub qp_obj: f64,
    pub slack_max: f64,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub spec: ExperimentSpec,
    pub rows: Vec<LogRow>,
    pub status: RunStatus,
    /// Station where convergence was first declared.
    pub converged_at: Option<f64>,
    /// Why the run ended early, if it did.
    pub message: Option<String>,
    pub kkt_max: f64,
    pub fallback_cycles: usize,
    pub qp_iterations: Vec<usize>,
}

/// One line of the suite summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub controller: String,
    pub status: String,
    pub cycles: usize,
    pub distance_m: f64,
    pub converged_at_m: Option<f64>,
    pub final_err: f64,
    pub steady_state_err: Option<f64>,
    pub max_abs_beta: f64,
    pub max_slack: f64,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub max_abs_u: f64,
    pub max_slew: f64,
    pub max_kkt: f64,
    pub fallback_cycles: usize,
}

impl RunLog {
    pub fn error_norm(row: &LogRow) -> f64 {
        row.z3t.abs().max(row.theta3t.abs()).max(row.beta3t.abs()).max(row.beta2t.abs())
    }

    pub fn distance(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.s_m - a.s_m,
            _ => 0.0,
        }
    }

    pub fn max_abs_beta(&self) -> f64 {
        self.rows.iter().map(|r| r.beta3.abs().max(r.beta2.abs())).fold(0.0, f64::max)
    }

    /// Largest curvature change between consecutive commands, including the
    /// change from the initial command state.
    pub fn max_slew(&self) -> f64 {
        self.rows.windows(2).map(|w| (w[1].u_cmd - w[0].u_cmd).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_u(&self) -> f64 {
        self.rows.iter().map(|r| r.u_cmd.abs()).fold(0.0, f64::max)
    }

    pub fn max_slack(&self) -> f64 {
        self.rows.iter().map(|r| r.slack_max).filter(|v| v.is_finite()).fold(0.0, f64::max)
    }

    /// Largest error after convergence was declared.
    pub fn steady_state_error(&self) -> Option<f64> {
        let s = self.converged_at?;
        Some(self.rows.iter().filter(|r| r.s_m >= s).map(Self::error_norm).fold(0.0, f64::max))
    }

    pub fn summary(&self) -> RunSummary {
        let solve: Vec<f64> = self.rows.iter().map(|r| r.solve_ms).collect();
        let mean = if solve.is_empty() { 0.0 } else { solve.iter().sum::<f64>() / solve.len() as f64 };
        RunSummary {
            name: self.spec.name.clone(),
            controller: self.spec.controller.as_str().to_string(),
            status: self.status.as_str().to_string(),
            cycles: self.rows.len(),
            distance_m: self.distance(),
            converged_at_m: self.converged_at,
            final_err: self.rows.last().map_or(f64::NAN, Self::error_norm),
            steady_state_err: self.steady_state_error(),
            max_abs_beta: self.max_abs_beta(),
            max_slack: self.max_slack(),
            mean_solve_ms: mean,
            max_solve_ms: solve.iter().copied().fold(0.0, f64::max),
            max_abs_u: self.max_abs_u(),
            max_slew: self.max_slew(),
            max_kkt: self.kkt_max,
            fallback_cycles: self.fallback_cycles,
        }
    }

    /// Writes the per-cycle log; with `timing == false` solve times are zeroed
    /// so identical runs give identical files.
    pub fn write_csv<W: Write>(&self, writer: W, timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            if timing {
                w.serialize(row)?;
            } else {
                w.serialize(LogRow { solve_ms: 0.0, ..row.clone() })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_summary_csv<W: Write>(logs: &[RunLog], writer: W, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if logs.is_empty() {
        w.write_record([
            "name",
            "controller",
            "status",
            "cycles",
            "distance_m",
            "converged_at_m",
            "final_err",
            "steady_state_err",
            "max_abs_beta",
            "max_slack",
            "mean_solve_ms",
            "max_solve_ms",
            "max_abs_u",
            "max_slew",
            "max_kkt",
            "fallback_cycles",
        ])?;
    }
    for log in logs {
        let mut s = log.summary();
        if !timing {
            s.mean_solve_ms = 0.0;
            s.max_solve_ms = 0.0;
        }
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Shared setup for a batch of runs.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub params: VehicleParams,
    pub cfg: MpcConfig,
    pub cost: CostMatrices,
    pub polytope: Option<JointAnglePolytope>,
}

impl SimContext {
    /// Default configuration and designed cost for `params`.
    pub fn for_vehicle(params: VehicleParams, polytope: Option<JointAnglePolytope>) -> Result<Self> {
        let cfg = MpcConfig::for_vehicle(&params);
        let cost = crate::mpc::design_default(&params, &cfg)?;
        Ok(Self { params, cfg, cost, polytope })
    }
}

fn jackknifed(params: &VehicleParams, state: &VehicleState, u: f64) -> bool {
    let limit = FRAC_PI_2 - JACKKNIFE_MARGIN;
    !(state.beta3.abs() <= limit && state.beta2.abs() <= limit) || params.c1(state.beta2, state.beta3, u) <= SINGULAR_C1
}

fn classify(err: &Error) -> RunStatus {
    match err {
        Error::SingularConfiguration { .. } | Error::InvalidState(_) => RunStatus::Jackknifed,
        _ => RunStatus::ValidityLost,
    }
}

fn log_row(t: f64, state: &VehicleState, d: &StepDiagnostics) -> LogRow {
    LogRow {
        t_s: t,
        s_m: d.s,
        x3: state.x3,
        y3: state.y3,
        theta3: state.theta3,
        beta3: state.beta3,
        beta2: state.beta2,
        z3t: d.error.z3,
        theta3t: d.error.theta3,
        beta3t: d.error.beta3,
        beta2t: d.error.beta2,
        u_cmd: d.u_cmd,
        qp_status: match (d.fallback, d.qp_status) {
            (true, _) => "fallback".to_string(),
            (false, Some(s)) => s.as_str().to_string(),
            (false, None) => "none".to_string(),
        },
        qp_obj: d.qp_objective,
        slack_max: d.slack_max,
        solve_ms: d.solve_ms,
    }
}

/// Runs one closed-loop experiment.
pub fn run(spec: &ExperimentSpec, ctx: &SimContext) -> Result<RunLog> {
    spec.validate()?;
    let path = spec.path.build(&ctx.params, spec.v, ctx.cfg.delta_s)?;
    run_on_path(spec, ctx, &path)
}

/// Runs one experiment on an already generated path.
pub fn run_on_path(spec: &ExperimentSpec, ctx: &SimContext, path: &NominalPath) -> Result<RunLog> {
    spec.validate()?;
    let sample = path.interpolate(spec.start_station)?;
    let mut state = spec.initial.to_state(&sample);
    let mut controller: Box<dyn Controller> = match spec.controller {
        ControllerKind::Mpc => Box::new(MpcController::new(
            ctx.params,
            ctx.cfg.clone(),
            ctx.cost,
            ctx.polytope.clone(),
            path,
            spec.start_station,
        )?),
        ControllerKind::Lq => Box::new(LqController::new(ctx.params, &ctx.cfg, &ctx.cost, path, spec.start_station)?),
    };
    let s_stop = spec.distance_budget.map_or(path.s_end(), |d| (spec.start_station + d).min(path.s_end()));
    let dt = 1.0 / ctx.cfg.f_s;
    let max_cycles = (((s_stop - spec.start_station).max(0.0) * 4.0 + 60.0) * ctx.cfg.f_s).ceil() as usize;
    let mut noise = spec.noise.as_ref().map(|n| (StdRng::seed_from_u64(n.seed), n.std));

    let mut log = RunLog {
        spec: spec.clone(),
        rows: Vec::new(),
        status: RunStatus::Timeout,
        converged_at: None,
        message: None,
        kkt_max: 0.0,
        fallback_cycles: 0,
        qp_iterations: Vec::new(),
    };
    if jackknifed(&ctx.params, &state, controller.state().u_prev) {
        log.status = RunStatus::Jackknifed;
        log.message = Some("initial configuration beyond the jackknife limit".into());
        return Ok(log);
    }
    let mut window_start: Option<f64> = None;
    let mut t = 0.0;
    for _ in 0..max_cycles {
        let measured = match noise.as_mut() {
            Some((rng, std)) => {
                let mut v = state.to_vector();
                for (i, sd) in std.iter().enumerate() {
                    if *sd > 0.0 {
                        v[i] += Normal::new(0.0, *sd).expect("validated std").sample(rng);
                    }
                }
                VehicleState::from_vector(&v)
            }
            None => state,
        };
        let diag = match controller.control_step(&measured) {
            Ok(d) => d,
            Err(e) => {
                log.status = classify(&e);
                log.message = Some(e.to_string());
                break;
            }
        };
        if diag.kkt_residual.is_finite() {
            log.kkt_max = log.kkt_max.max(diag.kkt_residual);
        }
        if diag.fallback {
            log.fallback_cycles += 1;
        }
        if diag.qp_status.is_some() {
            log.qp_iterations.push(diag.qp_iterations);
        }
        log.rows.push(log_row(t, &state, &diag));

        if diag.error.inf_norm() < CONVERGENCE_TOL {
            let start = *window_start.get_or_insert(diag.s);
            if log.converged_at.is_none() && diag.s - start >= spec.convergence_hold {
                log.converged_at = Some(diag.s);
                log.status = RunStatus::Converged;
                if spec.stop_on_converge {
                    break;
                }
            }
        } else {
            window_start = None;
        }
        if diag.s >= s_stop {
            break;
        }
        match ctx.params.integrate_step(&state, ControlInput::new(diag.u_cmd, spec.v), dt) {
            Ok(next) => state = next,
            Err(e) => {
                log.status = RunStatus::Jackknifed;
                log.message = Some(e.to_string());
                break;
            }
        }
        t += dt;
        if jackknifed(&ctx.params, &state, diag.u_cmd) {
            log.status = RunStatus::Jackknifed;
            log.message = Some(format!("joint angles ({:.3}, {:.3}) rad", state.beta3, state.beta2));
            break;
        }
    }
    Ok(log)
}

/// Runs all specs, in parallel on `jobs` threads (0 = all cores); the output
/// order follows the input.
pub fn run_suite(specs: &[ExperimentSpec], ctx: &SimContext, jobs: usize) -> Result<Vec<RunLog>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    pool.install(|| specs.par_iter().map(|spec| run(spec, ctx)).collect())
}

/// Initial errors of the three reference experiments:
/// lateral only, heading with small lateral, and both.
pub const REFERENCE_PERTURBATIONS: [(&str, PathError); 3] = [
    ("exp1", PathError { z3: 5.6, theta3: 0.0, beta3: 0.0, beta2: 0.0 }),
    ("exp2", PathError { z3: -1.2, theta3: -0.8, beta3: 0.0, beta2: 0.0 }),
    ("exp3", PathError { z3: -4.1, theta3: -0.42, beta3: 0.0, beta2: 0.0 }),
];

/// Straight-path length used by the reference suite [m].
pub const SUITE_STRAIGHT_LENGTH: f64 = 120.0;
/// Figure-eight radius used by the reference suite [m].
pub const SUITE_EIGHT_RADIUS: f64 = 20.0;
/// Station on the figure-eight where the perturbed runs start [m].
pub const SUITE_EIGHT_START: f64 = 0.0;

/// The 3 straight + 3 figure-eight experiments, each with MPC and LQ.
pub fn reference_suite() -> Vec<ExperimentSpec> {
    let mut specs = Vec::new();
    for (path_name, path, start) in [
        ("straight", PathSpec::Straight { length: SUITE_STRAIGHT_LENGTH }, 0.0),
        ("eight", PathSpec::FigureEight { radius: SUITE_EIGHT_RADIUS, laps: 2 }, SUITE_EIGHT_START),
    ] {
        for (exp, e) in REFERENCE_PERTURBATIONS {
            for kind in [ControllerKind::Mpc, ControllerKind::Lq] {
                let mut spec =
                    ExperimentSpec::new(format!("{path_name}-{exp}-{}", kind.as_str()), path.clone(), kind, e);
                spec.start_station = start;
                specs.push(spec);
            }
        }
    }
    specs
}
