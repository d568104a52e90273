//! `g2t`: paths, controller design, closed-loop runs and region analysis.

mod config;

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use g2t_core::mpc::JointAnglePolytope;
use g2t_core::qp::{QpSettings, QpSolver};
use g2t_core::region::{DEFAULT_FIT_MARGIN, SWEEP_DISTANCE};
use g2t_core::sim::write_summary_csv;
use g2t_core::{
    design_default, fit_inner_polytope, generate_figure_eight_laps, generate_straight, run_suite, sensing_region,
    stability_sweep, Error, GridSpec, MpcConfig, QpProblem, QpStatus, RegionGrid, RunLog, RunStatus, VehicleParams,
};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "g2t", version, about = "Path following for a general 2-trailer with a car-like tractor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a nominal path CSV.
    Path(PathArgs),
    /// Print the cost matrices and LQ gain as JSON.
    Design(DesignArgs),
    /// Run closed-loop experiments.
    Run(RunArgs),
    /// Stability and sensing regions, and the joint-angle polytope fit.
    Region(RegionArgs),
    /// Solve a QP given in the text format and print the solution as JSON.
    Qp(QpArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("shape").required(true).args(["straight", "eight"])))]
struct PathArgs {
    /// Straight path of this length [m].
    #[arg(long, value_name = "LENGTH")]
    straight: Option<f64>,
    /// Figure-eight with this turn radius [m].
    #[arg(long, value_name = "RADIUS")]
    eight: Option<f64>,
    /// Figure-eight laps.
    #[arg(long, default_value_t = 1, requires = "eight")]
    laps: usize,
    /// Backward motion of the tractor.
    #[arg(long)]
    reverse: bool,
    #[arg(long, default_value_t = 0.2)]
    delta_s: f64,
    /// Vehicle parameter TOML file.
    #[arg(long)]
    vehicle: Option<PathBuf>,
    /// Output file; stdout otherwise.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long)]
    vehicle: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["config", "preset"])))]
struct RunArgs {
    /// Run configuration TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: `paper`, the reference suite.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides the configuration.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Only runs whose name contains one of these strings.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Expected outcome, `mpc=converged`, `lq=jackknifed` or `<run name>=<status>`.
    #[arg(long, value_delimiter = ',')]
    expect: Vec<String>,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Noise seed base; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Zero the solve times so identical runs give identical files.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct RegionArgs {
    /// Label cells by LIDAR visibility.
    #[arg(long)]
    sensing: bool,
    /// Label cells by closed-loop stability.
    #[arg(long)]
    stability: bool,
    /// Fit the joint-angle polytope; missing labels are computed first.
    #[arg(long)]
    fit: bool,
    #[arg(long, default_value_t = DEFAULT_FIT_MARGIN)]
    margin: f64,
    #[arg(long, default_value_t = 2.0)]
    step_deg: f64,
    #[arg(long, default_value_t = 90.0)]
    limit_deg: f64,
    /// Previously computed grid CSV to start from.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    vehicle: Option<PathBuf>,
    #[arg(short, long, default_value = "region")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct QpArgs {
    /// Problem file, `-` for stdin.
    file: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 4000)]
    max_iter: usize,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 1, err: e.into() }
    }
}

fn usage(err: anyhow::Error) -> Failure {
    Failure { code: 2, err }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Path(a) => cmd_path(a),
        Command::Design(a) => cmd_design(a),
        Command::Run(a) => cmd_run(a),
        Command::Region(a) => cmd_region(a),
        Command::Qp(a) => cmd_qp(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load_vehicle(file: &Option<PathBuf>) -> CliResult<VehicleParams> {
    match file {
        Some(f) => VehicleParams::from_file(f).with_context(|| format!("vehicle file {}", f.display())).map_err(usage),
        None => Ok(VehicleParams::default()),
    }
}

fn output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_path(a: PathArgs) -> CliResult {
    let params = load_vehicle(&a.vehicle)?;
    let direction = if a.reverse { -1.0 } else { 1.0 };
    let path = match (a.straight, a.eight) {
        (Some(length), _) => generate_straight(length, direction, a.delta_s)?,
        (None, Some(radius)) => generate_figure_eight_laps(&params, radius, direction, a.delta_s, a.laps)?,
        (None, None) => unreachable!("clap requires one shape"),
    };
    path.write_csv(output(&a.output)?)?;
    eprintln!(
        "{} samples, {:.1} m, max model residual {:.2e}",
        path.len(),
        path.s_end() - path.s_start(),
        path.max_model_residual(&params)?
    );
    Ok(())
}

fn cmd_design(a: DesignArgs) -> CliResult {
    let params = load_vehicle(&a.vehicle)?;
    let mut cfg = MpcConfig::for_vehicle(&params);
    if let Some(n) = a.horizon {
        cfg.horizon = n;
    }
    cfg.validate().map_err(|e| usage(e.into()))?;
    let cost = design_default(&params, &cfg)?;
    let rows = |at: &dyn Fn(usize, usize) -> f64| {
        (0..4).map(|i| (0..4).map(|j| at(i, j)).collect()).collect::<Vec<Vec<f64>>>()
    };
    let out = json!({
        "q": rows(&|i, j| cost.q[(i, j)]),
        "p_n": rows(&|i, j| cost.p_n[(i, j)]),
        "k": cost.k.iter().copied().collect::<Vec<_>>(),
        "spectral_radius": cost.spectral_radius,
        "dare_residual": cost.dare_residual,
        "dare_iterations": cost.dare_iterations,
        "delta_s": cfg.delta_s,
        "horizon": cfg.horizon,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

/// Parsed `--expect` entry.
struct Expectation {
    key: String,
    status: RunStatus,
}

fn parse_expect(items: &[String]) -> CliResult<Vec<Expectation>> {
    items
        .iter()
        .map(|item| {
            let (key, status) =
                item.split_once('=').ok_or_else(|| usage(anyhow!("--expect {item:?}: want KEY=STATUS")))?;
            let status = RunStatus::parse(status.trim())
                .ok_or_else(|| usage(anyhow!("--expect {item:?}: unknown status {status:?}")))?;
            Ok(Expectation { key: key.trim().to_string(), status })
        })
        .collect()
}

fn cmd_run(a: RunArgs) -> CliResult {
    let expectations = parse_expect(&a.expect)?;
    let (mut cfg, base) = match (&a.config, &a.preset) {
        (Some(file), _) => RunConfig::from_file(file).map_err(usage)?,
        (None, Some(name)) => (RunConfig::preset(name).map_err(usage)?, PathBuf::from(".")),
        (None, None) => unreachable!("clap requires a source"),
    };
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    let mut run = cfg.resolve(&base).map_err(usage)?;
    if !a.only.is_empty() {
        run.specs.retain(|s| a.only.iter().any(|o| s.name.contains(o.as_str())));
        if run.specs.is_empty() {
            return Err(usage(anyhow!("--only matched no experiment")));
        }
    }
    for e in &expectations {
        let known = run.specs.iter().any(|s| s.name == e.key || s.controller.as_str() == e.key);
        if !known {
            return Err(usage(anyhow!("--expect key {:?} matches no run", e.key)));
        }
    }
    let out_dir = a.out.or(run.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let logs = run_suite(&run.specs, &run.ctx, a.jobs)?;
    let timing = !a.deterministic;
    for log in &logs {
        let file = out_dir.join(format!("{}.csv", log.spec.name));
        log.write_csv(File::create(&file).with_context(|| format!("creating {}", file.display()))?, timing)?;
    }
    write_summary_csv(&logs, File::create(out_dir.join("summary.csv"))?, timing)?;
    let summaries: Vec<_> = logs
        .iter()
        .map(|l| {
            let mut s = l.summary();
            if !timing {
                s.mean_solve_ms = 0.0;
                s.max_solve_ms = 0.0;
            }
            s
        })
        .collect();
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
    print_table(&logs);

    let mut mismatches = Vec::new();
    for e in &expectations {
        for log in logs.iter().filter(|l| l.spec.name == e.key || l.spec.controller.as_str() == e.key) {
            if log.status != e.status {
                mismatches.push(format!("{}: expected {}, got {}", log.spec.name, e.status, log.status));
            }
        }
    }
    if !mismatches.is_empty() {
        return Err(Failure { code: 1, err: anyhow!("unexpected outcomes:\n  {}", mismatches.join("\n  ")) });
    }
    Ok(())
}

fn print_table(logs: &[RunLog]) {
    println!(
        "{:<24} {:<13} {:>9} {:>12} {:>10} {:>10}",
        "run", "status", "dist_m", "converged_m", "max_beta", "max_slack"
    );
    for log in logs {
        let s = log.summary();
        let conv = s.converged_at_m.map_or("-".to_string(), |v| format!("{v:.1}"));
        println!(
            "{:<24} {:<13} {:>9.1} {:>12} {:>10.3} {:>10.4}",
            s.name, s.status, s.distance_m, conv, s.max_abs_beta, s.max_slack
        );
    }
}

fn all_admissible(axis3: Vec<f64>, axis2: Vec<f64>) -> RegionGrid {
    let n = axis3.len() * axis2.len();
    RegionGrid { beta3_axis: axis3, beta2_axis: axis2, stable: Some(vec![true; n]), visible: Some(vec![true; n]) }
}

fn cmd_region(a: RegionArgs) -> CliResult {
    let params = load_vehicle(&a.vehicle)?;
    let spec = GridSpec { step_deg: a.step_deg, limit_deg: a.limit_deg };
    let none = !(a.sensing || a.stability || a.fit);
    let mut grid = match &a.grid {
        Some(f) => Some(
            RegionGrid::read_csv(File::open(f).with_context(|| format!("opening {}", f.display())).map_err(usage)?)
                .with_context(|| format!("grid file {}", f.display()))
                .map_err(usage)?,
        ),
        None => None,
    };
    let fit = a.fit || none;
    if fit {
        if !(a.margin >= 0.0 && a.margin.is_finite()) {
            return Err(usage(anyhow!("--margin must be nonnegative")));
        }
        // the fit only shrinks as cells drop out, so an empty fit here is final
        let (axis3, axis2) = match &grid {
            Some(g) => (g.beta3_axis.clone(), g.beta2_axis.clone()),
            None => {
                let axis = spec.axis().map_err(|e| usage(e.into()))?;
                (axis.clone(), axis)
            }
        };
        if let Err(e @ Error::EmptyRegion { .. }) = fit_inner_polytope(&all_admissible(axis3, axis2), a.margin) {
            return Err(e.into());
        }
    }
    let has = |g: &Option<RegionGrid>, stable: bool| {
        g.as_ref().is_some_and(|g| if stable { g.stable.is_some() } else { g.visible.is_some() })
    };
    let want_sensing = a.sensing || none || (fit && !has(&grid, false));
    let want_stability = a.stability || none || (fit && !has(&grid, true));
    let merge = |g: Option<RegionGrid>, new: RegionGrid| -> CliResult<Option<RegionGrid>> {
        Ok(Some(match g {
            Some(old) => new
                .merge(old)
                .map_err(|e| usage(anyhow!(e).context("grid file axes differ from --step-deg/--limit-deg")))?,
            None => new,
        }))
    };
    if want_sensing {
        grid = merge(grid, sensing_region(&params, &spec).map_err(|e| usage(e.into()))?)?;
    }
    if want_stability {
        let cfg = MpcConfig::for_vehicle(&params);
        eprintln!(
            "stability sweep: {} cells, up to {SWEEP_DISTANCE} m each",
            spec.axis().map_or(0, |v| v.len().pow(2))
        );
        grid = merge(grid, stability_sweep(&params, &cfg, &spec, a.jobs)?)?;
    }
    let grid = grid.ok_or_else(|| usage(anyhow!("nothing to do")))?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    grid.write_csv(File::create(a.out.join("region_grid.csv"))?)?;
    let count = |l: &Option<Vec<bool>>| l.as_ref().map(|v| v.iter().filter(|b| **b).count());
    let mut report = json!({
        "cells": grid.len(),
        "stable": count(&grid.stable),
        "visible": count(&grid.visible),
        "mirror_symmetric": grid.is_mirror_symmetric(),
    });
    if fit {
        let poly = fit_inner_polytope(&grid, a.margin)?;
        write_polytope(&poly, &a.out.join("polytope.csv"))?;
        report["polytope"] = json!({
            "h": poly.h(),
            "vertices": poly.vertices(),
            "margin": a.margin,
        });
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn write_polytope(poly: &JointAnglePolytope, path: &Path) -> CliResult {
    poly.write_csv(File::create(path).with_context(|| format!("creating {}", path.display()))?)?;
    Ok(())
}

fn cmd_qp(a: QpArgs) -> CliResult {
    let mut text = String::new();
    if a.file.as_os_str() == "-" {
        io::stdin().read_to_string(&mut text)?;
    } else {
        text =
            std::fs::read_to_string(&a.file).with_context(|| format!("reading {}", a.file.display())).map_err(usage)?;
    }
    let prob = QpProblem::parse_text(&text).map_err(|e| usage(e.into()))?;
    let mut solver = QpSolver::new(QpSettings { tol: a.tol, max_iter: a.max_iter });
    let sol = solver.solve(&prob)?;
    let out = json!({
        "status": sol.status.as_str(),
        "y": sol.y.iter().copied().collect::<Vec<_>>(),
        "duals": sol.duals.iter().copied().collect::<Vec<_>>(),
        "objective": sol.objective,
        "iterations": sol.iterations,
        "kkt_residual": sol.kkt_residual(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if sol.status != QpStatus::Optimal {
        return Err(anyhow!("solver returned {}", sol.status).into());
    }
    Ok(())
}
