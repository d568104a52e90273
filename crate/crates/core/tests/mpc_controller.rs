use g2t_core::mpc::{
    build_qp, condense, design_default, rollout_cost, shift_joint_polytope, ControllerState, MpcQp, QpBuilder,
};
use g2t_core::qp::solve;
use g2t_core::sim::{run, ExperimentSpec, PathSpec, RunStatus, SimContext, REFERENCE_PERTURBATIONS};
use g2t_core::*;
use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn setup() -> (VehicleParams, MpcConfig, CostMatrices) {
    let params = VehicleParams::default();
    let cfg = MpcConfig::for_vehicle(&params);
    let cost = design_default(&params, &cfg).unwrap();
    (params, cfg, cost)
}

fn random_model(rng: &mut StdRng) -> LinearizedModel {
    let a = Matrix4::from_fn(|_, _| rng.random_range(-0.5..0.5));
    let b = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
    LinearizedModel::new(a, b, 0.2)
}

fn random_weights(rng: &mut StdRng) -> (Matrix4<f64>, Matrix4<f64>) {
    let g = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let h = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
    (g.transpose() * g, h.transpose() * h + Matrix4::identity())
}

#[test]
fn dare_design_properties() {
    let (_, _, cost) = setup();
    assert!(cost.dare_residual <= 1e-9, "{}", cost.dare_residual);
    assert!(cost.spectral_radius < 1.0);
    assert!((cost.q - cost.q.transpose()).amax() == 0.0);
    assert!(cost.q.symmetric_eigenvalues().min() >= -1e-12);
    assert!(cost.p_n.symmetric_eigenvalues().min() > 0.0);
}

#[test]
fn condensed_cost_matches_forward_rollout() {
    let mut rng = StdRng::seed_from_u64(3);
    for n in [1, 2, 5, 12] {
        let models: Vec<_> = (0..n).map(|_| random_model(&mut rng)).collect();
        let (q, p_n) = random_weights(&mut rng);
        let c = condense(&models, &q, &p_n);
        let x0 = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ud = DVector::from_vec(u.clone());
        let x0d = DVector::from_column_slice(x0.as_slice());
        let condensed =
            0.5 * ud.dot(&(&c.hessian * &ud)) + ud.dot(&(&c.gradient_map * &x0d)) + x0.dot(&(c.constant_map * x0));
        let direct = rollout_cost(&models, &q, &p_n, &x0, &u);
        assert!((condensed - direct).abs() <= 1e-10 * direct.abs().max(1.0), "N={n}: {condensed} vs {direct}");
    }
}

#[test]
fn two_step_hessian_by_hand() {
    let mut rng = StdRng::seed_from_u64(11);
    let models = [random_model(&mut rng), random_model(&mut rng)];
    let (q, p) = random_weights(&mut rng);
    let c = condense(&models, &q, &p);
    let (f0, g0, f1, g1) = (models[0].f, models[0].g, models[1].f, models[1].g);
    // x1 = F0 x0 + G0 u0, x2 = F1 F0 x0 + F1 G0 u0 + G1 u1
    let f1g0 = f1 * g0;
    let h00 = 2.0 * (1.0 + g0.dot(&(q * g0)) + f1g0.dot(&(p * f1g0)));
    let h01 = 2.0 * f1g0.dot(&(p * g1));
    let h11 = 2.0 * (1.0 + g1.dot(&(p * g1)));
    assert!((c.hessian[(0, 0)] - h00).abs() < 1e-12);
    assert!((c.hessian[(0, 1)] - h01).abs() < 1e-12);
    assert!((c.hessian[(1, 0)] - h01).abs() < 1e-12);
    assert!((c.hessian[(1, 1)] - h11).abs() < 1e-12);
    let grad0 = 2.0 * (g0.transpose() * q * f0 + f1g0.transpose() * p * f1 * f0);
    let grad1 = 2.0 * (g1.transpose() * p * f1 * f0);
    for j in 0..4 {
        assert!((c.gradient_map[(0, j)] - grad0[j]).abs() < 1e-12);
        assert!((c.gradient_map[(1, j)] - grad1[j]).abs() < 1e-12);
    }
}

/// Same problem with explicit states and dynamics equality rows.
fn sparse_problem(
    models: &[LinearizedModel],
    q: &Matrix4<f64>,
    p_n: &Matrix4<f64>,
    x0: &Vector4<f64>,
    umax: f64,
) -> QpProblem {
    let n = models.len();
    let nv = n + 4 * n;
    let mut p = DMatrix::zeros(nv, nv);
    for k in 0..n {
        p[(k, k)] = 2.0;
        let w = if k + 1 == n { p_n } else { q };
        for i in 0..4 {
            for j in 0..4 {
                p[(n + 4 * k + i, n + 4 * k + j)] = 2.0 * w[(i, j)];
            }
        }
    }
    let rows = 4 * n + n;
    let mut a = DMatrix::zeros(rows, nv);
    let mut l = DVector::zeros(rows);
    let mut u = DVector::zeros(rows);
    for (k, m) in models.iter().enumerate() {
        for i in 0..4 {
            let r = 4 * k + i;
            a[(r, n + 4 * k + i)] = 1.0;
            a[(r, k)] = -m.g[i];
            if k == 0 {
                let v = (m.f * x0)[i];
                l[r] = v;
                u[r] = v;
            } else {
                for j in 0..4 {
                    a[(r, n + 4 * (k - 1) + j)] = -m.f[(i, j)];
                }
            }
        }
        a[(4 * n + k, k)] = 1.0;
        l[4 * n + k] = -umax;
        u[4 * n + k] = umax;
    }
    QpProblem::new(p, DVector::zeros(nv), a, l, u)
}

#[test]
fn condensed_and_sparse_formulations_agree() {
    let mut rng = StdRng::seed_from_u64(17);
    for case in 0..40 {
        let n = rng.random_range(1..=5);
        let models: Vec<_> = (0..n).map(|_| random_model(&mut rng)).collect();
        let (q, p_n) = random_weights(&mut rng);
        let x0 = Vector4::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let umax = rng.random_range(0.05..1.0);
        let c = condense(&models, &q, &p_n);
        let x0d = DVector::from_column_slice(x0.as_slice());
        let dense = QpProblem::new(
            c.hessian.clone(),
            &c.gradient_map * &x0d,
            DMatrix::identity(n, n),
            DVector::from_element(n, -umax),
            DVector::from_element(n, umax),
        );
        let ds = solve(&dense, 1e-9).unwrap();
        let sp = solve(&sparse_problem(&models, &q, &p_n, &x0, umax), 1e-9).unwrap();
        assert_eq!(ds.status, QpStatus::Optimal);
        assert_eq!(sp.status, QpStatus::Optimal);
        let dense_obj = ds.objective + x0.dot(&(c.constant_map * x0));
        let sparse_obj = sp.objective + x0.dot(&(q * x0));
        assert!(
            (dense_obj - sparse_obj).abs() <= 1e-8 * dense_obj.abs().max(1.0),
            "case {case}: {dense_obj} vs {sparse_obj}"
        );
        assert!((ds.y.clone() - sp.y.rows(0, n)).amax() <= 1e-6);
    }
}

fn assert_zero_solution(qp: &MpcQp) {
    let sol = solve(&qp.problem, 1e-9).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    assert!(sol.y.amax() <= 1e-12, "{}", sol.y.amax());
    assert!((sol.objective + qp.constant).abs() <= 1e-12);
}

#[test]
fn zero_error_is_a_fixed_point() {
    let (params, cfg, cost) = setup();
    let poly = JointAnglePolytope::fitted_default();
    let straight = generate_straight(30.0, -1.0, cfg.delta_s).unwrap().extended_straight(20.0);
    let eight = generate_figure_eight(&params, 20.0, -1.0, cfg.delta_s).unwrap().extended_straight(20.0);
    for path in [&straight, &eight] {
        for s0 in [0.0, 3.1, path.s_end() * 0.3, path.s_end() * 0.55] {
            let ur = path.interpolate(s0).unwrap().ur;
            let ctrl = ControllerState { u_prev: ur, s_prev: s0 };
            let qp = build_qp(&PathError::default(), s0, path, &params, &cfg, &cost, Some(&poly), &ctrl).unwrap();
            assert_zero_solution(&qp);
        }
    }
}

#[test]
fn on_path_command_is_nominal_curvature() {
    let (params, cfg, cost) = setup();
    let eight = generate_figure_eight(&params, 20.0, -1.0, cfg.delta_s).unwrap();
    for s0 in [0.0, 40.0, 110.0] {
        let sample = eight.interpolate(s0).unwrap();
        let state = PathError::default().to_state(&sample);
        let mut mpc =
            MpcController::new(params, cfg.clone(), cost, Some(JointAnglePolytope::fitted_default()), &eight, s0)
                .unwrap();
        let d = mpc.control_step(&state).unwrap();
        assert!((d.u_cmd - sample.ur).abs() <= 1e-12, "s0 {s0}: {} vs {}", d.u_cmd, sample.ur);
        let mut lq = LqController::new(params, &cfg, &cost, &eight, s0).unwrap();
        assert!((lq.control_step(&state).unwrap().u_cmd - sample.ur).abs() <= 1e-12);
    }
}

#[test]
fn row_count_and_polytope_shift() {
    let (params, cfg, cost) = setup();
    let poly = JointAnglePolytope::fitted_default();
    let path = generate_straight(30.0, -1.0, cfg.delta_s).unwrap();
    let ctrl = ControllerState { u_prev: 0.0, s_prev: 0.0 };
    let n = cfg.horizon;
    let qp =
        build_qp(&PathError::new(1.0, 0.1, 0.0, 0.0), 0.0, &path, &params, &cfg, &cost, Some(&poly), &ctrl).unwrap();
    assert_eq!(qp.problem.num_vars(), 2 * n);
    assert_eq!(qp.problem.num_rows(), 2 * n + n * poly.len() + n);
    let no_joint = MpcConfig { joint_constraints: false, ..cfg.clone() };
    let qp = build_qp(&PathError::new(1.0, 0.1, 0.0, 0.0), 0.0, &path, &params, &no_joint, &cost, Some(&poly), &ctrl)
        .unwrap();
    assert_eq!((qp.problem.num_vars(), qp.problem.num_rows()), (n, 2 * n));

    let eight = generate_figure_eight(&params, 20.0, -1.0, cfg.delta_s).unwrap();
    let peak = eight.samples().iter().max_by(|a, b| a.kappa3r.abs().total_cmp(&b.kappa3r.abs())).unwrap();
    let shifted = shift_joint_polytope(&poly, peak).unwrap();
    for ((row, h), hb) in poly.rows().iter().zip(poly.h()).zip(&shifted) {
        assert!((hb - (h - row[0] * peak.xr.beta3 - row[1] * peak.xr.beta2)).abs() < 1e-15);
        assert!(*hb > 0.0);
    }
}

#[test]
fn first_cycle_of_lateral_offset_run_respects_limits() {
    let (params, cfg, cost) = setup();
    let path = generate_straight(40.0, -1.0, cfg.delta_s).unwrap();
    let state = REFERENCE_PERTURBATIONS[0].1.to_state(&path.interpolate(0.0).unwrap());
    let mut mpc =
        MpcController::new(params, cfg.clone(), cost, Some(JointAnglePolytope::fitted_default()), &path, 0.0).unwrap();
    let d = mpc.control_step(&state).unwrap();
    assert!(d.u_cmd.abs() <= cfg.u_max);
    assert!(d.u_cmd.abs() <= cfg.cycle_slew() + 1e-15);
    assert_eq!(d.qp_status, Some(QpStatus::Optimal));
    assert!(d.kkt_residual <= 1e-6);

    let mut lq = LqController::new(params, &cfg, &cost, &path, 0.0).unwrap();
    assert_eq!(lq.control_step(&state).unwrap().u_cmd.abs(), cfg.u_max);
    let small = PathError::new(0.2, 0.02, 0.0, 0.0).to_state(&path.interpolate(0.0).unwrap());
    assert!(lq.control_step(&small).unwrap().u_cmd.abs() < cfg.u_max);
}

#[test]
fn identical_qps_give_identical_first_moves() {
    let (params, cfg, cost) = setup();
    let poly = JointAnglePolytope::fitted_default();
    let path = generate_straight(40.0, -1.0, cfg.delta_s).unwrap();
    let ctrl = ControllerState { u_prev: 0.01, s_prev: 2.0 };
    let e = PathError::new(-1.2, -0.3, 0.1, -0.2);
    let mut builder = QpBuilder::new();
    let a = builder.build(&e, 2.0, &path, &params, &cfg, &cost, Some(&poly), &ctrl).unwrap();
    let b = builder.build(&e, 2.0, &path, &params, &cfg, &cost, Some(&poly), &ctrl).unwrap();
    assert_eq!(a, b);
    let mut solver = QpSolver::default();
    assert_eq!(solver.solve(&a.problem).unwrap().y, solver.solve(&b.problem).unwrap().y);
}

#[test]
fn warm_start_cuts_iterations_along_a_run() {
    let (params, cfg, cost) = setup();
    let poly = JointAnglePolytope::fitted_default();
    let path = generate_straight(60.0, -1.0, cfg.delta_s).unwrap();
    let ctx = SimContext { params, cfg: cfg.clone(), cost, polytope: Some(poly.clone()) };
    let mut spec = ExperimentSpec::new(
        "warm",
        PathSpec::Straight { length: 60.0 },
        ControllerKind::Mpc,
        REFERENCE_PERTURBATIONS[1].1,
    );
    spec.distance_budget = Some(15.0);
    let log = run(&spec, &ctx).unwrap();
    let mut cold_total = 0usize;
    let mut u_prev = path.interpolate(0.0).unwrap().ur;
    for row in &log.rows {
        let e = PathError::new(row.z3t, row.theta3t, row.beta3t, row.beta2t);
        let ctrl = ControllerState { u_prev, s_prev: row.s_m };
        let qp = build_qp(&e, row.s_m, &path, &params, &cfg, &cost, Some(&poly), &ctrl).unwrap();
        let cold = solve(&qp.problem, 1e-6).unwrap();
        assert!(
            (cold.y[0] + path.interpolate(row.s_m).unwrap().ur - row.u_cmd).abs() <= 1e-6
                || row.u_cmd.abs() == cfg.u_max
        );
        cold_total += cold.iterations;
        u_prev = row.u_cmd;
    }
    let warm_total: usize = log.qp_iterations.iter().sum();
    assert!(2 * warm_total <= cold_total, "warm {warm_total} vs cold {cold_total}");
}

#[test]
fn joint_angles_outside_polytope_use_slack_then_recover() {
    let (params, cfg, cost) = setup();
    let poly = JointAnglePolytope::fitted_default();
    let start = PathError::new(0.0, 0.0, 0.72, -0.1);
    assert!(!poly.contains(start.beta3, start.beta2));
    let ctx = SimContext { params, cfg, cost, polytope: Some(poly) };
    let spec = ExperimentSpec::new("soft", PathSpec::Straight { length: 120.0 }, ControllerKind::Mpc, start);
    let log = run(&spec, &ctx).unwrap();
    assert_eq!(log.status, RunStatus::Converged, "{:?}", log.message);
    assert!(log.rows[0].slack_max > 0.0);
    assert_eq!(log.rows.last().unwrap().slack_max, 0.0);
}

#[test]
fn linearization_about_straight_path_drives_design() {
    let (params, cfg, cost) = setup();
    let path = generate_straight(10.0, -1.0, cfg.delta_s).unwrap();
    let m = linearize(&params, &path, 2.0, cfg.delta_s).unwrap();
    let k = cost.k;
    let closed = m.f - m.g * k;
    let rho = closed.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!((rho - cost.spectral_radius).abs() < 1e-12);
}
