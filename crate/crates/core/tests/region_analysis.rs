use g2t_core::mpc::JointAnglePolytope;
use g2t_core::region::{analyze, polytope_inside, DEFAULT_FIT_MARGIN};
use g2t_core::*;

fn coarse() -> (VehicleParams, MpcConfig, GridSpec) {
    let params = VehicleParams::default();
    (params, MpcConfig::for_vehicle(&params), GridSpec::with_step(15.0))
}

fn label(grid: &RegionGrid, labels: &Option<Vec<bool>>, b3_deg: f64, b2_deg: f64) -> bool {
    labels.as_ref().unwrap()[grid.nearest(b3_deg.to_radians(), b2_deg.to_radians()).unwrap()]
}

#[test]
fn coarse_region_analysis() {
    let (params, cfg, grid) = coarse();
    let (region, poly) = analyze(&params, &cfg, &grid, DEFAULT_FIT_MARGIN, 0).unwrap();
    assert_eq!(region.len(), 13 * 13);
    assert!(region.is_mirror_symmetric());

    assert!(label(&region, &region.stable, 0.0, 0.0));
    assert!(label(&region, &region.visible, 0.0, 0.0));
    for b2 in [-90.0, 90.0] {
        assert!(!label(&region, &region.stable, 0.0, b2));
        assert!(!label(&region, &region.visible, 0.0, b2));
    }
    // a folded dolly with the semitrailer straight cannot be recovered
    assert!(!label(&region, &region.stable, 0.0, 75.0));

    let admissible = region.admissible().unwrap();
    assert!(polytope_inside(&region, &admissible, &poly));
    assert!(poly.contains(0.0, 0.0));
    for (b3, b2) in poly.vertices() {
        assert!(poly.max_violation(b3, b2) <= 1e-9);
        assert_eq!(poly.contains(b3, b2), poly.contains(-b3, -b2));
    }

    let mut buf = Vec::new();
    region.write_csv(&mut buf).unwrap();
    assert_eq!(RegionGrid::read_csv(buf.as_slice()).unwrap(), region);
}

#[test]
fn stability_sweep_is_deterministic() {
    let (params, cfg, _) = coarse();
    let grid = GridSpec { step_deg: 30.0, limit_deg: 60.0 };
    let a = stability_sweep(&params, &cfg, &grid, 1).unwrap();
    let b = stability_sweep(&params, &cfg, &grid, 2).unwrap();
    assert_eq!(a, b);
    assert!(a.visible.is_none());
    assert!(a.is_mirror_symmetric());
}

#[test]
fn fit_fails_when_origin_is_not_admissible() {
    let (params, _, grid) = coarse();
    let mut region = sensing_region(&params, &grid).unwrap();
    region.stable = Some(vec![false; region.len()]);
    assert!(matches!(fit_inner_polytope(&region, 0.0), Err(Error::EmptyRegion { .. })));
}

#[test]
fn default_polytope_lies_in_the_sensing_region() {
    let params = VehicleParams::default();
    let geometry = SensingGeometry::from_params(&params);
    let poly = JointAnglePolytope::fitted_default();
    for (b3, b2) in poly.vertices() {
        assert!(geometry.visible(&params, b3, b2), "vertex ({b3}, {b2})");
    }
}
