use g2t_core::{ControlInput, VehicleParams, VehicleState};
use proptest::prelude::*;

fn params() -> VehicleParams {
    VehicleParams::default()
}

proptest! {
    #[test]
    fn straight_configuration_is_an_equilibrium(x in -50.0..50.0f64, y in -50.0..50.0f64, th in -3.0..3.0f64, v in prop::sample::select(vec![-1.0, 1.0])) {
        let d = params().derivatives(&VehicleState::new(x, y, th, 0.0, 0.0), ControlInput::new(0.0, v)).unwrap();
        prop_assert_eq!(d[2], 0.0);
        prop_assert_eq!(d[3], 0.0);
        prop_assert_eq!(d[4], 0.0);
    }

    #[test]
    fn mirrored_configuration_negates_angular_rates(
        th in -3.0..3.0f64,
        b3 in -1.2..1.2f64,
        b2 in -1.2..1.2f64,
        u in -0.18..0.18f64,
        v in prop::sample::select(vec![-1.0, 1.0]),
    ) {
        let p = params();
        prop_assume!(p.c1(b2, b3, u) > 1e-3);
        let d = p.derivatives(&VehicleState::new(0.0, 0.0, th, b3, b2), ControlInput::new(u, v)).unwrap();
        let m = p.derivatives(&VehicleState::new(0.0, 0.0, -th, -b3, -b2), ControlInput::new(-u, v)).unwrap();
        prop_assert_eq!(m[2], -d[2]);
        prop_assert_eq!(m[3], -d[3]);
        prop_assert_eq!(m[4], -d[4]);
        prop_assert_eq!(m[0], d[0]);
        prop_assert_eq!(m[1], -d[1]);
        let speed = d[0].hypot(d[1]);
        prop_assert!((speed - p.c1(b2, b3, u).abs()).abs() < 1e-12);
    }

    #[test]
    fn axle_speed_matches_c1_along_trajectory(b3 in -0.5..0.5f64, b2 in -0.5..0.5f64, u in -0.15..0.15f64) {
        let p = params();
        let input = ControlInput::new(u, -1.0);
        let mut s = VehicleState::new(0.0, 0.0, 0.0, b3, b2);
        let h = 1e-3;
        for _ in 0..20 {
            let next = p.integrate_step(&s, input, h).unwrap();
            let mid = p.integrate_step(&s, input, h / 2.0).unwrap();
            let speed = (next.x3 - s.x3).hypot(next.y3 - s.y3) / h;
            let expected = p.c1(mid.beta2, mid.beta3, u).abs();
            prop_assert!((speed - expected).abs() < 1e-6, "{} vs {}", speed, expected);
            s = next;
        }
    }
}

#[test]
fn rk4_one_step_error_is_fourth_order() {
    let p = params();
    let start = VehicleState::new(1.0, -2.0, 0.3, 0.2, -0.25);
    let input = ControlInput::new(0.12, -1.0);
    let local = |dt: f64| {
        let one = p.rk4_step(&start, input, dt).unwrap().to_vector();
        let exact = p.integrate(&start, input, dt, 4000).unwrap().to_vector();
        (one - exact).amax()
    };
    let ratio = local(0.4) / local(0.2);
    assert!(ratio >= 8.0, "one-step error ratio {ratio}");
}
