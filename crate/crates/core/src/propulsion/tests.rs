use super::*;
use crate::model::{Medium, RotorCommand, VehicleParams};
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

#[test]
fn rest_stays_at_rest() {
    let p = MotorParams::default();
    let mut s = MotorState::default();
    for _ in 0..1000 {
        s = motor_step(&p, &s, &Vector2::zeros(), 0.0, 50e-6);
    }
    assert_eq!(s, MotorState::default());
}

/// Ideal current loop: hold `i_q = 1 A` and integrate the mechanics only.
#[test]
fn constant_current_reaches_torque_balance_speed() {
    let p = MotorParams::default();
    let te = p.torque_constant() * 1.0;
    let w_ss = te / p.friction;
    let tau_m = p.inertia / p.friction;
    let mut s = MotorState {
        i_q: 1.0,
        ..Default::default()
    };
    let dt = 1e-3;
    let mut t = 0.0;
    while t < 10.0 * tau_m {
        let w = s.omega + (te - p.friction * s.omega) / p.inertia * dt;
        s.omega = w;
        t += dt;
    }
    assert!((s.omega - w_ss).abs() / w_ss < 1e-3);
    assert_abs_diff_eq!(electromagnetic_torque(&p, &s), te, epsilon = 1e-15);
}

#[test]
fn locked_rotor_current_is_first_order() {
    let p = MotorParams::default();
    let v = 1.2;
    let tau = p.l_q / p.r_s;
    let dt = 1e-6;
    let mut s = MotorState::default();
    let mut t = 0.0;
    while t < tau - 1e-12 {
        s = motor_step(&p, &s, &Vector2::new(0.0, v), 0.0, dt);
        s.omega = 0.0;
        s.theta_e = 0.0;
        t += dt;
    }
    let expect = v / p.r_s * (1.0 - (-t / tau).exp());
    assert!((s.i_q - expect).abs() / expect < 1e-4, "{} vs {}", s.i_q, expect);
}

#[test]
fn foc_zero_error_gives_zero_current_reference() {
    let p = MotorParams::default();
    let mut c = FocController::new(FocGains::default());
    assert_eq!(c.speed_loop(100.0, 100.0, &p, 1e-3), 0.0);
}

#[test]
fn propeller_examples() {
    let load = PropellerLoad::default();
    let (t, q) = propeller_coupling(&load, 420.0, 1.0);
    assert_abs_diff_eq!(t, 1.83e-5 * 420.0 * 420.0, epsilon = 1e-12);
    assert!((t - 3.23).abs() < 0.005);
    assert_eq!(propeller_coupling(&load, 0.0, 0.0), (0.0, 0.0));
    let (t, _) = propeller_coupling(&load, 12_986.0, 0.0);
    assert!((t - 2.698).abs() < 1e-3);
    let (_, q_air) = propeller_coupling(&load, 2100.0, 0.0);
    assert!(q > q_air);
    let (tr, qr) = propeller_coupling(&load, -420.0, 1.0);
    assert!(tr < 0.0 && qr < 0.0);
    assert!(tr.abs() < t);
}

#[test]
fn decoupled_current_step_barely_moves_i_d() {
    let p = MotorParams::default();
    let mut c = FocController::new(FocGains::default());
    let mut s = MotorState {
        omega: 1000.0 * RPM,
        ..Default::default()
    };
    c.preload(0.0, &s, &p);
    let dt = 50e-6;
    let mut max_id: f64 = 0.0;
    for _ in 0..400 {
        // Hold speed and step the q reference to 5 A.
        let v = c.current_step(5.0, &s, &p, dt);
        s = motor_step(&p, &s, &v, 0.0, dt);
        s.omega = 1000.0 * RPM;
        max_id = max_id.max(s.i_d.abs());
    }
    assert!((s.i_q - 5.0).abs() < 0.05);
    assert!(max_id < 0.02 * 5.0, "i_d peak {max_id}");
}

#[test]
fn foc_underwater_step() {
    let cfg = BenchConfig::default();
    let prof = BenchProfile::by_name("step").unwrap();
    let m = step_metrics(&run_bench(&prof, DriverKind::Foc, Medium::Water, &cfg), 0.1, 420.0, 0.5);
    assert!(m.rise_time.unwrap() <= 0.2, "{m:?}");
    assert!(m.overshoot < 0.1 && m.steady_error.abs() < 0.005, "{m:?}");
}

#[test]
fn esc_underwater_step_droops_and_oscillates() {
    let cfg = BenchConfig::default();
    let prof = BenchProfile::by_name("step").unwrap();
    let m = step_metrics(&run_bench(&prof, DriverKind::Esc, Medium::Water, &cfg), 0.1, 420.0, 0.5);
    assert!(m.steady_error.abs() > 0.03 && m.ripple > 0.02, "{m:?}");
}

#[test]
fn step_metrics_on_synthetic_ramp() {
    // Linear ramp 0 -> 100 over 1 s, then flat.
    let trace: Vec<BenchSample> = (0..=2000)
        .map(|k| {
            let t = k as f64 * 1e-3;
            BenchSample { t, rpm_ref: 100.0, rpm: 100.0 * t.min(1.0), ..Default::default() }
        })
        .collect();
    let m = step_metrics(&trace, 0.0, 100.0, 0.5);
    assert_abs_diff_eq!(m.rise_time.unwrap(), 0.8, epsilon = 1e-9);
    assert_eq!(m.overshoot, 0.0);
    assert_abs_diff_eq!(m.steady_error, 0.0, epsilon = 1e-12);
}

#[test]
fn segment_settle_times_on_synthetic_square() {
    let trace: Vec<BenchSample> = (1..=1000)
        .map(|k| {
            let t = k as f64 * 1e-3;
            let r = if k <= 500 { 100.0 } else { -100.0 };
            // Reaches the band 0.1 s into each segment.
            let rpm = if (k - 1) % 500 < 99 { 0.0 } else { r };
            BenchSample { t, rpm_ref: r, rpm, ..Default::default() }
        })
        .collect();
    let st = segment_settle_times(&trace, 0.05);
    assert_eq!(st.len(), 2);
    assert_abs_diff_eq!(st[0].unwrap(), 0.099, epsilon = 1e-9);
    assert_abs_diff_eq!(st[1].unwrap(), 0.099, epsilon = 1e-9);
}

#[test]
fn speed_never_exceeds_erpm_ceiling() {
    let mut cfg = BenchConfig::default();
    cfg.motor.erpm_limit = 7.0 * 1500.0;
    let prof = BenchProfile::Step { target_rpm: 3000.0, t_step: 0.0, duration: 0.3 };
    let tr = run_bench(&prof, DriverKind::Foc, Medium::Air, &cfg);
    assert!(tr.iter().all(|s| s.rpm.abs() <= 1500.0 + 1e-9));
}

#[test]
fn ideal_bank_is_a_first_order_lag() {
    let params = VehicleParams::default();
    let cfg = RotorBankConfig::default();
    let mut bank = RotorBank::new(cfg.clone(), &params, &RotorCommand([0.0; 4]), 0.0);
    let cmd = RotorCommand([1.0, 2.0, 3.0, -1.0]);
    let dt = 1e-3;
    let mut t = 0.0;
    while t < cfg.tau_air - 1e-12 {
        bank.step(&cmd, 0.0, dt);
        t += dt;
    }
    let frac = 1.0 - (-t / cfg.tau_air).exp();
    for j in 0..4 {
        assert_abs_diff_eq!(bank.thrust().0[j], cmd.0[j] * frac, epsilon = 1e-12);
    }
    assert!(bank.power() > 0.0);
}

#[test]
fn electrical_bank_holds_hover_thrust() {
    let params = VehicleParams::default();
    let cfg = RotorBankConfig { mode: PropulsionMode::Electrical, ..Default::default() };
    let cmd = RotorCommand([2.6, 2.7, 2.6, 2.7]);
    let mut bank = RotorBank::new(cfg, &params, &cmd, 0.0);
    for _ in 0..200 {
        bank.step(&cmd, 0.0, 1e-3);
    }
    for j in 0..4 {
        assert!((bank.thrust().0[j] - cmd.0[j]).abs() < 0.01 * cmd.0[j], "{:?}", bank.thrust());
    }
}

proptest! {
    #[test]
    fn thrust_rpm_round_trip(t in -10.0..20.0f64, water in 0.0..1.0f64) {
        let load = PropellerLoad::default();
        let rpm = load.rpm_for_thrust(t, water);
        let (back, _) = propeller_coupling(&load, rpm, water);
        prop_assert!((back - t).abs() < 1e-9 * t.abs().max(1.0));
    }
}
