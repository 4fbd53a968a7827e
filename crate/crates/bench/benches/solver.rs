use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::Vector3;
use triphibot_core::flatness::reference_point;
use triphibot_core::hnmpc::{eta_schedule, horizon_reference, Hnmpc, OcpConfig};
use triphibot_core::reference::{Shape, Trajectory, TrajectorySpec};
use triphibot_core::{MotionMode, VehicleParams};

fn eight(mode: MotionMode, center: [f64; 3], vmax: f64, amax: f64) -> Trajectory {
    let shape = Shape::Lissajous8 {
        center,
        amplitude: None,
        period: None,
        vmax: Some(vmax),
        amax: Some(amax),
        loops: 1.0,
        ramp: 2.0,
        yaw: 0.0,
        theta_t: 0.0,
    };
    Trajectory::new(&TrajectorySpec::single(mode, shape)).unwrap()
}

/// One warm-started solve per iteration, walking along the curve.
fn solve(c: &mut Criterion, name: &str, traj: &Trajectory) {
    let p = VehicleParams::default();
    let cfg = OcpConfig::default();
    let mut mpc = Hnmpc::new(cfg.clone(), &p).unwrap();
    let mut t = 3.0;
    c.bench_function(name, |b| {
        b.iter(|| {
            let refs = horizon_reference(traj, t, &cfg, &p).unwrap();
            let mut x = reference_point(&traj.sample_clamped(t), &p).unwrap().state;
            x.p_w += Vector3::new(0.01, -0.01, 0.0);
            let sol = mpc.solve(&x, &refs, &eta_schedule(&refs, &cfg)).unwrap();
            t = if t > 8.0 { 3.0 } else { t + 0.005 };
            black_box(sol.first_command())
        })
    });
}

fn benches(c: &mut Criterion) {
    solve(c, "hnmpc_aerial_n40", &eight(MotionMode::FlightAir, [0.0, 0.0, 1.5], 2.0, 2.0));
    solve(c, "hnmpc_ground_n40", &eight(MotionMode::GroundLand, [0.0, 0.0, 0.17], 3.0, 2.5));
}

criterion_group! {
    name = solver;
    config = Criterion::default().sample_size(30);
    targets = benches
}
criterion_main!(solver);
