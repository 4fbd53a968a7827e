//! Differential flatness: flat outputs and their derivatives to full
//! reference states and rotor thrusts.
//!
//! Aerial flat output is `(x, y, z, psi_A)`; terrestrial is `(x, y, theta_T)`
//! with heading and rolling speed recovered from the planar velocity.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::dynamics::{
    flight_derivative, gravity_moment, ground_buoyancy_moment, ground_derivative,
    ground_drag_magnitude, ground_drag_moment, ground_inertia, solve_allocation, DynamicsError,
    Frame, Wrench,
};
use crate::model::{
    euler_from_rotation, euler_rate_matrix, HybridState, Medium, MotionMode, RotorCommand,
    StateVector, VehicleParams,
};

/// Below this planar speed (m/s) the heading is held instead of derived.
pub const HEADING_EPS: f64 = 1e-3;
/// Minimum norm of the mass-normalized thrust vector.
pub const THRUST_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlatnessError {
    #[error("thrust direction undefined: |a + g| = {0}")]
    ZeroThrust(f64),
    #[error("ground pitch {0} rad is at the sec(theta) singularity")]
    GroundSingularity(f64),
    #[error("no flatness map for mode {0:?}")]
    Unsupported(MotionMode),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Flat output sample with derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatPoint {
    pub t: f64,
    /// Position and its first four time derivatives.
    pub pos: [Vector3<f64>; 5],
    /// Yaw and its first two derivatives (aerial).
    pub yaw: [f64; 3],
    /// Ground pitch and its first two derivatives (terrestrial).
    pub theta_t: [f64; 3],
    /// Direction of travel on the ground, +1 forward or -1 backward.
    pub kappa: f64,
    pub mode: MotionMode,
    /// Heading used when the planar speed is too small to define one.
    pub heading_hint: f64,
}

impl FlatPoint {
    pub fn at_rest(pos: Vector3<f64>, mode: MotionMode) -> Self {
        let mut p = [Vector3::zeros(); 5];
        p[0] = pos;
        Self {
            t: 0.0,
            pos: p,
            yaw: [0.0; 3],
            theta_t: [0.0; 3],
            kappa: 1.0,
            mode,
            heading_hint: 0.0,
        }
    }
}

/// Dynamically consistent reference state with its feedforward input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub t: f64,
    pub state: HybridState,
    pub u: RotorCommand,
    pub wrench: Wrench,
    /// Time derivative of the reference state, from the flat output.
    pub state_dot: StateVector,
}

/// Truncated Taylor jet: value with first and second time derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Jet {
    v: f64,
    d: f64,
    dd: f64,
}

impl Jet {
    fn new(v: f64, d: f64, dd: f64) -> Self {
        Self { v, d, dd }
    }

    fn cst(v: f64) -> Self {
        Self::new(v, 0.0, 0.0)
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let d = self.d / (2.0 * s);
        Self::new(s, d, (self.dd - 2.0 * d * d) / (2.0 * s))
    }

    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Self::new(s, c * self.d, c * self.dd - s * self.d * self.d)
    }

    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Self::new(c, -s * self.d, -s * self.dd - c * self.d * self.d)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet::new(self.v + o.v, self.d + o.d, self.dd + o.dd)
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet::new(self.v - o.v, self.d - o.d, self.dd - o.dd)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet::new(-self.v, -self.d, -self.dd)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet::new(
            self.v * o.v,
            self.d * o.v + self.v * o.d,
            self.dd * o.v + 2.0 * self.d * o.d + self.v * o.dd,
        )
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        let q = self.v / o.v;
        let qd = (self.d - q * o.d) / o.v;
        let qdd = (self.dd - 2.0 * qd * o.d - q * o.dd) / o.v;
        Jet::new(q, qd, qdd)
    }
}

type JetVec = [Jet; 3];

fn jcross(a: &JetVec, b: &JetVec) -> JetVec {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn jnormalize(a: &JetVec) -> JetVec {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Reference for either mode, dispatching on the point's motion mode.
pub fn reference_point(
    pt: &FlatPoint,
    params: &VehicleParams,
) -> Result<ReferencePoint, FlatnessError> {
    match pt.mode {
        MotionMode::FlightAir => aerial_flatness(pt, params),
        MotionMode::GroundLand | MotionMode::GroundSeabed => terrestrial_flatness(pt, params),
        m => Err(FlatnessError::Unsupported(m)),
    }
}

/// Quadrotor flatness in air: attitude from the thrust direction and yaw,
/// body rates and accelerations from jets of the rotation, then the
/// eccentric allocation for the rotor thrusts.
pub fn aerial_flatness(
    pt: &FlatPoint,
    params: &VehicleParams,
) -> Result<ReferencePoint, FlatnessError> {
    if pt.mode != MotionMode::FlightAir {
        return Err(FlatnessError::Unsupported(pt.mode));
    }
    let [_, v, a, j, s] = pt.pos;
    let thrust_vec: JetVec = [
        Jet::new(a.x, j.x, s.x),
        Jet::new(a.y, j.y, s.y),
        Jet::new(a.z + params.g, j.z, s.z),
    ];
    let tn = Vector3::new(a.x, a.y, a.z + params.g).norm();
    if tn < THRUST_EPS {
        return Err(FlatnessError::ZeroThrust(tn));
    }
    let psi = Jet::new(pt.yaw[0], pt.yaw[1], pt.yaw[2]);
    let z_b = jnormalize(&thrust_vec);
    let y_c = [-psi.sin(), psi.cos(), Jet::cst(0.0)];
    let x_b = jnormalize(&jcross(&y_c, &z_b));
    let y_b = jcross(&z_b, &x_b);

    let mut r = Matrix3::zeros();
    let mut rd = Matrix3::zeros();
    let mut rdd = Matrix3::zeros();
    for (col, axis) in [x_b, y_b, z_b].iter().enumerate() {
        for row in 0..3 {
            r[(row, col)] = axis[row].v;
            rd[(row, col)] = axis[row].d;
            rdd[(row, col)] = axis[row].dd;
        }
    }
    let omega = vee(&(r.transpose() * rd));
    let omega_dot = vee(&(rd.transpose() * rd + r.transpose() * rdd));

    let thrust = params.m * tn;
    let inertia = params.inertia_a;
    let torque = inertia.component_mul(&omega_dot) + omega.cross(&inertia.component_mul(&omega));
    let wrench = Wrench::new(thrust, torque, Frame::A);
    let u = solve_allocation(&wrench, params, Medium::Air)?;

    let theta_a = euler_from_rotation(&r);
    let mut state = HybridState::flight(pt.pos[0], theta_a, MotionMode::FlightAir);
    state.v_a = r.transpose() * v;
    state.w_a = omega;
    state.sync_from_flight();

    let w = euler_rate_matrix(&theta_a).map_err(DynamicsError::from)?;
    let mut d = StateVector::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&v);
    d.fixed_rows_mut::<3>(3)
        .copy_from(&(r.transpose() * a - omega.cross(&state.v_a)));
    d.fixed_rows_mut::<3>(6).copy_from(&(w * omega));
    d.fixed_rows_mut::<3>(11).copy_from(&omega_dot);

    Ok(ReferencePoint {
        t: pt.t,
        state,
        u,
        wrench,
        state_dot: d,
    })
}

/// Heading, its rate and acceleration from planar path derivatives.
fn heading(pt: &FlatPoint) -> (f64, f64, f64) {
    let [_, v, a, j, _] = pt.pos;
    let dd = v.x * v.x + v.y * v.y;
    if dd.sqrt() < HEADING_EPS {
        return (pt.heading_hint, 0.0, 0.0);
    }
    let psi = (pt.kappa * v.y).atan2(pt.kappa * v.x);
    let n = v.x * a.y - v.y * a.x;
    let n_dot = v.x * j.y - v.y * j.x;
    let dd_dot = 2.0 * (v.x * a.x + v.y * a.y);
    (psi, n / dd, (n_dot * dd - n * dd_dot) / (dd * dd))
}

/// Ground flatness: heading and rolling speed from the planar velocity,
/// body rates from pitch and heading, collective thrust from the rolling
/// equation and torques from the rotational balance with the roll torque
/// forced to zero.
pub fn terrestrial_flatness(
    pt: &FlatPoint,
    params: &VehicleParams,
) -> Result<ReferencePoint, FlatnessError> {
    if !pt.mode.is_ground() {
        return Err(FlatnessError::Unsupported(pt.mode));
    }
    let medium = pt.mode.medium();
    let zeta = medium.zeta();
    let [th, th_d, th_dd] = pt.theta_t;
    let (st, ct) = th.sin_cos();
    if ct.abs() < 1e-6 {
        return Err(FlatnessError::GroundSingularity(th));
    }
    let [p, v, a, _, _] = pt.pos;
    let (psi, psi_d, psi_dd) = heading(pt);
    let speed = (v.x * v.x + v.y * v.y).sqrt();
    let v_l = pt.kappa * speed;
    let v_l_dot = if speed < HEADING_EPS {
        // At rest the tangent is the held heading.
        a.x * psi.cos() + a.y * psi.sin()
    } else {
        pt.kappa * (v.x * a.x + v.y * a.y) / speed
    };

    let omega = Vector3::new(-st * psi_d, th_d, psi_d * ct);
    let omega_dot = Vector3::new(
        -ct * th_d * psi_d - st * psi_dd,
        th_dd,
        psi_dd * ct - psi_d * th_d * st,
    );

    let mass = params.m + zeta * params.m_a;
    let drag = if zeta > 0.0 {
        zeta * ground_drag_magnitude(params, v_l, th, psi) * v_l.signum()
    } else {
        0.0
    };
    let thrust = (mass * v_l_dot + drag + params.rolling_resistance * v_l) / ct;

    let inertia = ground_inertia(params, zeta);
    let mut torque = inertia.component_mul(&omega_dot)
        + omega.cross(&inertia.component_mul(&omega))
        + gravity_moment(params, th);
    if zeta > 0.0 {
        torque += ground_buoyancy_moment(params, th, psi, zeta)
            + ground_drag_moment(params, &omega, zeta);
    }
    torque.x = 0.0;
    let wrench = Wrench::new(thrust, torque, Frame::T);
    let u = solve_allocation(&wrench, params, medium)?;

    let mut state = HybridState::ground(p.x, p.y, th, psi, params);
    state.mode = pt.mode;
    state.v_l = v_l;
    state.w_t = omega;
    state.sync_from_ground();

    let mut d = StateVector::zeros();
    d[0] = v.x;
    d[1] = v.y;
    d[9] = th_d;
    d[10] = psi_d;
    d.fixed_rows_mut::<3>(14).copy_from(&omega_dot);
    d[17] = v_l_dot;

    Ok(ReferencePoint {
        t: pt.t,
        state,
        u,
        wrench,
        state_dot: d,
    })
}

/// State indices compared by the round-trip check in each mode. The ground
/// roll acceleration is excluded: the wheels hold roll, so the reference
/// roll rate is kinematic and is not produced by a torque.
pub fn residual_indices(mode: MotionMode) -> &'static [usize] {
    if mode.is_ground() {
        &[0, 1, 2, 9, 10, 15, 16, 17]
    } else {
        &[0, 1, 2, 3, 4, 5, 6, 7, 8, 11, 12, 13]
    }
}

/// `|f(x_ref, u_ref) - xdot_ref|` over the coordinates the mode evolves.
pub fn flatness_roundtrip_check(
    pt: &FlatPoint,
    params: &VehicleParams,
) -> Result<f64, FlatnessError> {
    let r = reference_point(pt, params)?;
    let f = if pt.mode.is_ground() {
        ground_derivative(&r.state, &r.u, params, pt.mode.medium())?
    } else {
        flight_derivative(&r.state, &r.u, params, pt.mode.medium())?
    };
    let sq: f64 = residual_indices(pt.mode)
        .iter()
        .map(|&i| (f[i] - r.state_dot[i]).powi(2))
        .sum();
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p() -> VehicleParams {
        VehicleParams::default()
    }

    fn ground_pt(v: Vector3<f64>, a: Vector3<f64>) -> FlatPoint {
        let mut pt = FlatPoint::at_rest(Vector3::zeros(), MotionMode::GroundLand);
        pt.pos[1] = v;
        pt.pos[2] = a;
        pt
    }

    #[test]
    fn hover_reference() {
        let pt = FlatPoint::at_rest(Vector3::new(0.0, 0.0, 1.0), MotionMode::FlightAir);
        let r = aerial_flatness(&pt, &p()).unwrap();
        assert_abs_diff_eq!(r.state.theta_a, Vector3::zeros(), epsilon = 1e-12);
        let expect = [3.413, 1.983, 3.413, 1.983];
        for j in 0..4 {
            assert!((r.u[j] - expect[j]).abs() < 1e-3);
        }
        assert!(flatness_roundtrip_check(&pt, &p()).unwrap() < 1e-9);
    }

    #[test]
    fn orbit_tilt() {
        // Circle of radius 1 at 1 m/s, evaluated at angle 0: position
        // (1, 0), velocity (0, 1), centripetal acceleration (-1, 0).
        let mut pt = FlatPoint::at_rest(Vector3::new(1.0, 0.0, 1.0), MotionMode::FlightAir);
        pt.pos[1] = Vector3::new(0.0, 1.0, 0.0);
        pt.pos[2] = Vector3::new(-1.0, 0.0, 0.0);
        pt.pos[3] = Vector3::new(0.0, -1.0, 0.0);
        pt.pos[4] = Vector3::new(1.0, 0.0, 0.0);
        let params = p();
        let r = aerial_flatness(&pt, &params).unwrap();
        let z_a = crate::model::rotation_a_to_w(&r.state.theta_a).column(2).into_owned();
        let tilt = z_a.z.acos().to_degrees();
        let expect = (1.0 / params.g).atan().to_degrees();
        assert_abs_diff_eq!(tilt, expect, epsilon = 1e-9);
        assert!((tilt - 5.82).abs() < 0.01);
        assert!(flatness_roundtrip_check(&pt, &params).unwrap() < 1e-9);
    }

    #[test]
    fn vertical_acceleration_doubles_thrust() {
        let params = p();
        let mut pt = FlatPoint::at_rest(Vector3::zeros(), MotionMode::FlightAir);
        pt.pos[2] = Vector3::new(0.0, 0.0, params.g);
        let r = aerial_flatness(&pt, &params).unwrap();
        assert_abs_diff_eq!(r.wrench.thrust, 2.0 * params.weight(), epsilon = 1e-12);
        assert!((r.wrench.thrust - 21.58).abs() < 0.01);
    }

    #[test]
    fn free_fall_is_singular() {
        let params = p();
        let mut pt = FlatPoint::at_rest(Vector3::zeros(), MotionMode::FlightAir);
        pt.pos[2] = Vector3::new(0.0, 0.0, -params.g);
        assert!(matches!(aerial_flatness(&pt, &params), Err(FlatnessError::ZeroThrust(_))));
    }

    #[test]
    fn ground_coasting_and_sign() {
        let params = p();
        let r = terrestrial_flatness(&ground_pt(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()), &params)
            .unwrap();
        assert_eq!(r.state.psi_t, 0.0);
        assert_eq!(r.state.v_l, 1.0);
        assert_abs_diff_eq!(r.wrench.thrust, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.state.w_t.norm(), 0.0, epsilon = 1e-12);
        for j in 0..4 {
            assert_abs_diff_eq!(r.u[j], 0.0, epsilon = 1e-12);
        }

        let mut pt = ground_pt(Vector3::new(3.0, 4.0, 0.0), Vector3::zeros());
        pt.kappa = -1.0;
        let r = terrestrial_flatness(&pt, &params).unwrap();
        assert_abs_diff_eq!(r.state.v_l, -5.0, epsilon = 1e-12);
    }

    #[test]
    fn ground_accelerating_line() {
        let params = p();
        let pt = ground_pt(Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0));
        let r = terrestrial_flatness(&pt, &params).unwrap();
        assert_abs_diff_eq!(r.wrench.thrust, 2.2, epsilon = 1e-12);
        for j in 0..4 {
            assert_abs_diff_eq!(r.u[j], 0.55, epsilon = 1e-12);
        }
        let d = ground_derivative(&r.state, &r.u, &params, Medium::Air).unwrap();
        assert_abs_diff_eq!(d[17], 2.0, epsilon = 1e-12);
        assert!(flatness_roundtrip_check(&pt, &params).unwrap() < 1e-9);
    }

    #[test]
    fn heading_held_at_rest() {
        let mut pt = ground_pt(Vector3::zeros(), Vector3::zeros());
        pt.heading_hint = 0.7;
        let r = terrestrial_flatness(&pt, &p()).unwrap();
        assert_eq!(r.state.psi_t, 0.7);
    }

    fn smooth_point(c: &[f64], mode: MotionMode) -> FlatPoint {
        // Polynomial segment per axis, evaluated at t = 0: the coefficients
        // are the derivatives directly.
        let mut pt = FlatPoint::at_rest(Vector3::new(c[0], c[1], 1.0 + c[2]), mode);
        for k in 1..5 {
            pt.pos[k] = Vector3::new(c[3 * k], c[3 * k + 1], if mode.is_ground() { 0.0 } else { c[3 * k + 2] });
        }
        if mode.is_ground() {
            pt.pos[0].z = 0.17;
        }
        pt.yaw = [c[15], c[16], c[17]];
        pt.theta_t = [c[18] * 1.2, c[19], c[20]];
        pt.kappa = if c[21] > 0.0 { 1.0 } else { -1.0 };
        pt
    }

    proptest! {
        #[test]
        fn roundtrip_random_points(c in prop::collection::vec(-1.0..1.0f64, 22), ground in any::<bool>(), water in any::<bool>()) {
            let mode = match (ground, water) {
                (true, false) => MotionMode::GroundLand,
                (true, true) => MotionMode::GroundSeabed,
                _ => MotionMode::FlightAir,
            };
            let pt = smooth_point(&c, mode);
            let res = flatness_roundtrip_check(&pt, &p()).unwrap();
            prop_assert!(res < 1e-6, "{res}");
        }

        #[test]
        fn roll_torque_is_zero(c in prop::collection::vec(-1.0..1.0f64, 22)) {
            let pt = smooth_point(&c, MotionMode::GroundLand);
            let r = terrestrial_flatness(&pt, &p()).unwrap();
            prop_assert_eq!(r.wrench.torque.x, 0.0);
        }

        #[test]
        fn kappa_flip_symmetry(vx in -2.0..2.0f64, vy in -2.0..2.0f64, ax in -1.0..1.0f64, ay in -1.0..1.0f64) {
            prop_assume!((vx * vx + vy * vy).sqrt() > 0.01);
            let params = p();
            let fwd = ground_pt(Vector3::new(vx, vy, 0.0), Vector3::new(ax, ay, 0.0));
            let a = terrestrial_flatness(&fwd, &params).unwrap();

            // Same path driven the other way round: heading flips by pi.
            let mut flipped = fwd;
            flipped.kappa = -1.0;
            let b = terrestrial_flatness(&flipped, &params).unwrap();
            let dpsi = crate::model::wrap_angle(b.state.psi_t - a.state.psi_t - std::f64::consts::PI);
            prop_assert!(dpsi.abs() < 1e-12);
            prop_assert!((a.state.v_l + b.state.v_l).abs() < 1e-12);

            // Reversed parameterization as well: heading is unchanged.
            let mut back = ground_pt(Vector3::new(-vx, -vy, 0.0), Vector3::new(ax, ay, 0.0));
            back.kappa = -1.0;
            let c = terrestrial_flatness(&back, &params).unwrap();
            prop_assert!(crate::model::wrap_angle(c.state.psi_t - a.state.psi_t).abs() < 1e-12);
            prop_assert!((a.state.v_l + c.state.v_l).abs() < 1e-12);
        }

        #[test]
        fn level_straight_line_equal_thrusts(v in 0.1..3.0f64, acc in -2.0..2.0f64, psi in -3.0..3.0f64) {
            let d = Vector3::new(psi.cos(), psi.sin(), 0.0);
            let pt = ground_pt(d * v, d * acc);
            let r = terrestrial_flatness(&pt, &p()).unwrap();
            for j in 1..4 {
                prop_assert!((r.u[j] - r.u[0]).abs() < 1e-9);
            }
        }
    }
}
