//! Shared vehicle types, physical parameters and frame conventions.
//!
//! Frames: `W` is the world frame with `z` up. `A` is the mass frame at the
//! CoG with `z_A` along the rotor thrust axis. `T` is the geometric-center
//! frame used on the ground; it is `A` rotated a quarter turn about `y_A`
//! so that `x_T` coincides with `z_A` and `z_T` with `-x_A`. On flat ground
//! with `theta_T = 0` the thrust axis is horizontal and `z_T` points up.

use std::f64::consts::FRAC_PI_2;
use std::ops::{Index, IndexMut};

use nalgebra::{Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("euler rate matrix is singular at pitch {pitch} rad")]
    GimbalSingularity { pitch: f64 },
    #[error("invalid vehicle parameter: {0}")]
    InvalidParams(String),
}

/// Environment medium flag. `Air` maps to 0 and `Water` to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Medium {
    Air,
    Water,
}

impl Medium {
    pub fn zeta(self) -> f64 {
        match self {
            Medium::Air => 0.0,
            Medium::Water => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    FlightAir,
    FlightWater,
    GroundLand,
    GroundSeabed,
    WaterSurface,
}

impl MotionMode {
    pub fn medium(self) -> Medium {
        match self {
            MotionMode::FlightAir | MotionMode::GroundLand => Medium::Air,
            MotionMode::FlightWater | MotionMode::GroundSeabed | MotionMode::WaterSurface => {
                Medium::Water
            }
        }
    }

    pub fn is_ground(self) -> bool {
        matches!(self, MotionMode::GroundLand | MotionMode::GroundSeabed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotionMode::FlightAir => "flight_air",
            MotionMode::FlightWater => "flight_water",
            MotionMode::GroundLand => "ground_land",
            MotionMode::GroundSeabed => "ground_seabed",
            MotionMode::WaterSurface => "water_surface",
        }
    }
}

/// Largest ground pitch magnitude the ground model is used at. It is
/// singular with the thrust axis vertical.
pub const MAX_GROUND_PITCH: f64 = 88.0 * std::f64::consts::PI / 180.0;

/// Physical constants of the vehicle. Config keys match the field names
/// used in the parameter table (`M_A`, `C_f`, `V_disp`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub m: f64,
    pub m_a: f64,
    #[serde(rename = "M_A")]
    pub inertia_a: Vector3<f64>,
    #[serde(rename = "M_T")]
    pub inertia_t: Vector3<f64>,
    #[serde(rename = "M_a")]
    pub added_inertia: Vector3<f64>,
    pub lambda: f64,
    pub delta: f64,
    pub c_m: f64,
    pub c_t_air_fwd: f64,
    pub c_t_air_rev: f64,
    pub c_t_water_fwd: f64,
    pub c_t_water_rev: f64,
    #[serde(rename = "C_f")]
    pub drag_force: Vector3<f64>,
    #[serde(rename = "C_t")]
    pub drag_torque: Vector3<f64>,
    pub rho_w: f64,
    #[serde(rename = "V_disp")]
    pub v_disp: f64,
    pub r_buoy: Vector3<f64>,
    pub g: f64,
    pub u_min_air: f64,
    pub u_max_air: f64,
    pub u_min_water: f64,
    pub u_max_water: f64,
    /// Height of the geometric center above the support surface on wheels.
    pub contact_height: f64,
    /// Linear rolling resistance, N per (m/s). Zero by default.
    pub rolling_resistance: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        let rho_w = 1000.0;
        let v_disp = 1.05e-3;
        let inertia_a = Vector3::new(0.0113, 0.0018, 0.0125);
        Self {
            m: 1.1,
            m_a: 0.5 * rho_w * v_disp,
            inertia_a,
            inertia_t: Vector3::new(0.0125, 0.0018, 0.0113),
            added_inertia: inertia_a * 0.3,
            lambda: 0.08,
            delta: 0.015,
            c_m: 2.56e-10,
            c_t_air_fwd: 1.6e-8,
            c_t_air_rev: 7.79e-9,
            c_t_water_fwd: 1.83e-5,
            c_t_water_rev: 8.68e-6,
            drag_force: Vector3::new(8.0, 8.0, 10.0),
            drag_torque: Vector3::new(0.05, 0.05, 0.05),
            rho_w,
            v_disp,
            r_buoy: Vector3::new(0.0, 0.0, 0.01),
            g: 9.81,
            u_min_air: -2.0,
            u_max_air: 4.0,
            u_min_water: -12.5,
            u_max_water: 26.3,
            contact_height: 0.17,
            rolling_resistance: 0.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidParams(msg.to_string()));
        if !(self.m > 0.0) {
            return bad("m must be positive");
        }
        let inertias = self
            .inertia_a
            .iter()
            .chain(self.inertia_t.iter())
            .chain(self.added_inertia.iter());
        if inertias.clone().any(|&v| !(v > 0.0)) {
            return bad("inertia entries must be positive");
        }
        if !(self.lambda > self.delta && self.delta > 0.0) {
            return bad("require lambda > delta > 0");
        }
        if !(self.buoyancy() < self.weight()) {
            return bad("vehicle must be negatively buoyant");
        }
        let coeffs = [
            self.c_t_air_fwd,
            self.c_t_air_rev,
            self.c_t_water_fwd,
            self.c_t_water_rev,
        ];
        if coeffs.iter().any(|&c| !(c > 0.0)) || !(self.c_m > 0.0) {
            return bad("thrust and torque coefficients must be positive");
        }
        if self.c_t_air_fwd < self.c_t_air_rev || self.c_t_water_fwd < self.c_t_water_rev {
            return bad("forward thrust coefficient must not be below reverse");
        }
        if !(self.u_min_air < self.u_max_air && self.u_min_water < self.u_max_water) {
            return bad("thrust bounds are empty");
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.m * self.g
    }

    /// Magnitude of the buoyancy force when fully submerged.
    pub fn buoyancy(&self) -> f64 {
        self.rho_w * self.v_disp * self.g
    }

    /// Thrust coefficient for a rotor producing thrust of the given sign.
    pub fn thrust_coefficient(&self, medium: Medium, thrust: f64) -> f64 {
        match (medium, thrust >= 0.0) {
            (Medium::Air, true) => self.c_t_air_fwd,
            (Medium::Air, false) => self.c_t_air_rev,
            (Medium::Water, true) => self.c_t_water_fwd,
            (Medium::Water, false) => self.c_t_water_rev,
        }
    }

    pub fn thrust_bounds(&self, medium: Medium) -> (f64, f64) {
        match medium {
            Medium::Air => (self.u_min_air, self.u_max_air),
            Medium::Water => (self.u_min_water, self.u_max_water),
        }
    }

    /// `lambda / sqrt(2)`, the rotor offset along each body axis.
    pub fn arm(&self) -> f64 {
        self.lambda / std::f64::consts::SQRT_2
    }
}

/// Per-rotor thrust, N. Positive values push along `z_A`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RotorCommand(pub [f64; 4]);

impl RotorCommand {
    pub const ZERO: RotorCommand = RotorCommand([0.0; 4]);

    pub fn splat(v: f64) -> Self {
        RotorCommand([v; 4])
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        RotorCommand(self.0.map(|t| t.clamp(lo, hi)))
    }

    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.0.iter().all(|&t| t >= lo && t <= hi)
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }
}

impl Index<usize> for RotorCommand {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for RotorCommand {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Number of scalars in the packed state vector.
pub const STATE_DIM: usize = 18;
pub type StateVector = SVector<f64, STATE_DIM>;

/// Full hybrid vehicle state. Both the flight (`A`) and ground (`T`)
/// coordinates are carried; the ones not integrated in the current mode are
/// derived with [`HybridState::sync_from_flight`] or
/// [`HybridState::sync_from_ground`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub p_w: Vector3<f64>,
    pub v_a: Vector3<f64>,
    pub theta_a: Vector3<f64>,
    pub theta_t: f64,
    pub psi_t: f64,
    pub w_a: Vector3<f64>,
    pub w_t: Vector3<f64>,
    pub v_l: f64,
    pub mode: MotionMode,
}

impl HybridState {
    pub fn flight(p_w: Vector3<f64>, theta_a: Vector3<f64>, mode: MotionMode) -> Self {
        let mut s = Self {
            p_w,
            v_a: Vector3::zeros(),
            theta_a,
            theta_t: 0.0,
            psi_t: 0.0,
            w_a: Vector3::zeros(),
            w_t: Vector3::zeros(),
            v_l: 0.0,
            mode,
        };
        s.sync_from_flight();
        s
    }

    pub fn ground(x: f64, y: f64, theta_t: f64, psi_t: f64, params: &VehicleParams) -> Self {
        let mut s = Self {
            p_w: Vector3::new(x, y, params.contact_height),
            v_a: Vector3::zeros(),
            theta_a: Vector3::zeros(),
            theta_t,
            psi_t,
            w_a: Vector3::zeros(),
            w_t: Vector3::zeros(),
            v_l: 0.0,
            mode: MotionMode::GroundLand,
        };
        s.sync_from_ground();
        s
    }

    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.p_w);
        v.fixed_rows_mut::<3>(3).copy_from(&self.v_a);
        v.fixed_rows_mut::<3>(6).copy_from(&self.theta_a);
        v[9] = self.theta_t;
        v[10] = self.psi_t;
        v.fixed_rows_mut::<3>(11).copy_from(&self.w_a);
        v.fixed_rows_mut::<3>(14).copy_from(&self.w_t);
        v[17] = self.v_l;
        v
    }

    pub fn from_vector(v: &StateVector, mode: MotionMode) -> Self {
        Self {
            p_w: v.fixed_rows::<3>(0).into_owned(),
            v_a: v.fixed_rows::<3>(3).into_owned(),
            theta_a: v.fixed_rows::<3>(6).into_owned(),
            theta_t: v[9],
            psi_t: v[10],
            w_a: v.fixed_rows::<3>(11).into_owned(),
            w_t: v.fixed_rows::<3>(14).into_owned(),
            v_l: v[17],
            mode,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    /// World-frame velocity.
    pub fn velocity_w(&self) -> Vector3<f64> {
        if self.mode.is_ground() {
            Vector3::new(self.v_l * self.psi_t.cos(), self.v_l * self.psi_t.sin(), 0.0)
        } else {
            rotation_a_to_w(&self.theta_a) * self.v_a
        }
    }

    /// Derive the ground coordinates from the flight coordinates.
    pub fn sync_from_flight(&mut self) {
        let r_wa = rotation_a_to_w(&self.theta_a);
        let (theta_t, psi_t) = ground_attitude_from_rotation(&r_wa);
        self.theta_t = theta_t;
        self.psi_t = psi_t;
        self.w_t = frame_t_from_a(&self.w_a);
        let v_w = r_wa * self.v_a;
        self.v_l = v_w.x * psi_t.cos() + v_w.y * psi_t.sin();
    }

    /// Derive the flight coordinates from the ground coordinates.
    pub fn sync_from_ground(&mut self) {
        self.theta_a = Vector3::new(0.0, self.theta_t + FRAC_PI_2, self.psi_t);
        self.w_a = frame_a_from_t(&self.w_t);
        let v_w = Vector3::new(
            self.v_l * self.psi_t.cos(),
            self.v_l * self.psi_t.sin(),
            0.0,
        );
        self.v_a = rotation_a_to_w(&self.theta_a).transpose() * v_w;
    }
}

/// ZYX Euler rotation from the mass frame to the world frame.
pub fn rotation_a_to_w(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = theta.x.sin_cos();
    let (st, ct) = theta.y.sin_cos();
    let (ss, cs) = theta.z.sin_cos();
    Matrix3::new(
        ct * cs,
        sp * st * cs - cp * ss,
        cp * st * cs + sp * ss,
        ct * ss,
        sp * st * ss + cp * cs,
        cp * st * ss - sp * cs,
        -st,
        sp * ct,
        cp * ct,
    )
}

/// Matrix `W` with `d(theta)/dt = W * omega` for ZYX Euler angles.
pub fn euler_rate_matrix(theta: &Vector3<f64>) -> Result<Matrix3<f64>, ModelError> {
    let (sp, cp) = theta.x.sin_cos();
    let ct = theta.y.cos();
    if ct.abs() < 1e-6 {
        return Err(ModelError::GimbalSingularity { pitch: theta.y });
    }
    let tt = theta.y.tan();
    Ok(Matrix3::new(
        1.0,
        sp * tt,
        cp * tt,
        0.0,
        cp,
        -sp,
        0.0,
        sp / ct,
        cp / ct,
    ))
}

/// Inverse of [`euler_rate_matrix`]; defined everywhere.
pub fn euler_rate_matrix_inverse(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = theta.x.sin_cos();
    let (st, ct) = theta.y.sin_cos();
    Matrix3::new(1.0, 0.0, -st, 0.0, cp, sp * ct, 0.0, -sp, cp * ct)
}

/// ZYX Euler angles `(phi, theta, psi)` of a rotation matrix.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

/// Re-express a mass-frame vector in the geometric-center frame.
pub fn frame_t_from_a(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.z, v.y, -v.x)
}

/// Re-express a geometric-center-frame vector in the mass frame.
pub fn frame_a_from_t(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-v.z, v.y, v.x)
}

/// Rotation from the geometric-center frame to the world frame on the
/// ground (roll is held at zero by the wheels).
pub fn rotation_t_to_w(theta_t: f64, psi_t: f64) -> Matrix3<f64> {
    rotation_a_to_w(&Vector3::new(0.0, theta_t, psi_t))
}

/// Ground pitch and heading implied by a mass-frame attitude. Heading is
/// taken from the wheel axis so it stays defined when the thrust axis is
/// vertical.
pub fn ground_attitude_from_rotation(r_wa: &Matrix3<f64>) -> (f64, f64) {
    // x_T = z_A, y_T = y_A in world coordinates.
    let x_t = r_wa.column(2);
    let y_t = r_wa.column(1);
    let psi = (-y_t.x).atan2(y_t.y);
    let horiz = x_t.x * psi.cos() + x_t.y * psi.sin();
    let theta = (-x_t.z).atan2(horiz);
    (theta, psi)
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_6, PI};

    #[test]
    fn rotation_identity_and_yaw() {
        let r = rotation_a_to_w(&Vector3::zeros());
        assert_abs_diff_eq!(r, Matrix3::identity(), epsilon = 1e-15);
        let r = rotation_a_to_w(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert_abs_diff_eq!(r.column(0).into_owned(), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn rotation_generic_entries() {
        let r = rotation_a_to_w(&Vector3::new(0.1, 0.2, 0.3));
        assert_abs_diff_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(r[(2, 0)], -0.19866933079506122, epsilon = 1e-12);
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rate_matrix_cases() {
        let w = euler_rate_matrix(&Vector3::new(0.0, 0.0, 1.3)).unwrap();
        assert_abs_diff_eq!(w, Matrix3::identity(), epsilon = 1e-15);
        let w = euler_rate_matrix(&Vector3::new(FRAC_PI_6, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(w[(1, 1)], FRAC_PI_6.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(w[(1, 2)], -FRAC_PI_6.sin(), epsilon = 1e-15);
        assert_eq!(w[(1, 0)], 0.0);
        assert!(matches!(
            euler_rate_matrix(&Vector3::new(0.0, FRAC_PI_2, 0.0)),
            Err(ModelError::GimbalSingularity { .. })
        ));
    }

    #[test]
    fn frame_mapping() {
        assert_eq!(frame_t_from_a(&Vector3::z()), Vector3::x());
        assert_eq!(frame_t_from_a(&Vector3::zeros()), Vector3::zeros());
        let v = Vector3::new(0.3, -1.2, 2.0);
        assert_abs_diff_eq!(frame_t_from_a(&v).norm(), v.norm(), epsilon = 1e-15);
        assert_eq!(frame_a_from_t(&frame_t_from_a(&v)), v);
    }

    #[test]
    fn default_params_match_table() {
        let p = VehicleParams::default();
        p.validate().unwrap();
        assert_eq!(p.m, 1.1);
        assert_eq!(p.lambda, 0.08);
        assert_eq!(p.delta, 0.015);
        assert_eq!(p.c_m, 2.56e-10);
        assert_eq!((p.c_t_air_fwd, p.c_t_air_rev), (1.6e-8, 7.79e-9));
        assert_eq!((p.c_t_water_fwd, p.c_t_water_rev), (1.83e-5, 8.68e-6));
        assert_eq!(p.inertia_a, Vector3::new(0.0113, 0.0018, 0.0125));
        assert_eq!(p.inertia_t, Vector3::new(0.0125, 0.0018, 0.0113));
        // hover speed per rotor in RPM
        let rpm = (p.weight() / 4.0 / p.c_t_air_fwd).sqrt();
        assert!((rpm - 12_986.0).abs() / 12_986.0 < 1e-3, "{rpm}");
    }

    #[test]
    fn invalid_params_rejected() {
        let d = VehicleParams::default;
        assert!(VehicleParams { v_disp: 2e-3, ..d() }.validate().is_err());
        assert!(VehicleParams { delta: 0.1, ..d() }.validate().is_err());
        assert!(VehicleParams { c_t_air_rev: 1.0, ..d() }.validate().is_err());
    }

    #[test]
    fn params_config_keys() {
        let p: VehicleParams = toml::from_str("m = 1.5\nM_A = [0.01, 0.002, 0.012]\nV_disp = 1e-3").unwrap();
        assert_eq!(p.m, 1.5);
        assert_eq!(p.inertia_a.y, 0.002);
        assert_eq!(p.v_disp, 1e-3);
        assert_eq!(p.lambda, 0.08);
        let text = toml::to_string(&VehicleParams::default()).unwrap();
        for key in ["M_A", "M_T", "M_a", "C_f", "C_t", "V_disp", "r_buoy", "c_t_water_rev"] {
            assert!(text.contains(key), "{key} missing");
        }
    }

    #[test]
    fn ground_flight_sync_roundtrip() {
        let p = VehicleParams::default();
        let mut s = HybridState::ground(1.0, 2.0, -0.3, 0.7, &p);
        s.v_l = 1.5;
        s.w_t = Vector3::new(0.0, 0.2, -0.4);
        s.sync_from_ground();
        let mut f = s;
        f.sync_from_flight();
        assert_abs_diff_eq!(f.theta_t, -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(f.psi_t, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(f.v_l, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.w_t, s.w_t, epsilon = 1e-12);
        // upright flight corresponds to a thrust axis pointing up
        let up = HybridState::flight(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.4), MotionMode::FlightAir);
        assert_abs_diff_eq!(up.theta_t, -FRAC_PI_2, epsilon = 1e-9);
        assert_abs_diff_eq!(up.psi_t, 0.4, epsilon = 1e-9);
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.5 - 4.0 * PI), 0.5, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(a in -PI..PI, b in -PI..PI, c in -PI..PI) {
            let r = rotation_a_to_w(&Vector3::new(a, b, c));
            let err = (r * r.transpose() - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-10);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn rate_matrix_inverse(a in -PI..PI, b in -1.5..1.5f64, c in -PI..PI) {
            let th = Vector3::new(a, b, c);
            let w = euler_rate_matrix(&th).unwrap();
            let err = (w * euler_rate_matrix_inverse(&th) - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-9);
        }

        #[test]
        fn euler_roundtrip(a in -3.0..3.0f64, b in -1.5..1.5f64, c in -3.0..3.0f64) {
            let th = Vector3::new(a, b, c);
            let back = euler_from_rotation(&rotation_a_to_w(&th));
            prop_assert!((back - th).abs().max() < 1e-9);
        }
    }
}
