//! Prediction model of the HNMPC: 13-dimensional states in two layouts,
//! RK4 discretization and the mapping between layouts at a mode switch.
//!
//! Aerial layout: `[p(3), v_A(3), q(4; w,x,y,z), omega_A(3)]`.
//! Terrestrial layout: `[p(3), v_l, theta_T, psi_T, 0, omega_T,y, omega_T,z, 0, 0, 0, 0]`.
//! The terrestrial roll rate is kinematic (`-tan(theta_T) omega_T,z`) and
//! is not carried as a state.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{SMatrix, SVector, UnitQuaternion, Vector3};

use super::scalar::{Dual, Scalar};
use crate::model::{rotation_a_to_w, HybridState, VehicleParams};

pub const NX: usize = 13;
pub const NU: usize = 4;
const NZ: usize = NX + NU;

pub type NState = SVector<f64, NX>;
pub type NInput = SVector<f64, NU>;
pub type MatA = SMatrix<f64, NX, NX>;
pub type MatB = SMatrix<f64, NX, NU>;

/// Which dynamics a horizon node uses. `eta = 1` is terrestrial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    Aerial,
    Terrestrial,
}

impl Layout {
    pub fn from_eta(eta: u8) -> Self {
        if eta == 1 {
            Layout::Terrestrial
        } else {
            Layout::Aerial
        }
    }

    pub fn eta(self) -> u8 {
        match self {
            Layout::Aerial => 0,
            Layout::Terrestrial => 1,
        }
    }
}

/// Air-medium constants used by the prediction model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConsts {
    m: f64,
    g: f64,
    j_a: [f64; 3],
    j_t: [f64; 3],
    arm: f64,
    delta: f64,
    yaw_fwd: f64,
    yaw_rev: f64,
    rolling: f64,
}

impl ModelConsts {
    pub fn new(p: &VehicleParams) -> Self {
        Self {
            m: p.m,
            g: p.g,
            j_a: p.inertia_a.into(),
            j_t: p.inertia_t.into(),
            arm: p.arm(),
            delta: p.delta,
            yaw_fwd: p.c_m / p.c_t_air_fwd,
            yaw_rev: p.c_m / p.c_t_air_rev,
            rolling: p.rolling_resistance,
        }
    }
}

const YAW_SIGN: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

fn wrench<S: Scalar>(c: &ModelConsts, u: &[S; NU], d: f64) -> (S, [S; 3]) {
    let a = c.arm;
    let t = u[0] + u[1] + u[2] + u[3];
    let tx = (u[1] + u[2] - u[0] - u[3]) * a;
    let ty = (u[0] + u[2]) * (d - a) + (u[1] + u[3]) * (d + a);
    let mut tz = S::cst(0.0);
    for j in 0..4 {
        let k = if u[j].re() >= 0.0 { c.yaw_fwd } else { c.yaw_rev };
        tz = tz + u[j] * (YAW_SIGN[j] * k);
    }
    (t, [tx, ty, tz])
}

fn rot<S: Scalar>(q: &[S]) -> [[S; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let one = S::cst(1.0);
    [
        [
            one - (y * y + z * z) * 2.0,
            (x * y - w * z) * 2.0,
            (x * z + w * y) * 2.0,
        ],
        [
            (x * y + w * z) * 2.0,
            one - (x * x + z * z) * 2.0,
            (y * z - w * x) * 2.0,
        ],
        [
            (x * z - w * y) * 2.0,
            (y * z + w * x) * 2.0,
            one - (x * x + y * y) * 2.0,
        ],
    ]
}

fn cross<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn aerial_f<S: Scalar>(c: &ModelConsts, x: &[S; NX], u: &[S; NU]) -> [S; NX] {
    let (t, tau) = wrench(c, u, c.delta);
    let r = rot(&x[6..10]);
    let v = [x[3], x[4], x[5]];
    let w = [x[10], x[11], x[12]];
    let q = [x[6], x[7], x[8], x[9]];
    let mut f = [S::cst(0.0); NX];
    for i in 0..3 {
        f[i] = r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2];
    }
    let wxv = cross(&w, &v);
    for i in 0..3 {
        f[3 + i] = -wxv[i] - r[2][i] * c.g;
    }
    f[5] = f[5] + t / c.m;
    f[6] = -(q[1] * w[0] + q[2] * w[1] + q[3] * w[2]) * 0.5;
    f[7] = (q[0] * w[0] + q[2] * w[2] - q[3] * w[1]) * 0.5;
    f[8] = (q[0] * w[1] + q[3] * w[0] - q[1] * w[2]) * 0.5;
    f[9] = (q[0] * w[2] + q[1] * w[1] - q[2] * w[0]) * 0.5;
    let jw = [w[0] * c.j_a[0], w[1] * c.j_a[1], w[2] * c.j_a[2]];
    let gyro = cross(&w, &jw);
    for i in 0..3 {
        f[10 + i] = (tau[i] - gyro[i]) / c.j_a[i];
    }
    f
}

fn terrestrial_f<S: Scalar>(c: &ModelConsts, x: &[S; NX], u: &[S; NU]) -> [S; NX] {
    let (t, tau) = wrench(c, u, 0.0);
    let (v_l, th, psi) = (x[3], x[4], x[5]);
    let (st, ct) = (th.sin(), th.cos());
    let (wy, wz) = (x[7], x[8]);
    let wx = -(st / ct) * wz;
    let j = c.j_t;
    let mut f = [S::cst(0.0); NX];
    f[0] = v_l * psi.cos();
    f[1] = v_l * psi.sin();
    f[3] = (t * ct - v_l * c.rolling) / c.m;
    f[4] = wy;
    f[5] = wz / ct;
    let gyro_y = wz * wx * j[0] - wx * wz * j[2];
    let gyro_z = wx * wy * j[1] - wy * wx * j[0];
    f[7] = (tau[1] - gyro_y - st * (c.m * c.g * c.delta)) / j[1];
    f[8] = (tau[2] - gyro_z) / j[2];
    f
}

fn eval<S: Scalar>(c: &ModelConsts, l: Layout, x: &[S; NX], u: &[S; NU]) -> [S; NX] {
    match l {
        Layout::Aerial => aerial_f(c, x, u),
        Layout::Terrestrial => terrestrial_f(c, x, u),
    }
}

fn axpy<S: Scalar>(x: &[S; NX], k: &[S; NX], h: f64) -> [S; NX] {
    let mut o = *x;
    for i in 0..NX {
        o[i] = o[i] + k[i] * h;
    }
    o
}

/// Continuous-time model derivative in the given layout.
pub fn model_derivative(c: &ModelConsts, l: Layout, x: &NState, u: &NInput) -> NState {
    let xa: [f64; NX] = (*x).into();
    let ua: [f64; NU] = (*u).into();
    NState::from(eval(c, l, &xa, &ua))
}

fn rk4<S: Scalar>(c: &ModelConsts, l: Layout, x: &[S; NX], u: &[S; NU], dt: f64) -> [S; NX] {
    let k1 = eval(c, l, x, u);
    let k2 = eval(c, l, &axpy(x, &k1, 0.5 * dt), u);
    let k3 = eval(c, l, &axpy(x, &k2, 0.5 * dt), u);
    let k4 = eval(c, l, &axpy(x, &k3, dt), u);
    let mut o = *x;
    for i in 0..NX {
        o[i] = o[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
    }
    o
}

/// Re-express a state of layout `from` in layout `to`.
fn map_layout<S: Scalar>(from: Layout, to: Layout, x: &[S; NX]) -> [S; NX] {
    if from == to {
        return *x;
    }
    let zero = S::cst(0.0);
    let mut o = [zero; NX];
    o[0] = x[0];
    o[1] = x[1];
    o[2] = x[2];
    match (from, to) {
        (Layout::Aerial, Layout::Terrestrial) => {
            let r = rot(&x[6..10]);
            // x_T = z_A, y_T = y_A
            let psi = (-r[0][1]).atan2(r[1][1]);
            let (sp, cp) = (psi.sin(), psi.cos());
            let horiz = r[0][2] * cp + r[1][2] * sp;
            let th = (-r[2][2]).atan2(horiz);
            let vw: [S; 3] =
                std::array::from_fn(|i| r[i][0] * x[3] + r[i][1] * x[4] + r[i][2] * x[5]);
            o[3] = vw[0] * cp + vw[1] * sp;
            o[4] = th;
            o[5] = psi;
            o[7] = x[11];
            o[8] = -x[10];
        }
        (Layout::Terrestrial, Layout::Aerial) => {
            let (v_l, th, psi) = (x[3], x[4], x[5]);
            let b = th + FRAC_PI_2;
            let (sb, cb) = ((b * 0.5).sin(), (b * 0.5).cos());
            let (sz, cz) = ((psi * 0.5).sin(), (psi * 0.5).cos());
            let q = [cz * cb, -(sz * sb), cz * sb, cb * sz];
            let r = rot(&q);
            let vw = [v_l * psi.cos(), v_l * psi.sin(), zero];
            for i in 0..3 {
                o[3 + i] = r[0][i] * vw[0] + r[1][i] * vw[1] + r[2][i] * vw[2];
            }
            o[6..10].copy_from_slice(&q);
            let wz = x[8];
            o[10] = -wz;
            o[11] = x[7];
            o[12] = -(th.sin() / th.cos()) * wz;
        }
        _ => unreachable!(),
    }
    o
}

/// One shooting interval: RK4 over `dt` in layout `from`, then mapped to
/// layout `to`.
pub fn discrete_step(
    c: &ModelConsts,
    from: Layout,
    to: Layout,
    x: &NState,
    u: &NInput,
    dt: f64,
) -> NState {
    let xa: [f64; NX] = (*x).into();
    let ua: [f64; NU] = (*u).into();
    NState::from(map_layout(from, to, &rk4(c, from, &xa, &ua, dt)))
}

/// Exact Jacobians of [`discrete_step`] by forward-mode dual numbers.
pub fn linearize(
    c: &ModelConsts,
    from: Layout,
    to: Layout,
    x: &NState,
    u: &NInput,
    dt: f64,
) -> (NState, MatA, MatB) {
    let xd: [Dual<NZ>; NX] = std::array::from_fn(|i| Dual::var(x[i], i));
    let ud: [Dual<NZ>; NU] = std::array::from_fn(|i| Dual::var(u[i], NX + i));
    let y = map_layout(from, to, &rk4(c, from, &xd, &ud, dt));
    let mut next = NState::zeros();
    let mut a = MatA::zeros();
    let mut b = MatB::zeros();
    for i in 0..NX {
        next[i] = y[i].v;
        for j in 0..NX {
            a[(i, j)] = y[i].d[j];
        }
        for j in 0..NU {
            b[(i, j)] = y[i].d[NX + j];
        }
    }
    (next, a, b)
}

/// Central finite-difference Jacobians of [`discrete_step`].
pub fn linearize_fd(
    c: &ModelConsts,
    from: Layout,
    to: Layout,
    x: &NState,
    u: &NInput,
    dt: f64,
    h: f64,
) -> (MatA, MatB) {
    let mut a = MatA::zeros();
    let mut b = MatB::zeros();
    for j in 0..NX {
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += h;
        xm[j] -= h;
        let d = (discrete_step(c, from, to, &xp, u, dt) - discrete_step(c, from, to, &xm, u, dt))
            / (2.0 * h);
        a.set_column(j, &d);
    }
    for j in 0..NU {
        let mut up = *u;
        let mut um = *u;
        up[j] += h;
        um[j] -= h;
        let d = (discrete_step(c, from, to, x, &up, dt) - discrete_step(c, from, to, x, &um, dt))
            / (2.0 * h);
        b.set_column(j, &d);
    }
    (a, b)
}

/// ZYX Euler angles to a unit quaternion `(w, x, y, z)`.
pub fn quat_from_euler(theta: &Vector3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
        rotation_a_to_w(theta),
    ));
    [q.w, q.i, q.j, q.k]
}

/// Simulator state in the requested NMPC layout.
pub fn to_nstate(s: &HybridState, l: Layout) -> NState {
    let mut x = NState::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&s.p_w);
    match l {
        Layout::Aerial => {
            x.fixed_rows_mut::<3>(3).copy_from(&s.v_a);
            let q = quat_from_euler(&s.theta_a);
            for i in 0..4 {
                x[6 + i] = q[i];
            }
            x.fixed_rows_mut::<3>(10).copy_from(&s.w_a);
        }
        Layout::Terrestrial => {
            x[3] = s.v_l;
            x[4] = s.theta_t;
            x[5] = s.psi_t;
            x[7] = s.w_t.y;
            x[8] = s.w_t.z;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{flight_derivative, ground_derivative};
    use crate::model::{Medium, MotionMode, RotorCommand};
    use approx::assert_abs_diff_eq;

    fn consts() -> ModelConsts {
        ModelConsts::new(&VehicleParams::default())
    }

    #[test]
    fn matches_simulator_dynamics() {
        let p = VehicleParams::default();
        let mut s = HybridState::flight(Vector3::new(0.3, -0.2, 1.0), Vector3::new(0.1, -0.2, 0.4), MotionMode::FlightAir);
        s.v_a = Vector3::new(0.5, -0.3, 0.2);
        s.w_a = Vector3::new(0.3, 0.2, -0.4);
        let u = RotorCommand([3.0, 2.0, -0.5, 2.5]);
        let d = flight_derivative(&s, &u, &p, Medium::Air).unwrap();
        let f = model_derivative(&consts(), Layout::Aerial, &to_nstate(&s, Layout::Aerial), &NInput::from(u.0));
        for i in 0..6 {
            assert_abs_diff_eq!(f[i], d[i], epsilon = 1e-12);
        }
        for i in 0..3 {
            assert_abs_diff_eq!(f[10 + i], d[11 + i], epsilon = 1e-12);
        }

        let mut g = HybridState::ground(0.0, 0.0, -0.4, 0.3, &p);
        g.v_l = 0.7;
        g.w_t = Vector3::new(0.0, 0.2, 0.5);
        g.w_t.x = -(-0.4f64).tan() * 0.5;
        let u = RotorCommand([1.0, 0.5, 0.7, 0.2]);
        let d = ground_derivative(&g, &u, &p, Medium::Air).unwrap();
        let f = model_derivative(&consts(), Layout::Terrestrial, &to_nstate(&g, Layout::Terrestrial), &NInput::from(u.0));
        assert_abs_diff_eq!(f[0], d[0], epsilon = 1e-12);
        assert_abs_diff_eq!(f[1], d[1], epsilon = 1e-12);
        assert_abs_diff_eq!(f[3], d[17], epsilon = 1e-12);
        assert_abs_diff_eq!(f[4], d[9], epsilon = 1e-12);
        assert_abs_diff_eq!(f[5], d[10], epsilon = 1e-12);
        assert_abs_diff_eq!(f[7], d[15], epsilon = 1e-12);
        assert_abs_diff_eq!(f[8], d[16], epsilon = 1e-12);
    }

    #[test]
    fn layout_roundtrip() {
        let p = VehicleParams::default();
        let mut g = HybridState::ground(1.0, 2.0, -0.7, 0.4, &p);
        g.v_l = -0.8;
        g.w_t = Vector3::new(0.0, 0.3, -0.2);
        let xt = to_nstate(&g, Layout::Terrestrial);
        let xa = map_layout(Layout::Terrestrial, Layout::Aerial, &<[f64; NX]>::from(xt));
        let back = map_layout(Layout::Aerial, Layout::Terrestrial, &xa);
        for i in 0..NX {
            assert_abs_diff_eq!(back[i], xt[i], epsilon = 1e-12);
        }
        g.w_t.x = -g.theta_t.tan() * g.w_t.z;
        g.sync_from_ground();
        let direct = to_nstate(&g, Layout::Aerial);
        for i in 0..NX {
            assert!((xa[i] - direct[i]).abs() < 1e-12 || (xa[i] + direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn hover_structure() {
        let p = VehicleParams::default();
        let s = HybridState::flight(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), MotionMode::FlightAir);
        let x = to_nstate(&s, Layout::Aerial);
        let u = NInput::new(3.4129, 1.9826, 3.4129, 1.9826);
        let (_, a, _) = linearize(&ModelConsts::new(&p), Layout::Aerial, Layout::Aerial, &x, &u, 0.05);
        assert_abs_diff_eq!(a[(0, 3)], 0.05, epsilon = 1e-9);
        assert_abs_diff_eq!(a[(0, 0)], 1.0, epsilon = 1e-12);
        let g = HybridState::ground(0.0, 0.0, 0.1, 0.0, &p);
        let (_, a, b) = linearize(
            &ModelConsts::new(&p),
            Layout::Terrestrial,
            Layout::Terrestrial,
            &to_nstate(&g, Layout::Terrestrial),
            &NInput::zeros(),
            0.05,
        );
        // Coordinates the ground model does not evolve propagate unchanged.
        for i in [2, 6, 9, 10, 11, 12] {
            for j in 0..NX {
                assert_eq!(a[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
            assert!(b.row(i).iter().all(|v| *v == 0.0));
        }
    }
}
