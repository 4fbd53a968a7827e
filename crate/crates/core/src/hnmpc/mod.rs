//! Hybrid nonlinear MPC over the eta-switched aerial/terrestrial model:
//! direct multiple shooting with RK4, Gauss-Newton SQP, dense condensing
//! and a projected-Newton box QP.

pub mod model;
pub mod qp;
pub mod scalar;

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{flight_derivative, ground_derivative, DynamicsError};
use crate::flatness::{reference_point, FlatnessError, ReferencePoint};
use crate::model::{HybridState, Medium, RotorCommand, StateVector, VehicleParams, MAX_GROUND_PITCH};
use crate::reference::Trajectory;
use model::{linearize, to_nstate, discrete_step, Layout, MatA, MatB, ModelConsts, NInput, NState, NU, NX};
use qp::{projected_gradient, solve_box_qp, QpError, QpOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmpcError {
    #[error("reference has {got} points, horizon needs {need}")]
    ReferenceTooShort { got: usize, need: usize },
    #[error("invalid OCP configuration: {0}")]
    InvalidConfig(String),
    #[error("QP subproblem failed at SQP iteration {iteration}: {source}")]
    Qp { iteration: usize, source: QpError },
    #[error("non-finite iterate")]
    NonFinite,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Flatness(#[from] FlatnessError),
}

/// Optimal control problem settings. Weight defaults are the tuned MPC
/// weights of the platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub n: usize,
    pub dt: f64,
    pub q_p: [f64; 3],
    pub q_v: [f64; 3],
    pub q_theta: [f64; 4],
    pub q_w: [f64; 3],
    pub q_vl: f64,
    pub q_theta_t: f64,
    pub q_psi: f64,
    pub q_u: [f64; 4],
    pub u_min: f64,
    pub u_max: f64,
    pub h_judge: f64,
    pub sqp_iters: usize,
    /// Tolerance on the scaled KKT residual (projected gradient divided by
    /// the largest state weight, and dynamics defects).
    pub kkt_tol: f64,
    pub merit_mu: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            n: 40,
            dt: 0.05,
            q_p: [5000.0, 5000.0, 3000.0],
            q_v: [500.0; 3],
            q_theta: [500.0; 4],
            q_w: [10.0; 3],
            q_vl: 500.0,
            q_theta_t: 500.0,
            q_psi: 500.0,
            q_u: [100.0; 4],
            u_min: -2.0,
            u_max: 4.0,
            h_judge: 0.25,
            sqp_iters: 3,
            kkt_tol: 1e-3,
            merit_mu: 1e4,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), NmpcError> {
        let bad = |m: &str| Err(NmpcError::InvalidConfig(m.to_string()));
        if self.n < 2 {
            return bad("N must be at least 2");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        let weights = self
            .q_p
            .iter()
            .chain(&self.q_v)
            .chain(&self.q_theta)
            .chain(&self.q_w)
            .chain(&self.q_u)
            .chain([&self.q_vl, &self.q_theta_t, &self.q_psi]);
        if weights.into_iter().any(|w| !(*w >= 0.0)) {
            return bad("weights must be non-negative");
        }
        if self.q_u.iter().any(|w| *w <= 0.0) {
            return bad("input weights must be positive");
        }
        if !(self.u_min < self.u_max) {
            return bad("u_min must be below u_max");
        }
        if self.sqp_iters == 0 {
            return bad("sqp_iters must be at least 1");
        }
        Ok(())
    }

    /// Diagonal state weight of a node in the given layout.
    pub fn state_weight(&self, l: Layout) -> NState {
        let mut w = NState::zeros();
        match l {
            Layout::Aerial => {
                for i in 0..3 {
                    w[i] = self.q_p[i];
                    w[3 + i] = self.q_v[i];
                    w[10 + i] = self.q_w[i];
                }
                for i in 0..4 {
                    w[6 + i] = self.q_theta[i];
                }
            }
            Layout::Terrestrial => {
                for i in 0..3 {
                    w[i] = self.q_p[i];
                }
                w[3] = self.q_vl;
                w[4] = self.q_theta_t;
                w[5] = self.q_psi;
                w[7] = self.q_w[1];
                w[8] = self.q_w[2];
            }
        }
        w
    }

    fn weight_scale(&self) -> f64 {
        self.q_p
            .iter()
            .chain(&self.q_v)
            .chain(&self.q_theta)
            .fold(1.0f64, |a, b| a.max(*b))
    }
}

/// Mode indicator per horizon node, `1` for terrestrial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSchedule(pub Vec<u8>);

/// `eta_i = 1` iff the reference altitude at node `i` is below `h_judge`.
pub fn eta_schedule(reference: &[ReferencePoint], cfg: &OcpConfig) -> ModeSchedule {
    ModeSchedule(
        reference
            .iter()
            .map(|r| u8::from(r.state.p_w.z < cfg.h_judge))
            .collect(),
    )
}

/// `N + 1` flat references starting at `t0`, spaced by the OCP step. Times
/// past the end of the trajectory hold its final point.
pub fn horizon_reference(
    traj: &Trajectory,
    t0: f64,
    cfg: &OcpConfig,
    params: &VehicleParams,
) -> Result<Vec<ReferencePoint>, NmpcError> {
    (0..=cfg.n)
        .map(|k| {
            let pt = traj.sample_clamped(t0 + k as f64 * cfg.dt);
            reference_point(&pt, params).map_err(NmpcError::from)
        })
        .collect()
}

/// `eta f_t + (1 - eta) f_a` with `eta` in `{0, 1}`: exactly one branch is
/// evaluated.
pub fn hybrid_dynamics(
    x: &HybridState,
    u: &RotorCommand,
    eta: u8,
    params: &VehicleParams,
    medium: Medium,
) -> Result<StateVector, DynamicsError> {
    if eta == 1 {
        ground_derivative(x, u, params, medium)
    } else {
        flight_derivative(x, u, params, medium)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub u: Vec<NInput>,
    pub x: Vec<NState>,
    pub layouts: Vec<Layout>,
    pub kkt: f64,
    /// QP subproblems solved.
    pub iterations: usize,
    pub solve_time: f64,
    pub cost: f64,
    pub status: SolveStatus,
    /// Merit before and after each accepted step, with that step's penalty
    /// weight.
    pub merit_trace: Vec<(f64, f64)>,
}

impl Solution {
    pub fn first_command(&self) -> RotorCommand {
        RotorCommand(self.u[0].into())
    }
}

struct Problem {
    layouts: Vec<Layout>,
    refs: Vec<NState>,
    u_ref: Vec<NInput>,
    weights: Vec<NState>,
    x0: NState,
}

/// Receding-horizon solver with warm-start memory.
pub struct Hnmpc {
    cfg: OcpConfig,
    consts: ModelConsts,
    warm: Option<(Vec<NState>, Vec<NInput>, Vec<Layout>)>,
    qp_opts: QpOptions,
}

fn align_quaternion(x: &mut NState, to: &NState) {
    let dot: f64 = (6..10).map(|i| x[i] * to[i]).sum();
    if dot < 0.0 {
        for i in 6..10 {
            x[i] = -x[i];
        }
    }
}

fn unwrap_near(a: f64, near: f64) -> f64 {
    use std::f64::consts::TAU;
    a + TAU * ((near - a) / TAU).round()
}

fn normalize_quaternion(x: &mut NState) {
    let n = (6..10).map(|i| x[i] * x[i]).sum::<f64>().sqrt();
    if n > 0.0 {
        for i in 6..10 {
            x[i] /= n;
        }
    }
}

/// Bring an iterate's attitude coordinates next to their reference.
fn align_to_ref(x: &mut NState, r: &NState, l: Layout) {
    match l {
        Layout::Aerial => align_quaternion(x, r),
        Layout::Terrestrial => x[5] = unwrap_near(x[5], r[5]),
    }
}

impl Hnmpc {
    pub fn new(cfg: OcpConfig, params: &VehicleParams) -> Result<Self, NmpcError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            consts: ModelConsts::new(params),
            warm: None,
            qp_opts: QpOptions::default(),
        })
    }

    pub fn config(&self) -> &OcpConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    fn build_problem(
        &self,
        x0: &HybridState,
        reference: &[ReferencePoint],
        schedule: &ModeSchedule,
    ) -> Result<Problem, NmpcError> {
        let n = self.cfg.n;
        if reference.len() < n + 1 || schedule.0.len() < n + 1 {
            return Err(NmpcError::ReferenceTooShort {
                got: reference.len().min(schedule.0.len()),
                need: n + 1,
            });
        }
        let mut layouts: Vec<Layout> = schedule.0[..=n].iter().map(|e| Layout::from_eta(*e)).collect();
        // The first node is the measured state, in the plant's own mode.
        layouts[0] = if x0.mode.is_ground() {
            Layout::Terrestrial
        } else {
            Layout::Aerial
        };
        let x0n = to_nstate(x0, layouts[0]);
        let mut refs = Vec::with_capacity(n + 1);
        let mut prev = x0n;
        let mut prev_layout = layouts[0];
        for k in 0..=n {
            let l = layouts[k];
            let mut r = to_nstate(&reference[k].state, l);
            if l == Layout::Terrestrial {
                // Aerial references below h_judge carry the singular pitch.
                r[4] = r[4].clamp(-MAX_GROUND_PITCH, MAX_GROUND_PITCH);
            }
            if l == prev_layout {
                align_to_ref(&mut r, &prev, l);
            }
            prev = r;
            prev_layout = l;
            refs.push(r);
        }
        let u_ref = reference[..n].iter().map(|r| NInput::from(r.u.0)).collect();
        let weights = layouts.iter().map(|l| self.cfg.state_weight(*l)).collect();
        Ok(Problem {
            layouts,
            refs,
            u_ref,
            weights,
            x0: x0n,
        })
    }

    fn initial_guess(&mut self, p: &Problem) -> (Vec<NState>, Vec<NInput>) {
        let n = self.cfg.n;
        let (lo, hi) = (self.cfg.u_min, self.cfg.u_max);
        let mut xs: Vec<NState> = p.refs.clone();
        let mut us: Vec<NInput> = p.u_ref.iter().map(|u| u.map(|v| v.clamp(lo, hi))).collect();
        if let Some((wx, wu, wl)) = self.warm.take() {
            for k in 0..n {
                if k + 1 < wu.len() {
                    us[k] = wu[k + 1];
                }
            }
            for k in 1..=n {
                if k + 1 < wx.len() && wl[k + 1] == p.layouts[k] {
                    xs[k] = wx[k + 1];
                }
            }
        }
        xs[0] = p.x0;
        for k in 0..=n {
            align_to_ref(&mut xs[k], &p.refs[k], p.layouts[k]);
        }
        (xs, us)
    }

    fn cost(&self, p: &Problem, xs: &[NState], us: &[NInput]) -> f64 {
        let mut c = 0.0;
        for k in 0..xs.len() {
            let e = xs[k] - p.refs[k];
            c += 0.5 * e.component_mul(&p.weights[k]).dot(&e);
        }
        let qu = NInput::from(self.cfg.q_u);
        for k in 0..us.len() {
            let e = us[k] - p.u_ref[k];
            c += 0.5 * e.component_mul(&qu).dot(&e);
        }
        c
    }

    fn defects(&self, p: &Problem, xs: &[NState], us: &[NInput]) -> f64 {
        let mut d = (xs[0] - p.x0).abs().sum();
        for k in 0..us.len() {
            let next = discrete_step(&self.consts, p.layouts[k], p.layouts[k + 1], &xs[k], &us[k], self.cfg.dt);
            let mut e = next - xs[k + 1];
            if p.layouts[k + 1] == Layout::Terrestrial {
                e[5] = unwrap_near(e[5], 0.0);
            }
            d += e.abs().sum();
        }
        d
    }

    /// Solve the OCP from `x0`. `reference` and `schedule` need `N + 1`
    /// entries.
    pub fn solve(
        &mut self,
        x0: &HybridState,
        reference: &[ReferencePoint],
        schedule: &ModeSchedule,
    ) -> Result<Solution, NmpcError> {
        let start = Instant::now();
        let cfg = self.cfg.clone();
        let n = cfg.n;
        let p = self.build_problem(x0, reference, schedule)?;
        let (mut xs, mut us) = self.initial_guess(&p);
        let qu = NInput::from(cfg.q_u);
        let scale = cfg.weight_scale();
        let mut mu = cfg.merit_mu;
        let mut status = SolveStatus::MaxIterations;
        let mut iterations = 0;
        let mut kkt = f64::INFINITY;
        let mut merit_trace = Vec::new();

        let mut a_mats = vec![MatA::zeros(); n];
        let mut b_mats = vec![MatB::zeros(); n];
        let mut defects = vec![NState::zeros(); n];
        let nv = NU * n;
        let mut h = DMatrix::<f64>::zeros(nv, nv);

        for it in 0..=cfg.sqp_iters {
            for k in 0..n {
                let (next, a, b) = linearize(&self.consts, p.layouts[k], p.layouts[k + 1], &xs[k], &us[k], cfg.dt);
                let mut d = next - xs[k + 1];
                if p.layouts[k + 1] == Layout::Terrestrial {
                    d[5] = unwrap_near(d[5], 0.0);
                }
                a_mats[k] = a;
                b_mats[k] = b;
                defects[k] = d;
            }
            // Affine part of the condensed state trajectory.
            let mut c = vec![NState::zeros(); n + 1];
            c[0] = p.x0 - xs[0];
            for k in 0..n {
                c[k + 1] = a_mats[k] * c[k] + defects[k];
            }
            // Costates and the reduced gradient.
            let mut lam = vec![NState::zeros(); n + 1];
            lam[n] = p.weights[n].component_mul(&(xs[n] + c[n] - p.refs[n]));
            for k in (0..n).rev() {
                lam[k] = p.weights[k].component_mul(&(xs[k] + c[k] - p.refs[k])) + a_mats[k].transpose() * lam[k + 1];
            }
            let mut g = DVector::<f64>::zeros(nv);
            for i in 0..n {
                let gi = b_mats[i].transpose() * lam[i + 1] + qu.component_mul(&(us[i] - p.u_ref[i]));
                g.fixed_rows_mut::<NU>(NU * i).copy_from(&gi);
            }
            let lo = DVector::from_fn(nv, |i, _| cfg.u_min - us[i / NU][i % NU]);
            let hi = DVector::from_fn(nv, |i, _| cfg.u_max - us[i / NU][i % NU]);
            let pg = projected_gradient(&g, &DVector::zeros(nv), &lo, &hi);
            let defect_inf = defects
                .iter()
                .chain(std::iter::once(&c[0]))
                .map(|d| d.amax())
                .fold(0.0, f64::max);
            kkt = (pg.amax() / scale).max(defect_inf);
            if !kkt.is_finite() {
                return Err(NmpcError::NonFinite);
            }
            if kkt <= cfg.kkt_tol {
                status = SolveStatus::Converged;
                break;
            }
            if it == cfg.sqp_iters {
                break;
            }

            // Condensed Hessian: H_ij = B_i' P_{i+1} A_i ... A_{j+1} B_j.
            let mut pm = vec![MatA::zeros(); n + 1];
            pm[n] = MatA::from_diagonal(&p.weights[n]);
            for k in (1..n).rev() {
                pm[k] = MatA::from_diagonal(&p.weights[k]) + a_mats[k].transpose() * pm[k + 1] * a_mats[k];
            }
            for i in 0..n {
                let mut z: SMatrix<f64, NU, NX> = b_mats[i].transpose() * pm[i + 1];
                let hii = z * b_mats[i] + SMatrix::<f64, NU, NU>::from_diagonal(&qu);
                h.fixed_view_mut::<NU, NU>(NU * i, NU * i).copy_from(&hii);
                for j in (0..i).rev() {
                    z *= a_mats[j + 1];
                    let hij = z * b_mats[j];
                    h.fixed_view_mut::<NU, NU>(NU * i, NU * j).copy_from(&hij);
                    h.fixed_view_mut::<NU, NU>(NU * j, NU * i).copy_from(&hij.transpose());
                }
            }
            let qp = solve_box_qp(&h, &g, &lo, &hi, &DVector::zeros(nv), &self.qp_opts)
                .map_err(|source| NmpcError::Qp { iteration: it, source })?;
            iterations += 1;

            let du: Vec<NInput> = (0..n).map(|i| qp.x.fixed_rows::<NU>(NU * i).into_owned()).collect();
            let mut dx = vec![NState::zeros(); n + 1];
            dx[0] = c[0];
            for k in 0..n {
                dx[k + 1] = a_mats[k] * dx[k] + b_mats[k] * du[k] + defects[k];
            }
            let lam_max = lam.iter().map(|l| l.amax()).fold(0.0, f64::max);
            mu = mu.max(1.5 * lam_max);
            let merit0 = self.cost(&p, &xs, &us) + mu * self.defects(&p, &xs, &us);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..10 {
                let xt: Vec<NState> = xs.iter().zip(&dx).map(|(x, d)| x + d * alpha).collect();
                let ut: Vec<NInput> = us
                    .iter()
                    .zip(&du)
                    .map(|(u, d)| (u + d * alpha).map(|v| v.clamp(cfg.u_min, cfg.u_max)))
                    .collect();
                let merit = self.cost(&p, &xt, &ut) + mu * self.defects(&p, &xt, &ut);
                if merit.is_finite() && merit <= merit0 {
                    xs = xt;
                    us = ut;
                    merit_trace.push((merit0, merit));
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                status = SolveStatus::LineSearchFailed;
                break;
            }
            for (k, x) in xs.iter_mut().enumerate() {
                if p.layouts[k] == Layout::Aerial {
                    normalize_quaternion(x);
                }
            }
        }

        for u in us.iter_mut() {
            *u = u.map(|v| v.clamp(cfg.u_min, cfg.u_max));
        }
        let cost = self.cost(&p, &xs, &us);
        self.warm = Some((xs.clone(), us.clone(), p.layouts.clone()));
        Ok(Solution {
            u: us,
            x: xs,
            layouts: p.layouts,
            kkt,
            iterations,
            solve_time: start.elapsed().as_secs_f64(),
            cost,
            status,
            merit_trace,
        })
    }
}
