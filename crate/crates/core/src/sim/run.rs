//! Fixed-step closed-loop run: physics at the physics step, controllers
//! and the supervisor every control tick.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::integrate::{integrate_step, resolve_contact, SimError, World};
use super::log::{Row, RunLog, TimingRow};
use super::metrics::clearance_check;
use super::observer::{compensate, TorqueObserver};
use super::scenario::{InitialState, Scenario};
use crate::dynamics::{allocate_terrestrial, Immersion};
use crate::flatness::{reference_point, FlatPoint};
use crate::hnmpc::{eta_schedule, horizon_reference, Hnmpc};
use crate::model::{HybridState, Medium, MotionMode, RotorCommand, VehicleParams};
use crate::pid::{attitude_pid_step, pid_allocate, ExitPhase, Pid3, WaterExitController};
use crate::propulsion::{propeller_coupling, PropellerLoad, RotorBank};
use crate::reference::Trajectory;
use crate::supervisor::{Controller, Event, EventKind, Sensed, Supervisor};

/// Immersion fraction at which the floating vehicle is in equilibrium with
/// every rotor at `rpm`.
pub fn floating_immersion(params: &VehicleParams, rpm: f64) -> f64 {
    let load = PropellerLoad::from_vehicle(params);
    let net = |f: f64| 4.0 * propeller_coupling(&load, rpm, f).0 + params.buoyancy() * f - params.weight();
    let (mut a, mut b) = (0.0, 1.0);
    if net(b) < 0.0 {
        return 1.0;
    }
    if net(a) > 0.0 {
        return 0.0;
    }
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if net(m) < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn water_attitude(pt: &FlatPoint) -> Vector3<f64> {
    Vector3::new(0.0, pt.theta_t[0], pt.yaw[0])
}

/// Reference position, attitude and ground pitch at one instant. Water
/// modes have no flatness map; their pitch command rides in the `theta_t`
/// channel.
fn reference_row(pt: &FlatPoint, params: &VehicleParams) -> (Vector3<f64>, Vector3<f64>, f64) {
    match reference_point(pt, params) {
        Ok(r) => (pt.pos[0], r.state.theta_a, r.state.theta_t),
        Err(_) => {
            let att = water_attitude(pt);
            (pt.pos[0], att, att.y - std::f64::consts::FRAC_PI_2)
        }
    }
}

fn initial_state(scn: &Scenario, traj: &Trajectory, world: &World) -> (HybridState, RotorCommand) {
    let p = &scn.vehicle;
    match scn.run.initial {
        InitialState::FromReference => {
            let pt = traj.sample_clamped(0.0);
            if let Ok(r) = reference_point(&pt, p) {
                let mut s = r.state;
                if s.mode.is_ground() {
                    s.p_w.z = world.ground_height + p.contact_height;
                }
                return (s, r.u);
            }
            let f = world.immersion(pt.pos[0].z);
            let mut s = HybridState::flight(pt.pos[0], water_attitude(&pt), world.flight_mode(f));
            if pt.mode == MotionMode::GroundSeabed {
                s = HybridState::ground(pt.pos[0].x, pt.pos[0].y, pt.theta_t[0], pt.yaw[0], p);
                s.p_w.z = world.ground_height + p.contact_height;
                s.mode = MotionMode::GroundSeabed;
            }
            let hold = (p.weight() - p.buoyancy() * f).max(0.0) / 4.0;
            (s, RotorCommand::splat(hold))
        }
        InitialState::Floating { x, y, rpm } => {
            let f = floating_immersion(p, rpm);
            let w = world.water_level.unwrap_or(0.0);
            let z = w + 0.5 * world.hull_height - f * world.hull_height;
            let load = PropellerLoad::from_vehicle(p);
            let thrust = propeller_coupling(&load, rpm, f).0;
            let s = HybridState::flight(Vector3::new(x, y, z), Vector3::zeros(), world.flight_mode(f));
            (s, RotorCommand::splat(thrust))
        }
    }
}

/// Lower every rotor by the same amount until the vertical thrust at
/// pitch `theta_t` leaves `margin` of the net weight on the wheels. The
/// ground model has a rigid support, so the NMPC cannot see liftoff.
fn keep_on_ground(u: &RotorCommand, theta_t: f64, medium: Medium, params: &VehicleParams, margin: f64, lo: f64) -> RotorCommand {
    let up = -theta_t.sin();
    let per_unit = allocate_terrestrial(&RotorCommand::splat(1.0), params, medium).thrust * up;
    let net = params.weight() - params.buoyancy() * medium.zeta();
    let excess = allocate_terrestrial(u, params, medium).thrust * up - (1.0 - margin) * net;
    if excess <= 0.0 || per_unit <= 1e-9 {
        return *u;
    }
    RotorCommand(u.0.map(|v| v - excess / per_unit)).clamp(lo, f64::INFINITY)
}

fn medium_of(fraction: f64) -> Medium {
    if fraction > 0.5 {
        Medium::Water
    } else {
        Medium::Air
    }
}

/// Everything the control tick needs between calls.
struct Loop<'a> {
    scn: &'a Scenario,
    traj: Trajectory,
    world: World,
    sup: Supervisor,
    hnmpc: Hnmpc,
    exit: Option<WaterExitController>,
    exit_yaw: f64,
    underwater: Pid3,
    observer: Option<TorqueObserver>,
    surface_collective: f64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    engaged: bool,
    dived: bool,
    cmd: RotorCommand,
    /// Offset added to every reference position, set at the water-exit
    /// hand-off.
    shift: Vector3<f64>,
    log: RunLog,
}

impl Loop<'_> {
    fn push(&mut self, ev: impl IntoIterator<Item = Event>) {
        self.log.events.extend(ev);
    }

    fn phase_event(&mut self, t: f64, from: ExitPhase, to: ExitPhase) {
        if from != to {
            self.push([Event {
                t,
                kind: EventKind::Phase,
                from: from.as_str(),
                to: to.as_str(),
            }]);
        }
    }

    fn measure(&mut self, s: &HybridState) -> HybridState {
        let mut m = *s;
        if let Some(n) = &self.noise {
            for i in 0..3 {
                m.p_w[i] += n.sample(&mut self.rng);
            }
        }
        m
    }

    fn control_tick(&mut self, t: f64, state: &HybridState, bank: &RotorBank) -> Result<Row, SimError> {
        let scn = self.scn;
        let p = &scn.vehicle;
        let dt = scn.run.control_period;
        let meas = self.measure(state);
        let f = self.world.immersion(state.p_w.z);

        if let Some(te) = scn.run.dive_at {
            if !self.dived && t >= te - 1e-9 {
                self.dived = true;
                self.sup.request_dive();
            }
        }
        if let Some(te) = scn.run.engage_exit_at {
            if !self.engaged && t >= te - 1e-9 {
                self.engaged = true;
                let ev = self
                    .sup
                    .request_controller(t, Controller::PidWaterExit)
                    .map_err(|e| SimError::Scenario(format!("water exit at t = {t}: {e}")))?;
                self.push(ev);
                self.exit = Some(WaterExitController::new(scn.controller.water_exit.clone(), bank.thrust().total()));
                self.exit_yaw = state.theta_a.z;
                self.push([Event {
                    t,
                    kind: EventKind::Phase,
                    from: "idle",
                    to: ExitPhase::Surface.as_str(),
                }]);
            }
        }

        let before = self.sup.controller();
        let events = self.sup.step(&Sensed {
            t,
            state: &meas,
            rotor_rpm: bank.rpm(),
            medium: medium_of(f),
            seabed_contact: state.mode == MotionMode::GroundSeabed,
            ground_below: if self.world.water_level.is_none() {
                Some(self.world.ground_height)
            } else {
                None
            },
            exit_phase: self.exit.as_ref().map(|e| e.phase()),
        });
        self.push(events);
        let active = self.sup.controller();
        if active != before {
            if active == Controller::Hnmpc && before == Controller::PidWaterExit && scn.controller.reanchor_on_handoff {
                self.shift = meas.p_w - self.traj.sample_clamped(t).pos[0];
            }
            match active {
                Controller::Hnmpc => self.hnmpc.reset(),
                Controller::PidUnderwater => self.underwater.reset(),
                Controller::PidWaterExit => {}
            }
        }

        let imm = Immersion { body: f, rotors: f };
        let estimate = match self.observer.as_mut() {
            Some(o) => Some(o.update(state, &bank.thrust(), imm, p, dt)?),
            None => None,
        };

        let mut pt = self.traj.sample_clamped(t);
        pt.pos[0] += self.shift;
        let (mut kkt, mut iters) = (f64::NAN, 0);
        match active {
            Controller::Hnmpc => {
                let cfg = self.hnmpc.config().clone();
                let mut grounded_plan = false;
                let shift = self.shift;
                let solved = horizon_reference(&self.traj, t, &cfg, p).and_then(|mut refs| {
                    refs.iter_mut().for_each(|r| r.state.p_w += shift);
                    let sched = eta_schedule(&refs, &cfg);
                    grounded_plan = sched.0.iter().all(|&e| e == 1);
                    self.hnmpc.solve(&meas, &refs, &sched)
                });
                if let Ok(sol) = solved {
                    self.cmd = match estimate {
                        Some(e) => compensate(&sol.first_command(), &e, state.mode, medium_of(f), p, (cfg.u_min, cfg.u_max))?,
                        None => sol.first_command(),
                    };
                    if grounded_plan && self.sup.mode() == MotionMode::GroundLand {
                        self.cmd = keep_on_ground(&self.cmd, meas.theta_t, medium_of(f), p, 0.05, cfg.u_min);
                    }
                    kkt = sol.kkt;
                    iters = sol.iterations;
                    self.log.timing.push(TimingRow {
                        t,
                        solve_ms: sol.solve_time * 1e3,
                        iters,
                        deadline_miss: sol.solve_time > scn.controller.deadline,
                    });
                }
            }
            Controller::PidWaterExit => {
                let target = Vector3::new(0.0, 0.0, self.exit_yaw);
                let exit = self.exit.as_mut().ok_or_else(|| SimError::Scenario("water-exit controller not engaged".into()))?;
                let from = exit.phase();
                let (u, to) = exit.step(&meas, &target, &bank.rpm(), p, dt)?;
                self.cmd = u;
                self.phase_event(t, from, to);
            }
            Controller::PidUnderwater => {
                let tau = attitude_pid_step(&mut self.underwater, &water_attitude(&pt), &meas.theta_a, dt);
                let collective = if self.sup.mode() == MotionMode::WaterSurface {
                    self.surface_collective
                } else {
                    let uw = &scn.controller.underwater;
                    let vz = meas.velocity_w().z;
                    let tilt = (meas.theta_a.x.cos() * meas.theta_a.y.cos()).max(0.5);
                    (p.weight() - p.buoyancy() * f + uw.depth_kp * (pt.pos[0].z - meas.p_w.z) - uw.depth_kd * vz) / tilt
                };
                self.cmd = pid_allocate(&tau, collective, medium_of(f), state.mode, p)?.u;
            }
        }

        let (p_ref, att_ref, theta_t_ref) = reference_row(&pt, p);
        let clearance = if state.mode.is_ground() {
            let env = &scn.environment;
            let ob = env.obstacles.iter().find(|o| o.spans(state.p_w.x));
            clearance_check(&env.clearance, state.p_w.x, state.theta_t, ob).margin
        } else {
            f64::NAN
        };
        Ok(Row {
            t,
            p: state.p_w,
            v: state.velocity_w(),
            att: state.theta_a,
            theta_t: state.theta_t,
            psi_t: state.psi_t,
            v_l: state.v_l,
            w: state.w_a,
            p_ref,
            att_ref,
            theta_t_ref,
            u: self.cmd.0,
            rpm: bank.rpm(),
            power: bank.power(),
            mode: self.sup.mode().as_str().to_string(),
            eta: u8::from(state.mode.is_ground()),
            controller: active.as_str().to_string(),
            kkt,
            iters,
            clearance,
        })
    }
}

/// Run a scenario to completion. A run that hits a non-finite state stops
/// early with `aborted` set and keeps the rows logged so far.
pub fn run(scn: &Scenario) -> Result<RunLog, SimError> {
    scn.validate()?;
    let p = &scn.vehicle;
    let world = scn.environment.world();
    let spec = scn.trajectory.spec(p)?;
    let traj = Trajectory::new(&spec).map_err(|e| SimError::Scenario(e.to_string()))?;
    let (mut state, cmd) = initial_state(scn, &traj, &world);

    let mut sup_cfg = scn.controller.supervisor.clone();
    sup_cfg.contact_height = p.contact_height;
    if let Some(w) = world.water_level {
        sup_cfg.water_level = w;
    }
    let mut sup = Supervisor::new(sup_cfg, state.mode);
    let mut events = Vec::new();
    if let Some(c) = scn.controller.initial {
        events.extend(sup.request_controller(0.0, c).map_err(|e| SimError::Scenario(e.to_string()))?);
    }

    let f0 = world.immersion(state.p_w.z);
    let mut bank = RotorBank::new(scn.controller.propulsion.clone(), p, &cmd, f0);
    let sigma = scn.environment.position_noise;
    let mut lp = Loop {
        scn,
        traj,
        world: world.clone(),
        sup,
        hnmpc: Hnmpc::new(scn.controller.hnmpc.clone(), p).map_err(|e| SimError::Scenario(e.to_string()))?,
        exit: None,
        exit_yaw: 0.0,
        underwater: Pid3::angle(scn.controller.underwater.angle.clone()),
        observer: scn.controller.torque_observer.map(TorqueObserver::new),
        surface_collective: cmd.total(),
        rng: ChaCha8Rng::seed_from_u64(scn.run.seed),
        noise: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("validated noise")),
        engaged: false,
        dived: false,
        cmd,
        shift: Vector3::zeros(),
        log: RunLog { events, ..Default::default() },
    };

    let dt = scn.run.physics_dt;
    let ratio = (scn.run.control_period / dt).round() as usize;
    let steps = (scn.run.duration / dt).round() as usize;
    for k in 0..=steps {
        let t = k as f64 * dt;
        if k % ratio == 0 {
            let row = lp.control_tick(t, &state, &bank)?;
            lp.log.rows.push(row);
        }
        if k == steps {
            break;
        }
        let f = world.immersion(state.p_w.z);
        let thrust = bank.step(&lp.cmd, f, dt);
        let torque = scn.environment.disturbance.as_ref().map_or(Vector3::zeros(), |d| d.at(t));
        let imm = Immersion { body: f, rotors: f };
        let next = match integrate_step(&state, &thrust, p, imm, &torque, dt) {
            Ok(s) if s.is_finite() => s,
            Ok(_) => {
                lp.log.aborted = Some(SimError::NonFinite { t: t + dt }.to_string());
                break;
            }
            Err(e) => {
                lp.log.aborted = Some(format!("t = {}: {e}", t + dt));
                break;
            }
        };
        state = resolve_contact(&next, &thrust, p, &world);
    }
    Ok(lp.log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const HOVER: &str = r#"
[trajectory]
[[trajectory.segments]]
mode = "flight_air"
kind = "hold"
duration = 1.0
pose = { pos = [0.0, 0.0, 1.0] }

[run]
duration = 0.5
"#;

    #[test]
    fn rows_every_control_period() {
        let scn = Scenario::from_toml(HOVER).unwrap();
        let log = run(&scn).unwrap();
        assert!(log.aborted.is_none());
        assert_eq!(log.rows.len(), 101);
        for (k, r) in log.rows.iter().enumerate() {
            assert_abs_diff_eq!(r.t, k as f64 * 0.005, epsilon = 1e-12);
        }
        let last = log.rows.last().unwrap();
        assert!((last.p - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-3, "{:?}", last.p);
        assert!(log.events.is_empty());
    }

    #[test]
    fn floating_equilibrium() {
        let p = VehicleParams::default();
        let f = floating_immersion(&p, 1000.0);
        assert!(f > 0.0 && f < 1.0);
        let load = PropellerLoad::from_vehicle(&p);
        let t = propeller_coupling(&load, 1000.0, f).0;
        assert_abs_diff_eq!(4.0 * t + p.buoyancy() * f, p.weight(), epsilon = 1e-9);
    }

    #[test]
    fn ground_guard_trims_collective_only() {
        let p = VehicleParams::default();
        let u = RotorCommand([3.7, 2.1, 3.7, 2.1]);
        let th = -88f64.to_radians();
        let g = keep_on_ground(&u, th, Medium::Air, &p, 0.05, 0.0);
        let (w0, w1) = (allocate_terrestrial(&u, &p, Medium::Air), allocate_terrestrial(&g, &p, Medium::Air));
        assert!(w0.thrust * -th.sin() > p.weight());
        assert_abs_diff_eq!(w1.thrust * -th.sin(), 0.95 * p.weight(), epsilon = 1e-9);
        assert!((w1.torque - w0.torque).norm() < 1e-9);
        // Nothing to trim with the thrust axis level.
        assert_eq!(keep_on_ground(&u, 0.0, Medium::Air, &p, 0.05, 0.0), u);
    }
}
