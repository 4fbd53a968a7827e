//! Finite-state machine choosing the motion mode and the active controller.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HybridState, Medium, MotionMode};
use crate::pid::ExitPhase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Hnmpc,
    PidWaterExit,
    PidUnderwater,
}

impl Controller {
    pub fn as_str(self) -> &'static str {
        match self {
            Controller::Hnmpc => "hnmpc",
            Controller::PidWaterExit => "pid_water_exit",
            Controller::PidUnderwater => "pid_underwater",
        }
    }

    /// Whether this controller may drive the vehicle in `mode`.
    pub fn allowed_in(self, mode: MotionMode) -> bool {
        match self {
            Controller::Hnmpc => matches!(mode, MotionMode::FlightAir | MotionMode::GroundLand),
            Controller::PidWaterExit => matches!(mode, MotionMode::WaterSurface | MotionMode::FlightAir),
            Controller::PidUnderwater => matches!(
                mode,
                MotionMode::FlightWater | MotionMode::GroundSeabed | MotionMode::WaterSurface
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Mode,
    Controller,
    /// Internal phase of a controller, e.g. the water-exit sequence.
    Phase,
}

/// One supervisor transition. For controller events `from`/`to` hold
/// controller names.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub from: &'static str,
    pub to: &'static str,
}

impl Event {
    pub fn csv_row(&self) -> String {
        let kind = match self.kind {
            EventKind::Mode => "mode",
            EventKind::Controller => "controller",
            EventKind::Phase => "phase",
        };
        format!("{},{},{},{}", crate::sim::fmt9(self.t), kind, self.from, self.to)
    }
}

pub const EVENTS_HEADER: &str = "t,event,from_mode,to_mode";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupervisorError {
    #[error("controller {controller:?} is not allowed in mode {mode:?}")]
    Illegal { controller: Controller, mode: MotionMode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorConfig {
    pub h_judge: f64,
    /// Total width of the band around `h_judge`.
    pub hysteresis: f64,
    /// Minimum time between two mode transitions, s.
    pub dwell: f64,
    /// Pitch magnitude past which the ground reorientation counts as done.
    pub reorient_deg: f64,
    /// Landing is detected within this distance of the wheel contact height.
    pub landing_tol: f64,
    pub contact_height: f64,
    pub water_level: f64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            h_judge: 0.25,
            hysteresis: 0.05,
            dwell: 0.3,
            reorient_deg: 75.0,
            landing_tol: 0.02,
            contact_height: 0.17,
            water_level: 0.0,
        }
    }
}

/// What the supervisor sees each controller tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensed<'a> {
    pub t: f64,
    pub state: &'a HybridState,
    pub rotor_rpm: [f64; 4],
    pub medium: Medium,
    pub seabed_contact: bool,
    /// Height of the dry ground under the vehicle; `None` over water.
    pub ground_below: Option<f64>,
    pub exit_phase: Option<ExitPhase>,
}

fn default_controller(mode: MotionMode) -> Controller {
    match mode {
        MotionMode::FlightAir | MotionMode::GroundLand => Controller::Hnmpc,
        _ => Controller::PidUnderwater,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supervisor {
    pub cfg: SupervisorConfig,
    mode: MotionMode,
    controller: Controller,
    last_transition: f64,
    dive_requested: bool,
}

impl Supervisor {
    pub fn new(cfg: SupervisorConfig, mode: MotionMode) -> Self {
        Self {
            cfg,
            mode,
            controller: default_controller(mode),
            last_transition: f64::NEG_INFINITY,
            dive_requested: false,
        }
    }

    pub fn mode(&self) -> MotionMode {
        self.mode
    }

    pub fn controller(&self) -> Controller {
        self.controller
    }

    /// Allow the next submersion to switch to underwater control.
    pub fn request_dive(&mut self) {
        self.dive_requested = true;
    }

    /// Hand control to `controller` now, if it is legal in the current mode.
    pub fn request_controller(&mut self, t: f64, controller: Controller) -> Result<Option<Event>, SupervisorError> {
        if !controller.allowed_in(self.mode) {
            return Err(SupervisorError::Illegal {
                controller,
                mode: self.mode,
            });
        }
        Ok(self.set_controller(t, controller))
    }

    fn set_controller(&mut self, t: f64, c: Controller) -> Option<Event> {
        if c == self.controller {
            return None;
        }
        let ev = Event {
            t,
            kind: EventKind::Controller,
            from: self.controller.as_str(),
            to: c.as_str(),
        };
        self.controller = c;
        Some(ev)
    }

    fn set_mode(&mut self, t: f64, m: MotionMode) -> Event {
        let ev = Event {
            t,
            kind: EventKind::Mode,
            from: self.mode.as_str(),
            to: m.as_str(),
        };
        self.mode = m;
        self.last_transition = t;
        ev
    }

    pub fn step(&mut self, s: &Sensed) -> Vec<Event> {
        let c = &self.cfg;
        let z = s.state.p_w.z;
        let vz = s.state.velocity_w().z;
        let dwell_ok = s.t - self.last_transition >= c.dwell - 1e-9;
        let up = c.h_judge + 0.5 * c.hysteresis;
        let reoriented = s.state.theta_t.abs() >= c.reorient_deg.to_radians();
        let mut events = Vec::new();

        let next = match self.mode {
            MotionMode::GroundLand if dwell_ok && z > up && reoriented => Some(MotionMode::FlightAir),
            MotionMode::FlightAir if s.medium == Medium::Water && self.dive_requested => Some(MotionMode::FlightWater),
            MotionMode::FlightAir
                if dwell_ok
                    && s.medium == Medium::Air
                    && s.ground_below.is_some_and(|g| z <= g + c.contact_height + c.landing_tol)
                    && vz <= 0.0 =>
            {
                Some(MotionMode::GroundLand)
            }
            MotionMode::FlightWater if s.seabed_contact => Some(MotionMode::GroundSeabed),
            MotionMode::GroundSeabed if dwell_ok && !s.seabed_contact => Some(MotionMode::FlightWater),
            MotionMode::WaterSurface if s.exit_phase.is_some_and(|p| p != ExitPhase::Surface) => {
                Some(MotionMode::FlightAir)
            }
            _ => None,
        };
        if let Some(m) = next {
            events.push(self.set_mode(s.t, m));
            if m == MotionMode::FlightWater {
                self.dive_requested = false;
            }
            if !self.controller.allowed_in(m) {
                events.extend(self.set_controller(s.t, default_controller(m)));
            }
        }
        if self.controller == Controller::PidWaterExit && s.exit_phase == Some(ExitPhase::Stable) && self.mode == MotionMode::FlightAir {
            events.extend(self.set_controller(s.t, Controller::Hnmpc));
        }
        debug_assert!(self.controller.allowed_in(self.mode));
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VehicleParams;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn sensed(t: f64, s: &HybridState) -> Sensed<'_> {
        Sensed {
            t,
            state: s,
            rotor_rpm: [13000.0; 4],
            medium: Medium::Air,
            seabed_contact: false,
            ground_below: Some(0.0),
            exit_phase: None,
        }
    }

    #[test]
    fn takeoff_at_threshold_crossing() {
        let p = VehicleParams::default();
        let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::GroundLand);
        let mut fired = None;
        for k in 0..200 {
            let t = k as f64 * 0.005;
            let mut s = HybridState::ground(0.0, 0.0, -85f64.to_radians(), 0.0, &p);
            s.p_w.z = 0.17 + 0.5 * t;
            let ev = sup.step(&sensed(t, &s));
            if !ev.is_empty() {
                assert!(fired.is_none());
                assert_eq!(ev[0].from, "ground_land");
                assert_eq!(ev[0].to, "flight_air");
                fired = Some((t, s.p_w.z));
            }
        }
        let (_, z) = fired.unwrap();
        assert!(z > 0.275 && z <= 0.275 + 0.5 * 0.005 + 1e-12);
    }

    #[test]
    fn no_takeoff_without_reorientation() {
        let p = VehicleParams::default();
        let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::GroundLand);
        let mut s = HybridState::ground(0.0, 0.0, 0.0, 0.0, &p);
        s.p_w.z = 1.0;
        assert!(sup.step(&sensed(0.0, &s)).is_empty());
    }

    #[test]
    fn hover_has_no_events() {
        let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::FlightAir);
        let s = HybridState::flight(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), MotionMode::FlightAir);
        for k in 0..2000 {
            assert!(sup.step(&sensed(k as f64 * 0.005, &s)).is_empty());
        }
    }

    #[test]
    fn hnmpc_rejected_underwater() {
        let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::FlightWater);
        assert!(matches!(
            sup.request_controller(0.0, Controller::Hnmpc),
            Err(SupervisorError::Illegal { .. })
        ));
        assert_eq!(sup.controller(), Controller::PidUnderwater);
    }

    #[test]
    fn water_exit_sequence() {
        let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::WaterSurface);
        let ev = sup.request_controller(0.0, Controller::PidWaterExit).unwrap().unwrap();
        assert_eq!((ev.from, ev.to), ("pid_underwater", "pid_water_exit"));
        let s = HybridState::flight(Vector3::zeros(), Vector3::zeros(), MotionMode::WaterSurface);
        let mut log = Vec::new();
        for (t, phase) in [(0.5, ExitPhase::Surface), (1.1, ExitPhase::Airborne), (1.4, ExitPhase::Stable)] {
            let mut x = sensed(t, &s);
            x.ground_below = None;
            x.exit_phase = Some(phase);
            log.extend(sup.step(&x));
        }
        assert_eq!(log.len(), 2);
        assert_eq!((log[0].t, log[0].to), (1.1, "flight_air"));
        assert_eq!((log[1].t, log[1].to), (1.4, "hnmpc"));
    }

    #[test]
    fn dive_is_commanded() {
        let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::FlightAir);
        let s = HybridState::flight(Vector3::new(0.0, 0.0, -0.2), Vector3::zeros(), MotionMode::FlightAir);
        let mut x = sensed(0.0, &s);
        x.medium = Medium::Water;
        assert!(sup.step(&x).is_empty());
        sup.request_dive();
        let ev = sup.step(&x);
        assert_eq!(ev.len(), 2);
        assert_eq!(sup.mode(), MotionMode::FlightWater);
        assert_eq!(sup.controller(), Controller::PidUnderwater);
        x.seabed_contact = true;
        x.t = 0.5;
        sup.step(&x);
        assert_eq!(sup.mode(), MotionMode::GroundSeabed);
    }

    fn trace(zs: &[f64]) -> Vec<String> {
        let p = VehicleParams::default();
        let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::GroundLand);
        let mut out = Vec::new();
        for (k, z) in zs.iter().enumerate() {
            let mut s = HybridState::ground(0.0, 0.0, -1.5, 0.0, &p);
            s.p_w.z = *z;
            out.extend(sup.step(&sensed(k as f64 * 0.005, &s)).iter().map(Event::csv_row));
        }
        out
    }

    proptest! {
        #[test]
        fn dithering_does_not_chatter(noise in prop::collection::vec(-0.01..0.01f64, 400)) {
            let zs: Vec<f64> = noise.iter().map(|n| 0.25 + n).collect();
            let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::FlightAir);
            let mut times = Vec::new();
            for (k, z) in zs.iter().enumerate() {
                let mut s = HybridState::flight(Vector3::new(0.0, 0.0, *z), Vector3::zeros(), MotionMode::FlightAir);
                s.v_a.z = if k % 2 == 0 { 0.1 } else { -0.1 };
                let t = k as f64 * 0.005;
                times.extend(sup.step(&sensed(t, &s)).iter().map(|e| e.t));
            }
            for w in times.windows(2) {
                prop_assert!(w[1] - w[0] >= 0.5);
            }
            prop_assert!(times.len() <= 1);
        }

        #[test]
        fn identical_traces_give_identical_events(zs in prop::collection::vec(0.1..0.5f64, 100)) {
            prop_assert_eq!(trace(&zs), trace(&zs));
        }

        #[test]
        fn controller_always_legal(steps in prop::collection::vec((0.0..1.0f64, any::<bool>(), any::<bool>(), 0u8..4), 1..100)) {
            let mut sup = Supervisor::new(SupervisorConfig::default(), MotionMode::WaterSurface);
            sup.request_controller(0.0, Controller::PidWaterExit).unwrap();
            for (k, (z, water, contact, ph)) in steps.into_iter().enumerate() {
                let s = HybridState::flight(Vector3::new(0.0, 0.0, z - 0.3), Vector3::zeros(), MotionMode::FlightAir);
                let phase = [ExitPhase::Surface, ExitPhase::Airborne, ExitPhase::Stable, ExitPhase::Aborted][ph as usize];
                if k % 7 == 3 { sup.request_dive(); }
                let x = Sensed {
                    t: k as f64 * 0.1,
                    state: &s,
                    rotor_rpm: [5000.0; 4],
                    medium: if water { Medium::Water } else { Medium::Air },
                    seabed_contact: contact,
                    ground_below: Some(-0.3),
                    exit_phase: Some(phase),
                };
                sup.step(&x);
                prop_assert!(sup.controller().allowed_in(sup.mode()));
                prop_assert!(sup.mode().medium() == Medium::Water || !matches!(sup.mode(), MotionMode::FlightWater | MotionMode::GroundSeabed));
            }
        }
    }
}
