//! Metrics over a finished run and the check against a scenario's
//! declared thresholds.

use std::fmt;

use nalgebra::Vector3;

use super::log::Row;
use super::metrics::{clearance_check, event_delta, phase_lag, range, rmse, RmseForm};
use super::scenario::{Acceptance, Scenario};
use crate::model::{Medium, VehicleParams};
use crate::propulsion::{shaft_power, PropellerLoad};

/// `(t, kind, from, to)` of an event, as in the events file.
pub type EventRecord = (f64, String, String, String);

/// Shaft power of all four rotors holding the weight in air, W.
pub fn hover_power(params: &VehicleParams) -> f64 {
    let load = PropellerLoad::from_vehicle(params);
    let water = crate::propulsion::medium_fraction(Medium::Air);
    let rpm = load.rpm_for_thrust(params.weight() / 4.0, water);
    4.0 * shaft_power(&load, rpm, water)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    /// Human-readable bound, e.g. `<= 0.05`.
    pub bound: String,
    pub pass: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} = {:.6} ({})", self.name, self.value, self.bound)
    }
}

/// Metrics of one run. Entries that do not apply to the run are `None`,
/// with the reason in `notes`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub samples: usize,
    pub rmse: Option<f64>,
    pub rmse_as_printed: Option<f64>,
    /// Ground pitch `(min, max)` over grounded rows, degrees.
    pub ground_pitch_deg: Option<(f64, f64)>,
    pub pitch_error_max_deg: Option<f64>,
    pub pitch_lag: Option<f64>,
    pub mode_events: usize,
    pub min_event_spacing: Option<f64>,
    pub detach: Option<f64>,
    pub handoff: Option<f64>,
    pub post_handoff_attitude_deg: Option<f64>,
    /// Whether every obstacle was reached and crossed with clearance.
    pub clears_obstacles: Option<bool>,
    pub min_clearance: Option<f64>,
    pub mean_power: Option<f64>,
    pub power_ratio: Option<f64>,
    pub notes: Vec<String>,
}

fn in_window(t: f64, w: Option<[f64; 2]>) -> bool {
    w.is_none_or(|[a, b]| t >= a - 1e-9 && t <= b + 1e-9)
}

fn max_abs(v: impl Iterator<Item = f64>) -> Option<f64> {
    v.map(f64::abs).reduce(f64::max)
}

impl Report {
    /// Metrics of `rows` and `events`. With a scenario, its window, RMSE
    /// form and obstacles apply.
    pub fn compute(rows: &[Row], events: &[EventRecord], scn: Option<&Scenario>) -> Report {
        let acc = scn.map(|s| s.acceptance.clone()).unwrap_or_default();
        let w: Vec<&Row> = rows.iter().filter(|r| in_window(r.t, acc.window)).collect();
        let mut rep = Report {
            samples: w.len(),
            ..Default::default()
        };
        if w.is_empty() {
            rep.notes.push("no rows in the evaluation window".into());
            return rep;
        }
        let p: Vec<Vector3<f64>> = w.iter().map(|r| r.p).collect();
        let pr: Vec<Vector3<f64>> = w.iter().map(|r| r.p_ref).collect();
        rep.rmse = rmse(&p, &pr, RmseForm::Squared).ok();
        rep.rmse_as_printed = rmse(&p, &pr, RmseForm::AsPrinted).ok();

        let ground: Vec<f64> = w.iter().filter(|r| r.eta == 1).map(|r| r.theta_t.to_degrees()).collect();
        rep.ground_pitch_deg = range(&ground).ok();
        if rep.ground_pitch_deg.is_none() {
            rep.notes.push("ground pitch: no grounded rows".into());
        }

        let under: Vec<&&Row> = w.iter().filter(|r| r.controller == "pid_underwater").collect();
        if under.len() > 1 {
            rep.pitch_error_max_deg = max_abs(under.iter().map(|r| (r.att.y - r.att_ref.y).to_degrees()));
            let y: Vec<f64> = under.iter().map(|r| r.att.y).collect();
            let r: Vec<f64> = under.iter().map(|r| r.att_ref.y).collect();
            let dt = under[1].t - under[0].t;
            rep.pitch_lag = phase_lag(&r, &y, dt, 0.5).ok();
        } else {
            rep.notes.push("pitch tracking: no underwater rows".into());
        }

        let modes: Vec<f64> = events.iter().filter(|e| e.1 == "mode").map(|e| e.0).collect();
        rep.mode_events = modes.len();
        rep.min_event_spacing = modes.windows(2).map(|p| p[1] - p[0]).reduce(f64::min);

        let marks: Vec<(f64, &str)> = events
            .iter()
            .filter_map(|(t, kind, from, to)| match (kind.as_str(), from.as_str(), to.as_str()) {
                ("phase", "idle", "surface") => Some((*t, "engage")),
                ("phase", "surface", "airborne") => Some((*t, "detach")),
                ("controller", "pid_water_exit", "hnmpc") => Some((*t, "handoff")),
                _ => None,
            })
            .collect();
        rep.detach = event_delta(marks.iter().copied(), "engage", "detach");
        rep.handoff = event_delta(marks.iter().copied(), "engage", "handoff");
        if let Some(th) = marks.iter().find(|m| m.1 == "handoff").map(|m| m.0) {
            rep.post_handoff_attitude_deg = max_abs(
                rows.iter()
                    .filter(|r| r.t >= th)
                    .flat_map(|r| [r.att.x - r.att_ref.x, r.att.y - r.att_ref.y])
                    .map(f64::to_degrees),
            );
        }

        if let Some(s) = scn.filter(|s| !s.environment.obstacles.is_empty()) {
            let env = &s.environment;
            let mut ok = true;
            let mut min = f64::INFINITY;
            for o in &env.obstacles {
                let over: Vec<&Row> = rows.iter().filter(|r| r.eta == 1 && o.spans(r.p.x)).collect();
                if over.is_empty() {
                    ok = false;
                    rep.notes.push(format!("obstacle at x = {} never reached on the ground", o.x));
                }
                for r in over {
                    let c = clearance_check(&env.clearance, r.p.x, r.theta_t, Some(o));
                    min = min.min(c.margin);
                    ok &= c.pass;
                }
            }
            rep.clears_obstacles = Some(ok);
            rep.min_clearance = min.is_finite().then_some(min);
        }

        let pw: Vec<f64> = w.iter().map(|r| r.power).collect();
        let mean = pw.iter().sum::<f64>() / pw.len() as f64;
        rep.mean_power = Some(mean);
        if let Some(s) = scn {
            rep.power_ratio = Some(mean / hover_power(&s.vehicle));
        }
        rep
    }

    /// One check per threshold the scenario declares.
    pub fn checks(&self, acc: &Acceptance) -> Vec<Check> {
        let mut out = Vec::new();
        let mut le = |name: &'static str, v: Option<f64>, max: Option<f64>| {
            if let Some(m) = max {
                let value = v.unwrap_or(f64::NAN);
                out.push(Check {
                    name,
                    value,
                    bound: format!("<= {m}"),
                    pass: value <= m,
                });
            }
        };
        let rmse = match acc.rmse_form {
            RmseForm::Squared => self.rmse,
            RmseForm::AsPrinted => self.rmse_as_printed,
        };
        le("rmse", rmse, acc.rmse_max);
        le("pitch_error_max_deg", self.pitch_error_max_deg, acc.pitch_error_max_deg);
        le("pitch_lag", self.pitch_lag, acc.pitch_lag_max);
        le("detach", self.detach, acc.detach_max);
        le("handoff", self.handoff, acc.handoff_max);
        le("post_handoff_attitude_deg", self.post_handoff_attitude_deg, acc.post_handoff_attitude_deg);
        le("power_ratio", self.power_ratio, acc.power_ratio_max);
        if let Some([lo, hi]) = acc.theta_t_range_deg {
            let (a, b) = self.ground_pitch_deg.unwrap_or((f64::NAN, f64::NAN));
            out.push(Check {
                name: "ground_pitch_min_deg",
                value: a,
                bound: format!(">= {lo}"),
                pass: a >= lo,
            });
            out.push(Check {
                name: "ground_pitch_max_deg",
                value: b,
                bound: format!("<= {hi}"),
                pass: b <= hi,
            });
        }
        if let Some(n) = acc.mode_events {
            out.push(Check {
                name: "mode_events",
                value: self.mode_events as f64,
                bound: format!("== {n}"),
                pass: self.mode_events == n,
            });
        }
        if let Some(s) = acc.min_event_spacing {
            let v = self.min_event_spacing.unwrap_or(f64::INFINITY);
            out.push(Check {
                name: "min_event_spacing",
                value: v,
                bound: format!(">= {s}"),
                pass: v >= s,
            });
        }
        if let Some(expect) = acc.clears_obstacles {
            let got = self.clears_obstacles;
            out.push(Check {
                name: "clears_obstacles",
                value: got.map_or(f64::NAN, |b| f64::from(u8::from(b))),
                bound: format!("== {}", u8::from(expect)),
                pass: got == Some(expect),
            });
        }
        out
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        writeln!(f, "samples                    {}", self.samples)?;
        writeln!(f, "rmse                       {}", opt(self.rmse))?;
        writeln!(f, "rmse_as_printed            {}", opt(self.rmse_as_printed))?;
        match self.ground_pitch_deg {
            Some((a, b)) => writeln!(f, "ground_pitch_deg           [{a:.3}, {b:.3}]")?,
            None => writeln!(f, "ground_pitch_deg           n/a")?,
        }
        writeln!(f, "pitch_error_max_deg        {}", opt(self.pitch_error_max_deg))?;
        writeln!(f, "pitch_lag                  {}", opt(self.pitch_lag))?;
        writeln!(f, "mode_events                {}", self.mode_events)?;
        writeln!(f, "min_event_spacing          {}", opt(self.min_event_spacing))?;
        writeln!(f, "detach                     {}", opt(self.detach))?;
        writeln!(f, "handoff                    {}", opt(self.handoff))?;
        writeln!(f, "post_handoff_attitude_deg  {}", opt(self.post_handoff_attitude_deg))?;
        let clears = self.clears_obstacles.map_or("n/a".to_string(), |b| b.to_string());
        writeln!(f, "clears_obstacles           {clears}")?;
        writeln!(f, "min_clearance              {}", opt(self.min_clearance))?;
        writeln!(f, "mean_power                 {}", opt(self.mean_power))?;
        writeln!(f, "power_ratio                {}", opt(self.power_ratio))?;
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, x: f64, x_ref: f64) -> Row {
        Row {
            t,
            p: Vector3::new(x, 0.0, 1.0),
            v: Vector3::zeros(),
            att: Vector3::zeros(),
            theta_t: 0.0,
            psi_t: 0.0,
            v_l: 0.0,
            w: Vector3::zeros(),
            p_ref: Vector3::new(x_ref, 0.0, 1.0),
            att_ref: Vector3::zeros(),
            theta_t_ref: 0.0,
            u: [0.0; 4],
            rpm: [0.0; 4],
            power: 10.0,
            mode: "flight_air".into(),
            eta: 0,
            controller: "hnmpc".into(),
            kkt: 0.0,
            iters: 1,
            clearance: f64::NAN,
        }
    }

    #[test]
    fn rmse_and_event_timings() {
        let rows: Vec<Row> = (0..10).map(|k| row(k as f64 * 0.1, 0.1, 0.0)).collect();
        let ev = |t: f64, k: &str, a: &str, b: &str| (t, k.to_string(), a.to_string(), b.to_string());
        let events = vec![
            ev(0.0, "controller", "pid_underwater", "pid_water_exit"),
            ev(0.0, "phase", "idle", "surface"),
            ev(1.2, "phase", "surface", "airborne"),
            ev(1.2, "mode", "water_surface", "flight_air"),
            ev(1.5, "controller", "pid_water_exit", "hnmpc"),
        ];
        let rep = Report::compute(&rows, &events, None);
        assert!((rep.rmse.unwrap() - 0.1).abs() < 1e-12);
        assert!((rep.detach.unwrap() - 1.2).abs() < 1e-12);
        assert!((rep.handoff.unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(rep.mode_events, 1);
        let acc = Acceptance {
            rmse_max: Some(0.05),
            handoff_max: Some(1.5),
            ..Default::default()
        };
        let checks = rep.checks(&acc);
        assert_eq!(checks.len(), 2);
        assert!(!checks[0].pass && checks[1].pass);
    }

    #[test]
    fn hover_power_is_positive() {
        assert!(hover_power(&VehicleParams::default()) > 0.0);
    }
}
