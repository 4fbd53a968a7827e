//! Run log rows and their CSV form.

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use super::fmt9;
use crate::supervisor::{Event, EVENTS_HEADER};

pub const LOG_VERSION: &str = "# triphibot-log-v1";

pub const LOG_COLUMNS: [&str; 38] = [
    "t", "x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw", "theta_t", "psi_t", "v_l", "wx", "wy", "wz",
    "x_ref", "y_ref", "z_ref", "roll_ref", "pitch_ref", "yaw_ref", "theta_t_ref", "u1", "u2", "u3", "u4", "rpm1",
    "rpm2", "rpm3", "rpm4", "power", "mode", "eta", "controller", "kkt", "iters", "clearance",
];

pub const TIMING_HEADER: &str = "t,solve_ms,iters,deadline_miss";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogError {
    #[error("missing version line")]
    Version,
    #[error("header does not match the v1 column list")]
    Header,
    #[error("line {line}: {msg}")]
    Row { line: usize, msg: String },
}

/// One controller-tick row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Roll, pitch, yaw of the mass frame.
    pub att: Vector3<f64>,
    pub theta_t: f64,
    pub psi_t: f64,
    pub v_l: f64,
    pub w: Vector3<f64>,
    pub p_ref: Vector3<f64>,
    pub att_ref: Vector3<f64>,
    pub theta_t_ref: f64,
    pub u: [f64; 4],
    pub rpm: [f64; 4],
    pub power: f64,
    pub mode: String,
    pub eta: u8,
    pub controller: String,
    pub kkt: f64,
    pub iters: usize,
    /// Obstacle clearance margin when grounded, NaN otherwise.
    pub clearance: f64,
}

impl Row {
    pub fn csv(&self) -> String {
        let mut s = String::with_capacity(400);
        let mut num = |v: f64| {
            s.push_str(&fmt9(v));
            s.push(',');
        };
        num(self.t);
        for v in [&self.p, &self.v, &self.att] {
            v.iter().for_each(|x| num(*x));
        }
        num(self.theta_t);
        num(self.psi_t);
        num(self.v_l);
        self.w.iter().for_each(|x| num(*x));
        self.p_ref.iter().for_each(|x| num(*x));
        self.att_ref.iter().for_each(|x| num(*x));
        num(self.theta_t_ref);
        self.u.iter().for_each(|x| num(*x));
        self.rpm.iter().for_each(|x| num(*x));
        num(self.power);
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            self.mode,
            self.eta,
            self.controller,
            fmt9(self.kkt),
            self.iters,
            fmt9(self.clearance)
        );
        s
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self, LogError> {
        let err = |msg: String| LogError::Row { line: line_no, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != LOG_COLUMNS.len() {
            return Err(err(format!("{} fields, expected {}", f.len(), LOG_COLUMNS.len())));
        }
        let n = |i: usize| -> Result<f64, LogError> {
            f[i].parse::<f64>().map_err(|e| err(format!("{}: {e}", LOG_COLUMNS[i])))
        };
        let v3 = |i: usize| -> Result<Vector3<f64>, LogError> { Ok(Vector3::new(n(i)?, n(i + 1)?, n(i + 2)?)) };
        let a4 = |i: usize| -> Result<[f64; 4], LogError> { Ok([n(i)?, n(i + 1)?, n(i + 2)?, n(i + 3)?]) };
        Ok(Row {
            t: n(0)?,
            p: v3(1)?,
            v: v3(4)?,
            att: v3(7)?,
            theta_t: n(10)?,
            psi_t: n(11)?,
            v_l: n(12)?,
            w: v3(13)?,
            p_ref: v3(16)?,
            att_ref: v3(19)?,
            theta_t_ref: n(22)?,
            u: a4(23)?,
            rpm: a4(27)?,
            power: n(31)?,
            mode: f[32].to_string(),
            eta: f[33].parse().map_err(|e| err(format!("eta: {e}")))?,
            controller: f[34].to_string(),
            kkt: n(35)?,
            iters: f[36].parse().map_err(|e| err(format!("iters: {e}")))?,
            clearance: n(37)?,
        })
    }
}

/// Wall-clock solver statistics; kept out of the main log so that log is
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub t: f64,
    pub solve_ms: f64,
    pub iters: usize,
    pub deadline_miss: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub rows: Vec<Row>,
    pub events: Vec<Event>,
    pub timing: Vec<TimingRow>,
    /// Set when the run stopped early, with the reason.
    pub aborted: Option<String>,
}

impl RunLog {
    pub fn csv(&self) -> String {
        let mut s = String::new();
        s.push_str(LOG_VERSION);
        s.push('\n');
        s.push_str(&LOG_COLUMNS.join(","));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        if let Some(reason) = &self.aborted {
            let _ = writeln!(s, "# aborted: {reason}");
        }
        s
    }

    pub fn events_csv(&self) -> String {
        let mut s = String::from(EVENTS_HEADER);
        s.push('\n');
        for e in &self.events {
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from(TIMING_HEADER);
        s.push('\n');
        for r in &self.timing {
            let _ = writeln!(s, "{},{},{},{}", fmt9(r.t), fmt9(r.solve_ms), r.iters, u8::from(r.deadline_miss));
        }
        s
    }

    pub fn mode_events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == crate::supervisor::EventKind::Mode)
    }
}

/// Rows of a v1 log file.
pub fn parse_log(text: &str) -> Result<Vec<Row>, LogError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == LOG_VERSION => {}
        _ => return Err(LogError::Version),
    }
    match lines.next() {
        Some((_, l)) if l.trim() == LOG_COLUMNS.join(",") => {}
        _ => return Err(LogError::Header),
    }
    lines
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(i, l)| Row::parse(l.trim(), i + 1))
        .collect()
}

/// `(t, event, from, to)` rows of an events file.
pub fn parse_events(text: &str) -> Result<Vec<(f64, String, String, String)>, LogError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == EVENTS_HEADER => {}
        _ => return Err(LogError::Header),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.trim().split(',').collect();
            let err = |msg: &str| LogError::Row { line: i + 1, msg: msg.to_string() };
            if f.len() != 4 {
                return Err(err("expected 4 fields"));
            }
            let t = f[0].parse().map_err(|_| err("bad time"))?;
            Ok((t, f[1].to_string(), f[2].to_string(), f[3].to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> Row {
        Row {
            t: 0.005,
            p: Vector3::new(1.0, -2.5, 0.17),
            v: Vector3::new(0.1, 0.0, -1e-7),
            att: Vector3::new(0.0, 1.2345678912345, -3.0),
            theta_t: -0.3,
            psi_t: 0.0,
            v_l: 2.0,
            w: Vector3::zeros(),
            p_ref: Vector3::new(1.0, -2.5, 0.17),
            att_ref: Vector3::zeros(),
            theta_t_ref: 0.0,
            u: [1.0, 2.0, 3.0, 4.0],
            rpm: [13000.0; 4],
            power: 234.5,
            mode: "ground_land".into(),
            eta: 1,
            controller: "hnmpc".into(),
            kkt: 1.5e-4,
            iters: 2,
            clearance: f64::NAN,
        }
    }

    #[test]
    fn header_is_frozen() {
        assert_eq!(LOG_COLUMNS.len(), 38);
        let log = RunLog { rows: vec![row()], ..Default::default() };
        let text = log.csv();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# triphibot-log-v1"));
        assert!(lines.next().unwrap().starts_with("t,x,y,z,vx,vy,vz,roll,pitch,yaw,theta_t,psi_t,v_l,"));
    }

    #[test]
    fn round_trip_to_nine_digits() {
        let r = row();
        let back = parse_log(&RunLog { rows: vec![r.clone()], ..Default::default() }.csv()).unwrap();
        assert_eq!(back.len(), 1);
        let b = &back[0];
        assert_eq!(b.att.y, 1.23456789);
        assert_eq!(b.v.z, -1e-7);
        assert_eq!((b.mode.as_str(), b.eta, b.iters), ("ground_land", 1, 2));
        assert!(b.clearance.is_nan());
        assert_eq!(b.csv(), r.csv());
    }

    #[test]
    fn rejects_foreign_header() {
        assert_eq!(parse_log("t,x\n1,2\n"), Err(LogError::Version));
    }
}
