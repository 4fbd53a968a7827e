//! Fixed-step simulation engine, scenarios, logging and metrics.

pub mod integrate;
pub mod log;
pub mod metrics;
pub mod observer;
pub mod report;
pub mod run;
pub mod scenario;

pub use integrate::{integrate_step, resolve_contact, SimError, World};


/// Nine significant digits, the log number format.
pub fn fmt9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{}", if v == 0.0 { 0.0 } else { v });
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        trim_zeros(s)
    } else {
        format!("{:.8e}", v)
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        if t == "-0" { "0".to_string() } else { t.to_string() }
    } else {
        s
    }
}
