use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use triphibot_core::propulsion::{
    power_and_specific_thrust, run_bench, segment_settle_times, step_metrics, sweep_stats, BenchConfig, BenchProfile,
    DriverKind, BENCH_HEADER,
};
use triphibot_core::sim::log::{parse_events, parse_log};
use triphibot_core::sim::metrics::{rmse, RmseForm};
use triphibot_core::sim::report::Report;
use triphibot_core::sim::run::run;
use triphibot_core::sim::scenario::Scenario;
use triphibot_core::Medium;

#[derive(Parser)]
#[command(name = "triphibot", version, about = "Air, land and water quadrotor simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-loop scenario runs.
    Sim {
        #[command(subcommand)]
        cmd: SimCmd,
    },
    /// Propulsion test bench.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Metrics over existing logs.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory. Defaults to `$TRIPHIBOT_LOG_DIR/<scenario name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "TRIPHIBOT_LOG_DIR", hide_env_values = true)]
        log_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    Motor {
        /// `step`, `square` or `sweep`.
        #[arg(long)]
        profile: String,
        #[arg(long, value_enum)]
        driver: Driver,
        #[arg(long, value_enum)]
        medium: MediumArg,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Rmse {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "squared")]
        form: Form,
    },
    Metrics {
        #[arg(long)]
        log: PathBuf,
        /// Events file; `events.csv` next to the log when present.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Scenario whose window, obstacles and thresholds apply.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Driver {
    Foc,
    Esc,
}

#[derive(Clone, Copy, ValueEnum)]
enum MediumArg {
    Air,
    Water,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Squared,
    AsPrinted,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` when a declared threshold fails.
fn dispatch(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Sim { cmd: SimCmd::Run { scenario, out, log_dir } } => sim_run(&scenario, out, log_dir),
        Cmd::Bench { cmd: BenchCmd::Motor { profile, driver, medium, out } } => bench_motor(&profile, driver, medium, out),
        Cmd::Eval { cmd: EvalCmd::Rmse { log, form } } => eval_rmse(&log, form),
        Cmd::Eval { cmd: EvalCmd::Metrics { log, events, scenario } } => eval_metrics(&log, events, scenario),
    }
}

fn sim_run(path: &Path, out: Option<PathBuf>, log_dir: Option<PathBuf>) -> Result<bool> {
    let scn = Scenario::load(path)?;
    let name = if scn.name.is_empty() {
        path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned())
    } else {
        scn.name.clone()
    };
    let dir = match (out, log_dir) {
        (Some(d), _) => d,
        (None, Some(root)) => root.join(&name),
        (None, None) => bail!("give --out or set TRIPHIBOT_LOG_DIR"),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let log = run(&scn)?;
    fs::write(dir.join("log.csv"), log.csv())?;
    fs::write(dir.join("events.csv"), log.events_csv())?;
    fs::write(dir.join("solver_timing.csv"), log.timing_csv())?;

    let events = parse_events(&log.events_csv())?;
    let report = Report::compute(&log.rows, &events, Some(&scn));
    let checks = report.checks(&scn.acceptance);
    let mut text = format!("scenario {name}\n{report}");
    for c in &checks {
        text.push_str(&format!("{c}\n"));
    }
    if let Some(reason) = &log.aborted {
        text.push_str(&format!("FAIL aborted: {reason}\n"));
    }
    fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(log.aborted.is_none() && checks.iter().all(|c| c.pass))
}

fn bench_motor(profile: &str, driver: Driver, medium: MediumArg, out: Option<PathBuf>) -> Result<bool> {
    let Some(prof) = BenchProfile::by_name(profile) else {
        bail!("unknown profile {profile:?}; expected step, square or sweep");
    };
    let kind = match driver {
        Driver::Foc => DriverKind::Foc,
        Driver::Esc => DriverKind::Esc,
    };
    let medium = match medium {
        MediumArg::Air => Medium::Air,
        MediumArg::Water => Medium::Water,
    };
    let trace = run_bench(&prof, kind, medium, &BenchConfig::default());
    let mut csv = String::from(BENCH_HEADER);
    csv.push('\n');
    for s in &trace {
        csv.push_str(&s.csv_row());
        csv.push('\n');
    }
    match out {
        Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    match &prof {
        BenchProfile::Step { target_rpm, t_step, .. } => {
            let m = step_metrics(&trace, *t_step, *target_rpm, 0.5);
            let rise = m.rise_time.map_or("none".into(), |r| format!("{r:.4}"));
            eprintln!(
                "rise {rise} s, overshoot {:.2}%, steady error {:.2}%, ripple {:.2}%",
                100.0 * m.overshoot,
                100.0 * m.steady_error,
                100.0 * m.ripple
            );
        }
        BenchProfile::Square { .. } => {
            for (k, s) in segment_settle_times(&trace, 0.05).iter().enumerate() {
                let s = s.map_or("not settled".into(), |v| format!("{v:.4} s"));
                eprintln!("segment {k}: {s}");
            }
        }
        BenchProfile::Sweep { rpms, dwell } => {
            for (r, st) in rpms.iter().zip(sweep_stats(&trace, rpms, *dwell)) {
                let st = st?;
                eprintln!(
                    "{r:6.0} rpm: power {:.3} W, thrust {:.4} N, {:.4} N/W",
                    st.power, st.thrust, st.specific_thrust
                );
            }
            let all = power_and_specific_thrust(&trace, 0.0, prof.duration())?;
            eprintln!("mean power {:.3} W", all.power);
        }
    }
    Ok(true)
}

fn eval_rmse(path: &Path, form: Form) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = parse_log(&text)?;
    let p: Vec<_> = rows.iter().map(|r| r.p).collect();
    let pr: Vec<_> = rows.iter().map(|r| r.p_ref).collect();
    let form = match form {
        Form::Squared => RmseForm::Squared,
        Form::AsPrinted => RmseForm::AsPrinted,
    };
    println!("{:.9}", rmse(&p, &pr, form)?);
    Ok(true)
}

fn eval_metrics(path: &Path, events: Option<PathBuf>, scenario: Option<PathBuf>) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = parse_log(&text)?;
    let ev_path = events.or_else(|| {
        let p = path.with_file_name("events.csv");
        p.exists().then_some(p)
    });
    let events = match ev_path {
        Some(p) => parse_events(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Vec::new(),
    };
    let scn = scenario.map(|p| Scenario::load(&p)).transpose()?;
    let report = Report::compute(&rows, &events, scn.as_ref());
    print!("{report}");
    let mut ok = true;
    if let Some(s) = &scn {
        for c in report.checks(&s.acceptance) {
            println!("{c}");
            ok &= c.pass;
        }
    }
    Ok(ok)
}
