use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use cpscal::artifacts::OutDir;
use cpscal::commands::{self, CalibrationSource, Command};
use cpscal::scenario::{resolve_out, Scenario, OUT_ENV};
use cpscal::{CliError, Result};

/// Simulate, calibrate and analyse cascaded thermo-optic phase-shifter
/// chains.
#[derive(Parser)]
#[command(name = "cpscal", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (JSON, `schema: 1`); repeat to run a batch. The
    /// reference scenario is used when none is given.
    #[arg(long = "scenario", value_name = "PATH")]
    scenarios: Vec<PathBuf>,
    /// Output directory; overrides the scenario's `output` and $CPSCAL_OUT.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Detector-noise seed; overrides `instrument.rng_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Scenarios run in parallel.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep one stage and write its port-4 trace.
    Simulate(Common),
    /// Run the pairwise-scan calibration.
    Calibrate(Common),
    /// Compare a calibrated model with the device over every stage sweep.
    Fidelity {
        #[command(flatten)]
        common: Common,
        /// Use a `calibration.csv` instead of calibrating first.
        #[arg(long, value_name = "PATH", conflicts_with = "perfect")]
        calibration: Option<PathBuf>,
        /// Use the scenario's truth as the calibration.
        #[arg(long)]
        perfect: bool,
    },
    /// Solve the heater cross-section and sweep the heater power.
    Thermal(Common),
    /// Extinction ratio, imbalance and worst-case fidelity of imperfect couplers.
    AnalyzeMmi(Common),
}

struct Job {
    label: String,
    scenario: Scenario,
    out: PathBuf,
}

fn load(common: &Common) -> (Vec<Job>, Vec<(String, CliError)>) {
    let env = std::env::var(OUT_ENV).ok();
    let mut loaded = Vec::new();
    let mut failed = Vec::new();
    if common.scenarios.is_empty() {
        loaded.push(("reference".to_string(), Scenario::default()));
    }
    for p in &common.scenarios {
        match Scenario::from_path(p) {
            Ok(s) => loaded.push((p.display().to_string(), s)),
            // The error already names the file.
            Err(e) => failed.push((String::new(), e)),
        }
    }
    let batch = common.scenarios.len() > 1;
    let mut jobs: Vec<Job> = Vec::new();
    for (label, mut sc) in loaded {
        if let Some(seed) = common.seed {
            sc = sc.with_seed(seed);
        }
        let base = resolve_out(common.out.as_deref(), sc.output.as_deref(), env.as_deref());
        let out = if batch { base.join(&sc.name) } else { base };
        if jobs.iter().any(|j| j.out == out) {
            let e = CliError::Config(format!(
                "name: `{}` is used by more than one scenario in the batch",
                sc.name
            ));
            failed.push((label, e));
            continue;
        }
        jobs.push(Job {
            label,
            scenario: sc,
            out,
        });
    }
    (jobs, failed)
}

fn execute(cmd: Command, job: &Job, source: &CalibrationSource) -> Result<Vec<String>> {
    let mut out = OutDir::new(&job.out)?;
    commands::run(cmd, &job.scenario, &mut out, source)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common, source) = match cli.cmd {
        Cmd::Simulate(c) => (Command::Simulate, c, CalibrationSource::Run),
        Cmd::Calibrate(c) => (Command::Calibrate, c, CalibrationSource::Run),
        Cmd::Fidelity {
            common,
            calibration,
            perfect,
        } => {
            let src = match (calibration, perfect) {
                (Some(p), _) => CalibrationSource::File(p),
                (None, true) => CalibrationSource::Perfect,
                (None, false) => CalibrationSource::Run,
            };
            (Command::Fidelity, common, src)
        }
        Cmd::Thermal(c) => (Command::Thermal, c, CalibrationSource::Run),
        Cmd::AnalyzeMmi(c) => (Command::AnalyzeMmi, c, CalibrationSource::Run),
    };

    let (jobs, failed) = load(&common);
    let mut code = 0u8;
    for (label, e) in &failed {
        if label.is_empty() {
            eprintln!("error: {e}");
        } else {
            eprintln!("error: {label}: {e}");
        }
        code = code.max(e.exit_code());
    }

    let results: Vec<Mutex<Option<Result<Vec<String>>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = (common.jobs as usize).min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = execute(cmd, job, &source);
                *results[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });

    let batch = jobs.len() > 1;
    for (job, r) in jobs.iter().zip(results) {
        match r.into_inner().expect("result slot poisoned") {
            Some(Ok(lines)) => {
                for l in lines {
                    if batch {
                        println!("[{}] {l}", job.scenario.name);
                    } else {
                        println!("{l}");
                    }
                }
            }
            Some(Err(e)) => {
                eprintln!("error: {}: {e}", job.label);
                code = code.max(e.exit_code());
            }
            None => unreachable!("every job runs"),
        }
    }
    ExitCode::from(code)
}
