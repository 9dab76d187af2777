//! The five subcommands. Each writes its artifacts into an [`OutDir`] and
//! returns short summary lines for the terminal.

use std::path::{Path, PathBuf};

use serde::Serialize;

use cpscal_core::analysis::{
    self, er_port3, er_port4, er_port4_contour, fidelity_campaign, histogram,
    min_fidelity_given_er, worst_case_fidelity, FidelityReport, MmiQuality,
};
use cpscal_core::calibration::{
    calibrate, CalibrationResult, DthetaMethod, Mode, PassKind, StageCalibration, ThetaAtPmin,
};
use cpscal_core::device::{scan_stage, wrap_pi, ChainModel, SimulatedDevice, REFERENCE_TEMP_C};
use cpscal_core::thermal::{self, CrossSection, Geometry};

use crate::artifacts::{num, OutDir};
use crate::scenario::{Scenario, StageSpec, SCHEMA};
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Calibrate,
    Fidelity,
    Thermal,
    AnalyzeMmi,
}

/// Where the fidelity campaign takes its calibrated model from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum CalibrationSource {
    /// Calibrate the scenario's device first.
    #[default]
    Run,
    /// A `calibration.csv` written by an earlier `calibrate`.
    File(PathBuf),
    /// The truth itself.
    Perfect,
}

pub fn run(
    cmd: Command,
    sc: &Scenario,
    out: &mut OutDir,
    source: &CalibrationSource,
) -> Result<Vec<String>> {
    out.json("scenario.json", sc)?;
    match cmd {
        Command::Simulate => simulate(sc, out),
        Command::Calibrate => calibrate_cmd(sc, out),
        Command::Fidelity => fidelity_cmd(sc, out, source),
        Command::Thermal => thermal_cmd(sc, out),
        Command::AnalyzeMmi => analyze_mmi(sc, out),
    }
}

fn truth(sc: &Scenario) -> Result<ChainModel> {
    let c = sc.chain();
    c.validate()?;
    Ok(c)
}

pub fn simulate(sc: &Scenario, out: &mut OutDir) -> Result<Vec<String>> {
    let chain = truth(sc)?;
    let o = &sc.simulate;
    let fixed: Vec<(usize, f64)> = o.fixed.iter().map(|f| (f.stage, f.power)).collect();
    let outer_powers: Vec<Option<f64>> = match o.outer {
        None => vec![None],
        Some(_) if o.outer_powers.is_empty() => vec![Some(0.0)],
        Some(_) => o.outer_powers.iter().map(|&p| Some(p)).collect(),
    };
    let mut rows = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in outer_powers {
        let mut f = fixed.clone();
        if let (Some(s), Some(p)) = (o.outer, p) {
            f.push((s, p));
        }
        let tr = scan_stage(&chain, &sc.instrument, o.stage, &f, o.direction)?;
        let applied = o
            .outer
            .and_then(|s| tr.fixed_powers.iter().find(|q| q.0 == s))
            .map_or(String::new(), |q| num(q.1));
        for (&p, &i) in tr.applied_power.iter().zip(&tr.intensity) {
            lo = lo.min(i);
            hi = hi.max(i);
            rows.push(vec![
                tr.stage.to_string(),
                tr.direction.as_str().to_string(),
                applied.clone(),
                num(p),
                num(i),
            ]);
        }
    }
    let n = rows.len();
    let path = out.csv(
        "trace.csv",
        &["stage", "direction", "P_outer_mW", "P_inner_mW", "I4"],
        rows,
    )?;
    Ok(vec![format!(
        "trace: {n} samples of stage {}, I4 in [{}, {}] -> {}",
        o.stage,
        num(lo),
        num(hi),
        path.display()
    )])
}

pub fn run_calibration(sc: &Scenario) -> Result<CalibrationResult> {
    let mut dev = SimulatedDevice::new(truth(sc)?, sc.instrument)?;
    Ok(calibrate(&mut dev, &sc.calibration, sc.mode)?)
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    schema: u32,
    scenario: &'a str,
    seed: u64,
    ambient_temp: f64,
    truth: &'a [StageSpec],
    /// Stages whose effective |Δθ| breaks the half-pi constraint.
    constraint_violations: Vec<usize>,
    result: &'a CalibrationResult,
}

fn stage_row(s: &StageCalibration) -> Vec<String> {
    vec![
        s.stage.to_string(),
        num(s.p_min),
        num(s.p_max),
        num(s.k),
        num(s.dtheta),
        num(s.dtheta.to_degrees()),
        s.theta_at_pmin.as_str().to_string(),
        s.source_pass.as_str().to_string(),
        s.method.as_str().to_string(),
    ]
}

pub const CALIBRATION_HEADER: [&str; 9] = [
    "stage",
    "P_min_mW",
    "P_max_mW",
    "k_rad_per_mW",
    "dtheta_rad",
    "dtheta_deg",
    "theta_at_pmin",
    "source_pass",
    "method",
];

/// Write every calibration artifact: per-stage CSV, the stage-by-column
/// parameter table (plus the branch table in non-constraint mode), the pair
/// scans and a JSON report.
pub fn write_calibration(sc: &Scenario, res: &CalibrationResult, out: &mut OutDir) -> Result<()> {
    out.csv(
        "calibration.csv",
        &CALIBRATION_HEADER,
        res.stages.iter().map(stage_row),
    )?;

    let mut header = vec!["quantity".to_string()];
    header.extend(res.stages.iter().map(|s| format!("stage_{}", s.stage)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let row = |name: &str, f: &dyn Fn(&StageCalibration) -> f64| {
        let mut r = vec![name.to_string()];
        r.extend(res.stages.iter().map(|s| num(f(s))));
        r
    };
    out.csv(
        "parameters.csv",
        &header,
        [
            row("P_min_mW", &|s| s.p_min),
            row("k_rad_per_mW", &|s| s.k),
            row("dtheta_rad", &|s| s.dtheta),
            row("dtheta_deg", &|s| s.dtheta.to_degrees()),
        ],
    )?;

    if res.mode == Mode::NonConstraint {
        let inner = &res.stages[1..res.stages.len() - 1];
        let mut header = vec!["quantity".to_string()];
        header.extend(inner.iter().map(|s| format!("stage_{}", s.stage)));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let row = |name: &str, f: &dyn Fn(&StageCalibration) -> String| {
            let mut r = vec![name.to_string()];
            r.extend(inner.iter().map(f));
            r
        };
        out.csv(
            "branches.csv",
            &header,
            [
                row("theta_rad", &|s| s.theta_at_pmin.as_str().to_string()),
                row("theta_th_rad", &|s| num(s.k * s.p_min)),
                row("dtheta_rad", &|s| num(s.dtheta)),
            ],
        )?;
        out.csv(
            "discriminations.csv",
            &[
                "stage",
                "setup",
                "direction",
                "probes",
                "I4",
                "class",
                "distance",
            ],
            res.discriminations.iter().map(|d| {
                vec![
                    d.stage.to_string(),
                    d.setup.as_str().to_string(),
                    d.direction.as_str().to_string(),
                    d.probes
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(";"),
                    num(d.intensity),
                    d.class.as_str().to_string(),
                    num(d.distance),
                ]
            }),
        )?;
    }

    let mut scans = Vec::new();
    let mut inner = Vec::new();
    for p in &res.pairs {
        let kinds = [
            ("coarse", &p.coarse),
            ("fine_min", &p.fine_min),
            ("fine_max", &p.fine_max),
        ];
        for (kind, pts) in kinds {
            for q in pts.iter() {
                scans.push(vec![
                    p.pass.as_str().to_string(),
                    p.direction.as_str().to_string(),
                    p.outer.to_string(),
                    p.inner.to_string(),
                    kind.to_string(),
                    num(q.power),
                    num(q.u_p),
                    num(q.mean),
                ]);
            }
        }
        for &(pw, i) in &p.inner_trace {
            inner.push(vec![
                p.pass.as_str().to_string(),
                p.outer.to_string(),
                p.inner.to_string(),
                num(pw),
                num(i),
            ]);
        }
    }
    out.csv(
        "pair_scans.csv",
        &[
            "pass",
            "direction",
            "outer",
            "inner",
            "kind",
            "P_outer_mW",
            "U_P",
            "mean_I4",
        ],
        scans,
    )?;
    out.csv(
        "inner_traces.csv",
        &["pass", "outer", "inner", "P_inner_mW", "I4"],
        inner,
    )?;

    let chain = sc.chain();
    out.json(
        "report.json",
        &CalibrationReport {
            schema: SCHEMA,
            scenario: &sc.name,
            seed: sc.instrument.rng_seed,
            ambient_temp: sc.ambient_temp,
            truth: &sc.stages,
            constraint_violations: chain.constraint_violations(),
            result: res,
        },
    )?;
    Ok(())
}

/// Truth Δθ at the scenario's ambient temperature.
fn effective_dtheta(sc: &Scenario, s: &StageSpec) -> f64 {
    wrap_pi(s.dtheta + s.dtheta_temp_coeff * (sc.ambient_temp - REFERENCE_TEMP_C))
}

pub fn calibrate_cmd(sc: &Scenario, out: &mut OutDir) -> Result<Vec<String>> {
    let res = run_calibration(sc)?;
    write_calibration(sc, &res, out)?;
    let mut lines = vec![format!(
        "calibration ({}) -> {}",
        res.mode.as_str(),
        out.root().display()
    )];
    for (s, t) in res.stages.iter().zip(&sc.stages) {
        lines.push(format!(
            "  stage {}: P_min {:.4} mW, k {:.4} rad/mW (truth {:.4}), dtheta {:.4} rad (truth {:.4}), theta(P_min) {}",
            s.stage,
            s.p_min,
            s.k,
            t.k,
            s.dtheta,
            effective_dtheta(sc, t),
            s.theta_at_pmin.as_str()
        ));
    }
    Ok(lines)
}

fn parse_theta(s: &str) -> Option<ThetaAtPmin> {
    [ThetaAtPmin::Zero, ThetaAtPmin::Pi, ThetaAtPmin::Unresolved]
        .into_iter()
        .find(|t| t.as_str() == s)
}

fn parse_pass(s: &str) -> Option<PassKind> {
    [
        PassKind::RightToLeft,
        PassKind::LeftToRight,
        PassKind::TransformRightToLeft,
        PassKind::TransformLeftToRight,
    ]
    .into_iter()
    .find(|t| t.as_str() == s)
}

fn parse_method(s: &str) -> Option<DthetaMethod> {
    [
        DthetaMethod::Constraint,
        DthetaMethod::Discriminator,
        DthetaMethod::Unresolved,
    ]
    .into_iter()
    .find(|t| t.as_str() == s)
}

/// Read back a `calibration.csv`.
pub fn read_calibration(path: &Path, mode: Mode) -> Result<CalibrationResult> {
    let bad =
        |row: usize, what: &str| CliError::Config(format!("{}: row {row}: {what}", path.display()));
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != CALIBRATION_HEADER {
        return Err(CliError::Config(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let mut stages = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let f = |j: usize| -> Result<f64> {
            let s = &rec[j];
            match s {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => s.parse().map_err(|_| {
                    bad(
                        row,
                        &format!("{} `{s}` is not a number", CALIBRATION_HEADER[j]),
                    )
                }),
            }
        };
        stages.push(StageCalibration {
            stage: rec[0]
                .parse()
                .map_err(|_| bad(row, "stage is not an integer"))?,
            p_min: f(1)?,
            p_max: f(2)?,
            k: f(3)?,
            dtheta: f(4)?,
            theta_at_pmin: parse_theta(&rec[6]).ok_or_else(|| bad(row, "theta_at_pmin"))?,
            source_pass: parse_pass(&rec[7]).ok_or_else(|| bad(row, "source_pass"))?,
            method: parse_method(&rec[8]).ok_or_else(|| bad(row, "method"))?,
        });
    }
    Ok(CalibrationResult {
        mode,
        stages,
        pairs: Vec::new(),
        discriminations: Vec::new(),
    })
}

/// A calibration that reproduces the truth exactly.
pub fn perfect_calibration(sc: &Scenario) -> CalibrationResult {
    let stages = sc
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| StageCalibration {
            stage: i + 1,
            p_min: f64::NAN,
            p_max: f64::NAN,
            k: s.k,
            dtheta: effective_dtheta(sc, s),
            theta_at_pmin: ThetaAtPmin::Unresolved,
            source_pass: PassKind::RightToLeft,
            method: DthetaMethod::Constraint,
        })
        .collect();
    CalibrationResult {
        mode: sc.mode,
        stages,
        pairs: Vec::new(),
        discriminations: Vec::new(),
    }
}

pub fn fidelity_report(
    sc: &Scenario,
    source: &CalibrationSource,
    out: Option<&mut OutDir>,
) -> Result<FidelityReport> {
    let cal = match source {
        CalibrationSource::Run => {
            let res = run_calibration(sc)?;
            if let Some(out) = out {
                write_calibration(sc, &res, out)?;
            }
            res
        }
        CalibrationSource::File(p) => read_calibration(p, sc.mode)?,
        CalibrationSource::Perfect => perfect_calibration(sc),
    };
    let rep = fidelity_campaign(&truth(sc)?, &cal, &sc.instrument)?;
    Ok(FidelityReport::from_values(
        rep.values,
        &sc.fidelity.thresholds,
    )?)
}

pub fn fidelity_cmd(
    sc: &Scenario,
    out: &mut OutDir,
    source: &CalibrationSource,
) -> Result<Vec<String>> {
    let rep = fidelity_report(sc, source, Some(out))?;
    let per = rep.values.len() / sc.stages.len();
    out.csv(
        "fidelity_values.csv",
        &["stage", "sample", "fidelity"],
        rep.values
            .iter()
            .enumerate()
            .map(|(i, &f)| vec![(i / per + 1).to_string(), (i % per).to_string(), num(f)]),
    )?;
    let o = &sc.fidelity;
    let bins = histogram(&rep.values, o.hist_min, o.hist_max, o.bins)?;
    out.csv(
        "fidelity_histogram.csv",
        &["bin_low", "bin_high", "count"],
        bins.iter()
            .map(|b| vec![num(b.low), num(b.high), b.count.to_string()]),
    )?;
    let mut summary = vec![
        vec!["count".to_string(), rep.values.len().to_string()],
        vec!["mean".to_string(), num(rep.mean)],
        vec!["min".to_string(), num(rep.min)],
        vec!["max".to_string(), num(rep.max)],
    ];
    for &(t, f) in &rep.fraction_above {
        summary.push(vec![format!("fraction_above_{}", num(t)), num(f)]);
    }
    out.csv("fidelity_summary.csv", &["metric", "value"], summary)?;
    let mut line = format!(
        "fidelity over {} points: mean {:.6}, min {:.6}",
        rep.values.len(),
        rep.mean,
        rep.min
    );
    for &(t, f) in &rep.fraction_above {
        line.push_str(&format!(", >{} {:.4}", num(t), f));
    }
    Ok(vec![line])
}

pub fn thermal_cmd(sc: &Scenario, out: &mut OutDir) -> Result<Vec<String>> {
    let o = &sc.thermal;
    let mut cs = CrossSection::new(&o.geometry)?;
    cs.grid = o.grid;
    let s = thermal::sweep(&cs, &o.powers, &o.optics)?;
    out.csv(
        "thermal_sweep.csv",
        &["P_mW", "T_wg_K", "T_heater_K", "theta_rad", "extrapolated"],
        s.points.iter().map(|p| {
            vec![
                num(p.power),
                num(p.t_waveguide),
                num(p.t_heater),
                num(p.theta),
                p.extrapolated.to_string(),
            ]
        }),
    )?;
    out.csv(
        "thermal_summary.csv",
        &["metric", "value"],
        [
            ("slope_rad_per_mW", s.slope),
            ("pi_power_mW", s.pi_power),
            ("temp_slope_K_per_mW", s.temp_slope),
            ("r2_temperature", s.r2_temperature),
        ]
        .map(|(k, v)| vec![k.to_string(), num(v)]),
    )?;

    let f = thermal::solve_steady(&cs, o.field_power)?;
    out.csv(
        "thermal_field.csv",
        &["x_um", "y_um", "T_K"],
        f.y.iter()
            .enumerate()
            .flat_map(|(j, &y)| f.x.iter().enumerate().map(move |(i, &x)| (i, j, x, y)))
            .map(|(i, j, x, y)| vec![num(x), num(y), num(f.at(i, j))]),
    )?;
    let y_mid = 0.5 * (cs.waveguide.y0 + cs.waveguide.y1);
    out.csv(
        "thermal_profile_x.csv",
        &["x_um", "T_K"],
        f.profile_x(y_mid)
            .into_iter()
            .map(|(x, t)| vec![num(x), num(t)]),
    )?;
    out.csv(
        "thermal_profile_y.csv",
        &["y_um", "T_K"],
        f.profile_y(0.0)
            .into_iter()
            .map(|(y, t)| vec![num(y), num(t)]),
    )?;

    let mut lines = vec![format!(
        "thermal: slope {:.4} rad/mW, pi power {:.2} mW, R2 {:.6}, field at {} mW ({}x{} cells, {} iterations)",
        s.slope,
        s.pi_power,
        s.r2_temperature,
        num(o.field_power),
        f.x.len(),
        f.y.len(),
        f.iterations
    )];

    if let Some(max) = o.offsets.iter().cloned().reduce(f64::max) {
        let g = Geometry {
            half_width: o.geometry.half_width.max(max + 25.0),
            ..o.geometry
        };
        let mut wide = CrossSection::new(&g)?;
        wide.grid = o.grid;
        let fw = thermal::solve_steady(&wide, o.crosstalk_power)?;
        let own = thermal::crosstalk_at(&fw, &wide, 0.0)?;
        let mut rows = Vec::new();
        for &d in &o.offsets {
            let rise = thermal::crosstalk_at(&fw, &wide, d)?;
            let frac = if own > 0.0 { rise / own } else { f64::NAN };
            rows.push(vec![num(d), num(rise), num(frac)]);
            if d >= 40.0 && lines.len() == 1 {
                lines.push(format!(
                    "crosstalk at {} um: {:.3e} of self-heating",
                    num(d),
                    frac
                ));
            }
        }
        out.csv("crosstalk.csv", &["offset_um", "rise_K", "fraction"], rows)?;
    }
    Ok(lines)
}

pub fn analyze_mmi(sc: &Scenario, out: &mut OutDir) -> Result<Vec<String>> {
    let o = &sc.mmi;
    let samples = o.search.n_theta;
    let q = MmiQuality::from_transmissions(o.t32, o.t42)?;
    let imb = analysis::imbalance_db(o.t32, o.t42)?;
    let worst = worst_case_fidelity(q, samples);
    out.csv(
        "mmi_summary.csv",
        &[
            "t32",
            "t42",
            "r",
            "eta",
            "imbalance_dB",
            "er_port3_dB",
            "er_port4_dB",
            "worst_fidelity",
        ],
        [vec![
            num(o.t32),
            num(o.t42),
            num(q.r),
            num(q.eta),
            num(imb),
            num(er_port3(q)),
            num(er_port4(q)),
            num(worst),
        ]],
    )?;
    let mut lines = vec![format!(
        "coupler {}/{}: imbalance {:.5} dB, ER port 4 {} dB, worst fidelity {:.7}",
        num(o.t32),
        num(o.t42),
        imb,
        num((er_port4(q) * 100.0).round() / 100.0),
        worst
    )];

    let mut rows = Vec::new();
    for &b in &o.er_bounds {
        let m = min_fidelity_given_er(b, &o.search)?;
        lines.push(format!("min fidelity at {} dB: {:.7}", num(b), m.fidelity));
        rows.push(vec![
            num(b),
            num(m.fidelity),
            num(m.at.r),
            num(m.at.eta),
            m.admissible.to_string(),
        ]);
    }
    out.csv(
        "min_fidelity.csv",
        &[
            "er_bound_dB",
            "min_fidelity",
            "r",
            "eta",
            "admissible_nodes",
        ],
        rows,
    )?;

    let (r0, r1) = o.contour_r;
    let n = o.contour_points;
    let rs: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                r0
            } else {
                r0 + (r1 - r0) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let mut rows = Vec::new();
    for &er in &o.contour_ers {
        for (lo, hi) in er_port4_contour(er, &rs)? {
            rows.push(vec![num(er), num(lo.r), num(lo.eta), num(hi.eta)]);
        }
    }
    out.csv(
        "mmi_contours.csv",
        &["er_dB", "r", "eta_low", "eta_high"],
        rows,
    )?;

    let m = (o.eta_points / 2) as f64;
    let mut rows = Vec::new();
    for i in 0..o.eta_points {
        let eta = if m == 0.0 {
            0.5
        } else {
            0.5 + (i as f64 - m) * o.eta_span / m
        };
        let q = MmiQuality::new(1.0, eta)?;
        rows.push(vec![
            num(eta),
            num(er_port3(q)),
            num(er_port4(q)),
            num(q.imbalance_db()),
            num(worst_case_fidelity(q, samples)),
        ]);
    }
    out.csv(
        "mmi_eta_sweep.csv",
        &[
            "eta",
            "er_port3_dB",
            "er_port4_dB",
            "imbalance_dB",
            "worst_fidelity",
        ],
        rows,
    )?;
    Ok(lines)
}
